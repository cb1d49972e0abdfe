#include "ciuap/classifier.hpp"

#include "ciuap/adam.hpp"
#include "ciuap/errors.hpp"
#include "ciuap/io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ciuap {

void Target::check_batch(const Tensor& batch) const
{
    const Shape expected = input_shape();
    if (batch.shape().n < 1 || !(batch.shape().with_batch(1) == expected)) {
        throw ContractViolation("batch shape " + batch.shape().str() + " does not match input shape " +
                                expected.str() + " of " + model_id());
    }
    const auto range = pixel_range();
    constexpr float tol = 1e-3F;
    for (float v : batch.vec()) {
        if (!(v >= range.low - tol && v <= range.high + tol)) {
            throw ContractViolation("pixel value " + std::to_string(v) + " outside the valid range of " + model_id());
        }
    }
}

// ---------------------------------------------------------------- ClassifierHandle

ClassifierHandle::ClassifierHandle(ClassifierInfo info, nn::Network network)
    : info_(std::move(info)), network_(std::make_shared<const nn::Network>(std::move(network)))
{
    require(info_.num_classes > 0, "classifier needs at least one class");
    const Shape out = network_->output_shape(info_.input_shape);
    require(static_cast<int>(out.sample_size()) == info_.num_classes,
            "network output " + out.str() + " does not match num_classes");
}

TapResult ClassifierHandle::forward(const Tensor& batch, std::string_view embedding_layer) const
{
    check_batch(batch);
    TapResult r;
    if (embedding_layer != kSoftmaxLayer) {
        const auto& ids = info_.embedding_layer_ids;
        if (std::find(ids.begin(), ids.end(), embedding_layer) == ids.end()) {
            throw ConfigError("unknown embedding layer '" + std::string(embedding_layer) + "' for " +
                              info_.model_id);
        }
        r.embedding_index = network_->find(embedding_layer);
    }
    r.traces.push_back(network_->forward(batch));
    const auto& trace = r.traces.front();
    const Tensor& out = trace.output();
    r.logits = out.reshaped(Shape{out.shape().n, info_.num_classes, 1, 1});
    if (r.embedding_index >= 0) {
        const Tensor& e = trace.activations[r.embedding_index + 1];
        r.embedding = e.reshaped(Shape{e.shape().n, static_cast<int>(e.shape().sample_size()), 1, 1});
    }
    return r;
}

Tensor ClassifierHandle::backward(const TapResult& r, const Tensor& dlogits, const Tensor* dembedding) const
{
    const auto& trace = r.traces.front();
    const Tensor dout = dlogits.reshaped(trace.output().shape());
    if (dembedding == nullptr || r.embedding_index < 0) return network_->backward(trace, dout);
    const int e = r.embedding_index;
    const int top = static_cast<int>(network_->num_layers()) - 1;
    Tensor g = e < top ? network_->backward(trace, dout, nullptr, top, e + 1) : dout;
    g += dembedding->reshaped(g.shape());
    return network_->backward(trace, g, nullptr, e, 0);
}

Tensor ClassifierHandle::logits(const Tensor& batch) const
{
    check_batch(batch);
    const Tensor out = network_->infer(batch);
    return out.reshaped(Shape{out.shape().n, info_.num_classes, 1, 1});
}

// ---------------------------------------------------------------- EnsembleHandle

EnsembleHandle::EnsembleHandle(std::vector<ClassifierHandle> members) : members_(std::move(members))
{
    require(!members_.empty(), "ensemble needs at least one member");
    for (const auto& m : members_) {
        require(m.input_shape() == members_.front().input_shape(), "ensemble members must share input_shape");
        require(m.num_classes() == members_.front().num_classes(), "ensemble members must share num_classes");
    }
}

std::string EnsembleHandle::model_id() const
{
    std::string id = "ensemble(";
    for (std::size_t i = 0; i < members_.size(); ++i) id += (i ? "+" : "") + members_[i].model_id();
    return id + ")";
}

std::vector<std::string> EnsembleHandle::member_ids() const
{
    std::vector<std::string> ids;
    for (const auto& m : members_) ids.push_back(m.model_id());
    return ids;
}

TapResult EnsembleHandle::forward(const Tensor& batch, std::string_view embedding_layer) const
{
    if (embedding_layer != kSoftmaxLayer) {
        throw ConfigError("ensembles only expose the softmax embedding, not '" + std::string(embedding_layer) + "'");
    }
    TapResult r;
    for (const auto& m : members_) {
        TapResult mr = m.forward(batch);
        if (r.logits.empty()) {
            r.logits = mr.logits;
        } else {
            r.logits += mr.logits;
        }
        r.traces.push_back(std::move(mr.traces.front()));
    }
    r.logits *= 1.0F / static_cast<float>(members_.size());
    return r;
}

Tensor EnsembleHandle::backward(const TapResult& r, const Tensor& dlogits, const Tensor*) const
{
    Tensor scaled = dlogits;
    scaled *= 1.0F / static_cast<float>(members_.size());
    Tensor dx;
    for (std::size_t i = 0; i < members_.size(); ++i) {
        TapResult mr;
        mr.traces.push_back(r.traces[i]);
        Tensor g = members_[i].backward(mr, scaled);
        if (dx.empty()) {
            dx = std::move(g);
        } else {
            dx += g;
        }
    }
    return dx;
}

Tensor EnsembleHandle::logits(const Tensor& batch) const { return ensemble_presoftmax(*this, batch); }

// ---------------------------------------------------------------- taps

Tensor tap_presoftmax(const Target& clf, const Tensor& batch) { return clf.logits(batch); }

Tensor tap_softmax(const Target& clf, const Tensor& batch) { return nn::softmax(clf.logits(batch)); }

Tensor tap_embedding(const Target& clf, const Tensor& batch, std::string_view layer_id)
{
    if (layer_id == kSoftmaxLayer) return tap_softmax(clf, batch);
    return clf.forward(batch, layer_id).embedding;
}

Tensor ensemble_presoftmax(const EnsembleHandle& ens, const Tensor& batch)
{
    Tensor sum;
    for (const auto& m : ens.members()) {
        const Tensor l = m.logits(batch);
        if (sum.empty()) {
            sum = l;
        } else {
            sum += l;
        }
    }
    sum *= 1.0F / static_cast<float>(ens.members().size());
    return sum;
}

std::vector<int> predict_label(const Target& clf, const Tensor& batch)
{
    return nn::argmax_rows(tap_softmax(clf, batch));
}

std::vector<int> predict_labels_chunked(const Target& clf, const Tensor& images, int chunk)
{
    std::vector<int> out;
    out.reserve(images.shape().n);
    for (int b = 0; b < images.shape().n; b += chunk) {
        const int count = std::min(chunk, images.shape().n - b);
        const auto labels = predict_label(clf, images.slice(b, count));
        out.insert(out.end(), labels.begin(), labels.end());
    }
    return out;
}

// ---------------------------------------------------------------- architectures

std::vector<std::string> architecture_ids() { return {"linear", "cnn-3layer", "cnn-5layer", "cnn-allconv"}; }

nn::Network build_architecture(const std::string& arch, Shape input_shape, int num_classes,
                               const std::vector<float>& norm_mean, const std::vector<float>& norm_std,
                               std::vector<std::string>* embedding_layer_ids)
{
    const int c = input_shape.c;
    const int h = input_shape.h;
    const int w = input_shape.w;
    nn::Network net;
    net.add<nn::Normalize>("normalize", norm_mean, norm_std);
    std::vector<std::string> taps;
    auto conv_block = [&](const std::string& tag, int in, int out, int stride = 1) {
        net.add<nn::Conv2d>("conv" + tag, in, out, 3, stride, 1);
        net.add<nn::Relu>("relu" + tag);
    };
    if (arch == "linear") {
        net.add<nn::Linear>("fc", c * h * w, num_classes, false);
    } else if (arch == "cnn-3layer") {
        require(h % 8 == 0 && w % 8 == 0, arch + " needs input sides divisible by 8");
        conv_block("1", c, 16);
        net.add<nn::MaxPool2>("pool1");
        conv_block("2", 16, 32);
        net.add<nn::MaxPool2>("pool2");
        conv_block("3", 32, 32);
        net.add<nn::MaxPool2>("pool3");
        net.add<nn::Linear>("fc", 32 * (h / 8) * (w / 8), num_classes);
        taps = {"pool1", "pool2", "pool3"};
    } else if (arch == "cnn-5layer") {
        require(h % 8 == 0 && w % 8 == 0, arch + " needs input sides divisible by 8");
        conv_block("1", c, 12);
        conv_block("2", 12, 12);
        net.add<nn::MaxPool2>("pool1");
        conv_block("3", 12, 24);
        conv_block("4", 24, 24);
        net.add<nn::MaxPool2>("pool2");
        conv_block("5", 24, 32);
        net.add<nn::MaxPool2>("pool3");
        net.add<nn::Linear>("fc", 32 * (h / 8) * (w / 8), num_classes);
        taps = {"pool1", "pool2", "pool3"};
    } else if (arch == "cnn-allconv") {
        require(h % 4 == 0 && w % 4 == 0, arch + " needs input sides divisible by 4");
        conv_block("1", c, 16);
        conv_block("2", 16, 32, 2);
        conv_block("3", 32, 48, 2);
        net.add<nn::Conv2d>("conv4", 48, num_classes, 1, 1, 0);
        net.add<nn::GlobalAvgPool>("gap");
        taps = {"relu1", "relu2", "relu3"};
    } else {
        throw ConfigError("unknown architecture '" + arch + "'");
    }
    if (embedding_layer_ids != nullptr) *embedding_layer_ids = taps;
    return net;
}

// ---------------------------------------------------------------- training

namespace {

struct ArchDefaults {
    int epochs;
    double learning_rate;
};

ArchDefaults arch_defaults(const std::string& arch)
{
    if (arch == "linear") return {300, 0.05};
    return {8, 2e-3};
}

} // namespace

double accuracy(const Target& clf, const Dataset& d)
{
    require(d.size() > 0, "accuracy of an empty dataset");
    const auto pred = predict_labels_chunked(clf, d.images);
    int correct = 0;
    for (int i = 0; i < d.size(); ++i) correct += pred[i] == d.labels[i] ? 1 : 0;
    return static_cast<double>(correct) / d.size();
}

ClassifierHandle train_classifier(const std::string& dataset_id, const std::string& arch, std::uint64_t seed,
                                  const ClassifierTrainOptions& opts)
{
    // Validate the architecture before paying for dataset generation.
    if (const auto ids = architecture_ids(); std::find(ids.begin(), ids.end(), arch) == ids.end()) {
        throw ConfigError("unknown architecture '" + arch + "'");
    }
    return train_classifier(load_dataset(dataset_id), arch, seed, opts);
}

ClassifierHandle train_classifier(const DatasetSplits& data, const std::string& arch, std::uint64_t seed,
                                  const ClassifierTrainOptions& opts)
{
    const Dataset& train = data.train;
    require(train.size() > 0, "empty training split");
    const bool identity_norm = train.id == "toy-2class-linear";
    auto [mean, stddev] = channel_statistics(train);
    if (identity_norm) {
        std::fill(mean.begin(), mean.end(), 0.0F);
        std::fill(stddev.begin(), stddev.end(), 1.0F);
    }
    ClassifierInfo info;
    info.arch = arch;
    info.dataset_id = train.id;
    info.seed = seed;
    info.model_id = default_model_id(train.id, arch, seed);
    info.input_shape = train.sample_shape();
    info.num_classes = train.num_classes;
    info.pixel_range = train.pixel_range;
    info.norm_mean = mean;
    info.norm_std = stddev;
    nn::Network net =
        build_architecture(arch, info.input_shape, info.num_classes, mean, stddev, &info.embedding_layer_ids);

    const auto defaults = arch_defaults(arch);
    const int epochs = opts.epochs > 0 ? opts.epochs : defaults.epochs;
    const double lr = opts.learning_rate > 0.0 ? opts.learning_rate : defaults.learning_rate;
    Rng init_rng(derive_seed(seed, "classifier/init"));
    net.initialize(init_rng);
    Rng order_rng(derive_seed(seed, "classifier/order"));
    Adam adam({.learning_rate = lr});
    auto params = net.parameters();

    std::vector<int> order(train.size());
    const int batch = std::max(1, std::min(opts.batch_size, train.size()));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            std::swap(order[i], order[order_rng.below(static_cast<std::uint64_t>(i) + 1)]);
        }
        for (int b = 0; b < train.size(); b += batch) {
            const int count = std::min(batch, train.size() - b);
            const std::span<const int> idx(order.data() + b, count);
            const Tensor x = train.images.gather(idx);
            std::vector<int> y(count);
            for (int k = 0; k < count; ++k) y[k] = train.labels[idx[k]];
            const nn::Trace trace = net.forward(x, nn::Mode::train);
            Tensor dlogits;
            const float loss = nn::cross_entropy(trace.output(), y, &dlogits, static_cast<float>(opts.label_smoothing));
            if (!std::isfinite(loss)) {
                throw NumericalError("classifier training diverged (loss " + std::to_string(loss) + ") at epoch " +
                                     std::to_string(epoch));
            }
            auto grads = net.zero_gradients();
            net.backward(trace, dlogits.reshaped(trace.output().shape()), &grads);
            std::vector<const Tensor*> gptrs;
            for (const auto& layer : grads) {
                for (const auto& g : layer) gptrs.push_back(&g);
            }
            adam.step(params, gptrs);
        }
    }
    ClassifierHandle provisional(info, net);
    info.accuracy = accuracy(provisional, data.test);
    return ClassifierHandle(std::move(info), std::move(net));
}

ClassifierHandle make_toy_linear_classifier()
{
    ClassifierInfo info;
    info.model_id = "toy-linear-handset";
    info.arch = "linear";
    info.dataset_id = "toy-2class-linear";
    info.input_shape = Shape{1, 1, 1, 2};
    info.num_classes = 2;
    info.pixel_range = {0.0F, 255.0F};
    info.norm_mean = {0.0F};
    info.norm_std = {1.0F};
    nn::Network net = build_architecture("linear", info.input_shape, 2, info.norm_mean, info.norm_std);
    auto& weight = net.layer(static_cast<std::size_t>(net.find("fc"))).params()[0];
    weight = Tensor(weight.shape(), {1.0F, -1.0F, -1.0F, 1.0F});
    info.accuracy = 1.0;
    return ClassifierHandle(std::move(info), std::move(net));
}

// ---------------------------------------------------------------- registry

std::string default_model_id(const std::string& dataset_id, const std::string& arch, std::uint64_t seed)
{
    return dataset_id + "-" + arch + "-s" + std::to_string(seed);
}

std::filesystem::path save_classifier(const ClassifierHandle& clf, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    const auto& info = clf.info();
    const auto params_path = dir / (info.model_id + ".params");
    const auto bytes = clf.network().serialize();
    io::write_bytes(params_path, bytes);
    io::Json j;
    j["model_id"] = info.model_id;
    j["arch_spec"] = info.arch;
    j["dataset_id"] = info.dataset_id;
    j["seed"] = info.seed;
    j["accuracy"] = info.accuracy;
    j["input_shape"] = {{"height", info.input_shape.h}, {"width", info.input_shape.w}, {"channels", info.input_shape.c}};
    j["num_classes"] = info.num_classes;
    j["pixel_range"] = {info.pixel_range.low, info.pixel_range.high};
    j["normalization"] = {{"mean", info.norm_mean}, {"std", info.norm_std}};
    j["embedding_layer_ids"] = info.embedding_layer_ids;
    j["parent_model_id"] = info.parent_model_id;
    j["params_file"] = params_path.filename().string();
    j["params_sha256"] = io::sha256_hex(bytes);
    const auto manifest = dir / (info.model_id + ".json");
    io::write_json(manifest, j);
    return manifest;
}

bool classifier_exists(const std::filesystem::path& dir, const std::string& model_id)
{
    return std::filesystem::exists(dir / (model_id + ".json"));
}

ClassifierHandle load_classifier(const std::filesystem::path& dir, const std::string& model_id)
{
    const auto manifest = dir / (model_id + ".json");
    if (!std::filesystem::exists(manifest)) throw DependencyError("missing model manifest " + manifest.string());
    const auto j = io::read_json(manifest);
    ClassifierInfo info;
    try {
        info.model_id = j.at("model_id").get<std::string>();
        info.arch = j.at("arch_spec").get<std::string>();
        info.dataset_id = j.at("dataset_id").get<std::string>();
        info.seed = j.at("seed").get<std::uint64_t>();
        info.accuracy = j.at("accuracy").get<double>();
        const auto& s = j.at("input_shape");
        info.input_shape = Shape{1, s.at("channels").get<int>(), s.at("height").get<int>(), s.at("width").get<int>()};
        info.num_classes = j.at("num_classes").get<int>();
        info.pixel_range = {j.at("pixel_range")[0].get<float>(), j.at("pixel_range")[1].get<float>()};
        info.norm_mean = j.at("normalization").at("mean").get<std::vector<float>>();
        info.norm_std = j.at("normalization").at("std").get<std::vector<float>>();
        info.embedding_layer_ids = j.at("embedding_layer_ids").get<std::vector<std::string>>();
        info.parent_model_id = j.value("parent_model_id", "");
    } catch (const nlohmann::json::exception& e) {
        throw DependencyError("malformed model manifest " + manifest.string() + ": " + e.what());
    }
    const auto params_path = dir / j.at("params_file").get<std::string>();
    io::verify_checksum(params_path, j.at("params_sha256").get<std::string>());
    nn::Network net = build_architecture(info.arch, info.input_shape, info.num_classes, info.norm_mean, info.norm_std);
    net.deserialize(io::read_bytes(params_path));
    return ClassifierHandle(std::move(info), std::move(net));
}

} // namespace ciuap
