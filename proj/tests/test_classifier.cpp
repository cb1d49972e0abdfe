#include "ciuap/classifier.hpp"
#include "ciuap/errors.hpp"
#include "ciuap/io.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace ciuap;

namespace {

// Handle whose logits are the constant `bias` for every input.
ClassifierHandle constant_classifier(const std::string& id, std::vector<float> bias)
{
    ClassifierInfo info;
    info.model_id = id;
    info.arch = "constant";
    info.input_shape = Shape{1, 1, 1, 2};
    info.num_classes = static_cast<int>(bias.size());
    nn::Network net;
    net.add<nn::Linear>("fc", 2, info.num_classes, true);
    net.layer(0).params()[0].fill(0.0F);
    net.layer(0).params()[1] = Tensor(Shape{info.num_classes, 1, 1, 1}, std::move(bias));
    return ClassifierHandle(info, std::move(net));
}

Tensor toy_points(std::vector<float> xy) { return Tensor(Shape{static_cast<int>(xy.size() / 2), 1, 1, 2}, xy); }

} // namespace

TEST_SUITE("classifier")
{
    TEST_CASE("hand-set toy model logits")
    {
        const auto clf = make_toy_linear_classifier();
        const Tensor logits = tap_presoftmax(clf, toy_points({1, 0, 0, 0}));
        CHECK(logits[0] == 1.0F);
        CHECK(logits[1] == -1.0F);
        // Bias-free and linear: the zero image maps to zero logits.
        CHECK(logits[2] == 0.0F);
        CHECK(logits[3] == 0.0F);
        CHECK(predict_label(clf, toy_points({1, 0}))[0] == 0);
    }

    TEST_CASE("toy model predicts the four known labels")
    {
        const auto d = load_dataset("toy-2class-linear");
        CHECK(predict_label(make_toy_linear_classifier(), d.test.images) == d.test.labels);
    }

    TEST_CASE("softmax tap agrees with logits")
    {
        const auto clf = make_toy_linear_classifier();
        Rng rng(3);
        Tensor batch(Shape{20, 1, 1, 2});
        for (auto& v : batch.vec()) v = static_cast<float>(rng.uniform(0, 255));
        const Tensor logits = tap_presoftmax(clf, batch);
        const Tensor probs = tap_softmax(clf, batch);
        const Tensor again = nn::softmax(logits);
        for (int n = 0; n < 20; ++n) {
            CHECK(probs[2 * n] + probs[2 * n + 1] == doctest::Approx(1.0).epsilon(1e-5));
            CHECK(probs[2 * n] >= 0.0F);
            CHECK(std::abs(probs[2 * n] - again[2 * n]) < 1e-5);
        }
        CHECK(nn::argmax_rows(probs) == nn::argmax_rows(logits));
        CHECK(tap_embedding(clf, batch) == probs);
        CHECK(tap_softmax(clf, batch) == probs);
    }

    TEST_CASE("uniform logits give uniform probabilities and label 0")
    {
        const auto clf = constant_classifier("c", {2, 2, 2, 2});
        const Tensor p = tap_softmax(clf, toy_points({5, 5}));
        for (int k = 0; k < 4; ++k) CHECK(p[k] == doctest::Approx(0.25));
        CHECK(predict_label(clf, toy_points({5, 5}))[0] == 0);
        CHECK(predict_label(constant_classifier("d", {0, 0, 9}), toy_points({5, 5}))[0] == 2);
    }

    TEST_CASE("presoftmax gradient matches finite differences on the toy model")
    {
        const auto clf = make_toy_linear_classifier();
        const Tensor x = toy_points({3.25F, 7.5F});
        for (int c = 0; c < 2; ++c) {
            const TapResult r = clf.forward(x);
            Tensor dlogits(Shape{1, 2, 1, 1});
            dlogits[c] = 1.0F;
            const Tensor g = clf.backward(r, dlogits);
            for (int i = 0; i < 2; ++i) {
                Tensor up = x;
                Tensor down = x;
                up[i] += 0.5F;
                down[i] -= 0.5F;
                const double fd = (static_cast<double>(clf.logits(up)[c]) - clf.logits(down)[c]) / 1.0;
                CHECK(test_support::rel_error(g[i], fd) < 1e-3);
            }
        }
    }

    TEST_CASE("ensemble averages member logits")
    {
        const EnsembleHandle ens(
            {constant_classifier("a", {1, 0}), constant_classifier("b", {3, 0}), constant_classifier("c", {5, 0})});
        const Tensor l = ensemble_presoftmax(ens, toy_points({1, 2}));
        CHECK(l[0] == doctest::Approx(3.0));
        CHECK(l[1] == doctest::Approx(0.0));
        CHECK(ens.member_ids() == std::vector<std::string>{"a", "b", "c"});

        const EnsembleHandle cancel({constant_classifier("p", {2, -1}), constant_classifier("n", {-2, 1})});
        const Tensor z = ensemble_presoftmax(cancel, toy_points({1, 2}));
        CHECK(z[0] == 0.0F);
        CHECK(z[1] == 0.0F);

        const auto toy = make_toy_linear_classifier();
        const EnsembleHandle single({toy});
        const Tensor x = toy_points({4, 1, 0, 9});
        CHECK(ensemble_presoftmax(single, x) == tap_presoftmax(toy, x));

        CHECK_THROWS_AS(EnsembleHandle({constant_classifier("a", {1, 0}), constant_classifier("b", {1, 0, 0})}),
                        ContractViolation);
        CHECK_THROWS_AS(tap_embedding(ens, toy_points({1, 2}), "relu1"), ConfigError);
    }

    TEST_CASE("contract checks on batches and layers")
    {
        const auto clf = make_toy_linear_classifier();
        CHECK_THROWS_AS(tap_presoftmax(clf, Tensor(Shape{1, 1, 2, 1})), ContractViolation);
        CHECK_THROWS_AS(tap_presoftmax(clf, toy_points({-5, 0})), ContractViolation);
        CHECK_THROWS_AS(tap_presoftmax(clf, toy_points({300, 0})), ContractViolation);
        CHECK_THROWS_AS(tap_embedding(clf, toy_points({1, 0}), "no-such-layer"), ConfigError);
    }

    TEST_CASE("intermediate embedding taps of a CNN")
    {
        const auto net = build_architecture("cnn-3layer", Shape{1, 3, 32, 32}, 10, {0, 0, 0}, {1, 1, 1});
        CHECK(net.find("pool1") >= 0);
        CHECK_THROWS_AS(build_architecture("resnet", Shape{1, 3, 32, 32}, 10, {0, 0, 0}, {1, 1, 1}), ConfigError);
    }

    TEST_CASE("training the toy linear model is exact and deterministic")
    {
        const auto a = train_classifier("toy-2class-linear", "linear", 0);
        const auto b = train_classifier("toy-2class-linear", "linear", 0);
        CHECK(a.info().accuracy == 1.0);
        CHECK(a.network().serialize() == b.network().serialize());
        CHECK_THROWS_AS(train_classifier("toy-2class-linear", "transformer", 0), ConfigError);
        CHECK_THROWS_AS(train_classifier("nope", "linear", 0), ConfigError);
    }

    TEST_CASE("registry round trip and tamper detection")
    {
        test_support::TempDir dir("registry");
        const auto clf = train_classifier("toy-2class-linear", "linear", 3);
        save_classifier(clf, dir.path());
        CHECK(classifier_exists(dir.path(), clf.model_id()));
        const auto loaded = load_classifier(dir.path(), clf.model_id());
        CHECK(loaded.info().accuracy == clf.info().accuracy);
        CHECK(loaded.network().serialize() == clf.network().serialize());
        const auto manifest = io::read_json(dir.path() / (clf.model_id() + ".json"));
        for (const char* key : {"model_id", "arch_spec", "dataset_id", "seed", "accuracy", "pixel_range",
                                "normalization", "params_sha256"}) {
            CHECK(manifest.contains(key));
        }

        auto bytes = io::read_bytes(dir.path() / (clf.model_id() + ".params"));
        bytes.back() ^= 1;
        io::write_bytes(dir.path() / (clf.model_id() + ".params"), bytes);
        CHECK_THROWS_AS(load_classifier(dir.path(), clf.model_id()), DependencyError);
        CHECK_THROWS_AS(load_classifier(dir.path(), "missing-model"), DependencyError);
    }
}

TEST_SUITE("classifier")
{
    TEST_CASE("desk CNN reaches the recorded accuracy floor")
    {
        // Floor fixed from a recorded training run minus 5 points.
        const auto clf = train_classifier("gratings10", "cnn-5layer", 7);
        CHECK(clf.info().accuracy >= 0.95);
        CHECK(clf.input_shape() == Shape{1, 3, 32, 32});
    }
}
