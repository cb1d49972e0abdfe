#include "ciuap/errors.hpp"
#include "ciuap/impressions.hpp"
#include "ciuap/io.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace ciuap;

namespace {

Tensor random_image(Shape s, Rng& rng, double lo = 0.0, double hi = 255.0)
{
    Tensor t(s);
    for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

// Forwards to a real classifier but fails with a numerical error once its
// call budget is spent.
class FailingTarget final : public Target {
public:
    FailingTarget(ClassifierHandle inner, int budget) : inner_(std::move(inner)), budget_(budget) {}

    std::string model_id() const override { return inner_.model_id(); }
    Shape input_shape() const override { return inner_.input_shape(); }
    int num_classes() const override { return inner_.num_classes(); }
    PixelRange pixel_range() const override { return inner_.pixel_range(); }
    std::vector<std::string> embedding_layer_ids() const override { return inner_.embedding_layer_ids(); }
    TapResult forward(const Tensor& batch, std::string_view layer) const override
    {
        if (--budget_ < 0) throw NumericalError("injected failure");
        return inner_.forward(batch, layer);
    }
    Tensor backward(const TapResult& r, const Tensor& dlogits, const Tensor* demb) const override
    {
        return inner_.backward(r, dlogits, demb);
    }
    Tensor logits(const Tensor& batch) const override { return inner_.logits(batch); }

private:
    ClassifierHandle inner_;
    mutable int budget_;
};

ImpressionConfig toy_config()
{
    ImpressionConfig cfg = identity_augmentation_config();
    cfg.init_high = 20.0;
    return cfg;
}

} // namespace

TEST_SUITE("impressions")
{
    TEST_CASE("stop confidence draws")
    {
        Rng rng(1);
        double sum = 0.0;
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            const double c = sample_stop_confidence(rng);
            CHECK((c >= 0.55 && c <= 0.99));
            sum += c;
        }
        CHECK(std::abs(sum / n - (0.55 + 0.99) / 2.0) < 0.02);

        ImpressionConfig fixed;
        fixed.confidence_low = 0.9;
        fixed.confidence_high = 0.9;
        CHECK(sample_stop_confidence(rng, fixed) == 0.9);
    }

    TEST_CASE("config validation")
    {
        ImpressionConfig cfg;
        cfg.max_steps = 0;
        CHECK_THROWS_AS(cfg.validate(), ContractViolation);
        cfg = {};
        cfg.confidence_low = 0.99;
        cfg.confidence_high = 0.5;
        CHECK_THROWS_AS(cfg.validate(), ContractViolation);
        cfg = {};
        cfg.noise_amplitude = -1.0;
        CHECK_THROWS_AS(cfg.validate(), ContractViolation);
        const auto clf = make_toy_linear_classifier();
        ImpressionConfig zero_steps;
        zero_steps.max_steps = 0;
        CHECK_THROWS_AS(synth_impression(clf, 0, 1, zero_steps), ContractViolation);
        CHECK_THROWS_AS(synth_impression(clf, 2, 1, toy_config()), ContractViolation);
    }

    TEST_CASE("identity configuration leaves the image unchanged")
    {
        Rng rng(2);
        const Tensor img = random_image(Shape{1, 3, 8, 8}, rng);
        Rng aug_rng(5);
        CHECK(augment(img, aug_rng, identity_augmentation_config()) == img);
    }

    TEST_CASE("augmented output stays in range and is reproducible")
    {
        Rng rng(3);
        const Tensor img = random_image(Shape{1, 3, 16, 16}, rng);
        for (int k = 0; k < 20; ++k) {
            Rng a(100 + k);
            Rng b(100 + k);
            const Tensor out = augment(img, a, ImpressionConfig{});
            CHECK(out == augment(img, b, ImpressionConfig{}));
            for (float v : out.vec()) CHECK((v >= 0.0F && v <= 255.0F));
        }
        Rng a(1);
        Rng b(2);
        CHECK(augment(img, a, ImpressionConfig{}) != augment(img, b, ImpressionConfig{}));
    }

    TEST_CASE("augmentation parameters come from the configured sets")
    {
        Rng rng(4);
        for (int k = 0; k < 200; ++k) {
            const auto a = Augmentation::sample(Shape{1, 3, 8, 8}, rng, ImpressionConfig{}, PixelRange{});
            CHECK((a.rotation_degrees() >= -5.0 && a.rotation_degrees() <= 5.0));
            const double s = a.scale();
            CHECK((s == 0.95 || s == 0.975 || s == 1.0 || s == 1.025));
        }
    }

    TEST_CASE("augmentation backward is the exact adjoint away from clamping")
    {
        // Mid-range image and small jitter/noise keep every output pixel unclamped,
        // so <A x, y> == <x, A^T y> for the linear part.
        Rng rng(6);
        ImpressionConfig cfg;
        const Tensor x = random_image(Shape{1, 3, 12, 12}, rng, 100.0, 150.0);
        const Tensor y = random_image(Shape{1, 3, 12, 12}, rng, -1.0, 1.0);
        for (int k = 0; k < 5; ++k) {
            const auto a = Augmentation::sample(x.shape(), rng, cfg, PixelRange{});
            // Differencing against a constant image removes the jitter and noise offsets.
            const Tensor base(x.shape(), 128.0F);
            const Tensor ax = a.apply(x);
            const Tensor ab = a.apply(base);
            double lhs = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) lhs += (static_cast<double>(ax[i]) - ab[i]) * y[i];
            const Tensor aty = a.backward(x, y);
            double rhs = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) rhs += (static_cast<double>(x[i]) - 128.0) * aty[i];
            CHECK(test_support::rel_error(lhs, rhs) < 1e-4);
        }
    }

    TEST_CASE("degenerate 1x1 images are rejected")
    {
        Rng rng(7);
        CHECK_THROWS_AS(augment(Tensor(Shape{1, 3, 1, 1}), rng, ImpressionConfig{}), ContractViolation);
    }

    TEST_CASE("toy impression reaches its target confidence")
    {
        const auto clf = make_toy_linear_classifier();
        for (int cls : {0, 1}) {
            const auto rec = synth_impression(clf, cls, 11 + cls, toy_config());
            CHECK(rec.converged);
            CHECK(rec.achieved_confidence >= rec.target_confidence);
            CHECK(predict_label(clf, rec.image)[0] == cls);
            const double p = tap_softmax(clf, rec.image)[static_cast<std::size_t>(cls)];
            CHECK(p == doctest::Approx(rec.achieved_confidence).epsilon(1e-6));
            for (float v : rec.image.vec()) CHECK((v >= 0.0F && v <= 255.0F));
        }
    }

    TEST_CASE("synthesis is deterministic per seed and varies across seeds")
    {
        const auto clf = make_toy_linear_classifier();
        const auto a = synth_impression(clf, 0, 21, toy_config());
        const auto b = synth_impression(clf, 0, 21, toy_config());
        CHECK(a.image == b.image);
        CHECK(a.steps_used == b.steps_used);

        const auto desk = test_support::desk_classifier();
        const auto c = synth_impression(desk, 3, 1);
        const auto d = synth_impression(desk, 3, 2);
        int differing = 0;
        for (std::size_t i = 0; i < c.image.size(); ++i) differing += std::abs(c.image[i] - d.image[i]) > 1.0F;
        CHECK(differing >= static_cast<int>(c.image.size() / 100));
    }

    TEST_CASE("one ascent step moves the target logit as predicted")
    {
        const auto clf = make_toy_linear_classifier();
        ImpressionConfig cfg = identity_augmentation_config();
        cfg.max_steps = 1;
        cfg.confidence_low = 0.999999;
        cfg.confidence_high = 0.9999999;
        cfg.init_low = 50.0;
        cfg.init_high = 200.0;
        const std::uint64_t seed = 31;
        // Reproduce the initial image from the same stream.
        Rng rng(seed);
        sample_stop_confidence(rng, cfg);
        Tensor x0(clf.input_shape());
        for (auto& v : x0.vec()) v = static_cast<float>(rng.uniform(cfg.init_low, cfg.init_high));

        const int cls = 1;
        const auto rec = synth_impression(clf, cls, seed, cfg);
        const double moved = clf.logits(rec.image)[cls] - clf.logits(x0)[cls];
        // Adam's first step moves every pixel by lr in the gradient's sign direction,
        // so the logit changes by lr * sum |d logit / d x_i|, with the slope from central differences.
        double predicted = 0.0;
        for (std::size_t i = 0; i < x0.size(); ++i) {
            Tensor up = x0;
            Tensor down = x0;
            up[i] += 1.0F;
            down[i] -= 1.0F;
            predicted += cfg.learning_rate * std::abs((clf.logits(up)[cls] - clf.logits(down)[cls]) / 2.0);
        }
        CHECK(moved > 0.0);
        CHECK(test_support::rel_error(moved, predicted) < 0.1);
    }

    TEST_CASE("objective rises in most checkpoints on the desk CNN")
    {
        const auto clf = test_support::desk_classifier();
        ImpressionConfig cfg;
        cfg.confidence_low = 0.9999;
        cfg.confidence_high = 0.99999;
        cfg.max_steps = 300;
        std::vector<float> trace;
        synth_impression(clf, 5, 77, cfg, &trace);
        REQUIRE(trace.size() >= 5);
        int rising = 0;
        for (std::size_t i = 1; i < trace.size(); ++i) rising += trace[i] >= trace[i - 1];
        CHECK(static_cast<double>(rising) / (trace.size() - 1) >= 0.8);
    }

    TEST_CASE("dataset counts, persistence and re-verification")
    {
        test_support::TempDir dir("impressions");
        const auto clf = make_toy_linear_classifier();
        const auto ds = build_impression_dataset(clf, 2, {0, 1}, toy_config(), 5, dir.path());
        CHECK(ds.size() == 4);
        CHECK(ds.complete);
        CHECK(ds.records[0].class_id == 0);
        CHECK(ds.records[3].class_id == 1);
        CHECK(ds.records[0].seed != ds.records[1].seed);

        const auto loaded = load_impression_dataset(dir.path());
        REQUIRE(loaded.size() == 4);
        for (int i = 0; i < 4; ++i) {
            CHECK(loaded.records[i].image == ds.records[i].image);
            CHECK(loaded.records[i].target_confidence == ds.records[i].target_confidence);
            const double p =
                tap_softmax(clf, loaded.records[i].image)[static_cast<std::size_t>(loaded.records[i].class_id)];
            CHECK((!loaded.records[i].converged || p >= loaded.records[i].target_confidence));
        }
        CHECK(loaded.model_id == clf.model_id());

        // A modified image file fails its manifest checksum.
        const auto img = dir.path() / "images" / "ci_00002.pfm";
        auto bytes = io::read_bytes(img);
        bytes.back() ^= 0x10;
        io::write_bytes(img, bytes);
        CHECK_THROWS_AS(load_impression_dataset(dir.path()), DependencyError);
        CHECK_THROWS_AS(load_impression_dataset(dir.path() / "missing"), DependencyError);
        CHECK_THROWS_AS(build_impression_dataset(clf, 0, {0}, toy_config(), 5), ContractViolation);
    }

    TEST_CASE("a synthesis failure preserves partial results marked incomplete")
    {
        test_support::TempDir dir("partial");
        // Toy impressions converge within a handful of steps, so a budget of
        // 30 forward calls lets the first records finish.
        const FailingTarget failing(make_toy_linear_classifier(), 30);
        CHECK_THROWS_AS(build_impression_dataset(failing, 10, {0, 1}, toy_config(), 5, dir.path()), NumericalError);
        const auto partial = load_impression_dataset(dir.path());
        CHECK_FALSE(partial.complete);
        CHECK(partial.size() < 20);
    }

    TEST_CASE("ensemble impressions reach the target on the mean logits")
    {
        const EnsembleHandle ens({make_toy_linear_classifier(), train_classifier("toy-2class-linear", "linear", 1)});
        const auto ds = build_impression_dataset(ens, 2, {0, 1}, toy_config(), 9);
        for (const auto& r : ds.records) {
            const Tensor p = nn::softmax(ensemble_presoftmax(ens, r.image));
            CHECK(p[static_cast<std::size_t>(r.class_id)] >= r.target_confidence);
        }
        CHECK(ds.member_ids.size() == 2);
    }
}
