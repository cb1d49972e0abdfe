#include "ciuap/datasets.hpp"

#include "ciuap/errors.hpp"
#include "ciuap/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace ciuap {

namespace {

DatasetSplits toy_two_class()
{
    // Class 0 lies below the diagonal x0 == x1, class 1 above it.
    Dataset d;
    d.id = "toy-2class-linear";
    d.num_classes = 2;
    d.pixel_range = {0.0F, 255.0F};
    d.images = Tensor(Shape{4, 1, 1, 2}, {1.0F, 0.0F, 2.0F, 1.0F, 0.0F, 1.0F, 1.0F, 2.0F});
    d.labels = {0, 0, 1, 1};
    return {d, d};
}

constexpr int kGratingSize = 32;
constexpr int kGratingClasses = 10;

// Class c: orientation (c % 5) * 36 degrees, spatial frequency low for
// c < 5 and high otherwise. The grating rides on a cluttered background
// with a random colour ramp and pixel noise, so its amplitude is modest
// relative to the image content.
void render_grating(Rng& rng, int cls, float* img)
{
    constexpr double pi = std::numbers::pi;
    const double theta = (cls % 5) * pi / 5.0 + rng.uniform(-0.1, 0.1);
    const double cycles = (cls < 5 ? 3.0 : 5.5) * rng.uniform(0.9, 1.1);
    const double amplitude = rng.uniform(8.0, 22.0);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double kx = 2.0 * pi * cycles / kGratingSize * std::cos(theta);
    const double ky = 2.0 * pi * cycles / kGratingSize * std::sin(theta);
    double base[3];
    double tint[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(70.0, 185.0);
        tint[c] = rng.uniform(0.6, 1.0);
    }
    const double ramp_angle = rng.uniform(0.0, 2.0 * pi);
    const double ramp = rng.uniform(0.0, 30.0);
    const double blob_x = rng.uniform(4.0, 28.0);
    const double blob_y = rng.uniform(4.0, 28.0);
    const double blob_r = rng.uniform(3.0, 8.0);
    const double blob_v = rng.uniform(-40.0, 40.0);
    for (int y = 0; y < kGratingSize; ++y) {
        for (int x = 0; x < kGratingSize; ++x) {
            const double u = (x - 15.5) / 16.0;
            const double v = (y - 15.5) / 16.0;
            const double clutter = ramp * (u * std::cos(ramp_angle) + v * std::sin(ramp_angle)) +
                                   blob_v * std::exp(-((x - blob_x) * (x - blob_x) + (y - blob_y) * (y - blob_y)) /
                                                     (2.0 * blob_r * blob_r));
            const double wave = amplitude * std::sin(kx * x + ky * y + phase);
            for (int c = 0; c < 3; ++c) {
                const double val = base[c] + clutter + tint[c] * wave + 12.0 * rng.normal();
                img[(c * kGratingSize + y) * kGratingSize + x] = static_cast<float>(std::clamp(val, 0.0, 255.0));
            }
        }
    }
}

Dataset make_gratings(const std::string& split, int count, std::uint64_t seed)
{
    Dataset d;
    d.id = "gratings10";
    d.num_classes = kGratingClasses;
    d.pixel_range = {0.0F, 255.0F};
    d.images = Tensor(Shape{count, 3, kGratingSize, kGratingSize});
    d.labels.resize(count);
    const std::uint64_t stream = derive_seed(seed, "gratings10/" + split);
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(stream, "image", static_cast<std::uint64_t>(i)));
        const int cls = i % kGratingClasses;
        d.labels[i] = cls;
        render_grating(rng, cls, d.images.sample(i).data());
    }
    return d;
}

DatasetSplits gratings10()
{
    return {make_gratings("train", 5000, 20180101), make_gratings("test", 1000, 20180101)};
}

Dataset read_cifar_batch(const std::filesystem::path& path, int limit)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cifar10-small needs " + path.string() + " (set CIUAP_DATA)");
    constexpr int record = 1 + 3 * 32 * 32;
    Dataset d;
    d.id = "cifar10-small";
    d.num_classes = 10;
    d.pixel_range = {0.0F, 255.0F};
    d.images = Tensor(Shape{limit, 3, 32, 32});
    d.labels.resize(limit);
    std::vector<unsigned char> buf(record);
    for (int i = 0; i < limit; ++i) {
        if (!f.read(reinterpret_cast<char*>(buf.data()), record)) {
            throw ConfigError("truncated CIFAR-10 batch " + path.string());
        }
        d.labels[i] = buf[0];
        auto img = d.images.sample(i);
        for (int k = 0; k < 3 * 32 * 32; ++k) img[k] = static_cast<float>(buf[1 + k]);
    }
    return d;
}

DatasetSplits cifar10_small()
{
    const char* root = std::getenv("CIUAP_DATA");
    const std::filesystem::path dir = std::filesystem::path(root != nullptr ? root : "data") / "cifar-10-batches-bin";
    return {read_cifar_batch(dir / "data_batch_1.bin", 10000), read_cifar_batch(dir / "test_batch.bin", 2000)};
}

} // namespace

Dataset Dataset::subset(int begin, int count) const
{
    Dataset d = *this;
    d.images = images.slice(begin, count);
    d.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
    return d;
}

DatasetSplits load_dataset(const std::string& id)
{
    if (id == "toy-2class-linear") return toy_two_class();
    if (id == "gratings10") return gratings10();
    if (id == "cifar10-small") return cifar10_small();
    throw ConfigError("unknown dataset '" + id + "'");
}

std::vector<std::string> dataset_ids() { return {"toy-2class-linear", "gratings10", "cifar10-small"}; }

std::pair<std::vector<float>, std::vector<float>> channel_statistics(const Dataset& d)
{
    const Shape s = d.images.shape();
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    std::vector<float> mean(s.c);
    std::vector<float> stddev(s.c);
    for (int c = 0; c < s.c; ++c) {
        double sum = 0.0;
        double sq = 0.0;
        for (int n = 0; n < s.n; ++n) {
            const float* p = d.images.sample(n).data() + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum += p[i];
                sq += static_cast<double>(p[i]) * p[i];
            }
        }
        const double count = static_cast<double>(s.n) * plane;
        const double m = sum / count;
        mean[c] = static_cast<float>(m);
        stddev[c] = static_cast<float>(std::sqrt(std::max(sq / count - m * m, 1e-12)));
    }
    return {mean, stddev};
}

} // namespace ciuap
