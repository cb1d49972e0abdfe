#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ciuap {

// Seeded generator with distribution helpers that do not depend on the
// standard library's implementation-defined distributions, so streams are
// identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    // Uniform in [0, 1).
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Named substream derivation: every stage derives its own seed from the root
// seed and a stable name.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name);
std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t index);

} // namespace ciuap
