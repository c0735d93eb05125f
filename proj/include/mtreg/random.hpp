#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mtreg {

// Seeded generator with distribution code that does not depend on the
// standard library implementation, so streams are reproducible everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Independent stream derived from a top-level seed and a name such as
    // "data", "init" or "augment".
    static Rng stream(std::uint64_t seed, std::string_view name);

    Rng fork(std::string_view name);

    std::uint64_t next() { return engine_(); }
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    double normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mtreg
