#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace solarfuse {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);

// Seedable generator. Randomness is always passed explicitly; there is no
// process-wide generator. Children are derived by labeled hashing so that
// e.g. the mask stream does not shift when the init stream draws more numbers.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

    std::uint64_t seed() const { return seed_; }
    Rng derive(std::string_view label) const { return Rng(splitmix64(seed_ ^ fnv1a64(label))); }

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n).
    std::size_t below(std::size_t n);
    double normal(double mean = 0.0, double stddev = 1.0);

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace solarfuse
