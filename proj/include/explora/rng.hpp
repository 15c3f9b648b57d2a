#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace explora {

// Deterministic random source. All randomness in the library flows through
// explicit Rng instances; there is no hidden global state. Normal deviates
// use Box-Muller on top of the raw engine so that the value stream does not
// depend on the standard library's distribution implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t uniform_int(int64_t n);

    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates permutation of {0..n-1}.
    std::vector<int64_t> permutation(int64_t n);

    // k distinct indices drawn uniformly from {0..n-1}, in draw order.
    std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k);

    // Engine + Box-Muller cache as text, for checkpoint resume.
    std::string serialize() const;
    void deserialize(const std::string& text);

    // Stream derivation (splitmix64 over seed ^ stream) so shards can draw
    // independent, order-free randomness.
    static uint64_t derive(uint64_t seed, uint64_t stream);

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace explora
