#include "explora/rng.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "explora/errors.hpp"

namespace explora {

int64_t Rng::uniform_int(int64_t n) {
    if (n <= 0) throw ContractError("uniform_int: n must be positive, got " + std::to_string(n));
    // rejection sampling to avoid modulo bias
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::vector<int64_t> Rng::permutation(int64_t n) {
    std::vector<int64_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = i;
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = uniform_int(i + 1);
        std::swap(out[static_cast<size_t>(i)], out[static_cast<size_t>(j)]);
    }
    return out;
}

std::vector<int64_t> Rng::sample_without_replacement(int64_t n, int64_t k) {
    if (k < 0 || k > n) throw ContractError("sample_without_replacement: need 0 <= k <= n");
    // partial Fisher-Yates over an index pool
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    std::vector<int64_t> out(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + uniform_int(n - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        out[static_cast<size_t>(i)] = pool[static_cast<size_t>(i)];
    }
    return out;
}

std::string Rng::serialize() const {
    std::ostringstream os;
    os << engine_ << ' ' << (has_spare_ ? 1 : 0);
    if (has_spare_) {
        // store the exact bit pattern so resume is bitwise faithful
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(spare_));
        std::memcpy(&bits, &spare_, sizeof(bits));
        os << ' ' << bits;
    }
    return os.str();
}

void Rng::deserialize(const std::string& text) {
    std::istringstream is(text);
    int spare_flag = 0;
    is >> engine_ >> spare_flag;
    if (is.fail()) throw DataError("Rng::deserialize: malformed state string");
    has_spare_ = spare_flag != 0;
    spare_ = 0.0;
    if (has_spare_) {
        uint64_t bits = 0;
        is >> bits;
        if (is.fail()) throw DataError("Rng::deserialize: malformed spare value");
        std::memcpy(&spare_, &bits, sizeof(bits));
    }
}

uint64_t Rng::derive(uint64_t seed, uint64_t stream) {
    // splitmix64 finalizer
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace explora
