#include "prunekit/rng.hpp"

#include <cmath>
#include <numbers>

namespace prunekit {

namespace {

uint64_t splitmix64(uint64_t &x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace

Rng::Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto &s : s_) s = splitmix64(sm);
}

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

uint64_t Rng::below(uint64_t n) { return next_u64() % n; }

float Rng::next_normal(float stddev) {
    if (stddev == 0.0f) return 0.0f;
    if (has_spare_) {
        has_spare_ = false;
        return float(spare_ * stddev);
    }
    const double u1 = 1.0 - next_unit(); // (0, 1], keeps log finite
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return float(r * std::cos(theta) * stddev);
}

Tensor2 Rng::normal(int rows, int cols, float stddev) {
    Tensor2 out(rows, cols);
    for (float &v : out.data()) v = next_normal(stddev);
    return out;
}

} // namespace prunekit
