#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cleansift {

// SplitMix64 counter-based generator. Chosen over std::mt19937 because every
// random draw in the pipeline must be bit-reproducible across platforms and
// standard library distributions are not portable.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in (0,1), never exactly 0
    double next_double_open() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller; draws two uniforms per call so the stream advance is fixed.
    double normal() {
        double u1 = next_double_open();
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double gumbel() { return -std::log(-std::log(next_double_open())); }

    // uniform integer in [0, n)
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

    template <typename V>
    void shuffle(std::vector<V>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

  private:
    std::uint64_t state_;
};

// Derives an independent stream seed from a master seed and a stream name,
// e.g. derive_seed(master, "sifter.3.gumbel"). FNV-1a over the name, then a
// SplitMix64-style mix with the master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (h | 1ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, int index) {
    return derive_seed(master, std::string(stream) + "." + std::to_string(index));
}

}  // namespace cleansift
