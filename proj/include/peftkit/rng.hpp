#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace peftkit {

// Deterministic random source. mt19937_64 has a standard-mandated output
// sequence, and the gaussian/uniform transforms are written out here instead
// of using std::*_distribution (whose streams are implementation-defined),
// so identical seeds give identical tensors everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    std::uint64_t uniform_below(std::uint64_t n) {
        // modulo bias is irrelevant at the sizes used here (shuffles, sampling)
        return engine_() % n;
    }

    // Standard normal via Box-Muller; one value per call, no caching.
    double gauss() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

} // namespace peftkit
