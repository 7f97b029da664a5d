#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace dcis {

// Deterministic RNG used everywhere in the library. std::mt19937_64 is fully
// specified by the standard; the uniform/normal transforms below are our own
// so that draws do not depend on the standard library's distribution
// implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform double in [0, 1), 53 random bits
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // uniform integer in [lo, hi), hi > lo
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(engine_() % static_cast<std::uint64_t>(hi - lo));
    }

    // standard normal via Box-Muller with a cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a 64-bit, used for corpus/model fingerprints and checkpoint checksums.
std::uint64_t fnv1a64(const void* data, std::size_t n_bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string to_hex(std::uint64_t v);

// Writes content to path atomically (temp file in the same directory, then
// rename), so a crash never leaves a half-written file behind.
void atomic_write_file(const std::string& path, const std::string& content);

std::string read_file(const std::string& path); // throws IoError if unreadable

// Thread count for parallel objective / trial evaluation. requested > 0 wins;
// otherwise the DCIS_THREADS environment variable; otherwise hardware
// concurrency.
int resolve_thread_count(int requested);

} // namespace dcis
