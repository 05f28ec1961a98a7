#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace xcb {

// Error taxonomy used across the core. The C API maps these to status codes.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : ContractError {
    using ContractError::ContractError;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

uint64_t splitmix64(uint64_t x);

// Derives an independent stream seed from (seed, tag). Used to give each
// purpose (init, shuffle, noise, per-example generation) its own stream.
uint64_t derive_seed(uint64_t seed, uint64_t tag);

// Deterministic RNG. mt19937_64 is bit-portable; the distributions are
// hand-rolled because std::uniform_real_distribution is implementation
// defined and would break byte-identical datasets across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    double normal() {
        // Box-Muller, no spare caching so the draw count stays predictable.
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // [0, n), unbiased via rejection.
    int64_t randint(int64_t n);

private:
    std::mt19937_64 gen_;
};

// Worker-count control. XCB_THREADS bounds the pool; parallel kernels are
// written so results are bit-identical for any thread count.
void set_threads(int n);
int max_threads();

void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

std::string shape_str(const std::vector<int64_t>& shape);

}  // namespace xcb
