#include "core/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xcb {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    return splitmix64(splitmix64(seed) ^ splitmix64(tag * 0x9e3779b97f4a7c15ULL + 1));
}

int64_t Rng::randint(int64_t n) {
    if (n <= 0) throw ContractError("Rng::randint: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = (~uint64_t{0} / un) * un;
    uint64_t r;
    do {
        r = next_u64();
    } while (r >= limit);
    return static_cast<int64_t>(r % un);
}

namespace {
std::atomic<int> g_threads{0};  // 0 = uninitialized

int read_env_threads() {
    const char* env = std::getenv("XCB_THREADS");
    if (env != nullptr) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}
}  // namespace

void set_threads(int n) {
    if (n < 1) n = 1;
    g_threads.store(n);
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
}

int max_threads() {
    int v = g_threads.load();
    if (v == 0) {
        v = read_env_threads();
        set_threads(v);
    }
    return v;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    s += "]";
    return s;
}

}  // namespace xcb
