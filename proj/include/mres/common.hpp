#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mres {

namespace fs = std::filesystem;

// Base error type. The CLI maps ConfigError to exit code 2 and every other
// failure to exit code 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

#define MRES_CHECK(cond, msg)                                          \
    do {                                                               \
        if (!(cond)) throw ::mres::Error(std::string("check failed: ") + (msg)); \
    } while (0)

// splitmix64 finalizer; used to derive independent child seeds so that
// consumers drawing different amounts of randomness never share a stream.
inline uint64_t mix_seed(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag) {
    return mix_seed(base ^ mix_seed(tag + 0x6a09e667f3bcc909ull));
}

// Thin wrapper over mt19937_64 that remembers its own seed so child streams
// can be derived deterministically regardless of how much the parent drew.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

    uint64_t seed() const { return seed_; }
    std::mt19937_64& engine() { return engine_; }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    bool bernoulli(double p) {
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        return std::bernoulli_distribution(p)(engine_);
    }
    double normal(double mean, double sigma) {
        return std::normal_distribution<double>(mean, sigma)(engine_);
    }
    Rng child(uint64_t tag) const { return Rng(derive_seed(seed_, tag)); }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
};

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// All output files go through temp-then-rename so partial writes never leave
// a corrupt artifact behind.
inline void write_text_atomic(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out << content;
    }
    fs::rename(tmp, path);
}

}  // namespace mres
