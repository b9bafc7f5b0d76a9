#ifndef SESA_COMMON_HPP
#define SESA_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace sesa {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& msg) : Error("ShapeMismatch: " + msg) {}
};
struct NonFiniteInput : Error {
    explicit NonFiniteInput(const std::string& msg) : Error("NonFiniteInput: " + msg) {}
};
struct NotScalar : Error {
    explicit NotScalar(const std::string& msg) : Error("NotScalar: " + msg) {}
};
struct InvalidRange : Error {
    explicit InvalidRange(const std::string& msg) : Error("InvalidRange: " + msg) {}
};
struct StepOutOfRange : Error {
    explicit StepOutOfRange(const std::string& msg) : Error("StepOutOfRange: " + msg) {}
};
struct ConfigMismatch : Error {
    explicit ConfigMismatch(const std::string& msg) : Error("ConfigMismatch: " + msg) {}
};
struct LevelMismatch : Error {
    explicit LevelMismatch(const std::string& msg) : Error("LevelMismatch: " + msg) {}
};
struct ResolutionMismatch : Error {
    explicit ResolutionMismatch(const std::string& msg) : Error("ResolutionMismatch: " + msg) {}
};
struct EmptyPyramid : Error {
    explicit EmptyPyramid(const std::string& msg) : Error("EmptyPyramid: " + msg) {}
};
struct EmptyPrompt : Error {
    explicit EmptyPrompt(const std::string& msg) : Error("EmptyPrompt: " + msg) {}
};
struct IndexOutOfRange : Error {
    explicit IndexOutOfRange(const std::string& msg) : Error("IndexOutOfRange: " + msg) {}
};
struct DimMismatch : Error {
    explicit DimMismatch(const std::string& msg) : Error("DimMismatch: " + msg) {}
};
struct TooFewSamples : Error {
    explicit TooFewSamples(const std::string& msg) : Error("TooFewSamples: " + msg) {}
};
struct NumericalInstability : Error {
    explicit NumericalInstability(const std::string& msg) : Error("NumericalInstability: " + msg) {}
};
struct BoxOutOfBounds : Error {
    explicit BoxOutOfBounds(const std::string& msg) : Error("BoxOutOfBounds: " + msg) {}
};
struct AllMasked : Error {
    explicit AllMasked(const std::string& msg) : Error("AllMasked: " + msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("IoError: " + msg) {}
};
struct BadMagic : Error {
    explicit BadMagic(const std::string& msg) : Error("BadMagic: " + msg) {}
};
struct VersionMismatch : Error {
    explicit VersionMismatch(const std::string& msg) : Error("VersionMismatch: " + msg) {}
};
struct Corrupt : Error {
    Corrupt(const std::string& msg, uint64_t off)
        : Error("Corrupt at offset " + std::to_string(off) + ": " + msg), offset(off) {}
    uint64_t offset;
};
struct NetworkError : Error {
    NetworkError(const std::string& msg, int status_code = 0)
        : Error("Network: " + msg), status(status_code) {}
    int status;
};
struct TimeoutError : Error {
    explicit TimeoutError(const std::string& msg) : Error("Timeout: " + msg) {}
};
struct EmptyResponse : Error {
    explicit EmptyResponse(const std::string& msg) : Error("EmptyResponse: " + msg) {}
};
struct MalformedJson : Error {
    explicit MalformedJson(const std::string& msg) : Error("MalformedJson: " + msg) {}
};
struct MissingField : Error {
    explicit MissingField(const std::string& field)
        : Error("MissingField: " + field), name(field) {}
    std::string name;
};
struct EmptyMask : Error {
    explicit EmptyMask(const std::string& msg) : Error("EmptyMask: " + msg) {}
};
struct NanLoss : Error {
    NanLoss(int ep, int st)
        : Error("NanLoss at epoch " + std::to_string(ep) + " step " + std::to_string(st)),
          epoch(ep), step(st) {}
    int epoch;
    int step;
};

// Deterministic RNG. normal() uses an explicit Box-Muller transform so the
// value stream does not depend on the stdlib's std::normal_distribution.
struct Rng {
    std::mt19937_64 eng;

    explicit Rng(uint64_t seed) : eng(seed) {}

    double uniform() {  // [0, 1)
        return (eng() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) { return eng() % n; }
};

// FNV-1a, used for fixture keys and parameter hashing.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace sesa

#endif  // SESA_COMMON_HPP
