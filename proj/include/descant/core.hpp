#pragma once

// Shared primitives: error taxonomy, deterministic RNG, hashing, and
// little-endian binary IO used by every other header.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace descant {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors

enum class ErrorCategory {
  Config,   // invalid configuration or arguments
  Prereq,   // missing input artifact / stage not run
  Domain,   // precondition violated at runtime
  Parse,    // malformed token stream or file
  Io,       // filesystem / serialization failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::Config, m) {}
};
struct PrereqError : Error {
  explicit PrereqError(const std::string& m) : Error(ErrorCategory::Prereq, m) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& m) : Error(ErrorCategory::Domain, m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error(ErrorCategory::Io, m) {}
};

// Raised by parse_generated when the CoT region cannot be reassembled into a
// rectangular grid (missing cot_eos, length not divisible by L, level runs
// out of order or unequal).
struct MalformedCot : Error {
  explicit MalformedCot(const std::string& m) : Error(ErrorCategory::Parse, m) {}
};
// Raised when a token id appears in a region whose segment cannot contain it.
struct SegmentViolation : Error {
  explicit SegmentViolation(const std::string& m) : Error(ErrorCategory::Parse, m) {}
};

// ---------------------------------------------------------------------------
// Hashing

inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t hash = 0xcbf29ce484222325ull) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ull;
  }
  return hash;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t hash = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), hash);
}

inline std::uint64_t hash_mix(std::uint64_t h, std::uint64_t v) {
  return fnv1a64(&v, sizeof(v), h);
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// std::mt19937_64's output stream is pinned by the standard, but the
// std::*_distribution adapters are not; every draw below is implemented by
// hand so results are bit-reproducible across standard libraries.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double next_double() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  int uniform_int(int n) {
    if (n <= 0) throw DomainError("Rng::uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<int>(x % un);
  }

  // Box-Muller; second value cached so consecutive draws stay cheap.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Derives an independent child seed from a root seed and a stream label, so
// each pipeline stage draws from its own stream.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  return fnv1a64(stream, hash_mix(0xcbf29ce484222325ull, root));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  std::uint64_t h = hash_mix(0x9e3779b97f4a7c15ull, root);
  return hash_mix(h, index);
}

// ---------------------------------------------------------------------------
// Little-endian binary IO

static_assert(std::endian::native == std::endian::little,
              "binary artifact formats are little-endian; big-endian hosts are unsupported");

class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open for write: " + path);
    path_ = path;
  }

  void u32(std::uint32_t v) { raw(&v, sizeof(v)); }
  void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
  void i32(std::int32_t v) { raw(&v, sizeof(v)); }
  void f32(float v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }

  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void f32_span(const double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f32(static_cast<float>(data[i]));
  }
  void f64_span(const double* data, std::size_t n) {
    raw(data, n * sizeof(double));
  }

  void raw(const void* data, std::size_t size) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out_) throw IoError("write failure: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for read: " + path);
    path_ = path;
  }

  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }

  std::string str() {
    const std::uint64_t n = u64();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  void f32_span(double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(f32());
  }
  void f64_span(double* data, std::size_t n) { raw(data, n * sizeof(double)); }

  void raw(void* data, std::size_t size) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
    if (!in_) throw IoError("truncated read: " + path_);
  }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof(v));
    return v;
  }

  std::ifstream in_;
  std::string path_;
};

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for hashing: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

}  // namespace descant
