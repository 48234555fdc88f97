#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tams {

// Error hierarchy. CLI maps ConfigError to exit 2, everything else to 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

std::uint64_t fnv1a64(std::string_view text);

// Deterministic RNG. Seeding and all draw paths avoid std::distribution
// classes so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller with a cached spare.
  double normal();
  // [0, n)
  std::size_t index(std::size_t n);
  bool bernoulli(double p);

  // Independent child stream derived from this stream's seed and a label.
  Rng fork(std::string_view label) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  std::uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Shortest round-trip decimal text for a double; stable across runs.
std::string format_double(double v);
std::string format_double_fixed(double v, int precision);

namespace io {

void write_bytes(std::ostream& out, const void* p, std::size_t n);
void write_u8(std::ostream& out, std::uint8_t v);
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);

void read_bytes(std::istream& in, void* p, std::size_t n, const char* what);
std::uint8_t read_u8(std::istream& in, const char* what);
std::uint16_t read_u16(std::istream& in, const char* what);
std::uint32_t read_u32(std::istream& in, const char* what);
std::uint64_t read_u64(std::istream& in, const char* what);
double read_f64(std::istream& in, const char* what);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace io

}  // namespace tams
