#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace matchkit {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Single RNG type everywhere so seeded runs replay bit-for-bit.
using Rng = std::mt19937_64;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Experiment arms get decorrelated streams from one user-facing seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return base ^ fnv1a(tag);
}

enum class LogLevel : int { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
  static LogLevel lvl = [] {
    const char* e = std::getenv("MATCHKIT_LOG");
    if (!e) return LogLevel::error;
    std::string_view v(e);
    if (v == "debug") return LogLevel::debug;
    if (v == "info") return LogLevel::info;
    return LogLevel::error;
  }();
  return lvl;
}

inline void log_at(LogLevel lvl, const char* tag, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_error(const std::string& msg) { log_at(LogLevel::error, "error", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::info, "info", msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::debug, "debug", msg); }

// Text formats pin six decimal places so reruns diff clean.
inline std::string format_fixed(double v, int places = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", places, v);
  return buf;
}

// Little-endian scalar I/O for the binary container formats.
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  static_assert(sizeof bits == sizeof v);
  __builtin_memcpy(&bits, &v, sizeof bits);
  put_u32(out, bits);
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  __builtin_memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error("cannot open for write: " + path);
  std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw Error("short write: " + path);
}

inline std::string read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw Error("cannot open for read: " + path);
  std::string out;
  char buf[65536];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  std::fclose(f);
  return out;
}

struct ByteReader {
  const std::string& data;
  std::size_t pos = 0;

  bool need(std::size_t n) const { return pos + n <= data.size(); }

  std::uint32_t u32() {
    if (!need(4)) throw Error("byte stream truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    if (!need(8)) throw Error("byte stream truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    __builtin_memcpy(&v, &bits, sizeof v);
    return v;
  }

  double f64() {
    std::uint64_t bits = u64();
    double v;
    __builtin_memcpy(&v, &bits, sizeof v);
    return v;
  }
};

}  // namespace matchkit
