#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gavatar {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
// Quaternions are stored as (w, x, y, z).
using Quat = Eigen::Vector4d;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error hierarchy. Everything thrown by the library derives from Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct CorruptionError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct FitError : Error {
  using Error::Error;
};

inline constexpr double kPi = 3.14159265358979323846;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

// ---------------------------------------------------------------------------
// Little-endian binary IO.

class ByteWriter {
 public:
  void u8(uint8_t v) { bytes_.push_back(v); }
  void u16(uint16_t v) { put(v); }
  void u32(uint32_t v) { put(v); }
  void u64(uint64_t v) { put(v); }
  void i32(int32_t v) { put(static_cast<uint32_t>(v)); }
  void f32(float v) { put(std::bit_cast<uint32_t>(v)); }
  void f32(double v) { f32(static_cast<float>(v)); }
  void raw(std::span<const uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void tag(const char (&magic)[5]) {
    for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>(magic[i]));
  }

  const std::vector<uint8_t>& bytes() const& { return bytes_; }
  std::vector<uint8_t> bytes() && { return std::move(bytes_); }
  size_t size() const { return bytes_.size(); }

 private:
  template <class U>
  void put(U v) {
    for (size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  std::vector<uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t u8() { return get<uint8_t>(); }
  uint16_t u16() { return get<uint16_t>(); }
  uint32_t u32() { return get<uint32_t>(); }
  uint64_t u64() { return get<uint64_t>(); }
  int32_t i32() { return static_cast<int32_t>(get<uint32_t>()); }
  float f32() { return std::bit_cast<float>(get<uint32_t>()); }
  // Filled one component at a time: constructor argument order is unspecified.
  template <int N>
  Eigen::Matrix<double, N, 1> f32_vec() {
    Eigen::Matrix<double, N, 1> v;
    for (int i = 0; i < N; ++i) v[i] = f32();
    return v;
  }
  std::span<const uint8_t> raw(size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  void expect_tag(const char (&magic)[5], const char* what) {
    auto got = raw(4);
    if (std::memcmp(got.data(), magic, 4) != 0)
      throw CorruptionError(std::string(what) + ": bad magic");
  }

  size_t remaining() const { return data_.size() - pos_; }
  size_t position() const { return pos_; }

 private:
  void need(size_t n) const {
    if (data_.size() - pos_ < n) throw CorruptionError("unexpected end of data");
  }
  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::string& path, std::span<const uint8_t> data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path);
}

// FNV-1a, used to tie a bitstream to the prior model it was produced with.
inline uint64_t fnv1a64(std::span<const uint8_t> data) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint8_t b : data) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Threading. The worker count comes from set_thread_count() or the
// GAVATAR_THREADS environment variable; results never depend on it.

namespace detail {
inline int& thread_count_slot() {
  static int count = [] {
    if (const char* env = std::getenv("GAVATAR_THREADS")) {
      int n = std::atoi(env);
      if (n > 0) return n;
    }
    return 1;
  }();
  return count;
}
}  // namespace detail

inline int thread_count() { return detail::thread_count_slot(); }
inline void set_thread_count(int n) { detail::thread_count_slot() = std::max(1, n); }

// Runs fn(i) for i in [0, count). Work items are interleaved across workers;
// callers write to disjoint slots so the outcome is thread-count independent.
// Nested calls from inside a worker run inline.
namespace detail {
inline thread_local bool in_worker = false;
}

inline void parallel_for(size_t count, const std::function<void(size_t)>& fn) {
  const size_t workers = std::min<size_t>(static_cast<size_t>(thread_count()), count);
  if (workers <= 1 || detail::in_worker) {
    for (size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      detail::in_worker = true;
      try {
        for (size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace gavatar
