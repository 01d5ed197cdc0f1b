#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mambastyle/errors.hpp"
#include "mambastyle/rng.hpp"

namespace mambastyle {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// resize() leaves new elements default-initialised, i.e. uninitialised
// for arithmetic types.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;

  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

/// Dense row-major array. A default-constructed tensor is "undefined"
/// (rank 0, no storage); scalars are shape {1}.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, detail::DefaultInitAllocator<T>>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    validate_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  /// Storage with unspecified contents, for outputs that are fully overwritten.
  static BasicTensor uninitialized(Shape shape) {
    BasicTensor t;
    validate_shape(shape);
    t.data_.resize(shape_numel(shape));
    t.shape_ = std::move(shape);
    return t;
  }
  static BasicTensor full(Shape shape, T v) { return BasicTensor(std::move(shape), v); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    BasicTensor t(std::move(shape));
    for (auto& v : t.data_) {
      v = static_cast<T>(rng.normal() * stddev);
    }
    return t;
  }

  static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    BasicTensor t(std::move(shape));
    for (auto& v : t.data_) {
      v = static_cast<T>(rng.uniform(lo, hi));
    }
    return t;
  }

  [[nodiscard]] bool defined() const { return !shape_.empty(); }
  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) {
      throw ShapeError("tensor: dim " + std::to_string(i) + " out of range for " + shape_str(shape_));
    }
    return shape_[i];
  }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] std::span<const T> data() const { return data_; }
  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::vector<T> vec() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Value of a one-element tensor.
  [[nodiscard]] T item() const {
    if (data_.size() != 1) {
      throw ShapeError("tensor: item() on " + shape_str(shape_));
    }
    return data_[0];
  }

  [[nodiscard]] BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("tensor: cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    BasicTensor t;
    validate_shape(shape);
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  [[nodiscard]] BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Bitwise equality of shape and payload.
  [[nodiscard]] bool identical(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
  }

  [[nodiscard]] double sum() const {
    double acc = 0.0;
    for (T v : data_) {
      acc += static_cast<double>(v);
    }
    return acc;
  }

  [[nodiscard]] double squared_norm() const {
    double acc = 0.0;
    for (T v : data_) {
      acc += static_cast<double>(v) * static_cast<double>(v);
    }
    return acc;
  }

  [[nodiscard]] double max_abs() const {
    double m = 0.0;
    for (T v : data_) {
      m = std::max(m, std::abs(static_cast<double>(v)));
    }
    return m;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) {
      throw ShapeError("tensor: shape must have rank >= 1");
    }
    for (auto d : shape) {
      if (d == 0) {
        throw ShapeError("tensor: dimensions must be positive, got " + shape_str(shape));
      }
    }
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<float>;

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Raw blob format: "MSTNSR01", u32 rank, u32 dims..., f32 payload, all LE.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw CorruptionError("blob: truncated header");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      put_u32(os, std::bit_cast<std::uint32_t>(v));
    }
  }
}

inline void get_f32(std::istream& is, std::span<float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(float)))) {
      throw CorruptionError("blob: truncated payload");
    }
  } else {
    for (float& v : values) {
      v = std::bit_cast<float>(get_u32(is));
    }
  }
}

}  // namespace detail

inline constexpr char kBlobMagic[8] = {'M', 'S', 'T', 'N', 'S', 'R', '0', '1'};

inline void write_blob(std::ostream& os, const Tensor& t) {
  if (!t.defined()) {
    throw ContractError("write_blob: undefined tensor");
  }
  os.write(kBlobMagic, 8);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) {
    detail::put_u32(os, static_cast<std::uint32_t>(d));
  }
  detail::put_f32(os, t.data());
}

inline Tensor read_blob(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8)) {
    throw CorruptionError("blob: truncated magic");
  }
  if (std::memcmp(magic, kBlobMagic, 6) != 0) {
    throw CorruptionError("blob: bad magic");
  }
  if (std::memcmp(magic, kBlobMagic, 8) != 0) {
    throw VersionError("blob: unsupported version " + std::string(magic + 6, 2));
  }
  const auto rank = detail::get_u32(is);
  if (rank == 0 || rank > 8) {
    throw CorruptionError("blob: implausible rank " + std::to_string(rank));
  }
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::get_u32(is);
    if (d == 0) {
      throw CorruptionError("blob: zero dimension");
    }
  }
  Tensor t(shape);
  detail::get_f32(is, t.data());
  return t;
}

inline void save_blob(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw Error("cannot open " + path + " for writing");
  }
  write_blob(os, t);
}

inline Tensor load_blob(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("cannot open " + path);
  }
  return read_blob(is);
}

}  // namespace mambastyle
