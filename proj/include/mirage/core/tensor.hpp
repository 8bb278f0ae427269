#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mirage/core/error.hpp"
#include "mirage/core/rng.hpp"

namespace mirage {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

template <typename T>
struct dtype_traits;
template <>
struct dtype_traits<float> {
  static constexpr std::uint8_t code = 0;
  static constexpr const char* name = "float32";
};
template <>
struct dtype_traits<double> {
  static constexpr std::uint8_t code = 1;
  static constexpr const char* name = "float64";
};

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

// Dense row-major array. Rank >= 1 and every extent >= 1.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{1}, data_(1, T(0)) {}

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= shape_.size())
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape_));
    return shape_[axis];
  }

  Shape strides() const {
    Shape st(shape_.size(), 1);
    for (std::size_t k = shape_.size(); k-- > 1;) st[k - 1] = st[k] * shape_[k];
    return st;
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  T item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <Scalar U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  // Bitwise identity of shape and payload (distinguishes -0.0, compares NaN payloads).
  bool bitwise_equal(const Tensor& o) const {
    return shape_ == o.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0);
  }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw DimensionError("tensor rank must be >= 1");
    for (std::size_t k = 0; k < s.size(); ++k)
      if (s[k] == 0)
        throw DimensionError("extent of axis " + std::to_string(k) + " is zero in " + shape_str(s));
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw DimensionError("index rank " + std::to_string(idx.size()) + " != tensor rank " +
                           std::to_string(shape_.size()));
    std::size_t off = 0, k = 0;
    for (auto i : idx) {
      if (i >= shape_[k])
        throw DimensionError("index " + std::to_string(i) + " out of range on axis " +
                             std::to_string(k) + " (extent " + std::to_string(shape_[k]) + ")");
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace mirage
