#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "fmm/errors.hpp"

namespace fmm {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string to_string(DType dtype);
DType parse_dtype(std::string_view name);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor. The buffer is immutable once constructed and
/// shared between copies, so copying a Tensor is cheap.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape, DType dtype);
  static Tensor full(Shape shape, double value, DType dtype);
  // Values are rounded to the requested dtype.
  static Tensor from_values(Shape shape, std::span<const double> values, DType dtype);
  static Tensor scalar(double value, DType dtype);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return shape_numel(shape_); }
  DType dtype() const { return dtype_; }
  bool empty() const { return !storage_; }

  template <class T>
  std::span<const T> data() const {
    if (dtype_ != dtype_of<T>()) {
      throw ValueError("tensor dtype is " + to_string(dtype_) + ", requested " + to_string(dtype_of<T>()));
    }
    const auto& vec = std::get<std::vector<T>>(*storage_);
    return {vec.data(), vec.size()};
  }

  double at(std::size_t flat_index) const;
  double item() const;
  std::vector<double> to_vector() const;

  Tensor cast(DType dtype) const;
  Tensor reshaped(Shape shape) const;

  // Exact equality of shape, dtype and every stored bit.
  bool bitwise_equal(const Tensor& other) const;

 private:
  using Storage = std::variant<std::vector<float>, std::vector<double>>;

  Shape shape_;
  DType dtype_ = DType::f32;
  std::shared_ptr<const Storage> storage_;
};

// Calls fn.template operator()<T>() with T = float or double.
template <class Fn>
decltype(auto) dispatch_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

}  // namespace fmm
