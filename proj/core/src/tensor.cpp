#include "fmm/tensor.hpp"

#include <cstring>
#include <sstream>

namespace fmm {

std::string to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw ValueError("unknown dtype '" + std::string(name) + "'");
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void validate(const Shape& shape, std::size_t length) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != length) {
    throw ShapeError("shape " + shape_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(length));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), dtype_(DType::f32) {
  validate(shape_, values.size());
  storage_ = std::make_shared<const Storage>(std::move(values));
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), dtype_(DType::f64) {
  validate(shape_, values.size());
  storage_ = std::make_shared<const Storage>(std::move(values));
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  const auto n = shape_numel(shape);
  if (dtype == DType::f32) return Tensor(std::move(shape), std::vector<float>(n, static_cast<float>(value)));
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  if (dtype == DType::f32) return Tensor(std::move(shape), std::vector<float>(values.begin(), values.end()));
  return Tensor(std::move(shape), std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

double Tensor::at(std::size_t flat_index) const {
  if (dtype_ == DType::f32) return std::get<std::vector<float>>(*storage_).at(flat_index);
  return std::get<std::vector<double>>(*storage_).at(flat_index);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_string(shape_));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, *storage_);
}

Tensor Tensor::cast(DType dtype) const {
  if (dtype == dtype_) return *this;
  auto values = to_vector();
  return from_values(shape_, values, dtype);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  if (storage_ == other.storage_) return true;
  return std::visit(
      [&](const auto& a) {
        using V = std::decay_t<decltype(a)>;
        const auto& b = std::get<V>(*other.storage_);
        return std::memcmp(a.data(), b.data(), a.size() * sizeof(typename V::value_type)) == 0;
      },
      *storage_);
}

}  // namespace fmm
