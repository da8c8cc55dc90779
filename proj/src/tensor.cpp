#include "alps/tensor.hpp"

#include <cstring>
#include <numeric>
#include <sstream>

#include "alps/errors.hpp"

namespace alps {

std::string_view dtype_name(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw FormatError("unknown dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dtype) { return dtype == DType::F32 ? 4 : 8; }

std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape, std::size_t n) {
  for (auto extent : shape) {
    if (extent <= 0) throw ShapeError("non-positive extent in shape " + shape_to_string(shape));
  }
  if (static_cast<std::size_t>(shape_numel(shape)) != n) {
    throw ShapeError("shape " + shape_to_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " elements, got " + std::to_string(n));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_, std::get<0>(data_).size());
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_, std::get<1>(data_).size());
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  if (dtype == DType::F32) return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

DType Tensor::dtype() const noexcept { return data_.index() == 0 ? DType::F32 : DType::F64; }

std::span<const float> Tensor::f32() const {
  if (dtype() != DType::F32) throw ValueError("tensor is f64, requested f32");
  return std::get<0>(data_);
}

std::span<const double> Tensor::f64() const {
  if (dtype() != DType::F64) throw ValueError("tensor is f32, requested f64");
  return std::get<1>(data_);
}

std::span<float> Tensor::f32_mut() {
  if (dtype() != DType::F32) throw ValueError("tensor is f64, requested f32");
  return std::get<0>(data_);
}

std::span<double> Tensor::f64_mut() {
  if (dtype() != DType::F64) throw ValueError("tensor is f32, requested f64");
  return std::get<1>(data_);
}

std::vector<double> Tensor::to_f64() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
}

std::span<const std::byte> Tensor::bytes() const {
  return std::visit([](const auto& v) { return std::as_bytes(std::span(v)); }, data_);
}

bool Tensor::identical(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype() != other.dtype()) return false;
  auto a = bytes();
  auto b = other.bytes();
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size()) == 0);
}

}  // namespace alps
