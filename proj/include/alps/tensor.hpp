#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace alps {

enum class DType { F32, F64 };

std::string_view dtype_name(DType dtype);  // "f32" | "f64"
DType parse_dtype(std::string_view name);
std::size_t dtype_size(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of binary32 or binary64 elements.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape, DType dtype);

  const Shape& shape() const noexcept { return shape_; }
  DType dtype() const noexcept;
  std::int64_t numel() const noexcept { return shape_numel(shape_); }
  std::size_t nbytes() const noexcept { return static_cast<std::size_t>(numel()) * dtype_size(dtype()); }

  // Typed access; throws ValueError if the stored dtype differs.
  std::span<const float> f32() const;
  std::span<const double> f64() const;
  std::span<float> f32_mut();
  std::span<double> f64_mut();

  // Values upcast to binary64 (a copy for f32 storage).
  std::vector<double> to_f64() const;

  // Raw little-endian element bytes.
  std::span<const std::byte> bytes() const;

  // Bit-exact equality of shape, dtype and element bytes.
  bool identical(const Tensor& other) const;

 private:
  Shape shape_;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

}  // namespace alps
