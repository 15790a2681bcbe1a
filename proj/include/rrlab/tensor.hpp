#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rrlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised by any primitive whose operands do not satisfy its shape contract.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& primitive, const std::string& detail);
  const std::string& primitive() const noexcept { return primitive_; }

 private:
  std::string primitive_;
};

/// Dense row-major n-dimensional array. Images use the (rows, cols, depth)
/// layout; batches prepend the sample axis (NHWC).
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor", "payload of " + std::to_string(data.size()) +
                                     " elements does not fit shape " + shape_string(shape));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool empty() const noexcept { return data.empty(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  std::span<T> values() noexcept { return data; }
  std::span<const T> values() const noexcept { return data; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

/// Copies sample `index` of a batch tensor (leading axis) into its own tensor.
template <typename T>
Tensor<T> slice_sample(const Tensor<T>& batch, std::size_t index) {
  Shape inner(batch.shape.begin() + 1, batch.shape.end());
  const std::size_t n = shape_numel(inner);
  Tensor<T> out(inner);
  std::copy_n(batch.data.begin() + static_cast<std::ptrdiff_t>(index * n), n, out.data.begin());
  return out;
}

/// 64-bit FNV-1a over raw bytes; used for digests of weights and statistics.
std::uint64_t fnv1a(const void* bytes, std::size_t count, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace rrlab
