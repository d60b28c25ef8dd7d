#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace p2w {

using Real = double;

struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  std::size_t sample() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense [n, c, h, w] array in row-major order with an optional gradient
/// buffer of identical shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0);
  Tensor(Shape shape, std::vector<Real> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  Real* raw() { return data_.data(); }
  const Real* raw() const { return data_.data(); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Real& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  Real at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  /// Pointer to the start of sample n (channel c).
  Real* plane(std::size_t n, std::size_t c = 0) {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }
  const Real* plane(std::size_t n, std::size_t c = 0) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  bool has_grad() const { return !grad_.empty(); }
  void ensure_grad();
  void zero_grad();
  std::span<Real> grad() { return grad_; }
  std::span<const Real> grad() const { return grad_; }

  /// Same values, new extents; the element count must match.
  Tensor reshaped(Shape shape) const;
  /// Copy of sample n as a batch-of-one tensor.
  Tensor sample(std::size_t n) const;

  void fill(Real v);

 private:
  Shape shape_{};
  std::vector<Real> data_;
  std::vector<Real> grad_;
};

/// Stacks batch-of-one (or larger) tensors with identical [c, h, w] along n.
Tensor stack(std::span<const Tensor> parts);

}  // namespace p2w
