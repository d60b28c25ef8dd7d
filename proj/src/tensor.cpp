#include "p2w/tensor.hpp"

#include <algorithm>

#include "p2w/error.hpp"

namespace p2w {

std::string Shape::str() const {
  return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
         std::to_string(h) + "," + std::to_string(w) + "]";
}

Tensor::Tensor(Shape shape, Real fill) : shape_(shape), data_(shape.size(), fill) {}

Tensor::Tensor(Shape shape, std::vector<Real> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_.str());
  }
}

void Tensor::ensure_grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0);
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), Real{0}); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.size() != shape_.size()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  Tensor out(shape, data_);
  return out;
}

Tensor Tensor::sample(std::size_t n) const {
  Shape s = shape_;
  s.n = 1;
  std::vector<Real> v(data_.begin() + static_cast<std::ptrdiff_t>(n * s.sample()),
                      data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * s.sample()));
  return Tensor(s, std::move(v));
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack of zero tensors");
  Shape s = parts.front().shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("stack: mismatched shapes " + s.str() + " and " + ps.str());
    }
    total += ps.n;
  }
  s.n = total;
  std::vector<Real> v;
  v.reserve(s.size());
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  return Tensor(s, std::move(v));
}

}  // namespace p2w
