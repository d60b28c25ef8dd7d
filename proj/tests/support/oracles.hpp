#pragma once

// Independent reference implementations used only by the tests. They are
// written as plain nested loops over the definitions and share no code with
// the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "p2w/tensor.hpp"

namespace oracle {

using p2w::Real;
using p2w::Shape;
using p2w::Tensor;

inline Tensor random_tensor(Shape s, std::mt19937_64& gen, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<Real> d(lo, hi);
  Tensor t(s);
  for (Real& v : t.data()) v = d(gen);
  return t;
}

/// TF-style same padding: total = max((out-1)*stride + k - in, 0), before = total/2.
inline std::size_t same_before(std::size_t in, std::size_t k, std::size_t stride, std::size_t* out) {
  *out = (in + stride - 1) / stride;
  const long total = static_cast<long>((*out - 1) * stride + k) - static_cast<long>(in);
  return total > 0 ? static_cast<std::size_t>(total / 2) : 0;
}

/// Direct six-loop cross-correlation with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const std::vector<Real>& bias, std::size_t stride,
                     bool same) {
  const Shape xs = x.shape(), ws = w.shape();
  std::size_t oh, ow, ph = 0, pw = 0;
  if (same) {
    ph = same_before(xs.h, ws.h, stride, &oh);
    pw = same_before(xs.w, ws.w, stride, &ow);
  } else {
    oh = (xs.h - ws.h) / stride + 1;
    ow = (xs.w - ws.w) / stride + 1;
  }
  Tensor y(Shape{xs.n, ws.n, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          Real s = bias.empty() ? 0 : bias[o];
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t ky = 0; ky < ws.h; ++ky)
              for (std::size_t kx = 0; kx < ws.w; ++kx) {
                const long iy = static_cast<long>(i * stride + ky) - static_cast<long>(ph);
                const long ix = static_cast<long>(j * stride + kx) - static_cast<long>(pw);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
                s += x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * w.at(o, c, ky, kx);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

inline Tensor maxpool(const Tensor& x, std::size_t k, std::size_t stride) {
  const Shape s = x.shape();
  const std::size_t oh = (s.h - k) / stride + 1, ow = (s.w - k) / stride + 1;
  Tensor y(Shape{s.n, s.c, oh, ow});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          Real m = -INFINITY;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) m = std::max(m, x.at(n, c, i * stride + a, j * stride + b));
          y.at(n, c, i, j) = m;
        }
  return y;
}

inline Tensor gap(const Tensor& x) {
  const Shape s = x.shape();
  Tensor y(Shape{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      Real t = 0;
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j) t += x.at(n, c, i, j);
      y.at(n, c, 0, 0) = t / static_cast<Real>(s.h * s.w);
    }
  return y;
}

/// y[n, o] = sum_i w[o, i] x[n, i] + b[o] with x flattened per sample.
inline Tensor dense(const Tensor& x, const Tensor& w, const std::vector<Real>& b) {
  const std::size_t n = x.shape().n, in = x.shape().sample(), out = w.shape().n;
  Tensor y(Shape{n, out, 1, 1});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < out; ++o) {
      Real t = b.empty() ? 0 : b[o];
      for (std::size_t i = 0; i < in; ++i) t += w[o * in + i] * x[s * in + i];
      y[s * out + o] = t;
    }
  return y;
}

/// Plain triple loop, C (m x n) = op(A) * op(B).
inline std::vector<Real> gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                              const std::vector<Real>& a, std::size_t lda, const std::vector<Real>& b,
                              std::size_t ldb) {
  std::vector<Real> c(m * n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const Real av = ta ? a[p * lda + i] : a[i * lda + p];
        const Real bv = tb ? b[j * ldb + p] : b[p * ldb + j];
        s += av * bv;
      }
      c[i * n + j] = s;
    }
  return c;
}

/// 8- or 4-connected flood fill; returns the number of components and a
/// label per cell (0 = background, components numbered in scan order).
inline int flood_fill(const std::vector<std::uint8_t>& cells, std::size_t h, std::size_t w, bool eight,
                      std::vector<int>& labels) {
  labels.assign(h * w, 0);
  int next = 0;
  for (std::size_t s = 0; s < h * w; ++s) {
    if (!cells[s] || labels[s]) continue;
    ++next;
    std::vector<std::size_t> stack{s};
    labels[s] = next;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const long y = static_cast<long>(p / w), x = static_cast<long>(p % w);
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (!eight && dy != 0 && dx != 0) continue;
          const long ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (cells[q] && !labels[q]) {
            labels[q] = next;
            stack.push_back(q);
          }
        }
    }
  }
  return next;
}

/// Brute-force Mann-Whitney: wins + ties/2 over all positive/negative pairs.
inline double pairwise_auc(const std::vector<int>& y, const std::vector<double>& s) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  return wins / pairs;
}

/// Central finite difference of f with respect to v[i].
inline double central_diff(const std::function<double()>& f, double& v, double step) {
  const double keep = v;
  v = keep + step;
  const double up = f();
  v = keep - step;
  const double down = f();
  v = keep;
  return (up - down) / (2 * step);
}

}  // namespace oracle
