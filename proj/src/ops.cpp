#include "p2w/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "p2w/error.hpp"
#include "p2w/kernels.hpp"

namespace p2w::ops {
namespace {

std::string dims(std::size_t a, std::size_t b) {
  return std::to_string(a) + "x" + std::to_string(b);
}

struct ConvGeom {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, kh, kw;
  std::size_t stride;
  PadPlan ph, pw;
  std::size_t k() const { return in_c * kh * kw; }
  std::size_t n() const { return ph.out * pw.out; }
  bool direct() const {
    return kh == 1 && kw == 1 && stride == 1 && ph.before == 0 && pw.before == 0;
  }
};

ConvGeom conv_geometry(const Tensor& input, const Tensor& weights,
                       std::size_t stride, Padding padding) {
  const Shape& x = input.shape();
  const Shape& w = weights.shape();
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (w.c != x.c) {
    throw ShapeError("conv2d: weights " + w.str() + " expect " + std::to_string(w.c) +
                     " input channels but input is " + x.str());
  }
  if (padding == Padding::valid && (w.h > x.h || w.w > x.w)) {
    throw ShapeError("conv2d: kernel " + dims(w.h, w.w) + " larger than input " + x.str() +
                     " with valid padding (weights " + w.str() + ")");
  }
  ConvGeom g{x.c, x.h, x.w, w.n, w.h, w.w, stride,
             plan_padding(x.h, w.h, stride, padding), plan_padding(x.w, w.w, stride, padding)};
  if (g.ph.out == 0 || g.pw.out == 0 || w.n == 0) {
    throw ShapeError("conv2d: zero-sized output for input " + x.str() + " and weights " +
                     w.str());
  }
  return g;
}

// Output columns [lo, hi) whose input column ox * stride + k - before lies
// inside [0, in).
std::pair<std::size_t, std::size_t> valid_columns(std::size_t out, std::size_t stride, std::size_t k,
                                                  std::size_t before, std::size_t in) {
  std::size_t lo = 0;
  if (k < before) lo = (before - k + stride - 1) / stride;
  // ox * stride + k - before <= in - 1
  std::size_t hi = 0;
  if (in + before > k) hi = std::min(out, (in + before - k - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

void im2col(const ConvGeom& g, const Real* x, Real* col) {
  const std::size_t oh = g.ph.out, ow = g.pw.out;
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    const Real* xp = x + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        Real* row = col + ((ci * g.kh + ky) * g.kw + kx) * oh * ow;
        const auto [lo, hi] = valid_columns(ow, g.stride, kx, g.pw.before, g.in_w);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.ph.before);
          Real* r = row + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(r, r + ow, Real{0});
            continue;
          }
          std::fill(r, r + lo, Real{0});
          std::fill(r + hi, r + ow, Real{0});
          // Column index lo maps to input column lo * stride + kx - before.
          const Real* src = xp + static_cast<std::size_t>(iy) * g.in_w + lo * g.stride + kx - g.pw.before;
          if (g.stride == 1) {
            std::copy(src, src + (hi - lo), r + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox, src += g.stride) r[ox] = *src;
          }
        }
      }
    }
  }
}

void col2im(const ConvGeom& g, const Real* col, Real* dx) {
  const std::size_t oh = g.ph.out, ow = g.pw.out;
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    Real* xp = dx + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const Real* row = col + ((ci * g.kh + ky) * g.kw + kx) * oh * ow;
        const auto [lo, hi] = valid_columns(ow, g.stride, kx, g.pw.before, g.in_w);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.ph.before);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          Real* dst = xp + static_cast<std::size_t>(iy) * g.in_w + lo * g.stride + kx - g.pw.before;
          const Real* r = row + oy * ow;
          for (std::size_t ox = lo; ox < hi; ++ox, dst += g.stride) *dst += r[ox];
        }
      }
    }
  }
}

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

}  // namespace

PadPlan plan_padding(std::size_t in, std::size_t kernel, std::size_t stride,
                     Padding padding) {
  if (padding == Padding::valid) {
    if (kernel > in) return {0, 0};
    return {(in - kernel) / stride + 1, 0};
  }
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > in ? needed - in : 0;
  return {out, total / 2};
}

Tensor conv2d(const Tensor& input, const Tensor& weights, std::span<const Real> bias,
              std::size_t stride, Padding padding) {
  const ConvGeom g = conv_geometry(input, weights, stride, padding);
  if (!bias.empty() && bias.size() != g.out_c) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) +
                     " does not match weights " + weights.shape().str());
  }
  const std::size_t batch = input.shape().n;
  Tensor out(Shape{batch, g.out_c, g.ph.out, g.pw.out});
  std::vector<Real> col(g.direct() ? 0 : g.k() * g.n());
  for (std::size_t n = 0; n < batch; ++n) {
    const Real* src = input.plane(n);
    if (!g.direct()) {
      im2col(g, src, col.data());
      src = col.data();
    }
    Real* y = out.plane(n);
    for (std::size_t o = 0; o < g.out_c; ++o) {
      std::fill(y + o * g.n(), y + (o + 1) * g.n(), bias.empty() ? Real{0} : bias[o]);
    }
    kernels::gemm(false, false, g.out_c, g.n(), g.k(), weights.raw(), g.k(), src, g.n(), y,
                  g.n(), true);
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& weights, bool has_bias,
                            std::size_t stride, Padding padding, const Tensor& grad_out,
                            bool need_input_grad, bool need_param_grad) {
  const ConvGeom g = conv_geometry(input, weights, stride, padding);
  const std::size_t batch = input.shape().n;
  require_same(grad_out.shape(), Shape{batch, g.out_c, g.ph.out, g.pw.out},
               "conv2d_backward");
  Conv2dGrads grads;
  if (need_param_grad) {
    grads.weights = Tensor(weights.shape());
    if (has_bias) grads.bias.assign(g.out_c, 0);
  }
  if (need_input_grad) grads.input = Tensor(input.shape());
  std::vector<Real> col(g.direct() ? 0 : g.k() * g.n());
  std::vector<Real> dcol(g.direct() ? 0 : g.k() * g.n());
  for (std::size_t n = 0; n < batch; ++n) {
    const Real* dy = grad_out.plane(n);
    if (need_param_grad) {
      const Real* src = input.plane(n);
      if (!g.direct()) {
        im2col(g, src, col.data());
        src = col.data();
      }
      kernels::gemm(false, true, g.out_c, g.k(), g.n(), dy, g.n(), src, g.n(),
                    grads.weights.raw(), g.k(), true);
      if (has_bias) {
        for (std::size_t o = 0; o < g.out_c; ++o) {
          Real s = 0;
          for (std::size_t j = 0; j < g.n(); ++j) s += dy[o * g.n() + j];
          grads.bias[o] += s;
        }
      }
    }
    if (need_input_grad) {
      Real* dx = grads.input.plane(n);
      if (g.direct()) {
        kernels::gemm(true, false, g.k(), g.n(), g.out_c, weights.raw(), g.k(), dy, g.n(), dx,
                      g.n(), false);
      } else {
        kernels::gemm(true, false, g.k(), g.n(), g.out_c, weights.raw(), g.k(), dy, g.n(),
                      dcol.data(), g.n(), false);
        col2im(g, dcol.data(), dx);
      }
    }
  }
  return grads;
}

PoolResult maxpool2d(const Tensor& input, std::size_t size, std::size_t stride) {
  const Shape& x = input.shape();
  if (size == 0 || stride == 0) throw ShapeError("maxpool2d: size and stride must be >= 1");
  if (size > x.h || size > x.w) {
    throw ShapeError("maxpool2d: window " + dims(size, size) + " exceeds input " + x.str());
  }
  const std::size_t oh = (x.h - size) / stride + 1;
  const std::size_t ow = (x.w - size) / stride + 1;
  PoolResult r{Tensor(Shape{x.n, x.c, oh, ow}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t n = 0; n < x.n; ++n) {
    for (std::size_t c = 0; c < x.c; ++c) {
      const std::size_t base = (n * x.c + c) * x.plane();
      const Real* p = input.raw() + base;
      if (size == 2 && stride == 2) {
        // Common case, same scan order and strict comparison as below.
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
            const std::size_t i0 = 2 * oy * x.w + 2 * ox;
            std::size_t best = i0;
            if (p[i0 + 1] > p[best]) best = i0 + 1;
            if (p[i0 + x.w] > p[best]) best = i0 + x.w;
            if (p[i0 + x.w + 1] > p[best]) best = i0 + x.w + 1;
            r.output[o] = p[best];
            r.argmax[o] = static_cast<std::uint32_t>(base + best);
          }
        }
        continue;
      }
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = (oy * stride) * x.w + ox * stride;
          Real bv = p[best];
          for (std::size_t ky = 0; ky < size; ++ky) {
            for (std::size_t kx = 0; kx < size; ++kx) {
              const std::size_t idx = (oy * stride + ky) * x.w + ox * stride + kx;
              if (p[idx] > bv) {
                bv = p[idx];
                best = idx;
              }
            }
          }
          r.output[o] = bv;
          r.argmax[o] = static_cast<std::uint32_t>(base + best);
        }
      }
    }
  }
  return r;
}

Tensor maxpool2d_backward(const Shape& input_shape, std::span<const std::uint32_t> argmax,
                          const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) {
    throw ShapeError("maxpool2d_backward: argmax/grad length mismatch");
  }
  Tensor dx(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += grad_out[i];
  return dx;
}

Tensor avgpool2d(const Tensor& input, std::size_t size_h, std::size_t size_w,
                 std::size_t stride) {
  const Shape& x = input.shape();
  if (size_h == 0 || size_w == 0 || stride == 0) {
    throw ShapeError("avgpool2d: size and stride must be >= 1");
  }
  if (size_h > x.h || size_w > x.w) {
    throw ShapeError("avgpool2d: window " + dims(size_h, size_w) + " exceeds input " +
                     x.str());
  }
  const std::size_t oh = (x.h - size_h) / stride + 1;
  const std::size_t ow = (x.w - size_w) / stride + 1;
  const Real count = static_cast<Real>(size_h * size_w);
  Tensor out(Shape{x.n, x.c, oh, ow});
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < x.n * x.c; ++nc) {
    const Real* p = input.raw() + nc * x.plane();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        Real s = 0;
        for (std::size_t ky = 0; ky < size_h; ++ky) {
          const Real* row = p + (oy * stride + ky) * x.w + ox * stride;
          for (std::size_t kx = 0; kx < size_w; ++kx) s += row[kx];
        }
        out[o] = s / count;
      }
    }
  }
  return out;
}

Tensor avgpool2d_backward(const Shape& input_shape, std::size_t size_h, std::size_t size_w,
                          std::size_t stride, const Tensor& grad_out) {
  const Shape& x = input_shape;
  const Shape& y = grad_out.shape();
  const Real count = static_cast<Real>(size_h * size_w);
  Tensor dx(x);
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < x.n * x.c; ++nc) {
    Real* p = dx.raw() + nc * x.plane();
    for (std::size_t oy = 0; oy < y.h; ++oy) {
      for (std::size_t ox = 0; ox < y.w; ++ox, ++o) {
        const Real g = grad_out[o] / count;
        for (std::size_t ky = 0; ky < size_h; ++ky) {
          Real* row = p + (oy * stride + ky) * x.w + ox * stride;
          for (std::size_t kx = 0; kx < size_w; ++kx) row[kx] += g;
        }
      }
    }
  }
  return dx;
}

Tensor global_avg_pool(const Tensor& input) {
  const Shape& x = input.shape();
  if (x.h == 0 || x.w == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  // Same summation order as a full-window avgpool2d.
  return avgpool2d(input, x.h, x.w, 1);
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  return avgpool2d_backward(input_shape, input_shape.h, input_shape.w, 1, grad_out);
}

Tensor batchnorm(const Tensor& input, const BnState& st, BnMode mode, BnCache* cache) {
  const Shape& x = input.shape();
  if (!(st.epsilon > 0)) throw ShapeError("batchnorm: epsilon must be positive");
  if (st.gamma.size() != x.c || st.beta.size() != x.c || st.running_mean.size() != x.c ||
      st.running_var.size() != x.c) {
    throw ShapeError("batchnorm: parameter length does not match channels of " + x.str());
  }
  const std::size_t hw = x.plane();
  std::vector<Real> mean(x.c), inv_std(x.c);
  if (mode == BnMode::train) {
    const Real count = static_cast<Real>(x.n * hw);
    for (std::size_t c = 0; c < x.c; ++c) {
      Real s = 0;
      for (std::size_t n = 0; n < x.n; ++n) {
        const Real* p = input.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const Real mu = s / count;
      Real v = 0;
      for (std::size_t n = 0; n < x.n; ++n) {
        const Real* p = input.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      v /= count;
      mean[c] = mu;
      inv_std[c] = 1 / std::sqrt(v + st.epsilon);
      st.running_mean[c] = st.momentum * st.running_mean[c] + (1 - st.momentum) * mu;
      st.running_var[c] = st.momentum * st.running_var[c] + (1 - st.momentum) * v;
    }
  } else {
    for (std::size_t c = 0; c < x.c; ++c) {
      mean[c] = st.running_mean[c];
      inv_std[c] = 1 / std::sqrt(st.running_var[c] + st.epsilon);
    }
  }
  Tensor out(x);
  Tensor normalized;
  if (cache) normalized = Tensor(x);
  for (std::size_t n = 0; n < x.n; ++n) {
    for (std::size_t c = 0; c < x.c; ++c) {
      const Real* p = input.plane(n, c);
      Real* q = out.plane(n, c);
      Real* z = normalized.empty() ? nullptr : normalized.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        const Real xhat = (p[i] - mean[c]) * inv_std[c];
        if (z) z[i] = xhat;
        q[i] = st.gamma[c] * xhat + st.beta[c];
      }
    }
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->normalized = std::move(normalized);
    cache->mode = mode;
  }
  return out;
}

BnGrads batchnorm_backward(const BnCache& cache, std::span<const Real> gamma,
                           const Tensor& grad_out) {
  const Shape& x = grad_out.shape();
  const std::size_t hw = x.plane();
  BnGrads g{Tensor(x), std::vector<Real>(x.c, 0), std::vector<Real>(x.c, 0)};
  if (cache.mode == BnMode::infer) {
    // Fixed affine map: statistics do not depend on the input.
    for (std::size_t n = 0; n < x.n; ++n) {
      for (std::size_t c = 0; c < x.c; ++c) {
        const Real* dy = grad_out.plane(n, c);
        const Real* xh = cache.normalized.plane(n, c);
        Real* dx = g.input.plane(n, c);
        const Real s = gamma[c] * cache.inv_std[c];
        for (std::size_t i = 0; i < hw; ++i) {
          dx[i] = dy[i] * s;
          g.beta[c] += dy[i];
          g.gamma[c] += dy[i] * xh[i];
        }
      }
    }
    return g;
  }
  const Real count = static_cast<Real>(x.n * hw);
  for (std::size_t c = 0; c < x.c; ++c) {
    Real sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < x.n; ++n) {
      const Real* dy = grad_out.plane(n, c);
      const Real* xh = cache.normalized.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xhat;
    const Real scale = gamma[c] * cache.inv_std[c] / count;
    for (std::size_t n = 0; n < x.n; ++n) {
      const Real* dy = grad_out.plane(n, c);
      const Real* xh = cache.normalized.plane(n, c);
      Real* dx = g.input.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        dx[i] = scale * (count * dy[i] - sum_dy - xh[i] * sum_dy_xhat);
      }
    }
  }
  return g;
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0 ? input[i] : Real{0};
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require_same(input.shape(), grad_out.shape(), "relu_backward");
  Tensor dx(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) dx[i] = input[i] > 0 ? grad_out[i] : Real{0};
  return dx;
}

std::vector<Real> softmax(std::span<const Real> z) {
  std::vector<Real> p(z.size());
  if (z.empty()) return p;
  const Real mx = *std::max_element(z.begin(), z.end());
  Real s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

std::vector<Real> log_softmax(std::span<const Real> z) {
  std::vector<Real> out(z.size());
  if (z.empty()) return out;
  const Real mx = *std::max_element(z.begin(), z.end());
  Real s = 0;
  for (const Real v : z) s += std::exp(v - mx);
  const Real lse = mx + std::log(s);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

Tensor channel_softmax(const Tensor& input) {
  const Shape& x = input.shape();
  Tensor out(x);
  std::vector<Real> cell(x.c);
  for (std::size_t n = 0; n < x.n; ++n) {
    for (std::size_t i = 0; i < x.plane(); ++i) {
      for (std::size_t c = 0; c < x.c; ++c) cell[c] = input.plane(n, c)[i];
      const auto p = softmax(cell);
      for (std::size_t c = 0; c < x.c; ++c) out.plane(n, c)[i] = p[c];
    }
  }
  return out;
}

Tensor channel_softmax_backward(const Tensor& output, const Tensor& grad_out) {
  require_same(output.shape(), grad_out.shape(), "channel_softmax_backward");
  const Shape& x = output.shape();
  Tensor dx(x);
  for (std::size_t n = 0; n < x.n; ++n) {
    for (std::size_t i = 0; i < x.plane(); ++i) {
      Real s = 0;
      for (std::size_t c = 0; c < x.c; ++c) s += output.plane(n, c)[i] * grad_out.plane(n, c)[i];
      for (std::size_t c = 0; c < x.c; ++c) {
        const Real y = output.plane(n, c)[i];
        dx.plane(n, c)[i] = y * (grad_out.plane(n, c)[i] - s);
      }
    }
  }
  return dx;
}

Tensor fully_connected(const Tensor& input, const Tensor& weights,
                       std::span<const Real> bias) {
  const Shape& x = input.shape();
  const Shape& w = weights.shape();
  const std::size_t in = x.sample();
  if (w.c * w.h * w.w != in) {
    throw ShapeError("fully_connected: weights " + w.str() + " do not accept input " + x.str());
  }
  if (!bias.empty() && bias.size() != w.n) {
    throw ShapeError("fully_connected: bias length " + std::to_string(bias.size()) +
                     " does not match weights " + w.str());
  }
  Tensor out(Shape{x.n, w.n, 1, 1});
  for (std::size_t n = 0; n < x.n; ++n) {
    Real* y = out.plane(n);
    for (std::size_t o = 0; o < w.n; ++o) y[o] = bias.empty() ? Real{0} : bias[o];
    // [out, in] x [in, 1]; same per-element order as a 1x1 convolution.
    kernels::gemm(false, false, w.n, 1, in, weights.raw(), in, input.plane(n), 1, y, 1, true);
  }
  return out;
}

FcGrads fully_connected_backward(const Tensor& input, const Tensor& weights, bool has_bias,
                                 const Tensor& grad_out, bool need_input_grad) {
  const Shape& x = input.shape();
  const Shape& w = weights.shape();
  const std::size_t in = x.sample();
  require_same(grad_out.shape(), Shape{x.n, w.n, 1, 1}, "fully_connected_backward");
  FcGrads g{need_input_grad ? Tensor(x) : Tensor(), Tensor(w), {}};
  if (has_bias) g.bias.assign(w.n, 0);
  // dW[out, in] = dY^T[out, n] * X[n, in]
  kernels::gemm(true, false, w.n, in, x.n, grad_out.raw(), w.n, input.raw(), in,
                g.weights.raw(), in, false);
  if (has_bias) {
    for (std::size_t n = 0; n < x.n; ++n) {
      for (std::size_t o = 0; o < w.n; ++o) g.bias[o] += grad_out.plane(n)[o];
    }
  }
  if (need_input_grad) {
    // dX[n, in] = dY[n, out] * W[out, in]
    kernels::gemm(false, false, x.n, in, w.n, grad_out.raw(), w.n, weights.raw(), in,
                  g.input.raw(), in, false);
  }
  return g;
}

Tensor residual_add(const Tensor& main, const Tensor& shortcut) {
  require_same(main.shape(), shortcut.shape(), "residual_add");
  Tensor out(main.shape());
  for (std::size_t i = 0; i < main.size(); ++i) out[i] = main[i] + shortcut[i];
  return out;
}

Tensor crop(const Tensor& input, std::size_t mh, std::size_t mw) {
  const Shape& x = input.shape();
  if (2 * mh >= x.h || 2 * mw >= x.w) {
    throw ShapeError("crop: margins " + dims(mh, mw) + " consume input " + x.str());
  }
  Tensor out(Shape{x.n, x.c, x.h - 2 * mh, x.w - 2 * mw});
  const Shape& y = out.shape();
  for (std::size_t nc = 0; nc < x.n * x.c; ++nc) {
    for (std::size_t r = 0; r < y.h; ++r) {
      const Real* src = input.raw() + nc * x.plane() + (r + mh) * x.w + mw;
      std::copy(src, src + y.w, out.raw() + nc * y.plane() + r * y.w);
    }
  }
  return out;
}

Tensor crop_backward(const Shape& input_shape, std::size_t mh, std::size_t mw,
                     const Tensor& grad_out) {
  const Shape& x = input_shape;
  const Shape& y = grad_out.shape();
  Tensor dx(x);
  for (std::size_t nc = 0; nc < x.n * x.c; ++nc) {
    for (std::size_t r = 0; r < y.h; ++r) {
      const Real* src = grad_out.raw() + nc * y.plane() + r * y.w;
      std::copy(src, src + y.w, dx.raw() + nc * x.plane() + (r + mh) * x.w + mw);
    }
  }
  return dx;
}

Tensor flip_horizontal(const Tensor& input) {
  const Shape& s = input.shape();
  Tensor out(s);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const Real* src = input.raw() + p * s.plane();
    Real* dst = out.raw() + p * s.plane();
    for (std::size_t y = 0; y < s.h; ++y) {
      for (std::size_t x = 0; x < s.w; ++x) dst[y * s.w + x] = src[y * s.w + (s.w - 1 - x)];
    }
  }
  return out;
}

Tensor flip_vertical(const Tensor& input) {
  const Shape& s = input.shape();
  Tensor out(s);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const Real* src = input.raw() + p * s.plane();
    Real* dst = out.raw() + p * s.plane();
    for (std::size_t y = 0; y < s.h; ++y) {
      std::copy(src + (s.h - 1 - y) * s.w, src + (s.h - y) * s.w, dst + y * s.w);
    }
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: shape mismatch " + sa.str() + " vs " + sb.str());
  }
  Tensor out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy(a.plane(n), a.plane(n) + sa.sample(), out.plane(n));
    std::copy(b.plane(n), b.plane(n) + sb.sample(), out.plane(n) + sa.sample());
  }
  return out;
}

LossResult cross_entropy(const Tensor& logits, std::span<const int> targets,
                         std::span<const Real> weights) {
  const Shape& s = logits.shape();
  const std::size_t classes = s.sample();
  if (targets.size() != s.n || (!weights.empty() && weights.size() != s.n)) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     s.str());
  }
  LossResult r{0, Tensor(s)};
  const Real inv_n = 1 / static_cast<Real>(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    const int t = targets[n];
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw ShapeError("cross_entropy: class " + std::to_string(t) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const Real w = weights.empty() ? Real{1} : weights[n];
    std::span<const Real> z(logits.plane(n), classes);
    const auto ls = log_softmax(z);
    r.loss -= w * ls[static_cast<std::size_t>(t)] * inv_n;
    Real* g = r.grad.plane(n);
    for (std::size_t c = 0; c < classes; ++c) {
      const Real p = std::exp(ls[c]);
      g[c] = w * inv_n * (p - (static_cast<std::size_t>(t) == c ? Real{1} : Real{0}));
    }
  }
  return r;
}

Real cross_entropy(std::span<const Real> logits, int target, Real weight) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw ShapeError("cross_entropy: class " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  }
  return -weight * log_softmax(logits)[static_cast<std::size_t>(target)];
}

}  // namespace p2w::ops
