#pragma once

// Stateless forward/backward operators over Tensor. Layers (layers.hpp) wrap
// these with parameter storage and forward caches.

#include <cstdint>
#include <span>
#include <vector>

#include "p2w/tensor.hpp"

namespace p2w::ops {

enum class Padding { same, valid };

struct PadPlan {
  std::size_t out = 0;
  std::size_t before = 0;
};

/// Output extent and leading pad along one axis. `same` follows the usual
/// ceil(in / stride) rule with the odd pixel of padding placed after.
PadPlan plan_padding(std::size_t in, std::size_t kernel, std::size_t stride,
                     Padding padding);

// ---------------------------------------------------------------- conv2d

/// Cross-correlation. weights: [out_c, in_c, kh, kw]; bias empty or out_c.
Tensor conv2d(const Tensor& input, const Tensor& weights, std::span<const Real> bias,
              std::size_t stride, Padding padding);

struct Conv2dGrads {
  Tensor input;       // empty when not requested
  Tensor weights;
  std::vector<Real> bias;
};

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& weights,
                            bool has_bias, std::size_t stride, Padding padding,
                            const Tensor& grad_out, bool need_input_grad = true,
                            bool need_param_grad = true);

// ---------------------------------------------------------------- pooling

struct PoolResult {
  Tensor output;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

PoolResult maxpool2d(const Tensor& input, std::size_t size, std::size_t stride);
Tensor maxpool2d_backward(const Shape& input_shape,
                          std::span<const std::uint32_t> argmax,
                          const Tensor& grad_out);

/// Mean over size x size windows.
Tensor avgpool2d(const Tensor& input, std::size_t size_h, std::size_t size_w,
                 std::size_t stride);
Tensor avgpool2d_backward(const Shape& input_shape, std::size_t size_h,
                          std::size_t size_w, std::size_t stride,
                          const Tensor& grad_out);

Tensor global_avg_pool(const Tensor& input);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out);

// ---------------------------------------------------------------- batchnorm

enum class BnMode { train, infer };

struct BnState {
  std::span<const Real> gamma;
  std::span<const Real> beta;
  std::span<Real> running_mean;
  std::span<Real> running_var;
  Real momentum = 0.9;
  Real epsilon = 1e-3;
};

struct BnCache {
  std::vector<Real> mean;
  std::vector<Real> inv_std;
  Tensor normalized;
  BnMode mode = BnMode::infer;
};

/// Train mode normalizes by per-channel batch statistics and folds them into
/// the running statistics (running = momentum * running + (1 - momentum) *
/// batch). Infer mode is a fixed per-channel affine map.
Tensor batchnorm(const Tensor& input, const BnState& state, BnMode mode,
                 BnCache* cache = nullptr);

struct BnGrads {
  Tensor input;
  std::vector<Real> gamma;
  std::vector<Real> beta;
};

BnGrads batchnorm_backward(const BnCache& cache, std::span<const Real> gamma,
                           const Tensor& grad_out);

// ---------------------------------------------------------------- activations

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

/// Probability vector with max subtraction.
std::vector<Real> softmax(std::span<const Real> logits);
std::vector<Real> log_softmax(std::span<const Real> logits);

/// Softmax across channels independently at every (n, h, w).
Tensor channel_softmax(const Tensor& input);
Tensor channel_softmax_backward(const Tensor& output, const Tensor& grad_out);

// ---------------------------------------------------------------- dense

/// Flattens each sample to c*h*w and applies weights [out, in] (+ bias).
/// Output [n, out, 1, 1].
Tensor fully_connected(const Tensor& input, const Tensor& weights,
                       std::span<const Real> bias);

struct FcGrads {
  Tensor input;
  Tensor weights;
  std::vector<Real> bias;
};

FcGrads fully_connected_backward(const Tensor& input, const Tensor& weights,
                                 bool has_bias, const Tensor& grad_out,
                                 bool need_input_grad = true);

Tensor residual_add(const Tensor& main, const Tensor& shortcut);

/// Central crop of `margin_h` / `margin_w` cells from each side.
Tensor crop(const Tensor& input, std::size_t margin_h, std::size_t margin_w);
Tensor crop_backward(const Shape& input_shape, std::size_t margin_h,
                     std::size_t margin_w, const Tensor& grad_out);

/// Mirror along the width (horizontal) or height (vertical) axis.
Tensor flip_horizontal(const Tensor& input);
Tensor flip_vertical(const Tensor& input);

/// Concatenate along channels (all other extents equal).
Tensor concat_channels(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------- loss

struct LossResult {
  Real loss = 0;
  Tensor grad;  // d loss / d logits, same shape as logits
};

/// Weighted negative log-likelihood from logits [n, classes, 1, 1]:
/// loss = sum_i w_i * -log softmax(z_i)[t_i] / n.
LossResult cross_entropy(const Tensor& logits, std::span<const int> targets,
                         std::span<const Real> weights);

/// Single-vector form: -w * log softmax(z)[target].
Real cross_entropy(std::span<const Real> logits, int target, Real weight = 1);

}  // namespace p2w::ops
