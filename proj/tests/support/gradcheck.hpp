#pragma once

// Finite-difference gradient checks for every operator and composite layer.
// Each case draws a random configuration from its seed, reduces the output to
// a scalar with random weights, and compares the analytic gradient of that
// scalar with central differences on a sample of elements.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "p2w/layers.hpp"
#include "p2w/netgraph.hpp"
#include "p2w/ops.hpp"

namespace gradcheck {

using namespace p2w;

inline constexpr double kStep = 1e-4;
inline constexpr double kTolerance = 1e-6;
// Denominator floor: gradients below it are effectively compared with an
// absolute tolerance of kTolerance * kFloor = 1e-9. Round-off in a step-h/4
// difference of an O(1) loss is about 1e-14 / 5e-5 = 2e-10, so exactly-zero
// gradients (a bias ahead of batchnorm) stay above the noise.
inline constexpr double kFloor = 1e-3;

struct Report {
  std::string name;
  double max_rel = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // finite differences straddling a ReLU / max kink
  bool pass() const { return checked > 0 && max_rel <= kTolerance; }
};

struct Target {
  Real* values;
  std::size_t size;
  std::vector<Real> analytic;
};

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kFloor});
}

/// Central differences at two step sizes; a disagreement between them means
/// the perturbation crossed a non-differentiable point and the element is
/// skipped rather than scored.
inline void compare(Report& r, const std::function<double()>& loss, std::vector<Target>& targets,
                    std::mt19937_64& gen, std::size_t per_target = 24) {
  for (auto& t : targets) {
    std::vector<std::size_t> idx(t.size);
    for (std::size_t i = 0; i < t.size; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), gen);
    if (idx.size() > per_target) idx.resize(per_target);
    for (const std::size_t i : idx) {
      const double n1 = oracle::central_diff(loss, t.values[i], kStep);
      const double n2 = oracle::central_diff(loss, t.values[i], kStep / 4);
      // A kink sitting exactly at the evaluation point is symmetric, so the
      // two central estimates agree; the one-sided slopes do not.
      const double keep = t.values[i], f0 = loss();
      t.values[i] = keep + kStep / 4;
      const double up = (loss() - f0) / (kStep / 4);
      t.values[i] = keep - kStep / 4;
      const double down = (f0 - loss()) / (kStep / 4);
      t.values[i] = keep;
      const double scale = std::max({std::abs(n1), std::abs(n2), kFloor});
      if (std::abs(n1 - n2) > 1e-5 * scale || std::abs(up - down) > 1e-2 * scale) {
        ++r.skipped;
        continue;
      }
      // Richardson combination cancels the leading h^2 truncation term.
      const double n = (16 * n2 - n1) / 15;
      r.max_rel = std::max(r.max_rel, rel_error(t.analytic[i], n));
      ++r.checked;
    }
  }
}

inline Tensor weights_like(const Shape& s, std::mt19937_64& g) { return oracle::random_tensor(s, g); }

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::size_t pick(std::mt19937_64& g, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(g);
}

inline Target target_of(Tensor& t, const Tensor& grad) {
  return {t.raw(), t.size(), std::vector<Real>(grad.data().begin(), grad.data().end())};
}
inline Target target_of(std::vector<Real>& v, const std::vector<Real>& grad) { return {v.data(), v.size(), grad}; }

// ------------------------------------------------------------- operators

inline Report conv2d_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t k = pick(g, 1, 3), stride = pick(g, 1, 2);
  const bool same = pick(g, 0, 1) == 1;
  Tensor x = oracle::random_tensor({pick(g, 1, 2), pick(g, 1, 3), pick(g, k, 7), pick(g, k, 7)}, g);
  Tensor w = weights_like({pick(g, 1, 4), x.shape().c, k, k}, g);
  std::vector<Real> b(w.shape().n);
  for (auto& v : b) v = std::uniform_real_distribution<Real>(-1, 1)(g);
  const ops::Padding pad = same ? ops::Padding::same : ops::Padding::valid;
  const Tensor y0 = ops::conv2d(x, w, b, stride, pad);
  const Tensor r = oracle::random_tensor(y0.shape(), g);
  auto loss = [&] { return dot(ops::conv2d(x, w, b, stride, pad), r); };
  auto grads = ops::conv2d_backward(x, w, true, stride, pad, r);
  std::vector<Target> t{target_of(x, grads.input), target_of(w, grads.weights), target_of(b, grads.bias)};
  Report rep{"conv2d k" + std::to_string(k) + " s" + std::to_string(stride) + (same ? " same" : " valid")};
  compare(rep, loss, t, g);
  return rep;
}

inline Report maxpool_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t size = pick(g, 2, 3), stride = pick(g, 1, 2);
  Tensor x = oracle::random_tensor({pick(g, 1, 2), pick(g, 1, 3), pick(g, size, 7), pick(g, size, 7)}, g);
  const auto y0 = ops::maxpool2d(x, size, stride);
  const Tensor r = oracle::random_tensor(y0.output.shape(), g);
  auto loss = [&] { return dot(ops::maxpool2d(x, size, stride).output, r); };
  std::vector<Target> t{target_of(x, ops::maxpool2d_backward(x.shape(), y0.argmax, r))};
  Report rep{"maxpool " + std::to_string(size) + "/" + std::to_string(stride)};
  compare(rep, loss, t, g, 64);
  return rep;
}

inline Report avgpool_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t sh = pick(g, 1, 3), sw = pick(g, 1, 3), stride = pick(g, 1, 2);
  Tensor x = oracle::random_tensor({pick(g, 1, 2), pick(g, 1, 3), pick(g, sh, 7), pick(g, sw, 7)}, g);
  const Tensor r = oracle::random_tensor(ops::avgpool2d(x, sh, sw, stride).shape(), g);
  auto loss = [&] { return dot(ops::avgpool2d(x, sh, sw, stride), r); };
  std::vector<Target> t{target_of(x, ops::avgpool2d_backward(x.shape(), sh, sw, stride, r))};
  Report rep{"avgpool"};
  compare(rep, loss, t, g);
  return rep;
}

inline Report gap_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  Tensor x = oracle::random_tensor({pick(g, 1, 3), pick(g, 1, 4), pick(g, 1, 6), pick(g, 1, 6)}, g);
  const Tensor r = oracle::random_tensor({x.shape().n, x.shape().c, 1, 1}, g);
  auto loss = [&] { return dot(ops::global_avg_pool(x), r); };
  std::vector<Target> t{target_of(x, ops::global_avg_pool_backward(x.shape(), r))};
  Report rep{"global_avg_pool"};
  compare(rep, loss, t, g);
  return rep;
}

inline Report batchnorm_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const bool train = seed % 2 == 0;
  Tensor x = oracle::random_tensor({pick(g, 2, 3), pick(g, 1, 3), pick(g, 1, 4), pick(g, 2, 4)}, g, -2, 3);
  const std::size_t c = x.shape().c;
  std::vector<Real> gamma(c), beta(c), mean(c), var(c);
  std::uniform_real_distribution<Real> d(0.5, 1.5), e(-0.5, 0.5);
  for (std::size_t i = 0; i < c; ++i) {
    gamma[i] = d(g);
    beta[i] = e(g);
    mean[i] = e(g);
    var[i] = d(g);
  }
  const ops::BnMode mode = train ? ops::BnMode::train : ops::BnMode::infer;
  auto run = [&](ops::BnCache* cache) {
    auto m = mean;
    auto v = var;
    return ops::batchnorm(x, {gamma, beta, m, v, 0.9, 1e-3}, mode, cache);
  };
  ops::BnCache cache;
  const Tensor r = oracle::random_tensor(run(&cache).shape(), g);
  auto loss = [&] { return dot(run(nullptr), r); };
  auto grads = ops::batchnorm_backward(cache, gamma, r);
  std::vector<Target> t{target_of(x, grads.input)};
  if (train) {
    t.push_back(target_of(gamma, grads.gamma));
    t.push_back(target_of(beta, grads.beta));
  }
  Report rep{train ? "batchnorm train" : "batchnorm infer"};
  compare(rep, loss, t, g);
  return rep;
}

inline Report relu_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  Tensor x = oracle::random_tensor({1, pick(g, 1, 3), pick(g, 1, 5), pick(g, 1, 5)}, g);
  // Keep the sampled inputs away from the kink as the skip rule prescribes.
  for (Real& v : x.data()) {
    if (std::abs(v) < 1e-6) v = 0.5;
  }
  const Tensor r = oracle::random_tensor(x.shape(), g);
  auto loss = [&] { return dot(ops::relu(x), r); };
  std::vector<Target> t{target_of(x, ops::relu_backward(x, r))};
  Report rep{"relu"};
  compare(rep, loss, t, g, 64);
  return rep;
}

inline Report channel_softmax_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  Tensor x = oracle::random_tensor({pick(g, 1, 2), pick(g, 2, 5), pick(g, 1, 4), pick(g, 1, 4)}, g, -3, 3);
  const Tensor r = oracle::random_tensor(x.shape(), g);
  auto loss = [&] { return dot(ops::channel_softmax(x), r); };
  std::vector<Target> t{target_of(x, ops::channel_softmax_backward(ops::channel_softmax(x), r))};
  Report rep{"channel_softmax"};
  compare(rep, loss, t, g);
  return rep;
}

inline Report dense_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  Tensor x = oracle::random_tensor({pick(g, 1, 3), pick(g, 1, 4), pick(g, 1, 3), pick(g, 1, 3)}, g);
  Tensor w = weights_like({pick(g, 1, 6), x.shape().sample(), 1, 1}, g);
  std::vector<Real> b(w.shape().n);
  for (auto& v : b) v = std::uniform_real_distribution<Real>(-1, 1)(g);
  const Tensor r = oracle::random_tensor({x.shape().n, w.shape().n, 1, 1}, g);
  auto loss = [&] { return dot(ops::fully_connected(x, w, b), r); };
  auto grads = ops::fully_connected_backward(x, w, true, r);
  std::vector<Target> t{target_of(x, grads.input), target_of(w, grads.weights), target_of(b, grads.bias)};
  Report rep{"fully_connected"};
  compare(rep, loss, t, g);
  return rep;
}

inline Report residual_add_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const Shape s{pick(g, 1, 2), pick(g, 1, 3), pick(g, 1, 4), pick(g, 1, 4)};
  Tensor a = oracle::random_tensor(s, g), b = oracle::random_tensor(s, g);
  const Tensor r = oracle::random_tensor(s, g);
  auto loss = [&] { return dot(ops::residual_add(a, b), r); };
  // Sum rule: both branches receive the upstream gradient unchanged.
  std::vector<Target> t{target_of(a, r), target_of(b, r)};
  Report rep{"residual_add"};
  compare(rep, loss, t, g);
  return rep;
}

inline Report crop_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t mh = pick(g, 0, 2), mw = pick(g, 0, 2);
  Tensor x = oracle::random_tensor({1, pick(g, 1, 3), 2 * mh + pick(g, 1, 3), 2 * mw + pick(g, 1, 3)}, g);
  const Tensor r = oracle::random_tensor(ops::crop(x, mh, mw).shape(), g);
  auto loss = [&] { return dot(ops::crop(x, mh, mw), r); };
  std::vector<Target> t{target_of(x, ops::crop_backward(x.shape(), mh, mw, r))};
  Report rep{"crop"};
  compare(rep, loss, t, g);
  return rep;
}

inline Report cross_entropy_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t n = pick(g, 1, 4), c = pick(g, 2, 5);
  Tensor z = oracle::random_tensor({n, c, 1, 1}, g, -3, 3);
  std::vector<int> y(n);
  std::vector<Real> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(pick(g, 0, c - 1));
    w[i] = std::uniform_real_distribution<Real>(0.2, 2)(g);
  }
  auto loss = [&] { return ops::cross_entropy(z, y, w).loss; };
  std::vector<Target> t{target_of(z, ops::cross_entropy(z, y, w).grad)};
  Report rep{"cross_entropy"};
  compare(rep, loss, t, g);
  return rep;
}

// ----------------------------------------------------------------- layers

inline void zero_param_grads(Layer& l) {
  std::vector<ParamRef> ps;
  l.collect_params(ps);
  for (auto& p : ps) {
    p.value->ensure_grad();
    p.value->zero_grad();
  }
}

/// Gradient of sum(r * layer(x)) w.r.t. the input and every parameter.
inline void check_layer(Report& rep, Layer& layer, Tensor& x, Mode mode, std::mt19937_64& g,
                        std::size_t per_target = 16) {
  zero_param_grads(layer);
  const Tensor y = layer.forward(x, mode);
  const Tensor r = oracle::random_tensor(y.shape(), g);
  const Tensor dx = layer.backward(r, true);
  std::vector<Target> t{target_of(x, dx)};
  std::vector<ParamRef> ps;
  layer.collect_params(ps);
  for (auto& p : ps) {
    if (p.value->has_grad()) {
      t.push_back({p.value->raw(), p.value->size(), std::vector<Real>(p.value->grad().begin(), p.value->grad().end())});
    }
  }
  auto loss = [&] { return dot(layer.forward(x, mode), r); };
  compare(rep, loss, t, g, per_target);
}

inline void randomize_bn(Layer& root, std::mt19937_64& g) {
  std::vector<Layer*> leaves;
  root.collect_leaves(leaves);
  std::uniform_real_distribution<Real> d(0.5, 1.5), e(-0.3, 0.3);
  for (Layer* l : leaves) {
    if (auto* bn = dynamic_cast<BatchNorm*>(l)) {
      for (Real& v : bn->gamma().data()) v = d(g);
      for (Real& v : bn->beta().data()) v = e(g);
      for (Real& v : bn->running_mean()) v = e(g);
      for (Real& v : bn->running_var()) v = d(g);
    }
  }
}

inline Report resunit_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t stride = pick(g, 1, 2);
  const bool valid = pick(g, 0, 1) == 1;
  const std::size_t in_c = pick(g, 2, 4), n = pick(g, 0, 1) ? in_c : pick(g, 2, 5);
  ResidualUnit unit("u", in_c, pick(g, 1, 3), pick(g, 1, 3), n, stride, valid ? ops::Padding::valid : ops::Padding::same);
  Rng rng(seed);
  initialize_layers(unit, rng);
  randomize_bn(unit, g);
  const std::size_t lo = valid ? 3 * stride + 1 : 2;
  Tensor x = oracle::random_tensor({2, in_c, pick(g, lo, lo + 3), pick(g, lo, lo + 3)}, g);
  const Mode mode = seed % 3 == 0 ? Mode::infer : Mode::train;
  Report rep{std::string("resunit s") + std::to_string(stride) + (valid ? " valid" : " same") +
             (mode == Mode::train ? " train" : " infer")};
  check_layer(rep, unit, x, mode, g);
  return rep;
}

inline Report fctop_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t c = pick(g, 2, 5), h = pick(g, 2, 6), w = pick(g, 2, 6);
  const std::size_t pool = pick(g, 1, std::min(h, w));
  const bool shortcut = seed % 2 == 0;
  FcTop top("top", c, h, w, pool, pick(g, 2, 6), pick(g, 2, 5), shortcut, 2);
  Rng rng(seed);
  top.initialize(rng);
  Tensor x = oracle::random_tensor({2, c, h, w}, g);
  Report rep{std::string("fc_top pool") + std::to_string(pool) + (shortcut ? " shortcut" : "")};
  check_layer(rep, top, x, Mode::train, g);
  return rep;
}

/// Whole network: cross-entropy over a random batch, gradients w.r.t. every
/// parameter tensor and the input image.
inline Report model_case(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const std::size_t kind = seed % 4;
  std::vector<BlockSpec> stem{BlockSpec::vgg(3, 1, kind % 2 == 0), BlockSpec::resnet(2, 2, 4, 1)};
  Model patch = build_patch_classifier(stem, 8, 8, 3, ops::Padding::same, seed);
  Model model = patch;
  std::string name = "patch model";
  std::size_t side = 8;
  if (kind >= 2) {
    ConversionSpec cv;
    cv.variant = kind == 2 ? Variant::allconv_no_heatmap : Variant::allconv_with_heatmap;
    cv.activation = seed % 8 < 4 ? HeatmapActivation::relu : HeatmapActivation::softmax;
    cv.top = {BlockSpec::resnet(2, 2, 3, 1)};
    cv.seed = seed;
    model = convert_to_whole_image(patch, cv);
    name = std::string(to_string(cv.variant));
    side = 12;
  }
  randomize_bn(model.net(), g);
  Tensor x = oracle::random_tensor({2, 1, side, side}, g);
  const std::vector<int> y{0, 1};
  const std::vector<Real> wts{1, 1};
  model.zero_grad();
  const Tensor logits = model.forward(x, Mode::train);
  const auto ce = ops::cross_entropy(logits, y, wts);
  const Tensor dx = model.backward(ce.grad, true);
  std::vector<Target> t{target_of(x, dx)};
  for (auto& p : model.params()) {
    t.push_back({p.value->raw(), p.value->size(), std::vector<Real>(p.value->grad().begin(), p.value->grad().end())});
  }
  auto loss = [&] { return ops::cross_entropy(model.forward(x, Mode::train), y, wts).loss; };
  Report rep{name};
  compare(rep, loss, t, g, 6);
  return rep;
}

struct Case {
  const char* name;
  Report (*run)(std::uint64_t);
};

inline const std::vector<Case>& all_cases() {
  static const std::vector<Case> cases{
      {"conv2d", conv2d_case},           {"maxpool2d", maxpool_case},    {"avgpool2d", avgpool_case},
      {"global_avg_pool", gap_case},     {"batchnorm", batchnorm_case},  {"relu", relu_case},
      {"channel_softmax", channel_softmax_case}, {"fully_connected", dense_case},
      {"residual_add", residual_add_case}, {"crop", crop_case},         {"cross_entropy", cross_entropy_case},
      {"resunit", resunit_case},         {"fc_top", fctop_case},         {"model", model_case},
  };
  return cases;
}

}  // namespace gradcheck
