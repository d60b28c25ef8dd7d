#include "p2w/layers.hpp"

#include <cmath>

#include "p2w/error.hpp"

namespace p2w {

void Layer::collect_leaves(std::vector<Layer*>& out) {
  if (has_params()) out.push_back(this);
}

// ------------------------------------------------------------------ Conv2d

Conv2d::Conv2d(std::string name, std::size_t in_c, std::size_t out_c, std::size_t kernel,
               std::size_t stride, ops::Padding padding, bool bias)
    : Layer(std::move(name)),
      weights_(Shape{out_c, in_c, kernel, kernel}),
      bias_(bias ? Tensor(Shape{out_c, 1, 1, 1}) : Tensor()),
      stride_(stride),
      padding_(padding) {
  if (stride == 0 || kernel == 0) throw ShapeError("conv2d " + name_ + ": zero kernel or stride");
  weights_.ensure_grad();
  if (bias) bias_.ensure_grad();
}

void Conv2d::initialize(Rng& rng) {
  const Shape& s = weights_.shape();
  const Real limit = std::sqrt(Real{6} / static_cast<Real>(s.c * s.h * s.w));
  for (auto& v : weights_.data()) v = rng.uniform(-limit, limit);
  bias_.fill(0);
}

Tensor Conv2d::forward(const Tensor& x, Mode) {
  cache_input_ = x;
  return ops::conv2d(x, weights_, bias_.data(), stride_, padding_);
}

Tensor Conv2d::backward(const Tensor& grad_out, bool need_input_grad) {
  const bool need_params = !frozen_;
  auto g = ops::conv2d_backward(cache_input_, weights_, has_bias(), stride_, padding_,
                                grad_out, need_input_grad, need_params);
  if (need_params) {
    auto wg = weights_.grad();
    for (std::size_t i = 0; i < wg.size(); ++i) wg[i] += g.weights[i];
    if (has_bias()) {
      auto bg = bias_.grad();
      for (std::size_t i = 0; i < bg.size(); ++i) bg[i] += g.bias[i];
    }
  }
  return std::move(g.input);
}

void Conv2d::collect_params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".weight", &weights_, true});
  if (has_bias()) out.push_back({name_ + ".bias", &bias_, false});
}

void Conv2d::collect_windows(std::vector<Window>& out) const {
  const std::size_t k = weights_.shape().h;
  std::size_t pad = 0;
  if (padding_ == ops::Padding::same) pad = (k > stride_ ? k - stride_ : 0) / 2;
  out.push_back({k, stride_, pad});
}

// --------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(std::string name, std::size_t channels, Real momentum, Real epsilon)
    : Layer(std::move(name)),
      gamma_(Shape{channels, 1, 1, 1}, 1),
      beta_(Shape{channels, 1, 1, 1}, 0),
      running_mean_(channels, 0),
      running_var_(channels, 1),
      momentum_(momentum),
      epsilon_(epsilon) {
  gamma_.ensure_grad();
  beta_.ensure_grad();
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  const ops::BnMode m = (mode == Mode::train && !frozen_) ? ops::BnMode::train
                                                          : ops::BnMode::infer;
  ops::BnState st{gamma_.data(), beta_.data(), running_mean_, running_var_, momentum_,
                  epsilon_};
  return ops::batchnorm(x, st, m, &cache_);
}

Tensor BatchNorm::backward(const Tensor& grad_out, bool) {
  auto g = ops::batchnorm_backward(cache_, gamma_.data(), grad_out);
  if (!frozen_) {
    auto gg = gamma_.grad();
    auto bg = beta_.grad();
    for (std::size_t i = 0; i < gg.size(); ++i) {
      gg[i] += g.gamma[i];
      bg[i] += g.beta[i];
    }
  }
  return std::move(g.input);
}

void BatchNorm::collect_params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".gamma", &gamma_, false});
  out.push_back({name_ + ".beta", &beta_, false});
}

void BatchNorm::collect_state(std::vector<StateRef>& out) {
  out.push_back({name_ + ".running_mean", &running_mean_});
  out.push_back({name_ + ".running_var", &running_var_});
}

// ------------------------------------------------------------- activations

Tensor Relu::forward(const Tensor& x, Mode) {
  cache_input_ = x;
  return ops::relu(x);
}

Tensor Relu::backward(const Tensor& grad_out, bool) {
  return ops::relu_backward(cache_input_, grad_out);
}

Tensor ChannelSoftmax::forward(const Tensor& x, Mode) {
  cache_output_ = ops::channel_softmax(x);
  return cache_output_;
}

Tensor ChannelSoftmax::backward(const Tensor& grad_out, bool) {
  return ops::channel_softmax_backward(cache_output_, grad_out);
}

// ----------------------------------------------------------------- pooling

Tensor MaxPool::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  auto r = ops::maxpool2d(x, size_, stride_);
  argmax_ = std::move(r.argmax);
  return std::move(r.output);
}

Tensor MaxPool::backward(const Tensor& grad_out, bool) {
  return ops::maxpool2d_backward(in_shape_, argmax_, grad_out);
}

void MaxPool::collect_windows(std::vector<Window>& out) const {
  out.push_back({size_, stride_, 0});
}

Tensor AvgPool::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  return ops::avgpool2d(x, size_h_, size_w_, stride_);
}

Tensor AvgPool::backward(const Tensor& grad_out, bool) {
  return ops::avgpool2d_backward(in_shape_, size_h_, size_w_, stride_, grad_out);
}

void AvgPool::collect_windows(std::vector<Window>& out) const {
  out.push_back({size_h_, stride_, 0});
}

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  return ops::global_avg_pool(x);
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out, bool) {
  return ops::global_avg_pool_backward(in_shape_, grad_out);
}

// ------------------------------------------------------------------- Dense

Dense::Dense(std::string name, std::size_t in, std::size_t out)
    : Layer(std::move(name)), weights_(Shape{out, in, 1, 1}), bias_(Shape{out, 1, 1, 1}) {
  weights_.ensure_grad();
  bias_.ensure_grad();
}

void Dense::initialize(Rng& rng) {
  const Real limit = std::sqrt(Real{6} / static_cast<Real>(weights_.shape().c));
  for (auto& v : weights_.data()) v = rng.uniform(-limit, limit);
  bias_.fill(0);
}

Tensor Dense::forward(const Tensor& x, Mode) {
  cache_input_ = x;
  return ops::fully_connected(x, weights_, bias_.data());
}

Tensor Dense::backward(const Tensor& grad_out, bool need_input_grad) {
  auto g = ops::fully_connected_backward(cache_input_, weights_, true, grad_out, need_input_grad);
  if (!frozen_) {
    auto wg = weights_.grad();
    for (std::size_t i = 0; i < wg.size(); ++i) wg[i] += g.weights[i];
    auto bg = bias_.grad();
    for (std::size_t i = 0; i < bg.size(); ++i) bg[i] += g.bias[i];
  }
  return std::move(g.input);
}

void Dense::collect_params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".weight", &weights_, true});
  out.push_back({name_ + ".bias", &bias_, false});
}

// -------------------------------------------------------------- Sequential

Sequential::Sequential(const Sequential& other) : Layer(other) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Layer::operator=(other);
    layers_.clear();
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  return *this;
}

Layer& Sequential::add(LayerPtr layer) {
  layers_.push_back(std::move(layer));
  return *layers_.back();
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  return forward_range(x, mode, 0, layers_.size());
}

Tensor Sequential::forward_range(const Tensor& x, Mode mode, std::size_t begin,
                                 std::size_t end) {
  Tensor h = x;
  for (std::size_t i = begin; i < end; ++i) h = layers_[i]->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out, bool need_input_grad) {
  std::size_t low = layers_.size();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i]->trainable()) {
      low = i;
      break;
    }
  }
  if (!need_input_grad && low == layers_.size()) return Tensor();
  const std::size_t stop = need_input_grad ? 0 : low;
  Tensor g = grad_out;
  for (std::size_t i = layers_.size(); i-- > stop;) {
    g = layers_[i]->backward(g, need_input_grad || i > low);
  }
  return need_input_grad ? g : Tensor();
}

void Sequential::collect_params(std::vector<ParamRef>& out) {
  for (auto& l : layers_) l->collect_params(out);
}

void Sequential::collect_state(std::vector<StateRef>& out) {
  for (auto& l : layers_) l->collect_state(out);
}

void Sequential::collect_leaves(std::vector<Layer*>& out) {
  for (auto& l : layers_) l->collect_leaves(out);
}

void Sequential::collect_windows(std::vector<Window>& out) const {
  for (const auto& l : layers_) l->collect_windows(out);
}

bool Sequential::has_params() const {
  for (const auto& l : layers_) {
    if (l->has_params()) return true;
  }
  return false;
}

bool Sequential::trainable() const {
  for (const auto& l : layers_) {
    if (l->trainable()) return true;
  }
  return false;
}

void Sequential::set_frozen(bool f) {
  frozen_ = f;
  for (auto& l : layers_) l->set_frozen(f);
}

// ------------------------------------------------------------ ResidualUnit

ResidualUnit::ResidualUnit(std::string name, std::size_t in_c, std::size_t l, std::size_t m,
                           std::size_t n, std::size_t stride, ops::Padding padding)
    : Layer(name), main_(name + ".main") {
  main_.emplace<Conv2d>(name + ".conv1", in_c, l, 1, stride, ops::Padding::same, false);
  main_.emplace<BatchNorm>(name + ".bn1", l);
  main_.emplace<Relu>(name + ".relu1");
  main_.emplace<Conv2d>(name + ".conv2", l, m, 3, 1, padding, false);
  main_.emplace<BatchNorm>(name + ".bn2", m);
  main_.emplace<Relu>(name + ".relu2");
  main_.emplace<Conv2d>(name + ".conv3", m, n, 1, 1, ops::Padding::same, false);
  main_.emplace<BatchNorm>(name + ".bn3", n);
  if (stride != 1 || in_c != n) {
    projection_ = std::make_unique<Sequential>(name + ".proj");
    projection_->emplace<Conv2d>(name + ".proj.conv", in_c, n, 1, stride, ops::Padding::same,
                                 false);
    projection_->emplace<BatchNorm>(name + ".proj.bn", n);
  }
  crop_ = padding == ops::Padding::valid ? 1 : 0;
}

ResidualUnit::ResidualUnit(const ResidualUnit& other)
    : Layer(other),
      main_(other.main_),
      projection_(other.projection_ ? std::make_unique<Sequential>(*other.projection_) : nullptr),
      crop_(other.crop_) {}

BatchNorm& ResidualUnit::last_bn() { return static_cast<BatchNorm&>(main_.at(main_.size() - 1)); }

Tensor ResidualUnit::forward(const Tensor& x, Mode mode) {
  Tensor m = main_.forward(x, mode);
  Tensor s = projection_ ? projection_->forward(x, mode) : x;
  shortcut_shape_ = s.shape();
  if (crop_ > 0) s = ops::crop(s, crop_, crop_);
  if (!(s.shape() == m.shape())) {
    throw ShapeError("residual unit " + name_ + ": main branch " + m.shape().str() +
                     " cannot be matched by shortcut " + s.shape().str());
  }
  cache_sum_ = ops::residual_add(m, s);
  return ops::relu(cache_sum_);
}

Tensor ResidualUnit::backward(const Tensor& grad_out, bool need_input_grad) {
  const Tensor dsum = ops::relu_backward(cache_sum_, grad_out);
  Tensor dmain = main_.backward(dsum, need_input_grad);
  Tensor ds = crop_ > 0 ? ops::crop_backward(shortcut_shape_, crop_, crop_, dsum) : dsum;
  Tensor dshort = projection_ ? projection_->backward(ds, need_input_grad) : ds;
  if (!need_input_grad) return Tensor();
  for (std::size_t i = 0; i < dmain.size(); ++i) dmain[i] += dshort[i];
  return dmain;
}

void ResidualUnit::collect_params(std::vector<ParamRef>& out) {
  main_.collect_params(out);
  if (projection_) projection_->collect_params(out);
}

void ResidualUnit::collect_state(std::vector<StateRef>& out) {
  main_.collect_state(out);
  if (projection_) projection_->collect_state(out);
}

void ResidualUnit::collect_leaves(std::vector<Layer*>& out) {
  if (projection_) projection_->collect_leaves(out);
  main_.collect_leaves(out);
}

void ResidualUnit::collect_windows(std::vector<Window>& out) const {
  main_.collect_windows(out);
}

bool ResidualUnit::trainable() const {
  return main_.trainable() || (projection_ && projection_->trainable());
}

void ResidualUnit::set_frozen(bool f) {
  frozen_ = f;
  main_.set_frozen(f);
  if (projection_) projection_->set_frozen(f);
}

// ------------------------------------------------------------------- FcTop

FcTop::FcTop(std::string name, std::size_t heat_c, std::size_t heat_h, std::size_t heat_w,
             std::size_t pool, std::size_t fc1, std::size_t fc2, bool shortcut,
             std::size_t classes)
    : Layer(name), body_(name + ".body"), gap_(name + ".gap"), shortcut_(shortcut), body_out_(fc2) {
  if (pool == 0 || pool > heat_h || pool > heat_w) {
    throw ShapeError("fc_top: pool size " + std::to_string(pool) + " exceeds heatmap extent " +
                     std::to_string(heat_h) + "x" + std::to_string(heat_w));
  }
  const std::size_t ph = (heat_h - pool) / pool + 1;
  const std::size_t pw = (heat_w - pool) / pool + 1;
  body_.emplace<MaxPool>(name + ".pool", pool, pool);
  body_.emplace<Dense>(name + ".fc1", heat_c * ph * pw, fc1);
  body_.emplace<Relu>(name + ".relu1");
  body_.emplace<Dense>(name + ".fc2", fc1, fc2);
  body_.emplace<Relu>(name + ".relu2");
  out_ = std::make_unique<Dense>(name + ".out", fc2 + (shortcut ? heat_c : 0), classes);
}

FcTop::FcTop(const FcTop& other)
    : Layer(other),
      body_(other.body_),
      gap_(other.gap_),
      out_(std::make_unique<Dense>(*other.out_)),
      shortcut_(other.shortcut_),
      body_out_(other.body_out_) {}

void FcTop::initialize(Rng& rng) {
  initialize_layers(body_, rng);
  out_->initialize(rng);
}

Tensor FcTop::forward(const Tensor& x, Mode mode) {
  in_shape_ = x.shape();
  Tensor b = body_.forward(x, mode);
  if (shortcut_) b = ops::concat_channels(b, gap_.forward(x, mode));
  return out_->forward(b, mode);
}

Tensor FcTop::backward(const Tensor& grad_out, bool need_input_grad) {
  const Tensor dz = out_->backward(grad_out, true);
  const std::size_t n = in_shape_.n;
  const std::size_t zc = dz.shape().c;
  Tensor db(Shape{n, body_out_, 1, 1});
  Tensor dg(Shape{n, zc - body_out_, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const Real* src = dz.plane(i);
    std::copy(src, src + body_out_, db.plane(i));
    std::copy(src + body_out_, src + zc, dg.plane(i));
  }
  Tensor dx = body_.backward(db, need_input_grad);
  if (!need_input_grad) return Tensor();
  if (shortcut_) {
    const Tensor dgx = gap_.backward(dg, true);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dgx[i];
  }
  return dx;
}

void FcTop::collect_params(std::vector<ParamRef>& out) {
  body_.collect_params(out);
  out_->collect_params(out);
}

void FcTop::collect_leaves(std::vector<Layer*>& out) {
  body_.collect_leaves(out);
  out.push_back(out_.get());
}

bool FcTop::trainable() const { return body_.trainable() || out_->trainable(); }

void FcTop::set_frozen(bool f) {
  frozen_ = f;
  body_.set_frozen(f);
  out_->set_frozen(f);
}

void initialize_layers(Layer& root, Rng& rng) {
  std::vector<Layer*> leaves;
  root.collect_leaves(leaves);
  for (Layer* l : leaves) {
    if (auto* c = dynamic_cast<Conv2d*>(l)) c->initialize(rng);
    if (auto* d = dynamic_cast<Dense*>(l)) d->initialize(rng);
  }
}

}  // namespace p2w
