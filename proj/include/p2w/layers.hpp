#pragma once

// Layer objects: parameter storage plus the forward cache needed for the
// backward pass. A network is a tree of layers rooted at a Sequential.

#include <memory>
#include <string>
#include <vector>

#include "p2w/ops.hpp"
#include "p2w/rng.hpp"
#include "p2w/tensor.hpp"

namespace p2w {

enum class Mode { train, infer };

/// One sliding window along the main data path, used for receptive-field
/// bookkeeping.
struct Window {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad_before = 0;
};

struct ParamRef {
  std::string name;
  Tensor* value;      // gradient lives in value->grad()
  bool decay;         // subject to weight decay (conv / dense kernels only)
};

struct StateRef {
  std::string name;
  std::vector<Real>* values;
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = default;
  Layer& operator=(const Layer&) = default;

  virtual std::string kind() const = 0;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Gradient w.r.t. the last forward input; parameter gradients are
  /// accumulated into ParamRef::value->grad(). Returns an empty tensor when
  /// need_input_grad is false.
  virtual Tensor backward(const Tensor& grad_out, bool need_input_grad) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual void collect_params(std::vector<ParamRef>&) {}
  /// Non-trainable persistent state (batchnorm running statistics).
  virtual void collect_state(std::vector<StateRef>&) {}
  /// Parameterized leaf layers in forward order.
  virtual void collect_leaves(std::vector<Layer*>& out);
  virtual void collect_windows(std::vector<Window>&) const {}
  virtual bool has_params() const { return false; }

  /// True when any parameter in this subtree is unfrozen.
  virtual bool trainable() const { return has_params() && !frozen_; }
  virtual void set_frozen(bool f) { frozen_ = f; }
  bool frozen() const { return frozen_; }

  const std::string& name() const { return name_; }
  void drop_cache() { cache_input_ = Tensor(); }

 protected:
  std::string name_;
  bool frozen_ = false;
  Tensor cache_input_;
};

using LayerPtr = std::unique_ptr<Layer>;

class Conv2d final : public Layer {
 public:
  Conv2d(std::string name, std::size_t in_c, std::size_t out_c, std::size_t kernel,
         std::size_t stride, ops::Padding padding, bool bias);
  std::string kind() const override { return "conv2d"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<Conv2d>(*this); }
  void collect_params(std::vector<ParamRef>& out) override;
  void collect_windows(std::vector<Window>& out) const override;
  bool has_params() const override { return true; }

  /// He-uniform fan-in weights, zero bias.
  void initialize(Rng& rng);
  Tensor& weights() { return weights_; }
  const Tensor& weights() const { return weights_; }
  Tensor& bias() { return bias_; }
  bool has_bias() const { return !bias_.empty(); }
  std::size_t stride() const { return stride_; }
  ops::Padding padding() const { return padding_; }

 private:
  Tensor weights_;
  Tensor bias_;  // [out_c, 1, 1, 1] or empty
  std::size_t stride_;
  ops::Padding padding_;
};

class BatchNorm final : public Layer {
 public:
  BatchNorm(std::string name, std::size_t channels, Real momentum = 0.9,
            Real epsilon = 1e-3);
  std::string kind() const override { return "batchnorm"; }
  /// Frozen layers always normalize with running statistics.
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<BatchNorm>(*this); }
  void collect_params(std::vector<ParamRef>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  bool has_params() const override { return true; }

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  std::vector<Real>& running_mean() { return running_mean_; }
  std::vector<Real>& running_var() { return running_var_; }

 private:
  Tensor gamma_, beta_;
  std::vector<Real> running_mean_, running_var_;
  Real momentum_, epsilon_;
  ops::BnCache cache_;
};

class Relu final : public Layer {
 public:
  explicit Relu(std::string name) : Layer(std::move(name)) {}
  std::string kind() const override { return "relu"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<Relu>(*this); }
};

class ChannelSoftmax final : public Layer {
 public:
  explicit ChannelSoftmax(std::string name) : Layer(std::move(name)) {}
  std::string kind() const override { return "softmax"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<ChannelSoftmax>(*this); }

 private:
  Tensor cache_output_;
};

class MaxPool final : public Layer {
 public:
  MaxPool(std::string name, std::size_t size, std::size_t stride)
      : Layer(std::move(name)), size_(size), stride_(stride) {}
  std::string kind() const override { return "maxpool"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<MaxPool>(*this); }
  void collect_windows(std::vector<Window>& out) const override;
  std::size_t size() const { return size_; }

 private:
  std::size_t size_, stride_;
  Shape in_shape_;
  std::vector<std::uint32_t> argmax_;
};

/// Fixed-window average pool (stride 1 by default). Realizes the sliding
/// version of the patch head's global average pool.
class AvgPool final : public Layer {
 public:
  AvgPool(std::string name, std::size_t size_h, std::size_t size_w, std::size_t stride = 1)
      : Layer(std::move(name)), size_h_(size_h), size_w_(size_w), stride_(stride) {}
  std::string kind() const override { return "avgpool"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<AvgPool>(*this); }
  void collect_windows(std::vector<Window>& out) const override;

 private:
  std::size_t size_h_, size_w_, stride_;
  Shape in_shape_;
};

class GlobalAvgPool final : public Layer {
 public:
  explicit GlobalAvgPool(std::string name) : Layer(std::move(name)) {}
  std::string kind() const override { return "gap"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  Shape in_shape_;
};

class Dense final : public Layer {
 public:
  Dense(std::string name, std::size_t in, std::size_t out);
  std::string kind() const override { return "dense"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<Dense>(*this); }
  void collect_params(std::vector<ParamRef>& out) override;
  bool has_params() const override { return true; }

  void initialize(Rng& rng);
  Tensor& weights() { return weights_; }
  const Tensor& weights() const { return weights_; }
  Tensor& bias() { return bias_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weights_;  // [out, in, 1, 1]
  Tensor bias_;     // [out, 1, 1, 1]
};

/// Ordered container; backpropagation stops below the lowest trainable
/// child unless the caller asks for the input gradient.
class Sequential final : public Layer {
 public:
  explicit Sequential(std::string name) : Layer(std::move(name)) {}
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  std::string kind() const override { return "sequential"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<Sequential>(*this); }
  void collect_params(std::vector<ParamRef>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void collect_leaves(std::vector<Layer*>& out) override;
  void collect_windows(std::vector<Window>& out) const override;
  bool has_params() const override;
  bool trainable() const override;
  void set_frozen(bool f) override;

  Layer& add(LayerPtr layer);
  void replace(std::size_t i, LayerPtr layer) { layers_[i] = std::move(layer); }
  template <class L, class... Args>
  L& emplace(Args&&... args) {
    return static_cast<L&>(add(std::make_unique<L>(std::forward<Args>(args)...)));
  }
  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_[i]; }
  const Layer& at(std::size_t i) const { return *layers_[i]; }

  /// Forward through children [begin, end).
  Tensor forward_range(const Tensor& x, Mode mode, std::size_t begin, std::size_t end);

 private:
  std::vector<LayerPtr> layers_;
};

/// Bottleneck unit: 1x1 (stride s) -> BN -> ReLU -> 3x3 -> BN -> ReLU -> 1x1 ->
/// BN, added to the (optionally projected) shortcut, then ReLU. Valid padding
/// center-crops the shortcut to the main branch's extent.
class ResidualUnit final : public Layer {
 public:
  ResidualUnit(std::string name, std::size_t in_c, std::size_t l, std::size_t m,
               std::size_t n, std::size_t stride, ops::Padding padding);
  ResidualUnit(const ResidualUnit& other);
  ResidualUnit& operator=(const ResidualUnit&) = delete;

  std::string kind() const override { return "resunit"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<ResidualUnit>(*this); }
  void collect_params(std::vector<ParamRef>& out) override;
  void collect_state(std::vector<StateRef>& out) override;
  void collect_leaves(std::vector<Layer*>& out) override;
  void collect_windows(std::vector<Window>& out) const override;
  bool has_params() const override { return true; }
  bool trainable() const override;
  void set_frozen(bool f) override;

  Sequential& main() { return main_; }
  Sequential* projection() { return projection_ ? &*projection_ : nullptr; }
  /// Final batchnorm of the main branch.
  BatchNorm& last_bn();

 private:
  Sequential main_;
  std::unique_ptr<Sequential> projection_;
  std::size_t crop_ = 0;
  Shape shortcut_shape_;
  Tensor cache_sum_;
};

/// Heatmap -> maxpool(k, k) -> flatten -> FC1 -> ReLU -> FC2 -> ReLU
/// [-> concat global-average-pooled heatmap] -> FC(classes).
class FcTop final : public Layer {
 public:
  FcTop(std::string name, std::size_t heat_c, std::size_t heat_h, std::size_t heat_w,
        std::size_t pool, std::size_t fc1, std::size_t fc2, bool shortcut,
        std::size_t classes);
  FcTop(const FcTop& other);
  FcTop& operator=(const FcTop&) = delete;

  std::string kind() const override { return "fctop"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out, bool need_input_grad) override;
  LayerPtr clone() const override { return std::make_unique<FcTop>(*this); }
  void collect_params(std::vector<ParamRef>& out) override;
  void collect_leaves(std::vector<Layer*>& out) override;
  bool has_params() const override { return true; }
  bool trainable() const override;
  void set_frozen(bool f) override;
  void initialize(Rng& rng);

 private:
  Sequential body_;  // pool, fc1, relu, fc2, relu
  GlobalAvgPool gap_;
  std::unique_ptr<Dense> out_;
  bool shortcut_;
  std::size_t body_out_;
  Shape in_shape_;
};

/// He-uniform initialization for every conv / dense leaf under `root`.
void initialize_layers(Layer& root, Rng& rng);

}  // namespace p2w
