#pragma once

// Patch classifiers built from a block grammar, their conversion into
// whole-image classifiers, and receptive-field bookkeeping.
//
// Block strings:
//   vgg:N[xK]      K 3x3 convs of depth N, then 2x2/2 maxpool (no BN)
//   vggbn:NxK      same with batchnorm after every conv
//   resnet:L-M-NxK K bottleneck units, stride 2 in the first unit's 1x1 conv

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "p2w/layers.hpp"

namespace p2w {

enum class BlockKind { vgg, resnet };

struct BlockSpec {
  BlockKind kind = BlockKind::vgg;
  std::size_t depth = 0;                 // vgg N
  std::size_t count = 0;                 // vgg K / resnet unit count
  std::array<std::size_t, 3> unit{};     // resnet [L, M, N]
  bool batchnorm = false;                // vgg only; resnet always uses BN

  static BlockSpec vgg(std::size_t depth, std::size_t count, bool bn = false);
  static BlockSpec resnet(std::size_t l, std::size_t m, std::size_t n, std::size_t count);
  static BlockSpec parse(std::string_view text);
  static std::vector<BlockSpec> parse_list(std::string_view text);  // comma separated
  std::string str() const;
  std::size_t out_channels() const { return kind == BlockKind::vgg ? depth : unit[2]; }
  bool operator==(const BlockSpec&) const = default;
};

std::string to_string(std::span<const BlockSpec> blocks);

enum class Variant { patch, allconv_no_heatmap, allconv_with_heatmap, fc_top };
enum class HeatmapActivation { relu, softmax };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);
std::string_view to_string(HeatmapActivation a);
HeatmapActivation parse_activation(std::string_view s);

/// Complete, text-serializable description of a network's architecture.
struct ModelSpec {
  Variant variant = Variant::patch;
  std::vector<BlockSpec> stem;
  std::size_t patch_h = 32;
  std::size_t patch_w = 32;
  std::size_t in_channels = 1;
  std::size_t patch_classes = 5;
  ops::Padding padding = ops::Padding::same;

  std::vector<BlockSpec> top;                       // allconv variants
  HeatmapActivation activation = HeatmapActivation::relu;
  std::size_t pool = 1;                             // fc_top only
  std::size_t fc1 = 0;
  std::size_t fc2 = 0;
  bool shortcut = true;
  std::size_t image_h = 0;                          // fc_top input size
  std::size_t image_w = 0;
  std::size_t classes = 2;                          // whole-image classes

  std::uint64_t seed = 0;

  std::string to_text() const;
  static ModelSpec from_text(std::string_view text);
  bool operator==(const ModelSpec&) const = default;
};

struct Geometry {
  std::size_t rf = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;  // input offset of output cell 0's window: -pad
};

/// rf <- rf + (k - 1) * stride; stride <- stride * layer_stride.
Geometry receptive_field(std::span<const Window> layers);
Geometry receptive_field(const Layer& layer);

struct Snapshot {
  std::vector<std::vector<Real>> params;
  std::vector<std::vector<Real>> state;
  bool operator==(const Snapshot&) const = default;
};

class Model {
 public:
  /// Fresh network with He-uniform weights drawn from spec.seed.
  static Model build(const ModelSpec& spec);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelSpec& spec() const { return spec_; }
  bool is_patch() const { return spec_.variant == Variant::patch; }
  std::size_t output_classes() const {
    return is_patch() ? spec_.patch_classes : spec_.classes;
  }

  /// Logits [n, classes, 1, 1].
  Tensor forward(const Tensor& x, Mode mode);
  /// Backpropagates d loss / d logits from the last forward; returns the
  /// input gradient only when requested.
  Tensor backward(const Tensor& grad_logits, bool need_input_grad = false);
  /// Softmax probabilities for each sample (inference mode).
  std::vector<std::vector<Real>> predict(const Tensor& x);
  Tensor stem_features(const Tensor& x);

  Sequential& net() { return net_; }
  std::size_t stem_blocks() const { return spec_.stem.size(); }
  /// Receptive field and cumulative stride of the convolutional stem.
  Geometry stem_geometry() const;
  /// Spatial extent of the stem's final map on a patch-sized input.
  std::array<std::size_t, 2> stem_map_at_patch() const { return stem_map_; }
  std::size_t stem_channels() const;

  std::vector<Layer*> leaves();
  std::vector<ParamRef> params();
  std::vector<StateRef> state();
  /// Parameterized leaves added on top of the stem by conversion (all leaves
  /// for a patch classifier).
  std::size_t new_layer_count() const { return new_layers_; }

  /// Freezes everything except the top `k` parameterized leaves; nullopt
  /// unfreezes all.
  void set_trainable_top(std::optional<std::size_t> k);

  Snapshot snapshot();
  void restore(const Snapshot& s);
  void zero_grad();

  /// Patch head weights (dense [classes, channels]).
  const Dense& patch_head() const;

 private:
  Model() : net_("net") {}
  ModelSpec spec_;
  Sequential net_;
  std::size_t new_layers_ = 0;
  std::array<std::size_t, 2> stem_map_{};
};

/// Grammar-level constructor for the patch classifier.
Model build_patch_classifier(std::span<const BlockSpec> blocks, std::size_t patch_h,
                             std::size_t patch_w, std::size_t classes = 5,
                             ops::Padding padding = ops::Padding::same,
                             std::uint64_t seed = 0);

/// Probability vector for exactly one p x q patch [1, 1, p, q].
std::vector<Real> apply_as_patch(Model& patch_model, const Tensor& patch);

struct Heatmap {
  Tensor grid;  // [1, c, u, v]
  std::size_t stride = 1;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  std::size_t rows() const { return grid.shape().h; }
  std::size_t cols() const { return grid.shape().w; }
  std::size_t classes() const { return grid.shape().c; }
};

/// Slides the patch classifier over an image [1, 1, r, s] and applies the
/// activation per spatial cell.
Heatmap compute_heatmap(Model& patch_model, const Tensor& image, HeatmapActivation activation);

struct ConversionSpec {
  Variant variant = Variant::allconv_no_heatmap;
  std::vector<BlockSpec> top;
  HeatmapActivation activation = HeatmapActivation::relu;
  std::size_t pool = 1;
  std::size_t fc1 = 64;
  std::size_t fc2 = 32;
  bool shortcut = true;
  std::size_t image_h = 0;
  std::size_t image_w = 0;
  std::size_t classes = 2;
  std::uint64_t seed = 0;
};

/// Copies the patch classifier's stem by value into a whole-image network;
/// the heatmap variants also carry the patch head as a 1x1 convolution.
Model convert_to_whole_image(const Model& patch_model, const ConversionSpec& conv);

/// A patch classifier with the donor's stem and a freshly initialized
/// `classes`-way head (the donor's own head is dropped).
Model replace_patch_head(const Model& donor, std::size_t classes, std::uint64_t seed);

}  // namespace p2w
