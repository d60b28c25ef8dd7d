#pragma once

// Adam, staged freeze/unfreeze schedules, per-batch class balancing,
// augmentation and the transfer fine-tuning loop.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "p2w/netgraph.hpp"
#include "p2w/rng.hpp"

namespace p2w {

// ------------------------------------------------------------------ Adam

struct AdamConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
  /// Decay as p -= lr * wd * p instead of an L2 gradient term.
  bool decoupled_decay = false;
};

struct AdamMoments {
  std::vector<Real> m;
  std::vector<Real> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of a flat parameter block. Moments are
/// sized on first use; a later size mismatch is rejected.
void adam_step(std::span<Real> params, std::span<const Real> grads, AdamMoments& state,
               const AdamConfig& config, Real learning_rate, Real weight_decay);

/// Adam over named model parameters, keyed by name.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  /// Updates every parameter in `params` from its gradient buffer. Weight
  /// decay reaches only parameters flagged for it.
  void step(std::span<const ParamRef> params, Real learning_rate, Real weight_decay);
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::unordered_map<std::string, AdamMoments> state_;
};

// ------------------------------------------------------------- schedules

/// How many parameterized layers, counted from the output, a stage trains.
struct TrainableTop {
  enum class Kind { count, all, new_layers };
  Kind kind = Kind::all;
  std::size_t count = 0;

  static TrainableTop all() { return {Kind::all, 0}; }
  static TrainableTop new_layers() { return {Kind::new_layers, 0}; }
  static TrainableTop top(std::size_t k) { return {Kind::count, k}; }
  /// "all", "new" or an integer.
  static TrainableTop parse(std::string_view text);
  std::string str() const;
  /// nullopt means every layer.
  std::optional<std::size_t> resolve(const Model& model) const;
  bool operator==(const TrainableTop&) const = default;
};

struct Stage {
  Real learning_rate = 1e-3;
  TrainableTop trainable = TrainableTop::all();
  std::size_t epochs = 1;
  Real weight_decay = 0;
};

struct TrainSchedule {
  std::vector<Stage> stages;
  std::size_t batch_size = 32;
  AdamConfig adam;

  void validate() const;
  /// Three-stage patch schedule: last layer, top `top_k`, then everything.
  static TrainSchedule reference_patch(std::size_t top_k);
  /// Two-stage whole-image schedule: new top layers, then everything.
  static TrainSchedule reference_whole();
};

/// w_i = B / (C_present * count(y_i)).
std::vector<Real> balance_batch_weights(std::span<const int> labels, std::size_t class_count);

// ---------------------------------------------------------- augmentation

struct AugmentationPolicy {
  bool horizontal_flip = false;
  bool vertical_flip = false;
  Real rotation_lo = 0, rotation_hi = 0;   // degrees
  Real shear_lo = 0, shear_hi = 0;         // radians
  Real zoom_lo = 1, zoom_hi = 1;           // ratio, drawn per axis
  Real shift_lo = 0, shift_hi = 0;         // 8-bit pixel units

  static AugmentationPolicy identity() { return {}; }
  static AugmentationPolicy reference();
  bool enabled() const { return !(*this == identity()); }
  bool operator==(const AugmentationPolicy&) const = default;
};

struct AugmentParams {
  bool flip_h = false;
  bool flip_v = false;
  Real rotation = 0;  // degrees
  Real shear = 0;     // radians
  Real zoom_x = 1;
  Real zoom_y = 1;
  Real shift = 0;
};

/// Flips are drawn with probability 1/2 when enabled; ranges are closed.
AugmentParams sample_augmentation(const AugmentationPolicy& policy, Rng& rng);
/// Single affine warp (flip, rotate, shear, zoom about the image center),
/// bilinear with zero fill, then an intensity shift clamped to [0, 255].
Tensor apply_augmentation(const Tensor& image, const AugmentParams& params);
Tensor augment(const Tensor& image, const AugmentationPolicy& policy, Rng& rng);

// -------------------------------------------------------------- training

/// Raw-pixel images (0..255) with labels; `mean` is subtracted at batch
/// assembly, after augmentation.
struct LabeledSet {
  std::vector<Tensor> images;  // each [1, 1, h, w]
  std::vector<int> labels;
  std::vector<std::string> groups;  // patient ids, optional
  std::vector<std::string> ids;     // image ids, optional
  Real mean = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  void add(Tensor image, int label, std::string group = {}, std::string id = {});
  LabeledSet subset(std::span<const std::size_t> index) const;
};

enum class SelectionMetric { automatic, accuracy, auc };

struct TrainOptions {
  bool balance_classes = true;
  AugmentationPolicy augmentation;
  std::uint64_t seed = 0;
  SelectionMetric metric = SelectionMetric::automatic;  // accuracy for patch models, AUC otherwise
  bool record_time = false;
  std::size_t eval_batch = 32;
};

struct EpochLog {
  std::size_t epoch;  // 1-based across all stages
  std::size_t stage;  // 1-based
  Real train_loss;
  Real val_loss;
  Real val_metric;
  Real seconds;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // 0 when nothing was trained
  Real best_metric = 0;
};

struct Evaluation {
  Real loss = 0;
  Real metric = 0;
  std::vector<Real> scores;  // class-1 probability per sample
  std::vector<int> predicted;
};

/// Inference-mode loss and selection metric over a labeled set.
Evaluation evaluate_set(Model& model, const LabeledSet& data, SelectionMetric metric,
                        std::size_t batch = 32);

/// Runs every stage in order and leaves `model` at the best-validation epoch
/// (the last epoch when `val` is empty).
TrainResult run_schedule(Model& model, const LabeledSet& train, const LabeledSet& val,
                         const TrainSchedule& schedule, const TrainOptions& options);

/// Continues the final stage for `extra_epochs` more epochs.
TrainResult resume_schedule(Model& model, const LabeledSet& train, const LabeledSet& val,
                            const TrainSchedule& schedule, std::size_t extra_epochs,
                            const TrainOptions& options);

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochLog> log);

struct TransferResult {
  TrainResult train;
  Real val_auc = 0;
  std::size_t patients = 0;
};

struct TransferOptions {
  std::optional<std::size_t> subset_patients;  // nullopt = all
  std::size_t epochs = 10;
  Real learning_rate = 1e-5;
  Real weight_decay = 0;
  std::size_t batch_size = 2;
  bool balance_classes = true;
  AugmentationPolicy augmentation;
  std::uint64_t seed = 0;
};

/// Picks a stratified patient subset of `train`, trains every layer on it
/// and reports AUC on `val`.
TransferResult finetune_transfer(Model& model, const LabeledSet& train, const LabeledSet& val,
                                 const TransferOptions& options);

/// Patient-level stratified subset indices (by patient positivity).
std::vector<std::size_t> stratified_patient_subset(const LabeledSet& data, std::size_t patients,
                                                   std::uint64_t seed);

}  // namespace p2w
