#pragma once

// Two-step comparison pipeline: binarize a softmax heatmap at fixed cutoffs,
// describe the connected regions, and classify with a random forest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "p2w/netgraph.hpp"
#include "p2w/trainkit.hpp"

namespace p2w {

inline constexpr std::array<Real, 4> kDefaultCutoffs{0.3, 0.5, 0.7, 0.9};
/// count, largest area, largest major axis, mean intensity of the largest.
inline constexpr std::size_t kFeaturesPerChannel = 4;

enum class Connectivity { four = 4, eight = 8 };

struct BinaryGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> cells;
  std::uint8_t at(std::size_t y, std::size_t x) const { return cells[y * width + x]; }
};

/// One grid per channel; a cell is set iff its probability >= cutoff.
std::vector<BinaryGrid> binarize_heatmap(const Heatmap& heatmap, Real cutoff);

/// Component label per cell (0 = unset, labels from 1 in scan order) and the
/// component count.
struct Labeling {
  std::vector<int> labels;
  int count = 0;
};
Labeling label_components(const BinaryGrid& grid, Connectivity connectivity = Connectivity::eight);

struct ChannelFeatures {
  Real count = 0;
  Real area = 0;
  Real major_axis = 0;  // 4 * sqrt(largest eigenvalue of the coordinate covariance)
  Real mean_intensity = 0;
};

/// Features of one binary channel; `values` are that channel's heatmap cells.
ChannelFeatures extract_region_features(const BinaryGrid& grid, std::span<const Real> values,
                                        Connectivity connectivity = Connectivity::eight);

struct FeatureConfig {
  std::vector<Real> cutoffs{kDefaultCutoffs.begin(), kDefaultCutoffs.end()};
  std::vector<bool> channels;  // empty = all channels
  Connectivity connectivity = Connectivity::eight;
};

/// Flat vector ordered cutoff-major, then channel, then the four features.
std::vector<Real> heatmap_features(const Heatmap& heatmap, const FeatureConfig& config);
std::vector<std::string> feature_names(const FeatureConfig& config, std::size_t channels);

// ---------------------------------------------------------------- forest

struct ForestParams {
  std::size_t tree_count = 100;
  std::size_t max_depth = 6;
  std::size_t min_samples_split = 4;
  std::size_t max_features = 0;  // 0 = round(sqrt(d))
  bool bootstrap = true;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  Real threshold = 0;
  int left = -1;
  int right = -1;
  Real positive_fraction = 0;
};

struct Tree {
  std::vector<TreeNode> nodes;
  Real predict(std::span<const Real> x) const;
  std::size_t depth() const;
};

struct ForestModel {
  ForestParams params;
  std::uint64_t seed = 0;
  std::vector<Tree> trees;
};

ForestModel forest_train(std::span<const std::vector<Real>> features, std::span<const int> labels,
                         const ForestParams& params, std::uint64_t seed);
/// Mean over trees of the leaf's positive-class fraction.
Real forest_predict(const ForestModel& model, std::span<const Real> x);

// ------------------------------------------------------------- pipeline

/// Softmax heatmap of a patch classifier on one image, then its features.
std::vector<Real> image_features(Model& patch_model, const Tensor& image, const FeatureConfig& config);

struct TwoStepResult {
  ForestModel forest;
  std::vector<std::vector<Real>> train_features;
  std::vector<std::vector<Real>> test_features;
  std::vector<Real> test_scores;
};

/// Heatmap features for both sets (mean-subtracted inside), a forest on the
/// training features, and forest scores for the test set.
TwoStepResult run_two_step(Model& patch_model, const LabeledSet& train, const LabeledSet& test,
                           const FeatureConfig& features, const ForestParams& forest, std::uint64_t seed);

void write_features_csv(const std::filesystem::path& path, std::span<const std::string> names,
                        std::span<const std::string> ids, std::span<const int> labels,
                        std::span<const std::vector<Real>> rows);

}  // namespace p2w
