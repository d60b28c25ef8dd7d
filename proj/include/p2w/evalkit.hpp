#pragma once

// Per-image scoring: AUC, ROC curves, operating points, flip-augmented
// prediction and ensembles.

#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "p2w/error.hpp"
#include "p2w/netgraph.hpp"

namespace p2w {

/// Raised when a metric needs both labels and gets only one.
class SingleClassError : public Error {
 public:
  explicit SingleClassError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

/// Sets up to this size use the pairwise statistic; larger ones use ranks.
inline constexpr std::size_t kPairwiseAucLimit = 10000;

Real auc(std::span<const int> labels, std::span<const Real> scores);
/// Fraction of (positive, negative) pairs ordered correctly, ties count 1/2.
Real auc_pairwise(std::span<const int> labels, std::span<const Real> scores);
/// Mann-Whitney U from mid-ranks.
Real auc_rank(std::span<const int> labels, std::span<const Real> scores);

struct RocPoint {
  Real fpr;
  Real tpr;
  Real threshold;  // score >= threshold is called positive
};

/// From (0, 0) at threshold +inf down to (1, 1), one point per distinct score.
std::vector<RocPoint> roc_curve(std::span<const int> labels, std::span<const Real> scores);
Real trapezoid_area(std::span<const RocPoint> curve);

struct OperatingPoint {
  Real sensitivity;
  Real specificity;
  Real threshold;
};

/// Youden's J over all ROC thresholds (ties toward higher specificity), or the
/// point at a fixed threshold when one is given.
OperatingPoint operating_point(std::span<const int> labels, std::span<const Real> scores,
                               std::optional<Real> fixed_threshold = std::nullopt);

Real accuracy(std::span<const int> labels, std::span<const int> predicted);

/// Probability of `positive_class` for one image [1, 1, h, w].
Real predict_score(Model& model, const Tensor& image, std::size_t positive_class = 1);
/// Mean score over the image and its horizontal, vertical and double flips.
Real augmented_predict(Model& model, const Tensor& image, std::size_t positive_class = 1);
/// Unweighted mean of member scores.
Real ensemble_score(std::span<Model* const> models, const Tensor& image, bool use_augmented,
                    std::size_t positive_class = 1);

struct ScoredRow {
  std::string id;
  int label;
  Real score;
};

void write_scores_csv(const std::filesystem::path& path, std::span<const ScoredRow> rows);
void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> curve);

}  // namespace p2w
