#include "p2w/evalkit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "p2w/ops.hpp"

namespace p2w {
namespace {

struct Counts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

Counts check(std::span<const int> labels, std::span<const Real> scores) {
  if (labels.size() != scores.size()) {
    throw ShapeError("metric: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(scores.size()) + " scores");
  }
  Counts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ShapeError("metric: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw Error(ErrorKind::numeric, "metric: non-finite score");
    (labels[i] ? c.pos : c.neg)++;
  }
  if (c.pos == 0 || c.neg == 0) {
    throw SingleClassError("AUC needs at least one positive and one negative sample");
  }
  return c;
}

std::vector<std::size_t> order_desc(std::span<const Real> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

Real auc(std::span<const int> labels, std::span<const Real> scores) {
  return labels.size() <= kPairwiseAucLimit ? auc_pairwise(labels, scores) : auc_rank(labels, scores);
}

Real auc_pairwise(std::span<const int> labels, std::span<const Real> scores) {
  const Counts c = check(labels, scores);
  // Twice the win count, so ties stay integral.
  std::uint64_t twice = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (labels[j]) continue;
      if (scores[i] > scores[j]) {
        twice += 2;
      } else if (scores[i] == scores[j]) {
        twice += 1;
      }
    }
  }
  return static_cast<Real>(twice) / (2.0 * static_cast<Real>(c.pos) * static_cast<Real>(c.neg));
}

Real auc_rank(std::span<const int> labels, std::span<const Real> scores) {
  const Counts c = check(labels, scores);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Sum of doubled mid-ranks of the positives (1-based ranks).
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const std::uint64_t twice_mid = i + 1 + j;  // (i+1) + j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]]) twice_rank_sum += twice_mid;
    }
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - c.pos * (c.pos + 1);
  return static_cast<Real>(twice_u) / (2.0 * static_cast<Real>(c.pos) * static_cast<Real>(c.neg));
}

std::vector<RocPoint> roc_curve(std::span<const int> labels, std::span<const Real> scores) {
  const Counts c = check(labels, scores);
  const auto idx = order_desc(scores);
  std::vector<RocPoint> curve;
  curve.push_back({0, 0, std::numeric_limits<Real>::infinity()});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const Real t = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == t) {
      (labels[idx[i]] ? tp : fp)++;
      ++i;
    }
    curve.push_back({static_cast<Real>(fp) / static_cast<Real>(c.neg),
                     static_cast<Real>(tp) / static_cast<Real>(c.pos), t});
  }
  return curve;
}

Real trapezoid_area(std::span<const RocPoint> curve) {
  Real area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2;
  }
  return area;
}

OperatingPoint operating_point(std::span<const int> labels, std::span<const Real> scores,
                               std::optional<Real> fixed_threshold) {
  const Counts c = check(labels, scores);
  if (fixed_threshold) {
    std::size_t tp = 0, tn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool called = scores[i] >= *fixed_threshold;
      if (labels[i] && called) ++tp;
      if (!labels[i] && !called) ++tn;
    }
    return {static_cast<Real>(tp) / static_cast<Real>(c.pos),
            static_cast<Real>(tn) / static_cast<Real>(c.neg), *fixed_threshold};
  }
  const auto curve = roc_curve(labels, scores);
  OperatingPoint best{0, 1, curve.front().threshold};
  Real best_j = -1;
  for (const auto& p : curve) {
    const Real spec = 1 - p.fpr;
    const Real j = p.tpr + spec - 1;
    if (j > best_j || (j == best_j && spec > best.specificity)) {
      best_j = j;
      best = {p.tpr, spec, p.threshold};
    }
  }
  return best;
}

Real accuracy(std::span<const int> labels, std::span<const int> predicted) {
  if (labels.size() != predicted.size() || labels.empty()) {
    throw ShapeError("accuracy: label/prediction count mismatch or empty");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += labels[i] == predicted[i];
  return static_cast<Real>(hit) / static_cast<Real>(labels.size());
}

Real predict_score(Model& model, const Tensor& image, std::size_t positive_class) {
  const auto probs = model.predict(image);
  if (positive_class >= probs.front().size()) throw ShapeError("positive class out of range");
  return probs.front()[positive_class];
}

Real augmented_predict(Model& model, const Tensor& image, std::size_t positive_class) {
  const Tensor h = ops::flip_horizontal(image);
  std::array<Real, 4> s{predict_score(model, image, positive_class),
                        predict_score(model, h, positive_class),
                        predict_score(model, ops::flip_vertical(image), positive_class),
                        predict_score(model, ops::flip_vertical(h), positive_class)};
  // A fixed summation order makes the result independent of which flip we
  // started from.
  std::sort(s.begin(), s.end());
  return (s[0] + s[1] + s[2] + s[3]) / 4;
}

Real ensemble_score(std::span<Model* const> models, const Tensor& image, bool use_augmented,
                    std::size_t positive_class) {
  if (models.empty()) throw ShapeError("ensemble_score: empty model list");
  std::vector<Real> s;
  for (Model* m : models) {
    s.push_back(use_augmented ? augmented_predict(*m, image, positive_class)
                              : predict_score(*m, image, positive_class));
  }
  std::sort(s.begin(), s.end());
  Real sum = 0;
  for (const Real v : s) sum += v;
  return sum / static_cast<Real>(s.size());
}

void write_scores_csv(const std::filesystem::path& path, std::span<const ScoredRow> rows) {
  std::ofstream f(path);
  if (!f) data_error("cannot write " + path.string());
  f.precision(17);
  f << "id,label,score\n";
  for (const auto& r : rows) f << r.id << ',' << r.label << ',' << r.score << '\n';
}

void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> curve) {
  std::ofstream f(path);
  if (!f) data_error("cannot write " + path.string());
  f.precision(17);
  f << "fpr,tpr,threshold\n";
  for (const auto& p : curve) {
    f << p.fpr << ',' << p.tpr << ',';
    if (std::isinf(p.threshold)) {
      f << "inf";
    } else {
      f << p.threshold;
    }
    f << '\n';
  }
}

}  // namespace p2w
