#include "p2w/baseline2step.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>

#include "p2w/error.hpp"
#include "p2w/rng.hpp"

namespace p2w {

std::vector<BinaryGrid> binarize_heatmap(const Heatmap& heatmap, Real cutoff) {
  if (!(cutoff > 0 && cutoff < 1)) throw ShapeError("cutoff must lie in (0, 1), got " + std::to_string(cutoff));
  const Shape& s = heatmap.grid.shape();
  std::vector<BinaryGrid> out;
  for (std::size_t c = 0; c < s.c; ++c) {
    BinaryGrid g{s.h, s.w, std::vector<std::uint8_t>(s.plane())};
    const Real* v = heatmap.grid.plane(0, c);
    for (std::size_t i = 0; i < s.plane(); ++i) g.cells[i] = v[i] >= cutoff;
    out.push_back(std::move(g));
  }
  return out;
}

Labeling label_components(const BinaryGrid& grid, Connectivity connectivity) {
  Labeling lab{std::vector<int>(grid.cells.size(), 0), 0};
  const auto h = static_cast<std::ptrdiff_t>(grid.height), w = static_cast<std::ptrdiff_t>(grid.width);
  std::vector<std::ptrdiff_t> stack;
  for (std::ptrdiff_t start = 0; start < h * w; ++start) {
    if (!grid.cells[static_cast<std::size_t>(start)] || lab.labels[static_cast<std::size_t>(start)]) continue;
    const int id = ++lab.count;
    lab.labels[static_cast<std::size_t>(start)] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const auto cur = stack.back();
      stack.pop_back();
      const auto y = cur / w, x = cur % w;
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          if ((dx == 0 && dy == 0) || (connectivity == Connectivity::four && dx != 0 && dy != 0)) continue;
          const auto ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
          const auto n = static_cast<std::size_t>(ny * w + nx);
          if (grid.cells[n] && !lab.labels[n]) {
            lab.labels[n] = id;
            stack.push_back(static_cast<std::ptrdiff_t>(n));
          }
        }
      }
    }
  }
  return lab;
}

ChannelFeatures extract_region_features(const BinaryGrid& grid, std::span<const Real> values,
                                        Connectivity connectivity) {
  if (values.size() != grid.cells.size()) throw ShapeError("region features: grid and values differ in size");
  const Labeling lab = label_components(grid, connectivity);
  ChannelFeatures f;
  if (lab.count == 0) return f;
  std::vector<std::size_t> area(static_cast<std::size_t>(lab.count) + 1, 0);
  for (const int l : lab.labels) area[static_cast<std::size_t>(l)] += l > 0;
  int best = 1;
  for (int l = 2; l <= lab.count; ++l) {
    if (area[static_cast<std::size_t>(l)] > area[static_cast<std::size_t>(best)]) best = l;
  }
  Real sx = 0, sy = 0, sv = 0;
  const auto n = static_cast<Real>(area[static_cast<std::size_t>(best)]);
  for (std::size_t i = 0; i < lab.labels.size(); ++i) {
    if (lab.labels[i] != best) continue;
    sx += static_cast<Real>(i % grid.width);
    sy += static_cast<Real>(i / grid.width);
    sv += values[i];
  }
  const Real mx = sx / n, my = sy / n;
  Real cxx = 0, cyy = 0, cxy = 0;
  for (std::size_t i = 0; i < lab.labels.size(); ++i) {
    if (lab.labels[i] != best) continue;
    const Real dx = static_cast<Real>(i % grid.width) - mx, dy = static_cast<Real>(i / grid.width) - my;
    cxx += dx * dx;
    cyy += dy * dy;
    cxy += dx * dy;
  }
  cxx /= n;
  cyy /= n;
  cxy /= n;
  const Real half_tr = (cxx + cyy) / 2;
  const Real disc = std::sqrt(std::max<Real>(0, (cxx - cyy) * (cxx - cyy) / 4 + cxy * cxy));
  const Real lambda = std::max<Real>(0, half_tr + disc);
  f.count = lab.count;
  f.area = n;
  f.major_axis = 4 * std::sqrt(lambda);
  f.mean_intensity = sv / n;
  return f;
}

std::vector<Real> heatmap_features(const Heatmap& heatmap, const FeatureConfig& config) {
  const std::size_t channels = heatmap.classes();
  if (!config.channels.empty() && config.channels.size() != channels) {
    throw ShapeError("feature channel mask has wrong length");
  }
  std::vector<Real> out;
  for (const Real cutoff : config.cutoffs) {
    const auto grids = binarize_heatmap(heatmap, cutoff);
    for (std::size_t c = 0; c < channels; ++c) {
      if (!config.channels.empty() && !config.channels[c]) continue;
      const std::span<const Real> v(heatmap.grid.plane(0, c), heatmap.grid.shape().plane());
      const auto f = extract_region_features(grids[c], v, config.connectivity);
      out.insert(out.end(), {f.count, f.area, f.major_axis, f.mean_intensity});
    }
  }
  return out;
}

std::vector<std::string> feature_names(const FeatureConfig& config, std::size_t channels) {
  std::vector<std::string> names;
  for (const Real cutoff : config.cutoffs) {
    char cut[16];
    std::snprintf(cut, sizeof cut, "%g", cutoff);
    for (std::size_t c = 0; c < channels; ++c) {
      if (!config.channels.empty() && !config.channels[c]) continue;
      for (const char* f : {"count", "area", "major_axis", "mean_intensity"}) {
        names.push_back("c" + std::string(cut) + "_ch" + std::to_string(c) + "_" + f);
      }
    }
  }
  return names;
}

// ---------------------------------------------------------------- forest

Real Tree::predict(std::span<const Real> x) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
  }
  return nodes[i].positive_fraction;
}

std::size_t Tree::depth() const {
  std::function<std::size_t(std::size_t)> rec = [&](std::size_t i) -> std::size_t {
    if (nodes[i].feature < 0) return 0;
    return 1 + std::max(rec(static_cast<std::size_t>(nodes[i].left)), rec(static_cast<std::size_t>(nodes[i].right)));
  };
  return nodes.empty() ? 0 : rec(0);
}

namespace {

Real gini(std::size_t pos, std::size_t n) {
  if (n == 0) return 0;
  const Real p = static_cast<Real>(pos) / static_cast<Real>(n);
  return 2 * p * (1 - p);
}

struct TreeBuilder {
  std::span<const std::vector<Real>> x;
  std::span<const int> y;
  const ForestParams& params;
  std::size_t max_features;
  Rng& rng;
  Tree tree;

  int build(std::vector<std::size_t>& idx, std::size_t depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    std::size_t pos = 0;
    for (const auto i : idx) pos += y[i] == 1;
    tree.nodes[static_cast<std::size_t>(id)].positive_fraction =
        static_cast<Real>(pos) / static_cast<Real>(idx.size());
    if (depth >= params.max_depth || idx.size() < params.min_samples_split || pos == 0 || pos == idx.size()) {
      return id;
    }
    const std::size_t d = x[0].size();
    std::vector<std::size_t> feats(d);
    std::iota(feats.begin(), feats.end(), 0);
    for (std::size_t k = 0; k < max_features; ++k) {
      std::swap(feats[k], feats[k + rng.below(d - k)]);
    }
    int best_f = -1;
    Real best_t = 0, best_g = std::numeric_limits<Real>::infinity();
    std::vector<std::size_t> order(idx);
    const auto n = idx.size();
    for (std::size_t k = 0; k < max_features; ++k) {
      const std::size_t f = feats[k];
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a][f] < x[b][f]; });
      std::size_t left_pos = 0;
      for (std::size_t s = 1; s < n; ++s) {
        left_pos += y[order[s - 1]] == 1;
        const Real lo = x[order[s - 1]][f], hi = x[order[s]][f];
        if (!(lo < hi)) continue;
        const Real g = (static_cast<Real>(s) * gini(left_pos, s) +
                        static_cast<Real>(n - s) * gini(pos - left_pos, n - s)) /
                       static_cast<Real>(n);
        if (g < best_g) {
          best_g = g;
          best_f = static_cast<int>(f);
          best_t = lo + (hi - lo) / 2;
        }
      }
    }
    if (best_f < 0) return id;
    std::vector<std::size_t> left, right;
    for (const auto i : idx) (x[i][static_cast<std::size_t>(best_f)] <= best_t ? left : right).push_back(i);
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = best_f;
    node.threshold = best_t;
    node.left = l;
    node.right = r;
    return id;
  }
};

}  // namespace

ForestModel forest_train(std::span<const std::vector<Real>> features, std::span<const int> labels,
                         const ForestParams& params, std::uint64_t seed) {
  if (features.empty() || features.size() != labels.size()) {
    throw ShapeError("forest_train: feature rows and labels must be non-empty and equal in number");
  }
  const std::size_t d = features[0].size();
  if (d == 0) throw ShapeError("forest_train: zero-length feature vectors");
  for (const auto& r : features) {
    if (r.size() != d) throw ShapeError("forest_train: ragged feature matrix");
  }
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  const auto neg = std::count(labels.begin(), labels.end(), 0);
  if (pos + neg != static_cast<std::ptrdiff_t>(labels.size())) throw ShapeError("forest_train: labels must be 0/1");
  if (pos == 0 || neg == 0) throw Error(ErrorKind::data, "forest_train: training labels contain a single class");
  if (params.tree_count == 0) throw ShapeError("forest_train: tree_count must be positive");

  ForestModel model{params, seed, {}};
  std::size_t mf = params.max_features;
  if (mf == 0) mf = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(d))));
  mf = std::clamp<std::size_t>(mf, 1, d);
  const std::size_t n = features.size();
  for (std::size_t t = 0; t < params.tree_count; ++t) {
    Rng rng(derive_seed(seed, t));
    std::vector<std::size_t> idx(n);
    if (params.bootstrap) {
      for (auto& i : idx) i = rng.below(n);
      std::sort(idx.begin(), idx.end());
    } else {
      std::iota(idx.begin(), idx.end(), 0);
    }
    TreeBuilder b{features, labels, params, mf, rng, {}};
    b.build(idx, 0);
    model.trees.push_back(std::move(b.tree));
  }
  return model;
}

Real forest_predict(const ForestModel& model, std::span<const Real> x) {
  if (model.trees.empty()) throw ShapeError("forest_predict: empty forest");
  Real s = 0;
  for (const auto& t : model.trees) s += t.predict(x);
  return s / static_cast<Real>(model.trees.size());
}

std::vector<Real> image_features(Model& patch_model, const Tensor& image, const FeatureConfig& config) {
  return heatmap_features(compute_heatmap(patch_model, image, HeatmapActivation::softmax), config);
}

TwoStepResult run_two_step(Model& patch_model, const LabeledSet& train, const LabeledSet& test,
                           const FeatureConfig& features, const ForestParams& forest, std::uint64_t seed) {
  auto extract = [&](const LabeledSet& set) {
    std::vector<std::vector<Real>> rows;
    for (const auto& im : set.images) {
      Tensor x = im;
      for (Real& v : x.data()) v -= set.mean;
      rows.push_back(image_features(patch_model, x, features));
    }
    return rows;
  };
  TwoStepResult r;
  r.train_features = extract(train);
  r.test_features = extract(test);
  r.forest = forest_train(r.train_features, train.labels, forest, seed);
  for (const auto& f : r.test_features) r.test_scores.push_back(forest_predict(r.forest, f));
  return r;
}

void write_features_csv(const std::filesystem::path& path, std::span<const std::string> names,
                        std::span<const std::string> ids, std::span<const int> labels,
                        std::span<const std::vector<Real>> rows) {
  std::ofstream f(path);
  if (!f) data_error("cannot write " + path.string());
  f.precision(17);
  f << "id,label";
  for (const auto& n : names) f << ',' << n;
  f << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    f << ids[i] << ',' << labels[i];
    for (const Real v : rows[i]) f << ',' << v;
    f << '\n';
  }
}

}  // namespace p2w
