// Exact and near-exact invariants: sliding-window equivalence, receptive
// field arithmetic, gradient checks, AUC oracles and the zero-tolerance
// data/serialization/determinism checks.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "p2w/error.hpp"
#include "p2w/evalkit.hpp"
#include "p2w/netgraph.hpp"
#include "p2w/pipeline.hpp"
#include "p2w/serialize.hpp"
#include "p2w/synthdata.hpp"
#include "p2w/trainkit.hpp"
#include "report.hpp"

namespace acceptance {

using namespace p2w;

namespace {

Tensor crop_at(const Tensor& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  Tensor out(Shape{1, 1, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(0, 0, i, j) = img.at(0, 0, y + i, x + j);
  return out;
}

std::string random_block(std::mt19937_64& g) {
  const std::size_t c = 2 + g() % 5;
  switch (g() % 3) {
    case 0: return "vgg:" + std::to_string(c) + "x" + std::to_string(1 + g() % 2);
    case 1: return "vggbn:" + std::to_string(c) + "x1";
    default: return "resnet:" + std::to_string(c) + "-" + std::to_string(c) + "-" + std::to_string(2 * c) + "x" +
                    std::to_string(1 + g() % 2);
  }
}

/// Random valid-padded patch classifier with moved batchnorm statistics.
Model random_patch_model(std::mt19937_64& g, std::size_t* patch_size) {
  for (;;) {
    std::string spec = random_block(g);
    const std::size_t blocks = 1 + g() % 3;
    for (std::size_t b = 1; b < blocks; ++b) spec += "," + random_block(g);
    const auto parsed = BlockSpec::parse_list(spec);
    for (std::size_t p = 8; p <= 64; p += 4) {
      try {
        Model m = build_patch_classifier(parsed, p, p, 5, ops::Padding::valid, g());
        std::normal_distribution<Real> d(0, 0.05);
        for (auto& prm : m.params())
          for (Real& x : prm.value->data()) x += d(g);
        m.forward(oracle::random_tensor({4, 1, p, p}, g), Mode::train);
        *patch_size = p;
        return m;
      } catch (const ShapeError&) {
      }
    }
  }
}

void sliding_window(Report& report) {
  Stopwatch sw;
  std::mt19937_64 g(2024);
  Real worst = 0;
  std::size_t cells = 0;
  for (int model = 0; model < 20; ++model) {
    std::size_t p = 0;
    Model m = random_patch_model(g, &p);
    const std::size_t s = m.stem_geometry().stride;
    const std::size_t rows = 1 + g() % 5, cols = 1 + g() % 5;
    const Tensor img = oracle::random_tensor({1, 1, p + (rows - 1) * s, p + (cols - 1) * s}, g, -2, 2);
    const Heatmap h = compute_heatmap(m, img, model % 2 ? HeatmapActivation::softmax : HeatmapActivation::relu);
    if (h.rows() != rows || h.cols() != cols) {
      report.add("sliding-window equivalence", false, fmt("grid %zux%zu, expected %zux%zu", h.rows(), h.cols(), rows, cols));
      return;
    }
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const Tensor patch = crop_at(img, i * s, j * s, p, p);
        std::vector<Real> want;
        if (model % 2) {
          want = apply_as_patch(m, patch);
        } else {
          const Tensor logits = m.forward(patch, Mode::infer);
          for (std::size_t c = 0; c < 5; ++c) want.push_back(std::max<Real>(0, logits.at(0, c, 0, 0)));
        }
        for (std::size_t c = 0; c < 5; ++c) worst = std::max(worst, std::abs(h.grid.at(0, c, i, j) - want[c]));
        ++cells;
      }
  }
  const double t = sw.seconds();
  report.add("sliding-window equivalence", worst <= 1e-10 && t < 60,
             fmt("20 models, %zu cells, max |diff| %.2e (<= 1e-10, double), %.1f s (< 60 s)", cells, worst, t));
}

void receptive_fields(Report& report, const RunConfig& cfg) {
  const std::vector<Window> worked{{224, 32, 0}, {3, 1, 1}};
  const Geometry g = receptive_field(worked);
  bool ok = g.rf == 288 && g.stride == 32;
  std::string detail = fmt("rf 224 stride 32 + 3x3 conv -> rf %zu stride %zu (want 288, 32)", g.rf, g.stride);

  // Five VGG blocks reach stride 32; one more 3x3 conv adds 2 * 32.
  Model vgg = build_patch_classifier(BlockSpec::parse_list("vgg:2x2,vgg:2x2,vgg:2x3,vgg:2x3,vgg:2x3"), 224, 224);
  const Geometry stem = vgg.stem_geometry();
  std::vector<Window> extended{{stem.rf, stem.stride, 0}, {3, 1, 1}};
  ok = ok && stem.stride == 32 && receptive_field(extended).rf == stem.rf + 64;

  // Empirical cone on the configured stem: perturbing one pixel changes a
  // stem cell iff the pixel lies in that cell's window.
  Model m = build_patch_classifier(cfg.patch.blocks, cfg.patch.size, cfg.patch.size, 5, ops::Padding::valid, 17);
  const Geometry dg = m.stem_geometry();
  std::mt19937_64 gen(3);
  const std::size_t n = dg.rf + 3 * dg.stride;
  Tensor img = oracle::random_tensor({1, 1, n, n}, gen);
  const Tensor base = m.stem_features(img);
  const std::size_t ci = 1, cj = 2;
  std::size_t y_lo = n, y_hi = 0, x_lo = n, x_hi = 0, outside = 0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const Real keep = img.at(0, 0, y, x);
      img.at(0, 0, y, x) = keep + 100;
      const Tensor moved = m.stem_features(img);
      img.at(0, 0, y, x) = keep;
      bool changed = false;
      for (std::size_t c = 0; c < base.shape().c; ++c) changed |= moved.at(0, c, ci, cj) != base.at(0, c, ci, cj);
      if (!changed) continue;
      y_lo = std::min(y_lo, y), y_hi = std::max(y_hi, y), x_lo = std::min(x_lo, x), x_hi = std::max(x_hi, x);
      const bool inside = y >= ci * dg.stride && y < ci * dg.stride + dg.rf && x >= cj * dg.stride &&
                          x < cj * dg.stride + dg.rf;
      outside += !inside;
    }
  const bool tight = y_lo == ci * dg.stride && y_hi + 1 == ci * dg.stride + dg.rf && x_lo == cj * dg.stride &&
                     x_hi + 1 == cj * dg.stride + dg.rf;
  ok = ok && outside == 0 && tight;
  detail += fmt("; stem %s: rf %zu stride %zu, perturbation cone %zux%zu, %zu pixels outside",
                to_string(cfg.patch.blocks).c_str(), dg.rf, dg.stride, y_hi + 1 - y_lo, x_hi + 1 - x_lo, outside);
  report.add("receptive-field arithmetic", ok, detail);
}

void gradients(Report& report, int seeds) {
  Stopwatch sw;
  std::size_t configs = 0, failed = 0, checked = 0, skipped = 0;
  double worst = 0;
  std::string first_failure;
  for (const auto& c : gradcheck::all_cases()) {
    for (int s = 1; s <= seeds; ++s) {
      const auto r = c.run(7919 * static_cast<std::uint64_t>(s) + 101);
      ++configs;
      checked += r.checked;
      skipped += r.skipped;
      worst = std::max(worst, r.max_rel);
      const bool ok = r.pass() && r.skipped * 10 <= r.checked + r.skipped;
      if (!ok && failed++ == 0) first_failure = fmt(", first failure %s seed %d", r.name.c_str(), s);
    }
  }
  const double t = sw.seconds();
  report.add("gradient checks", failed == 0 && configs >= 100 && t < 300,
             fmt("%zu configurations over %zu cases, %zu elements, max rel %.2e (<= 1e-6), %zu kink skips, %.1f s "
                 "(< 300 s)%s",
                 configs, gradcheck::all_cases().size(), checked, worst, skipped, t, first_failure.c_str()));
}

void auc_oracles(Report& report) {
  std::mt19937_64 g(77);
  std::size_t exact = 0, sets = 0;
  double trap = 0;
  while (sets < 200) {
    const std::size_t n = 2 + g() % 199;
    std::vector<int> y(n);
    std::vector<Real> s(n);
    const int levels = 1 + static_cast<int>(g() % 12);  // few levels force ties
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(g() % 2);
      s[i] = static_cast<Real>(g() % static_cast<unsigned>(levels)) / 4.0;
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<long>(n)) continue;
    ++sets;
    // Brute-force statistic written out here: wins plus half ties over pairs.
    double num = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    const double brute = num / (static_cast<double>(pos) * static_cast<double>(static_cast<long>(n) - pos));
    const Real rank = auc_rank(y, s);
    exact += rank == brute && auc_pairwise(y, s) == brute && auc(y, s) == brute;
    trap = std::max(trap, std::abs(trapezoid_area(roc_curve(y, s)) - brute));
  }
  report.add("AUC oracle equivalence", exact == 200 && trap <= 1e-12,
             fmt("%zu/200 tied sets exact (rank = pairwise = brute force), max trapezoid diff %.1e (<= 1e-12)",
                 exact, trap));
}

// --------------------------------------------------------------- exact checks

bool balance_law() {
  std::mt19937_64 g(12);
  for (int it = 0; it < 500; ++it) {
    const std::size_t b = 1 + g() % 64, k = 2 + g() % 4;
    std::vector<int> y(b);
    for (int& v : y) v = static_cast<int>(g() % k);
    std::map<int, std::size_t> count;
    for (int v : y) ++count[v];
    const auto w = balance_batch_weights(y, k);
    for (std::size_t i = 0; i < b; ++i) {
      const double want = static_cast<double>(b) / (static_cast<double>(count.size()) * static_cast<double>(count[y[i]]));
      if (w[i] != want) return false;
    }
  }
  return true;
}

/// Patient counts per split and stratum must match the rounding rule
/// exactly; patients never straddle splits.
void split_checks(bool* stratified, bool* disjoint, const GeneratorConfig& gen) {
  *stratified = *disjoint = true;
  auto round_take = [](std::size_t total, std::size_t n_pos, double frac) {
    const auto n = static_cast<std::size_t>(std::lround(static_cast<double>(total) * frac));
    const auto k = std::min<std::size_t>(
        n_pos, static_cast<std::size_t>(std::lround(static_cast<double>(n) * static_cast<double>(n_pos) /
                                                    static_cast<double>(total))));
    return std::pair{k, n - k};
  };
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const std::size_t patients = 30 + 17 * seed;
    auto images = generate_dataset(patients, 2, Platform::A, 0.25 + 0.05 * static_cast<double>(seed), seed, gen);
    split_stratified(images, 0.85, 0.10, seed);
    std::map<std::string, std::string> where;
    std::map<std::string, bool> positive;
    for (const auto& im : images) {
      auto [it, fresh] = where.try_emplace(im.patient_id, im.split);
      if (!fresh && it->second != im.split) *disjoint = false;
      positive[im.patient_id] = positive[im.patient_id] || im.label == 1;
    }
    std::map<std::string, std::pair<std::size_t, std::size_t>> got;
    std::size_t pos = 0;
    for (const auto& [p, split] : where) {
      (positive[p] ? got[split].first : got[split].second)++;
      pos += positive[p];
    }
    const auto test = round_take(patients, pos, 0.15);
    const auto val = round_take(patients - test.first - test.second, pos - test.first, 0.10);
    if (got["test"] != test || got["val"] != val) *stratified = false;
  }
}

bool s10_overlap(const GeneratorConfig& gen, std::size_t size, double overlap_min, std::size_t* patches) {
  auto images = generate_dataset(20, 2, Platform::A, 0.6, 5, gen);
  *patches = 0;
  for (const auto& im : images) {
    // Reference: the ROI-centered patch, clamped into the image.
    std::vector<Box> refs;
    for (const auto& roi : im.rois) {
      const auto cx = static_cast<long>(roi.box.x + roi.box.w / 2) - static_cast<long>(size / 2);
      const auto cy = static_cast<long>(roi.box.y + roi.box.h / 2) - static_cast<long>(size / 2);
      refs.push_back({static_cast<std::size_t>(std::clamp(cx, 0L, static_cast<long>(im.pixels.width - size))),
                      static_cast<std::size_t>(std::clamp(cy, 0L, static_cast<long>(im.pixels.height - size))),
                      size, size});
    }
    std::size_t roi_patches = 0;
    for (const auto& p : sample_patches(im, SamplingScheme::S10, size, overlap_min, 3)) {
      const Box b{p.x, p.y, size, size};
      ++*patches;
      if (p.cls != 0) {
        ++roi_patches;
        double best = 0;
        for (const auto& r : refs) best = std::max(best, overlap_ratio(b, r));
        if (best < overlap_min) return false;
      } else {
        for (const auto& roi : im.rois)
          if (intersection_area(b, roi.box) != 0) return false;
      }
    }
    if (roi_patches != 10 * im.rois.size()) return false;
  }
  return true;
}

bool serialization_round_trip() {
  Model patch = build_patch_classifier(BlockSpec::parse_list("vgg:4x1,resnet:2-2-6x1"), 16, 16, 5,
                                       ops::Padding::same, 5);
  std::mt19937_64 g(8);
  for (Variant v : {Variant::patch, Variant::allconv_no_heatmap, Variant::allconv_with_heatmap, Variant::fc_top}) {
    ConversionSpec cv;
    cv.variant = v;
    cv.top = BlockSpec::parse_list("resnet:2-2-4x1");
    cv.pool = 2;
    cv.fc1 = 6;
    cv.fc2 = 4;
    cv.image_h = cv.image_w = 40;
    cv.seed = 77;
    Model m = v == Variant::patch ? patch : convert_to_whole_image(patch, cv);
    m.forward(oracle::random_tensor({2, 1, 40, 40}, g), Mode::train);
    const auto bytes = serialize(m);
    Model back = deserialize(bytes);
    if (serialize(back) != bytes || !(back.snapshot() == m.snapshot()) || !(back.spec() == m.spec())) return false;
    const Tensor x = oracle::random_tensor({1, 1, 40, 40}, g);
    const Tensor a = m.forward(x, Mode::infer), b = back.forward(x, Mode::infer);
    if (!std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end())) return false;
  }
  return true;
}

bool determinism(const GeneratorConfig& base) {
  GeneratorConfig gen = base;
  gen.height = gen.width = 64;
  auto a = generate_dataset(12, 2, Platform::A, 0.5, 9, gen), b = generate_dataset(12, 2, Platform::A, 0.5, 9, gen);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].pixels.pixels != b[i].pixels.pixels || a[i].label != b[i].label) return false;
  split_stratified(a, 0.7, 0.2, 4);
  const double mean = compute_train_mean(a);
  const LabeledSet train = make_patch_set(a, "train", SamplingScheme::S10, 16, 0.9, 1, mean);
  const LabeledSet val = make_patch_set(a, "val", SamplingScheme::S10, 16, 0.9, 2, mean);
  TrainSchedule sched;
  sched.stages = {{1e-3, TrainableTop::top(1), 1, 0}, {1e-3, TrainableTop::all(), 1, 1e-3}};
  sched.batch_size = 16;
  TrainOptions opt;
  opt.seed = 21;
  opt.augmentation = AugmentationPolicy::reference();
  auto run = [&] {
    Model m = build_patch_classifier(BlockSpec::parse_list("vgg:4x1,vggbn:8x1"), 16, 16, 5, ops::Padding::same, 6);
    const auto r = run_schedule(m, train, val, sched, opt);
    return std::pair{serialize(m), r};
  };
  const auto [m1, r1] = run();
  const auto [m2, r2] = run();
  if (m1 != m2 || r1.log.size() != r2.log.size()) return false;
  for (std::size_t i = 0; i < r1.log.size(); ++i)
    if (r1.log[i].train_loss != r2.log[i].train_loss || r1.log[i].val_metric != r2.log[i].val_metric) return false;
  return true;
}

void zero_tolerance(Report& report, const RunConfig& cfg) {
  bool stratified = false, disjoint = false;
  split_checks(&stratified, &disjoint, cfg.data.generator);
  std::size_t patches = 0;
  const bool checks[] = {balance_law(), stratified, disjoint,
                         s10_overlap(cfg.data.generator, cfg.patch.size, cfg.patch.overlap_min, &patches),
                         serialization_round_trip(), determinism(cfg.data.generator)};
  const char* names[] = {"balance-law", "stratification", "disjointness", "s10-overlap", "round-trip", "determinism"};
  std::string detail;
  bool all = true;
  for (std::size_t i = 0; i < 6; ++i) {
    detail += std::string(detail.empty() ? "" : ", ") + names[i] + (checks[i] ? " ok" : " FAILED");
    all = all && checks[i];
  }
  report.add("exact data/model invariants", all, detail + fmt(" (%zu S10 patches)", patches));
}

}  // namespace

void run_exact(Report& report, const RunConfig& cfg, int gradient_seeds) {
  sliding_window(report);
  receptive_fields(report, cfg);
  gradients(report, gradient_seeds);
  auc_oracles(report);
  zero_tolerance(report, cfg);
}

}  // namespace acceptance
