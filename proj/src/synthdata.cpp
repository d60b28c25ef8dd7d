#include "p2w/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "p2w/error.hpp"
#include "p2w/rng.hpp"

namespace p2w {

std::string_view to_string(RoiClass c) {
  switch (c) {
    case RoiClass::benign_calc: return "benign_calc";
    case RoiClass::malignant_calc: return "malignant_calc";
    case RoiClass::benign_mass: return "benign_mass";
    case RoiClass::malignant_mass: return "malignant_mass";
  }
  return "?";
}

RoiClass parse_roi_class(std::string_view s) {
  for (RoiClass c : {RoiClass::benign_calc, RoiClass::malignant_calc, RoiClass::benign_mass,
                     RoiClass::malignant_mass}) {
    if (to_string(c) == s) return c;
  }
  data_error("unknown ROI class '" + std::string(s) + "'");
}

bool is_malignant(RoiClass c) { return c == RoiClass::malignant_calc || c == RoiClass::malignant_mass; }

std::string_view to_string(Platform p) { return p == Platform::A ? "A" : "B"; }

Platform parse_platform(std::string_view s) {
  if (s == "A") return Platform::A;
  if (s == "B") return Platform::B;
  data_error("unknown platform '" + std::string(s) + "'");
}

std::string_view to_string(View v) { return v == View::CC ? "CC" : "MLO"; }

int patch_class(RoiClass c) {
  switch (c) {
    case RoiClass::malignant_mass: return 1;
    case RoiClass::benign_mass: return 2;
    case RoiClass::malignant_calc: return 3;
    case RoiClass::benign_calc: return 4;
  }
  return 0;
}

std::size_t intersection_area(const Box& a, const Box& b) {
  const std::size_t x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const std::size_t x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  return (x1 > x0 && y1 > y0) ? (x1 - x0) * (y1 - y0) : 0;
}

// ------------------------------------------------------------- generator

namespace {

constexpr double kTwoPi = 6.283185307179586;

double sigmoid(double z) { return 1 / (1 + std::exp(-z)); }

/// Smooth noise in roughly [-1, 1]: a coarse random grid, bilinearly upsampled.
std::vector<double> smooth_noise(std::size_t h, std::size_t w, std::size_t cells, Rng& rng) {
  const std::size_t g = cells + 1;
  std::vector<double> grid(g * g);
  for (auto& v : grid) v = rng.normal() * 0.5;
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double gy = static_cast<double>(y) / static_cast<double>(h) * static_cast<double>(cells);
    const auto y0 = static_cast<std::size_t>(gy);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) / static_cast<double>(w) * static_cast<double>(cells);
      const auto x0 = static_cast<std::size_t>(gx);
      const double fx = gx - static_cast<double>(x0);
      out[y * w + x] = (1 - fy) * ((1 - fx) * grid[y0 * g + x0] + fx * grid[y0 * g + x0 + 1]) +
                       fy * ((1 - fx) * grid[(y0 + 1) * g + x0] + fx * grid[(y0 + 1) * g + x0 + 1]);
    }
  }
  return out;
}

struct Canvas {
  std::size_t h, w;
  std::vector<double> v;
  void add_gaussian(double cx, double cy, double sigma, double amp) {
    const double reach = 3 * sigma;
    const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx - reach));
    const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(cx + reach));
    const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy - reach));
    const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(cy + reach));
    for (auto y = std::max<std::ptrdiff_t>(y0, 0); y <= std::min<std::ptrdiff_t>(y1, h - 1); ++y) {
      for (auto x = std::max<std::ptrdiff_t>(x0, 0); x <= std::min<std::ptrdiff_t>(x1, w - 1); ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        v[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] +=
            amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
    }
  }
};

/// Draws one lesion and returns its extent (half-size of its box).
double draw_lesion(Canvas& c, RoiClass cls, double cx, double cy, double r, double amp, Rng& rng) {
  const auto lo_x = static_cast<std::ptrdiff_t>(std::floor(cx - 2 * r));
  const auto hi_x = static_cast<std::ptrdiff_t>(std::ceil(cx + 2 * r));
  const auto lo_y = static_cast<std::ptrdiff_t>(std::floor(cy - 2 * r));
  const auto hi_y = static_cast<std::ptrdiff_t>(std::ceil(cy + 2 * r));
  auto each = [&](auto&& fn) {
    for (auto y = std::max<std::ptrdiff_t>(lo_y, 0); y <= std::min<std::ptrdiff_t>(hi_y, c.h - 1); ++y) {
      for (auto x = std::max<std::ptrdiff_t>(lo_x, 0); x <= std::min<std::ptrdiff_t>(hi_x, c.w - 1); ++x) {
        c.v[static_cast<std::size_t>(y) * c.w + static_cast<std::size_t>(x)] +=
            fn(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
      }
    }
  };
  switch (cls) {
    case RoiClass::benign_mass: {
      const double ra = r * rng.uniform(0.85, 1.15), rb = r * rng.uniform(0.85, 1.15);
      const double phi = rng.uniform(0, kTwoPi);
      const double cp = std::cos(phi), sp = std::sin(phi);
      each([&](double dx, double dy) {
        const double u = (cp * dx + sp * dy) / ra, q = (-sp * dx + cp * dy) / rb;
        const double d = std::sqrt(u * u + q * q);
        return amp * sigmoid((1 - d) * r / 1.2);
      });
      return r * 1.2;
    }
    case RoiClass::malignant_mass: {
      const double core = 0.75 * r;
      const double phase = rng.uniform(0, kTwoPi);
      const int lobes = 3 + static_cast<int>(rng.below(3));
      each([&](double dx, double dy) {
        const double d = std::sqrt(dx * dx + dy * dy);
        const double th = std::atan2(dy, dx);
        const double edge = core * (1 + 0.2 * std::sin(lobes * th + phase));
        return amp * sigmoid((edge - d) / 0.9);
      });
      const int rays = 6 + static_cast<int>(rng.below(5));
      for (int k = 0; k < rays; ++k) {
        const double th = rng.uniform(0, kTwoPi);
        const double len = r * rng.uniform(1.3, 1.9);
        const double ux = std::cos(th), uy = std::sin(th);
        each([&](double dx, double dy) {
          const double along = dx * ux + dy * uy;
          if (along < core * 0.5 || along > len) return 0.0;
          const double perp = -dx * uy + dy * ux;
          return amp * 0.75 * (1 - along / len) * std::exp(-perp * perp / 0.5);
        });
      }
      return r * 1.9;
    }
    case RoiClass::malignant_calc: {
      const int n = 10 + static_cast<int>(rng.below(8));
      for (int k = 0; k < n; ++k) {
        const double rr = 0.8 * r * std::sqrt(rng.uniform()), th = rng.uniform(0, kTwoPi);
        c.add_gaussian(cx + rr * std::cos(th), cy + rr * std::sin(th), 0.7, amp * 1.5);
      }
      return r * 0.8 + 2;
    }
    case RoiClass::benign_calc: {
      const int n = 3 + static_cast<int>(rng.below(3));
      for (int k = 0; k < n; ++k) {
        const double rr = r * std::sqrt(rng.uniform()), th = rng.uniform(0, kTwoPi);
        c.add_gaussian(cx + rr * std::cos(th), cy + rr * std::sin(th), 1.3, amp * 1.2);
      }
      return r + 3;
    }
  }
  return r;
}

Box box_around(double cx, double cy, double half, std::size_t h, std::size_t w) {
  const double x0 = std::max(0.0, std::floor(cx - half)), y0 = std::max(0.0, std::floor(cy - half));
  const double x1 = std::min(static_cast<double>(w), std::ceil(cx + half) + 1);
  const double y1 = std::min(static_cast<double>(h), std::ceil(cy + half) + 1);
  return {static_cast<std::size_t>(x0), static_cast<std::size_t>(y0), static_cast<std::size_t>(x1 - x0),
          static_cast<std::size_t>(y1 - y0)};
}

AnnotatedImage render(const GeneratorConfig& cfg, bool positive, Platform platform, Rng& rng) {
  const std::size_t h = cfg.height, w = cfg.width;
  Canvas c{h, w, std::vector<double>(h * w, 12.0)};

  // Tissue: a soft-edged ellipse with two octaves of texture.
  const double ecx = static_cast<double>(w) * rng.uniform(0.45, 0.55);
  const double ecy = static_cast<double>(h) * rng.uniform(0.45, 0.55);
  const double ea = static_cast<double>(w) * rng.uniform(0.36, 0.45);
  const double eb = static_cast<double>(h) * rng.uniform(0.38, 0.46);
  const double base = rng.uniform(70, 100);
  const auto coarse = smooth_noise(h, w, 6, rng);
  const auto fine = smooth_noise(h, w, 16, rng);
  std::vector<double> tissue(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (static_cast<double>(x) - ecx) / ea, dy = (static_cast<double>(y) - ecy) / eb;
      const double t = dx * dx + dy * dy;
      const double m = std::clamp((1 - t) * 5, 0.0, 1.0);
      tissue[y * w + x] = m;
      c.v[y * w + x] += m * (base - 12 + 18 * coarse[y * w + x] + 8 * fine[y * w + x]);
    }
  }

  std::vector<RoiClass> lesions;
  const bool want_benign = rng.bernoulli(cfg.benign_prob);
  if (positive) lesions.push_back(rng.bernoulli(0.5) ? RoiClass::malignant_mass : RoiClass::malignant_calc);
  if (want_benign) lesions.push_back(rng.bernoulli(0.5) ? RoiClass::benign_mass : RoiClass::benign_calc);

  AnnotatedImage img;
  for (const RoiClass cls : lesions) {
    const double r = rng.uniform_closed(cfg.radius_lo, cfg.radius_hi);
    const double amp = rng.uniform_closed(cfg.contrast_lo, cfg.contrast_hi);
    // Centers inside the inner tissue region, away from earlier lesions.
    double cx = ecx, cy = ecy;
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double th = rng.uniform(0, kTwoPi), rr = 0.7 * std::sqrt(rng.uniform());
      cx = ecx + rr * ea * std::cos(th);
      cy = ecy + rr * eb * std::sin(th);
      const Box probe = box_around(cx, cy, 2 * r + 2, h, w);
      const bool clear = std::none_of(img.rois.begin(), img.rois.end(),
                                      [&](const Roi& o) { return intersection_area(o.box, probe) > 0; });
      if (clear) break;
    }
    const double half = draw_lesion(c, cls, cx, cy, r, amp, rng);
    img.rois.push_back({cls, box_around(cx, cy, half, h, w)});
  }

  for (auto& v : c.v) v += cfg.noise_sd * rng.normal();

  img.pixels = GrayImage(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    double v = std::clamp(c.v[i], 0.0, 255.0);
    if (platform == Platform::B) {
      v = cfg.b_offset + cfg.b_contrast * 255 * std::pow(v / 255, cfg.b_gamma);
    }
    img.pixels.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  img.label = std::any_of(img.rois.begin(), img.rois.end(), [](const Roi& r) { return is_malignant(r.cls); });
  img.platform = platform;
  return img;
}

std::string pad4(std::size_t v) {
  std::string s = std::to_string(v);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

}  // namespace

std::vector<AnnotatedImage> generate_dataset(std::size_t patients, std::size_t images_per_patient,
                                             Platform platform, double lesion_prevalence,
                                             std::uint64_t seed, const GeneratorConfig& config) {
  if (patients == 0 || images_per_patient == 0) config_error("generate_dataset: counts must be positive");
  if (!(lesion_prevalence >= 0 && lesion_prevalence <= 1)) config_error("prevalence must lie in [0, 1]");
  if (config.height < 16 || config.width < 16) config_error("generated images must be at least 16x16");
  if (!(config.radius_lo > 0 && config.radius_lo <= config.radius_hi)) config_error("bad lesion radius range");

  // Exactly round(prevalence * patients) positive patients.
  std::vector<std::size_t> order(patients);
  std::iota(order.begin(), order.end(), 0);
  Rng label_rng(derive_seed(seed, "labels"));
  label_rng.shuffle(order.begin(), order.end());
  const auto n_pos = static_cast<std::size_t>(std::lround(lesion_prevalence * static_cast<double>(patients)));
  std::vector<bool> positive(patients, false);
  for (std::size_t k = 0; k < n_pos; ++k) positive[order[k]] = true;

  std::vector<AnnotatedImage> out;
  out.reserve(patients * images_per_patient);
  const std::uint64_t image_seed = derive_seed(seed, "image");
  for (std::size_t p = 0; p < patients; ++p) {
    const std::string pid = std::string(to_string(platform)) + pad4(p);
    for (std::size_t v = 0; v < images_per_patient; ++v) {
      Rng rng(derive_seed(image_seed, p * images_per_patient + v));
      AnnotatedImage img = render(config, positive[p], platform, rng);
      img.patient_id = pid;
      img.view = v % 2 == 0 ? View::CC : View::MLO;
      img.id = pid + "_" + std::string(to_string(img.view)) + (v >= 2 ? std::to_string(v / 2) : "");
      out.push_back(std::move(img));
    }
  }
  return out;
}

// ----------------------------------------------------------------- split

std::vector<ManifestRow> split_stratified(std::vector<AnnotatedImage>& images, double train_frac,
                                          double val_frac_of_train, std::uint64_t seed) {
  if (!(train_frac > 0 && train_frac < 1) || !(val_frac_of_train >= 0 && val_frac_of_train < 1)) {
    config_error("split fractions out of range");
  }
  std::vector<std::string> patients;
  std::map<std::string, bool> positive;
  for (const auto& im : images) {
    auto [it, fresh] = positive.try_emplace(im.patient_id, false);
    if (fresh) patients.push_back(im.patient_id);
    it->second = it->second || im.label == 1;
  }
  std::vector<std::string> pos, neg;
  for (const auto& p : patients) (positive[p] ? pos : neg).push_back(p);
  if (pos.size() < 3 || neg.size() < 3) {
    data_error("too few patients to stratify: " + std::to_string(pos.size()) + " positive, " +
               std::to_string(neg.size()) + " negative (need 3 of each)");
  }
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(pos.begin(), pos.end());
  rng.shuffle(neg.begin(), neg.end());

  auto take = [](std::size_t total, std::size_t n_pos, double frac) {
    const auto n = static_cast<std::size_t>(std::lround(static_cast<double>(total) * frac));
    const auto k = static_cast<std::size_t>(
        std::lround(static_cast<double>(n) * static_cast<double>(n_pos) / static_cast<double>(total)));
    return std::pair{std::min(k, n_pos), n - std::min(k, n_pos)};
  };
  std::map<std::string, std::string> assign;
  const auto [test_pos, test_neg] = take(pos.size() + neg.size(), pos.size(), 1 - train_frac);
  const std::size_t rem_pos = pos.size() - test_pos, rem_neg = neg.size() - test_neg;
  const auto [val_pos, val_neg] = take(rem_pos + rem_neg, rem_pos, val_frac_of_train);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    assign[pos[i]] = i < test_pos ? "test" : i < test_pos + val_pos ? "val" : "train";
  }
  for (std::size_t i = 0; i < neg.size(); ++i) {
    assign[neg[i]] = i < test_neg ? "test" : i < test_neg + val_neg ? "val" : "train";
  }

  std::vector<ManifestRow> rows;
  for (auto& im : images) {
    im.split = assign[im.patient_id];
    rows.push_back({"images/" + im.id + ".pgm", im.patient_id, std::string(to_string(im.view)), im.label,
                    im.split, std::string(to_string(im.platform))});
  }
  return rows;
}

// -------------------------------------------------------------- sampling

SamplingScheme parse_scheme(std::string_view s) {
  if (s == "s1" || s == "S1") return SamplingScheme::S1;
  if (s == "s10" || s == "S10") return SamplingScheme::S10;
  config_error("unknown sampling scheme '" + std::string(s) + "'");
}

double overlap_ratio(const Box& patch, const Box& reference) {
  return static_cast<double>(intersection_area(patch, reference)) / static_cast<double>(patch.w * patch.h);
}

namespace {

GrayImage crop(const GrayImage& im, std::size_t x, std::size_t y, std::size_t p) {
  GrayImage out(p, p);
  for (std::size_t r = 0; r < p; ++r) {
    std::copy_n(im.pixels.begin() + static_cast<std::ptrdiff_t>((y + r) * im.width + x), p,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(r * p));
  }
  return out;
}

}  // namespace

std::vector<PatchSample> sample_patches(const AnnotatedImage& image, SamplingScheme scheme,
                                        std::size_t patch_size, double overlap_min, std::uint64_t seed) {
  const std::size_t p = patch_size;
  const GrayImage& im = image.pixels;
  if (p == 0 || p > im.height || p > im.width) {
    data_error("patch size " + std::to_string(p) + " does not fit image " + image.id);
  }
  Rng rng(derive_seed(seed, image.id));
  const std::size_t per_roi = scheme == SamplingScheme::S1 ? 1 : 10;
  const auto max_x = static_cast<std::ptrdiff_t>(im.width - p), max_y = static_cast<std::ptrdiff_t>(im.height - p);
  std::vector<PatchSample> out;

  for (const Roi& roi : image.rois) {
    const auto cx = static_cast<std::ptrdiff_t>(roi.box.x + roi.box.w / 2);
    const auto cy = static_cast<std::ptrdiff_t>(roi.box.y + roi.box.h / 2);
    const auto rx = std::clamp<std::ptrdiff_t>(cx - static_cast<std::ptrdiff_t>(p / 2), 0, max_x);
    const auto ry = std::clamp<std::ptrdiff_t>(cy - static_cast<std::ptrdiff_t>(p / 2), 0, max_y);
    const Box ref{static_cast<std::size_t>(rx), static_cast<std::size_t>(ry), p, p};
    const int cls = patch_class(roi.cls);
    if (scheme == SamplingScheme::S1) {
      out.push_back({crop(im, ref.x, ref.y, p), cls, image.id, ref.x, ref.y});
    } else {
      const auto reach = static_cast<std::ptrdiff_t>(std::floor((1 - overlap_min) * static_cast<double>(p)));
      for (std::size_t k = 0; k < per_roi; ++k) {
        Box b = ref;
        for (int attempt = 0; attempt < 1000; ++attempt) {
          const auto dx = static_cast<std::ptrdiff_t>(rng.below(static_cast<std::uint64_t>(2 * reach + 1))) - reach;
          const auto dy = static_cast<std::ptrdiff_t>(rng.below(static_cast<std::uint64_t>(2 * reach + 1))) - reach;
          const auto x = rx + dx, y = ry + dy;
          if (x < 0 || y < 0 || x > max_x || y > max_y) continue;
          const Box cand{static_cast<std::size_t>(x), static_cast<std::size_t>(y), p, p};
          if (overlap_ratio(cand, ref) >= overlap_min) {
            b = cand;
            break;
          }
        }
        out.push_back({crop(im, b.x, b.y, p), cls, image.id, b.x, b.y});
      }
    }
    for (std::size_t k = 0; k < per_roi; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        const Box cand{static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(max_x) + 1)),
                       static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(max_y) + 1)), p, p};
        const bool clear = std::none_of(image.rois.begin(), image.rois.end(),
                                        [&](const Roi& r) { return intersection_area(r.box, cand) > 0; });
        if (clear) {
          out.push_back({crop(im, cand.x, cand.y, p), 0, image.id, cand.x, cand.y});
          placed = true;
        }
      }
      if (!placed) data_error("image " + image.id + " too crowded to place a background patch");
    }
  }
  return out;
}

// ---------------------------------------------------------- preprocessing

std::vector<double> resize_bilinear(const GrayImage& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || image.height == 0 || image.width == 0) {
    throw ShapeError("resize: empty extent");
  }
  std::vector<double> out(height * width);
  if (height == image.height && width == image.width) {
    std::copy(image.pixels.begin(), image.pixels.end(), out.begin());
    return out;
  }
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  const double my = static_cast<double>(image.height - 1), mx = static_cast<double>(image.width - 1);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, my);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, mx);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double ax = fx - static_cast<double>(x0);
      out[y * width + x] = (1 - ay) * ((1 - ax) * image.at(y0, x0) + ax * image.at(y0, x1)) +
                           ay * ((1 - ax) * image.at(y1, x0) + ax * image.at(y1, x1));
    }
  }
  return out;
}

Tensor preprocess(const GrayImage& image, std::size_t height, std::size_t width, double train_mean) {
  auto v = resize_bilinear(image, height, width);
  for (auto& x : v) x -= train_mean;
  return Tensor(Shape{1, 1, height, width}, std::move(v));
}

Tensor to_tensor(const GrayImage& image) { return preprocess(image, image.height, image.width, 0); }

double compute_train_mean(std::span<const AnnotatedImage> images) {
  // Integer pixel sum keeps the result independent of image order.
  std::uint64_t sum = 0, count = 0;
  for (const auto& im : images) {
    if (im.split != "train") continue;
    for (const auto v : im.pixels.pixels) sum += v;
    count += im.pixels.pixels.size();
  }
  if (count == 0) data_error("training split is empty; cannot compute the mean");
  return static_cast<double>(sum) / static_cast<double>(count);
}

// ------------------------------------------------------------------- I/O

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::ofstream f(path, std::ios::binary);
  if (!f) data_error("cannot write " + path.string());
  f << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!f) data_error("write failed: " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) data_error("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (f.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(f, skip);
      } else if (!std::isspace(static_cast<unsigned char>(ch))) {
        t += ch;
        break;
      }
    }
    while (f.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) t += ch;
    return t;
  };
  if (token() != "P5") data_error(path.string() + " is not a binary PGM");
  std::size_t w = 0, h = 0, maxv = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxv = std::stoul(token());
  } catch (const std::exception&) {
    data_error("malformed PGM header in " + path.string());
  }
  if (maxv != 255 || w == 0 || h == 0) data_error("unsupported PGM (need 8-bit) in " + path.string());
  GrayImage im(h, w);
  f.read(reinterpret_cast<char*>(im.pixels.data()), static_cast<std::streamsize>(im.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(im.pixels.size())) data_error("truncated PGM " + path.string());
  return im;
}

void write_dataset(const std::filesystem::path& dir, std::span<const AnnotatedImage> images) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.csv");
  std::ofstream rois(dir / "rois.csv");
  if (!manifest || !rois) data_error("cannot write dataset files under " + dir.string());
  manifest << "path,patient_id,view,label,split,platform\n";
  rois << "path,class,x,y,w,h\n";
  bool split = !images.empty();
  for (const auto& im : images) {
    const std::string rel = "images/" + im.id + ".pgm";
    write_pgm(dir / rel, im.pixels);
    manifest << rel << ',' << im.patient_id << ',' << to_string(im.view) << ',' << im.label << ','
             << im.split << ',' << to_string(im.platform) << '\n';
    for (const auto& r : im.rois) {
      rois << rel << ',' << to_string(r.cls) << ',' << r.box.x << ',' << r.box.y << ',' << r.box.w << ','
           << r.box.h << '\n';
    }
    split = split && !im.split.empty();
  }
  if (split) {
    std::ofstream mean(dir / "mean.txt");
    mean.precision(17);
    mean << compute_train_mean(images) << '\n';
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::size_t to_size(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoul(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    data_error("bad number '" + s + "' in " + where);
  }
}

}  // namespace

DatasetOnDisk read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) data_error("missing manifest.csv under " + dir.string());
  DatasetOnDisk ds;
  std::map<std::string, std::size_t> by_path;
  std::string line;
  std::getline(manifest, line);
  if (line != "path,patient_id,view,label,split,platform") data_error("unexpected manifest header");
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 6) data_error("malformed manifest row: " + line);
    AnnotatedImage im;
    im.id = std::filesystem::path(c[0]).stem().string();
    im.pixels = read_pgm(dir / c[0]);
    im.patient_id = c[1];
    im.view = c[2] == "MLO" ? View::MLO : View::CC;
    im.label = static_cast<int>(to_size(c[3], "manifest label"));
    im.split = c[4];
    im.platform = parse_platform(c[5]);
    by_path[c[0]] = ds.images.size();
    ds.images.push_back(std::move(im));
  }
  std::ifstream rois(dir / "rois.csv");
  if (rois) {
    std::getline(rois, line);
    while (std::getline(rois, line)) {
      if (line.empty()) continue;
      const auto c = split_csv(line);
      if (c.size() != 6) data_error("malformed rois.csv row: " + line);
      auto it = by_path.find(c[0]);
      if (it == by_path.end()) data_error("rois.csv refers to unknown image " + c[0]);
      ds.images[it->second].rois.push_back(
          {parse_roi_class(c[1]),
           {to_size(c[2], "rois.csv"), to_size(c[3], "rois.csv"), to_size(c[4], "rois.csv"), to_size(c[5], "rois.csv")}});
    }
  }
  std::ifstream mean(dir / "mean.txt");
  if (mean >> ds.mean) ds.has_mean = true;
  return ds;
}

}  // namespace p2w
