#include "p2w/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "p2w/error.hpp"

namespace p2w {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.push_back(trim(s.substr(start, p == std::string_view::npos ? s.npos : p - start)));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

double to_double(const std::string& v, const std::string& where) {
  double d = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(d)) {
    config_error(where + ": expected a number, got '" + v + "'");
  }
  return d;
}

std::uint64_t to_uint(const std::string& v, const std::string& where) {
  std::uint64_t d = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    config_error(where + ": expected a non-negative integer, got '" + v + "'");
  }
  return d;
}

bool to_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  config_error(where + ": expected a boolean, got '" + v + "'");
}

/// Reads keys of one section and remembers which ones were consumed.
class SectionReader {
 public:
  SectionReader(const Ini& ini, std::string section, std::set<std::string>& seen)
      : ini_(ini), section_(std::move(section)), seen_(seen) {}

  std::optional<std::string> raw(const std::string& key) {
    seen_.insert(section_ + "." + key);
    return ini_.get(section_, key);
  }
  std::string where(const std::string& key) const { return ini_.source() + " [" + section_ + "] " + key; }

  template <class T>
  void read(const std::string& key, T& out) {
    const auto v = raw(key);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) {
      out = to_bool(*v, where(key));
    } else if constexpr (std::is_floating_point_v<T>) {
      out = to_double(*v, where(key));
    } else if constexpr (std::is_integral_v<T>) {
      out = static_cast<T>(to_uint(*v, where(key)));
    } else {
      out = *v;
    }
  }

  template <class Fn>
  void with(const std::string& key, Fn&& fn) {
    const auto v = raw(key);
    if (!v) return;
    try {
      fn(*v);
    } catch (const ShapeError& e) {
      config_error(where(key) + ": " + e.what());
    } catch (const Error& e) {
      config_error(where(key) + ": " + e.what());
    }
  }

 private:
  const Ini& ini_;
  std::string section_;
  std::set<std::string>& seen_;
};

TrainSchedule read_schedule(SectionReader& r, TrainSchedule s) {
  r.with("stages", [&](const std::string& v) { s.stages = parse_stages(v); });
  r.read("batch", s.batch_size);
  r.read("beta1", s.adam.beta1);
  r.read("beta2", s.adam.beta2);
  r.read("epsilon", s.adam.epsilon);
  r.read("decoupled_decay", s.adam.decoupled_decay);
  return s;
}

}  // namespace

Ini Ini::parse(std::string_view text, const std::string& source) {
  Ini ini;
  ini.source_ = source;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find_first_of("#;");
    const std::string t = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (t.empty()) continue;
    const std::string at = source + ":" + std::to_string(line_no);
    if (t.front() == '[') {
      if (t.back() != ']') config_error(at + ": unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      ini.data_[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) config_error(at + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) config_error(at + ": empty key");
    if (ini.data_[section].count(key)) config_error(at + ": duplicate key '" + key + "'");
    ini.data_[section][key] = trim(t.substr(eq + 1));
  }
  return ini;
}

Ini Ini::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) config_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

std::optional<std::string> Ini::get(const std::string& section, const std::string& key) const {
  auto s = data_.find(section);
  if (s == data_.end()) return std::nullopt;
  auto k = s->second.find(key);
  if (k == s->second.end()) return std::nullopt;
  return k->second;
}

std::vector<Stage> parse_stages(std::string_view text) {
  std::vector<Stage> stages;
  for (const auto& item : split(text, ',')) {
    if (item.empty()) continue;
    const auto f = split(item, ':');
    if (f.size() < 3 || f.size() > 4) {
      config_error("stage '" + item + "' must be lr:layers:epochs[:weight_decay]");
    }
    Stage s;
    s.learning_rate = to_double(f[0], "stage learning rate");
    s.trainable = TrainableTop::parse(f[1]);
    s.epochs = to_uint(f[2], "stage epochs");
    if (f.size() == 4) s.weight_decay = to_double(f[3], "stage weight decay");
    stages.push_back(s);
  }
  return stages;
}

RunConfig RunConfig::parse(const Ini& ini, const std::filesystem::path& base) {
  RunConfig c;
  std::set<std::string> seen;
  auto path_of = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() || base.empty() ? p : base / p;
  };

  SectionReader run(ini, "run", seen);
  run.read("seed", c.seed);

  SectionReader data(ini, "data", seen);
  data.read("patients", c.data.patients);
  data.read("images_per_patient", c.data.images_per_patient);
  data.read("prevalence", c.data.prevalence);
  data.with("platform", [&](const std::string& v) { c.data.platform = parse_platform(v); });
  auto& g = c.data.generator;
  data.read("height", g.height);
  data.read("width", g.width);
  data.read("radius_lo", g.radius_lo);
  data.read("radius_hi", g.radius_hi);
  data.read("benign_prob", g.benign_prob);
  data.read("noise_sd", g.noise_sd);
  data.read("contrast_lo", g.contrast_lo);
  data.read("contrast_hi", g.contrast_hi);
  data.read("b_gamma", g.b_gamma);
  data.read("b_contrast", g.b_contrast);
  data.read("b_offset", g.b_offset);
  data.read("train_frac", c.data.train_frac);
  data.read("val_frac", c.data.val_frac);
  data.with("dir", [&](const std::string& v) { c.data.dir = path_of(v); });

  SectionReader patch(ini, "patch", seen);
  c.patch.blocks = BlockSpec::parse_list("vgg:8x1,vgg:16x1,vgg:32x1");
  patch.with("blocks", [&](const std::string& v) { c.patch.blocks = BlockSpec::parse_list(v); });
  patch.read("size", c.patch.size);
  patch.with("padding", [&](const std::string& v) {
    if (v != "same" && v != "valid") config_error("padding must be same or valid");
    c.patch.padding = v == "same" ? ops::Padding::same : ops::Padding::valid;
  });
  patch.with("scheme", [&](const std::string& v) { c.patch.scheme = parse_scheme(v); });
  patch.read("overlap_min", c.patch.overlap_min);
  patch.read("balance", c.patch.balance);
  patch.read("augment", c.patch.augment);
  TrainSchedule ps;
  ps.stages = {{1e-3, TrainableTop::top(1), 2, 0}, {1e-4, TrainableTop::top(4), 4, 0}, {1e-5, TrainableTop::all(), 6, 0}};
  ps.batch_size = 32;
  SectionReader psr(ini, "patch.schedule", seen);
  c.patch.schedule = read_schedule(psr, ps);

  SectionReader pre(ini, "pretrain", seen);
  pre.read("patients", c.pretrain.patients);
  pre.read("epochs", c.pretrain.epochs);
  pre.read("lr", c.pretrain.learning_rate);
  pre.read("batch", c.pretrain.batch_size);
  pre.with("scheme", [&](const std::string& v) { c.pretrain.scheme = parse_scheme(v); });

  SectionReader whole(ini, "whole", seen);
  auto& cv = c.whole.conversion;
  cv.top = BlockSpec::parse_list("resnet:16-16-32x1,resnet:16-16-32x1");
  whole.with("variant", [&](const std::string& v) { cv.variant = parse_variant(v); });
  whole.with("top", [&](const std::string& v) { cv.top = BlockSpec::parse_list(v); });
  whole.with("activation", [&](const std::string& v) { cv.activation = parse_activation(v); });
  whole.read("pool", cv.pool);
  whole.read("fc1", cv.fc1);
  whole.read("fc2", cv.fc2);
  whole.read("shortcut", cv.shortcut);
  whole.read("classes", cv.classes);
  whole.read("balance", c.whole.balance);
  whole.read("augment", c.whole.augment);
  whole.read("resume_epochs", c.whole.resume_epochs);
  TrainSchedule ws;
  ws.stages = {{1e-4, TrainableTop::new_layers(), 4, 0.001}, {1e-5, TrainableTop::all(), 6, 0.01}};
  ws.batch_size = 2;
  SectionReader wsr(ini, "whole.schedule", seen);
  c.whole.schedule = read_schedule(wsr, ws);

  SectionReader ev(ini, "eval", seen);
  ev.read("augment", c.eval.augment);
  ev.with("threshold", [&](const std::string& v) { c.eval.threshold = to_double(v, "threshold"); });
  ev.with("cutoffs", [&](const std::string& v) {
    c.eval.features.cutoffs.clear();
    for (const auto& x : split(v, ',')) c.eval.features.cutoffs.push_back(to_double(x, "cutoff"));
  });
  ev.with("channels", [&](const std::string& v) {
    c.eval.features.channels.clear();
    for (const auto& x : split(v, ',')) c.eval.features.channels.push_back(to_bool(x, "channel mask"));
  });
  ev.with("connectivity", [&](const std::string& v) {
    if (v != "4" && v != "8") config_error("connectivity must be 4 or 8");
    c.eval.features.connectivity = v == "4" ? Connectivity::four : Connectivity::eight;
  });
  SectionReader forest(ini, "forest", seen);
  forest.read("trees", c.eval.forest.tree_count);
  forest.read("max_depth", c.eval.forest.max_depth);
  forest.read("min_samples_split", c.eval.forest.min_samples_split);
  forest.read("max_features", c.eval.forest.max_features);
  forest.read("bootstrap", c.eval.forest.bootstrap);

  SectionReader tr(ini, "transfer", seen);
  tr.with("dir", [&](const std::string& v) { c.transfer.dir = path_of(v); });
  c.transfer.subsets = {std::nullopt};
  tr.with("subsets", [&](const std::string& v) {
    c.transfer.subsets.clear();
    for (const auto& x : split(v, ',')) {
      if (x == "all") {
        c.transfer.subsets.push_back(std::nullopt);
      } else {
        c.transfer.subsets.push_back(to_uint(x, "subset size"));
      }
    }
  });
  tr.read("epochs", c.transfer.epochs);
  tr.read("lr", c.transfer.learning_rate);
  tr.read("weight_decay", c.transfer.weight_decay);
  tr.read("batch", c.transfer.batch_size);

  for (const auto& [section, keys] : ini.sections()) {
    for (const auto& [key, value] : keys) {
      if (!seen.count(section + "." + key)) {
        config_error(ini.source() + ": unknown key '" + key + "' in [" + section + "]");
      }
    }
  }

  // Validation against module preconditions, before any work starts.
  if (c.data.patients == 0 || c.data.images_per_patient == 0) config_error("[data] counts must be positive");
  if (!(c.data.prevalence >= 0 && c.data.prevalence <= 1)) config_error("[data] prevalence must lie in [0, 1]");
  if (!(c.data.train_frac > 0 && c.data.train_frac < 1)) config_error("[data] train_frac must lie in (0, 1)");
  if (!(c.data.val_frac >= 0 && c.data.val_frac < 1)) config_error("[data] val_frac must lie in [0, 1)");
  if (g.height < 16 || g.width < 16) config_error("[data] image size must be at least 16");
  if (!(g.radius_lo > 0 && g.radius_lo <= g.radius_hi)) config_error("[data] bad lesion radius range");
  if (c.patch.blocks.empty()) config_error("[patch] blocks must not be empty");
  if (c.patch.size == 0 || c.patch.size > std::min(g.height, g.width)) {
    config_error("[patch] size must be positive and fit the images");
  }
  if (c.patch.size % (std::size_t{1} << c.patch.blocks.size()) != 0) {
    config_error("[patch] size " + std::to_string(c.patch.size) + " is not divisible by the downsampling factor " +
                 std::to_string(std::size_t{1} << c.patch.blocks.size()));
  }
  if (!(c.patch.overlap_min > 0 && c.patch.overlap_min <= 1)) config_error("[patch] overlap_min must lie in (0, 1]");
  if (c.pretrain.epochs > 0 && (c.pretrain.patients < 2 || c.pretrain.batch_size == 0)) {
    config_error("[pretrain] needs at least 2 patients and a positive batch");
  }
  if (!(c.pretrain.learning_rate >= 0)) config_error("[pretrain] lr must be non-negative");
  c.patch.schedule.validate();
  c.whole.schedule.validate();
  if (cv.variant == Variant::patch) config_error("[whole] variant must be a whole-image variant");
  if (cv.variant != Variant::fc_top && cv.top.empty()) config_error("[whole] top blocks required");
  if (cv.classes < 2) config_error("[whole] classes must be at least 2");
  for (const Real cut : c.eval.features.cutoffs) {
    if (!(cut > 0 && cut < 1)) config_error("[eval] cutoffs must lie in (0, 1)");
  }
  if (c.eval.forest.tree_count == 0) config_error("[forest] trees must be positive");
  if (c.transfer.batch_size == 0) config_error("[transfer] batch must be positive");
  if (!(c.transfer.learning_rate >= 0)) config_error("[transfer] lr must be non-negative");
  cv.seed = derive_seed(c.seed, "convert");
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return parse(Ini::load(path), path.parent_path());
}

}  // namespace p2w
