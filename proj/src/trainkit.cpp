#include "p2w/trainkit.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "p2w/error.hpp"
#include "p2w/evalkit.hpp"
#include "p2w/kernels.hpp"
#include "p2w/ops.hpp"

namespace p2w {

// ------------------------------------------------------------------ Adam

void adam_step(std::span<Real> params, std::span<const Real> grads, AdamMoments& state,
               const AdamConfig& config, Real learning_rate, Real weight_decay) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0);
    state.v.assign(params.size(), 0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: moment size does not match parameter size");
  }
  ++state.step;
  const auto t = static_cast<Real>(state.step);
  kernels::AdamArgs args{learning_rate,
                         config.beta1,
                         config.beta2,
                         config.epsilon,
                         1 - std::pow(config.beta1, t),
                         1 - std::pow(config.beta2, t),
                         config.decoupled_decay ? Real{0} : weight_decay};
  if (config.decoupled_decay && weight_decay != 0) {
    const Real f = learning_rate * weight_decay;
    for (Real& p : params) p -= f * p;
  }
  kernels::active().adam(params.data(), grads.data(), state.m.data(), state.v.data(), params.size(),
                         args);
}

void Adam::step(std::span<const ParamRef> params, Real learning_rate, Real weight_decay) {
  for (const auto& p : params) {
    p.value->ensure_grad();
    adam_step(p.value->data(), p.value->grad(), state_[p.name], config_, learning_rate,
              p.decay ? weight_decay : Real{0});
  }
}

// ------------------------------------------------------------- schedules

TrainableTop TrainableTop::parse(std::string_view text) {
  if (text == "all" || text == "ALL") return all();
  if (text == "new") return new_layers();
  std::size_t k = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), k);
  if (ec != std::errc() || p != text.data() + text.size() || text.empty()) {
    config_error("trainable layers must be 'all', 'new' or an integer, got '" + std::string(text) + "'");
  }
  return top(k);
}

std::string TrainableTop::str() const {
  switch (kind) {
    case Kind::all: return "all";
    case Kind::new_layers: return "new";
    case Kind::count: return std::to_string(count);
  }
  return "?";
}

std::optional<std::size_t> TrainableTop::resolve(const Model& model) const {
  switch (kind) {
    case Kind::all: return std::nullopt;
    case Kind::new_layers: return model.new_layer_count();
    case Kind::count: return count;
  }
  return std::nullopt;
}

void TrainSchedule::validate() const {
  if (stages.empty()) config_error("training schedule has no stages");
  if (batch_size == 0) config_error("batch size must be positive");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string at = "stage " + std::to_string(i + 1) + ": ";
    if (!std::isfinite(s.learning_rate) || s.learning_rate < 0) config_error(at + "bad learning rate");
    if (s.epochs == 0) config_error(at + "epochs must be positive");
    if (!std::isfinite(s.weight_decay) || s.weight_decay < 0) config_error(at + "bad weight decay");
  }
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.epsilon > 0)) {
    config_error("bad Adam hyperparameters");
  }
}

TrainSchedule TrainSchedule::reference_patch(std::size_t top_k) {
  TrainSchedule s;
  s.stages = {{1e-3, TrainableTop::top(1), 3, 0},
              {1e-4, TrainableTop::top(top_k), 10, 0},
              {1e-5, TrainableTop::all(), 37, 0}};
  s.batch_size = 32;
  return s;
}

TrainSchedule TrainSchedule::reference_whole() {
  TrainSchedule s;
  s.stages = {{1e-4, TrainableTop::new_layers(), 30, 0.001}, {1e-5, TrainableTop::all(), 20, 0.01}};
  s.batch_size = 2;
  return s;
}

std::vector<Real> balance_batch_weights(std::span<const int> labels, std::size_t class_count) {
  std::vector<std::size_t> count(class_count, 0);
  for (const int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
      throw ShapeError("balance_batch_weights: label " + std::to_string(y) + " out of range");
    }
    ++count[static_cast<std::size_t>(y)];
  }
  const auto present = static_cast<Real>(std::count_if(count.begin(), count.end(), [](auto c) { return c > 0; }));
  const auto b = static_cast<Real>(labels.size());
  std::vector<Real> w;
  w.reserve(labels.size());
  for (const int y : labels) w.push_back(b / (present * static_cast<Real>(count[static_cast<std::size_t>(y)])));
  return w;
}

// ---------------------------------------------------------- augmentation

AugmentationPolicy AugmentationPolicy::reference() {
  AugmentationPolicy p;
  p.horizontal_flip = p.vertical_flip = true;
  p.rotation_lo = -25;
  p.rotation_hi = 25;
  p.shear_lo = -0.2;
  p.shear_hi = 0.2;
  p.zoom_lo = 0.8;
  p.zoom_hi = 1.2;
  p.shift_lo = -20;
  p.shift_hi = 20;
  return p;
}

AugmentParams sample_augmentation(const AugmentationPolicy& policy, Rng& rng) {
  // Every draw happens regardless of the policy so the stream layout is fixed.
  AugmentParams a;
  a.flip_h = rng.bernoulli(0.5) && policy.horizontal_flip;
  a.flip_v = rng.bernoulli(0.5) && policy.vertical_flip;
  a.rotation = rng.uniform_closed(policy.rotation_lo, policy.rotation_hi);
  a.shear = rng.uniform_closed(policy.shear_lo, policy.shear_hi);
  a.zoom_x = rng.uniform_closed(policy.zoom_lo, policy.zoom_hi);
  a.zoom_y = rng.uniform_closed(policy.zoom_lo, policy.zoom_hi);
  a.shift = rng.uniform_closed(policy.shift_lo, policy.shift_hi);
  return a;
}

namespace {

Real snap(Real v) {
  const Real r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

}  // namespace

Tensor apply_augmentation(const Tensor& image, const AugmentParams& a) {
  const Shape& s = image.shape();
  constexpr Real kPi = 3.14159265358979323846;
  const Real th = a.rotation * kPi / 180;
  const Real fx = a.flip_h ? -1 : 1;
  const Real fy = a.flip_v ? -1 : 1;
  // Output-to-source matrix M = F * R * S * Z, acting on (x, y) offsets from
  // the image center.
  const Real r00 = std::cos(th), r01 = -std::sin(th), r10 = std::sin(th), r11 = std::cos(th);
  const Real s00 = 1, s01 = -std::sin(a.shear), s10 = 0, s11 = std::cos(a.shear);
  const Real rs00 = r00 * s00 + r01 * s10, rs01 = r00 * s01 + r01 * s11;
  const Real rs10 = r10 * s00 + r11 * s10, rs11 = r10 * s01 + r11 * s11;
  const Real m00 = fx * rs00 * a.zoom_x, m01 = fx * rs01 * a.zoom_y;
  const Real m10 = fy * rs10 * a.zoom_x, m11 = fy * rs11 * a.zoom_y;
  const bool identity = m00 == 1 && m01 == 0 && m10 == 0 && m11 == 1;

  Tensor out = image;
  if (!identity) {
    const Real cx = (static_cast<Real>(s.w) - 1) / 2;
    const Real cy = (static_cast<Real>(s.h) - 1) / 2;
    const auto w = static_cast<std::ptrdiff_t>(s.w), h = static_cast<std::ptrdiff_t>(s.h);
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
      const Real* src = image.raw() + p * s.plane();
      Real* dst = out.raw() + p * s.plane();
      auto pix = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> Real {
        return (x < 0 || y < 0 || x >= w || y >= h) ? Real{0} : src[y * w + x];
      };
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t x = 0; x < s.w; ++x) {
          const Real dx = static_cast<Real>(x) - cx, dy = static_cast<Real>(y) - cy;
          const Real sx = snap(cx + m00 * dx + m01 * dy);
          const Real sy = snap(cy + m10 * dx + m11 * dy);
          const auto x0 = static_cast<std::ptrdiff_t>(std::floor(sx));
          const auto y0 = static_cast<std::ptrdiff_t>(std::floor(sy));
          const Real ax = sx - static_cast<Real>(x0), ay = sy - static_cast<Real>(y0);
          Real v = (1 - ax) * (1 - ay) * pix(y0, x0);
          if (ax != 0) v += ax * (1 - ay) * pix(y0, x0 + 1);
          if (ay != 0) v += (1 - ax) * ay * pix(y0 + 1, x0);
          if (ax != 0 && ay != 0) v += ax * ay * pix(y0 + 1, x0 + 1);
          dst[y * s.w + x] = v;
        }
      }
    }
  }
  if (a.shift != 0) {
    for (Real& v : out.data()) v = std::clamp(v + a.shift, Real{0}, Real{255});
  }
  return out;
}

Tensor augment(const Tensor& image, const AugmentationPolicy& policy, Rng& rng) {
  return apply_augmentation(image, sample_augmentation(policy, rng));
}

// -------------------------------------------------------------- training

void LabeledSet::add(Tensor image, int label, std::string group, std::string id) {
  images.push_back(std::move(image));
  labels.push_back(label);
  groups.push_back(std::move(group));
  ids.push_back(std::move(id));
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> index) const {
  LabeledSet out;
  out.mean = mean;
  for (const auto i : index) {
    out.images.push_back(images.at(i));
    out.labels.push_back(labels.at(i));
    out.groups.push_back(i < groups.size() ? groups[i] : std::string());
    out.ids.push_back(i < ids.size() ? ids[i] : std::string());
  }
  return out;
}

namespace {

SelectionMetric resolve_metric(SelectionMetric m, const Model& model) {
  if (m != SelectionMetric::automatic) return m;
  return model.is_patch() ? SelectionMetric::accuracy : SelectionMetric::auc;
}

Tensor centered(const Tensor& image, Real mean) {
  Tensor x = image;
  if (mean != 0) {
    for (Real& v : x.data()) v -= mean;
  }
  return x;
}

std::vector<ParamRef> trainable_params(Model& model) {
  std::vector<ParamRef> out;
  for (Layer* leaf : model.leaves()) {
    if (!leaf->frozen()) leaf->collect_params(out);
  }
  return out;
}

}  // namespace

Evaluation evaluate_set(Model& model, const LabeledSet& data, SelectionMetric metric,
                        std::size_t batch) {
  metric = resolve_metric(metric, model);
  Evaluation ev;
  if (data.empty()) return ev;
  batch = std::max<std::size_t>(batch, 1);
  Real loss = 0;
  for (std::size_t i = 0; i < data.size();) {
    std::vector<Tensor> parts;
    const Shape first = data.images[i].shape();
    std::size_t j = i;
    while (j < data.size() && j - i < batch && data.images[j].shape() == first) {
      parts.push_back(centered(data.images[j], data.mean));
      ++j;
    }
    const Tensor logits = model.forward(stack(parts), Mode::infer);
    const std::size_t c = logits.shape().sample();
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::span<const Real> z(logits.plane(k), c);
      const int y = data.labels[i + k];
      if (y < 0 || static_cast<std::size_t>(y) >= c) throw ShapeError("evaluate: label out of range");
      loss += ops::cross_entropy(z, y);
      const auto p = ops::softmax(z);
      ev.scores.push_back(c > 1 ? p[1] : p[0]);
      ev.predicted.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
    }
    i = j;
  }
  ev.loss = loss / static_cast<Real>(data.size());
  const bool both = std::count(data.labels.begin(), data.labels.end(), 1) > 0 &&
                    std::count(data.labels.begin(), data.labels.end(), 0) > 0;
  const bool binary = std::all_of(data.labels.begin(), data.labels.end(), [](int y) { return y == 0 || y == 1; });
  if (metric == SelectionMetric::auc && both && binary) {
    ev.metric = auc(data.labels, ev.scores);
  } else {
    ev.metric = accuracy(data.labels, ev.predicted);
  }
  return ev;
}

TrainResult run_schedule(Model& model, const LabeledSet& train, const LabeledSet& val,
                         const TrainSchedule& schedule, const TrainOptions& options) {
  schedule.validate();
  if (train.empty()) data_error("training set is empty");
  if (train.labels.size() != train.size()) data_error("training set labels do not match images");
  const SelectionMetric metric = resolve_metric(options.metric, model);
  const std::size_t classes = model.output_classes();
  // Resolve every stage before touching the model so a bad schedule fails early.
  const std::size_t leaf_count = model.leaves().size();
  for (const auto& st : schedule.stages) {
    const auto k = st.trainable.resolve(model);
    if (k && *k > leaf_count) {
      config_error("schedule asks for " + std::to_string(*k) + " trainable layers but the model has " +
                   std::to_string(leaf_count));
    }
  }

  TrainResult result;
  std::optional<Snapshot> best;
  std::size_t epoch = 0;
  using Clock = std::chrono::steady_clock;

  for (std::size_t si = 0; si < schedule.stages.size(); ++si) {
    const Stage& stage = schedule.stages[si];
    model.set_trainable_top(stage.trainable.resolve(model));
    const auto params = trainable_params(model);
    Adam adam(schedule.adam);

    for (std::size_t e = 0; e < stage.epochs; ++e) {
      ++epoch;
      const auto t0 = Clock::now();
      const std::uint64_t epoch_seed = derive_seed(options.seed, epoch);
      std::vector<std::size_t> order(train.size());
      std::iota(order.begin(), order.end(), 0);
      Rng shuffler(derive_seed(epoch_seed, "shuffle"));
      shuffler.shuffle(order.begin(), order.end());

      Real loss_sum = 0;
      for (std::size_t b = 0; b < order.size(); b += schedule.batch_size) {
        const std::size_t end = std::min(order.size(), b + schedule.batch_size);
        std::vector<Tensor> parts;
        std::vector<int> labels;
        for (std::size_t k = b; k < end; ++k) {
          const std::size_t i = order[k];
          if (options.augmentation.enabled()) {
            Rng rng(derive_seed(derive_seed(epoch_seed, "augment"), i));
            parts.push_back(centered(augment(train.images[i], options.augmentation, rng), train.mean));
          } else {
            parts.push_back(centered(train.images[i], train.mean));
          }
          labels.push_back(train.labels[i]);
        }
        const std::vector<Real> weights = options.balance_classes
                                              ? balance_batch_weights(labels, classes)
                                              : std::vector<Real>(labels.size(), 1);
        model.zero_grad();
        const Tensor logits = model.forward(stack(parts), Mode::train);
        const auto loss = ops::cross_entropy(logits, labels, weights);
        if (!std::isfinite(loss.loss)) {
          throw Error(ErrorKind::numeric, "non-finite training loss at epoch " + std::to_string(epoch));
        }
        model.backward(loss.grad);
        adam.step(params, stage.learning_rate, stage.weight_decay);
        loss_sum += loss.loss * static_cast<Real>(labels.size());
      }

      EpochLog row{epoch, si + 1, loss_sum / static_cast<Real>(train.size()), 0, 0, 0};
      if (!val.empty()) {
        const Evaluation ev = evaluate_set(model, val, metric, options.eval_batch);
        row.val_loss = ev.loss;
        row.val_metric = ev.metric;
        if (!best || ev.metric > result.best_metric) {
          best = model.snapshot();
          result.best_metric = ev.metric;
          result.best_epoch = epoch;
        }
      } else {
        result.best_epoch = epoch;
      }
      if (options.record_time) row.seconds = std::chrono::duration<Real>(Clock::now() - t0).count();
      result.log.push_back(row);
    }
  }
  if (best) model.restore(*best);
  model.set_trainable_top(std::nullopt);
  return result;
}

TrainResult resume_schedule(Model& model, const LabeledSet& train, const LabeledSet& val,
                            const TrainSchedule& schedule, std::size_t extra_epochs,
                            const TrainOptions& options) {
  schedule.validate();
  TrainSchedule cont = schedule;
  cont.stages = {schedule.stages.back()};
  cont.stages.front().epochs = extra_epochs;
  return run_schedule(model, train, val, cont, options);
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochLog> log) {
  std::ofstream f(path);
  if (!f) data_error("cannot write " + path.string());
  f.precision(17);
  f << "epoch,stage,train_loss,val_loss,val_metric,seconds\n";
  for (const auto& r : log) {
    f << r.epoch << ',' << r.stage << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_metric
      << ',' << r.seconds << '\n';
  }
}

// -------------------------------------------------------------- transfer

std::vector<std::size_t> stratified_patient_subset(const LabeledSet& data, std::size_t patients,
                                                   std::uint64_t seed) {
  // Patient -> image indices, in first-appearance order.
  std::vector<std::string> names;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string g = i < data.groups.size() && !data.groups[i].empty() ? data.groups[i]
                                                                            : "#" + std::to_string(i);
    auto [it, fresh] = members.try_emplace(g);
    if (fresh) names.push_back(g);
    it->second.push_back(i);
  }
  if (patients > names.size()) {
    config_error("subset of " + std::to_string(patients) + " patients requested but only " +
                 std::to_string(names.size()) + " available");
  }
  std::vector<std::string> pos, neg;
  for (const auto& n : names) {
    const auto& idx = members[n];
    const bool positive = std::any_of(idx.begin(), idx.end(), [&](auto i) { return data.labels[i] == 1; });
    (positive ? pos : neg).push_back(n);
  }
  Rng rng(seed);
  rng.shuffle(pos.begin(), pos.end());
  rng.shuffle(neg.begin(), neg.end());
  auto take_pos = static_cast<std::size_t>(std::lround(static_cast<Real>(patients) * static_cast<Real>(pos.size()) /
                                                       static_cast<Real>(names.size())));
  take_pos = std::min(take_pos, pos.size());
  if (patients - take_pos > neg.size()) take_pos = patients - neg.size();
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < take_pos; ++k) {
    for (auto i : members[pos[k]]) out.push_back(i);
  }
  for (std::size_t k = 0; k < patients - take_pos; ++k) {
    for (auto i : members[neg[k]]) out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TransferResult finetune_transfer(Model& model, const LabeledSet& train, const LabeledSet& val,
                                 const TransferOptions& options) {
  TransferResult r;
  LabeledSet subset;
  if (options.subset_patients) {
    const auto idx = stratified_patient_subset(train, *options.subset_patients,
                                               derive_seed(options.seed, "subset"));
    subset = train.subset(idx);
    r.patients = *options.subset_patients;
  } else {
    subset = train;
    std::vector<std::string> g(train.groups.begin(), train.groups.end());
    std::sort(g.begin(), g.end());
    r.patients = static_cast<std::size_t>(std::unique(g.begin(), g.end()) - g.begin());
  }
  if (options.epochs > 0) {
    TrainSchedule s;
    s.stages = {{options.learning_rate, TrainableTop::all(), options.epochs, options.weight_decay}};
    s.batch_size = options.batch_size;
    TrainOptions t;
    t.balance_classes = options.balance_classes;
    t.augmentation = options.augmentation;
    t.seed = derive_seed(options.seed, "train");
    t.metric = SelectionMetric::auc;
    r.train = run_schedule(model, subset, val, s, t);
  }
  r.val_auc = evaluate_set(model, val, SelectionMetric::auc).metric;
  return r;
}

}  // namespace p2w
