// p2w: command-line driver for the patch-to-whole-image pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "p2w/baseline2step.hpp"
#include "p2w/config.hpp"
#include "p2w/error.hpp"
#include "p2w/evalkit.hpp"
#include "p2w/pipeline.hpp"
#include "p2w/serialize.hpp"

namespace fs = std::filesystem;
using namespace p2w;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto p = s.find(',', start);
    const auto item = s.substr(start, p == std::string::npos ? std::string::npos : p - start);
    if (!item.empty()) out.push_back(item);
    if (p == std::string::npos) break;
    start = p + 1;
  }
  return out;
}

void require_dir(const fs::path& p, const std::string& what) {
  if (p.empty()) config_error(what + " is not set");
  if (!fs::is_directory(p)) config_error(what + " " + p.string() + " does not exist");
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) config_error(what + " " + p.string() + " does not exist");
}

DatasetOnDisk load_split_dataset(const fs::path& dir) {
  DatasetOnDisk ds = read_dataset(dir);
  if (!ds.has_mean) data_error("dataset " + dir.string() + " has no mean.txt (not split?)");
  return ds;
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  return p.string() + suffix;
}

void print_eval(const std::string& who, std::span<const int> labels, std::span<const Real> scores,
                std::optional<double> threshold) {
  const Real a = auc(labels, scores);
  const auto op = operating_point(labels, scores, threshold);
  std::printf("%s auc=%.6f sensitivity=%.6f specificity=%.6f threshold=%.6f\n", who.c_str(), a, op.sensitivity,
              op.specificity, op.threshold);
}

// ------------------------------------------------------------- commands

int cmd_gen_data(const fs::path& config, const fs::path& out, const std::string& platform) {
  RunConfig cfg = RunConfig::load(config);
  if (!platform.empty()) cfg.data.platform = parse_platform(platform);
  const std::string label = cfg.data.platform == Platform::A ? "data" : "data.B";
  const auto images = make_dataset(cfg, cfg.data.platform, cfg.data.patients, derive_seed(cfg.seed, label));
  write_dataset(out, images);
  std::size_t pos = 0;
  for (const auto& im : images) pos += im.label == 1;
  std::printf("wrote %zu images (%zu positive) to %s\n", images.size(), pos, out.string().c_str());
  return 0;
}

int cmd_pretrain(const fs::path& config, const fs::path& out) {
  const RunConfig cfg = RunConfig::load(config);
  if (cfg.pretrain.epochs == 0) config_error("[pretrain] epochs is 0");
  Model donor = pretrain_donor(cfg, derive_seed(cfg.seed, "pretrain"));
  save_model(donor, out);
  std::printf("auxiliary donor (%zu classes) -> %s\n", donor.output_classes(), out.string().c_str());
  return 0;
}

int cmd_train_patch(const fs::path& config, const std::string& scheme, const fs::path& data,
                    const fs::path& donor_path, const fs::path& out, fs::path metrics) {
  RunConfig cfg = RunConfig::load(config);
  if (!scheme.empty()) cfg.patch.scheme = parse_scheme(scheme);
  const fs::path dir = data.empty() ? cfg.data.dir : data;
  require_dir(dir, "dataset directory");
  if (!donor_path.empty()) require_file(donor_path, "donor model");
  if (metrics.empty()) metrics = sibling(out, ".metrics.csv");

  const auto ds = load_split_dataset(dir);
  std::optional<Model> donor;
  if (!donor_path.empty()) {
    donor = load_model(donor_path);
    if (!donor->is_patch()) config_error("donor must be a patch classifier");
  } else if (cfg.pretrain.epochs > 0) {
    donor = pretrain_donor(cfg, derive_seed(cfg.seed, "pretrain"));
  }
  auto run = train_patch_classifier(cfg, ds.images, ds.mean, cfg.patch.scheme, donor ? &*donor : nullptr,
                                          derive_seed(cfg.seed, "patch"));
  save_model(run.model, out);
  write_metrics_csv(metrics, run.result.log);
  std::printf("patch classifier: train_patches=%zu best_epoch=%zu test_accuracy=%.6f\n", run.train_patches,
              run.result.best_epoch, run.test_accuracy);
  return 0;
}

int cmd_convert(const fs::path& patch_model, const std::string& variant, const fs::path& config,
                const fs::path& out) {
  require_file(patch_model, "patch model");
  ConversionSpec conv;
  conv.top = BlockSpec::parse_list("resnet:16-16-32x1,resnet:16-16-32x1");
  std::size_t h = 128, w = 128;
  if (!config.empty()) {
    const RunConfig cfg = RunConfig::load(config);
    conv = cfg.whole.conversion;
    h = cfg.data.generator.height;
    w = cfg.data.generator.width;
  }
  if (!variant.empty()) conv.variant = parse_variant(variant);
  if (conv.variant == Variant::fc_top) {
    conv.image_h = h;
    conv.image_w = w;
  }
  const Model patch = load_model(patch_model);
  Model whole = convert_to_whole_image(patch, conv);
  save_model(whole, out);
  std::printf("converted to %s (%zu new layers) -> %s\n", std::string(to_string(conv.variant)).c_str(),
              whole.new_layer_count(), out.string().c_str());
  return 0;
}

int cmd_train_whole(const fs::path& config, const fs::path& model_path, const fs::path& data, const fs::path& out,
                    fs::path metrics) {
  const RunConfig cfg = RunConfig::load(config);
  const fs::path dir = data.empty() ? cfg.data.dir : data;
  require_dir(dir, "dataset directory");
  require_file(model_path, "model");
  if (metrics.empty()) metrics = sibling(out, ".metrics.csv");

  const auto ds = load_split_dataset(dir);
  const LabeledSet train = make_whole_set(ds.images, "train", ds.mean);
  const LabeledSet val = make_whole_set(ds.images, "val", ds.mean);
  const LabeledSet test = make_whole_set(ds.images, "test", ds.mean);
  Model model = load_model(model_path);
  if (model.is_patch()) config_error("train-whole needs a converted whole-image model (see convert)");
  TrainOptions opt;
  opt.balance_classes = cfg.whole.balance;
  if (cfg.whole.augment) opt.augmentation = AugmentationPolicy::reference();
  opt.metric = SelectionMetric::auc;
  opt.seed = derive_seed(derive_seed(cfg.seed, "whole"), "train");
  auto result = run_schedule(model, train, val, cfg.whole.schedule, opt);
  if (cfg.whole.resume_epochs > 0) {
    opt.seed = derive_seed(derive_seed(cfg.seed, "whole"), "resume");
    const auto more = resume_schedule(model, train, val, cfg.whole.schedule, cfg.whole.resume_epochs, opt);
    const std::size_t epochs = result.log.size(), stages = cfg.whole.schedule.stages.size();
    for (auto row : more.log) {
      row.epoch += epochs;
      row.stage += stages;
      result.log.push_back(row);
    }
  }
  const auto ev = evaluate_set(model, test, SelectionMetric::auc);
  save_model(model, out);
  write_metrics_csv(metrics, result.log);
  std::printf("whole-image classifier: train=%zu val=%zu test=%zu test_auc=%.6f\n", train.size(), val.size(),
              test.size(), ev.metric);
  return 0;
}

int cmd_evaluate(const std::string& models_arg, const std::string& split, bool augment, const fs::path& config,
                 const fs::path& data, const fs::path& out, fs::path roc) {
  std::optional<double> threshold;
  fs::path dir = data;
  if (!config.empty()) {
    const RunConfig cfg = RunConfig::load(config);
    threshold = cfg.eval.threshold;
    augment = augment || cfg.eval.augment;
    if (dir.empty()) dir = cfg.data.dir;
  }
  require_dir(dir, "dataset directory");
  const auto paths = split_list(models_arg);
  if (paths.empty()) config_error("--models needs at least one model file");
  for (const auto& p : paths) require_file(p, "model");
  if (split != "train" && split != "val" && split != "test") config_error("--split must be train, val or test");
  if (roc.empty()) roc = sibling(out, ".roc.csv");

  const auto ds = load_split_dataset(dir);
  const LabeledSet set = make_whole_set(ds.images, split, ds.mean);
  if (set.empty()) data_error("split '" + split + "' is empty");
  std::vector<Model> models;
  for (const auto& p : paths) models.push_back(load_model(p));
  std::vector<Model*> ptrs;
  for (auto& m : models) ptrs.push_back(&m);

  std::vector<std::vector<Real>> per_model(models.size());
  std::vector<Real> ensemble;
  for (std::size_t i = 0; i < set.size(); ++i) {
    Tensor x = set.images[i];
    for (Real& v : x.data()) v -= set.mean;
    for (std::size_t k = 0; k < models.size(); ++k) {
      per_model[k].push_back(augment ? augmented_predict(models[k], x) : predict_score(models[k], x));
    }
    ensemble.push_back(ensemble_score(ptrs, x, augment));
  }
  for (std::size_t k = 0; k < models.size(); ++k) print_eval("model " + paths[k], set.labels, per_model[k], threshold);
  if (models.size() > 1) print_eval("ensemble", set.labels, ensemble, threshold);

  std::vector<ScoredRow> rows;
  for (std::size_t i = 0; i < set.size(); ++i) rows.push_back({set.ids[i], set.labels[i], ensemble[i]});
  write_scores_csv(out, rows);
  write_roc_csv(roc, roc_curve(set.labels, ensemble));
  return 0;
}

int cmd_heatmap(const fs::path& model_path, const fs::path& image, const std::string& activation,
                std::optional<double> mean, const fs::path& data, const fs::path& out) {
  require_file(model_path, "model");
  require_file(image, "image");
  const HeatmapActivation act = parse_activation(activation);
  if (!mean) {
    if (data.empty()) config_error("heatmap needs --mean or --data to know the training mean");
    require_dir(data, "dataset directory");
    std::ifstream f(data / "mean.txt");
    double m = 0;
    if (!(f >> m)) data_error("cannot read " + (data / "mean.txt").string());
    mean = m;
  }
  Model model = load_model(model_path);
  const GrayImage im = read_pgm(image);
  const Heatmap h = compute_heatmap(model, preprocess(im, im.height, im.width, *mean), act);
  std::ofstream f(out);
  if (!f) data_error("cannot write " + out.string());
  f.precision(17);
  f << "row,col,class,value\n";
  for (std::size_t r = 0; r < h.rows(); ++r) {
    for (std::size_t c = 0; c < h.cols(); ++c) {
      for (std::size_t k = 0; k < h.classes(); ++k) f << r << ',' << c << ',' << k << ',' << h.grid.at(0, k, r, c) << '\n';
    }
  }
  std::printf("heatmap %zux%zux%zu stride=%zu -> %s\n", h.rows(), h.cols(), h.classes(), h.stride, out.string().c_str());
  return 0;
}

int cmd_finetune(const std::string& models_arg, const fs::path& config, const std::string& subset_arg,
                 const fs::path& out) {
  const RunConfig cfg = RunConfig::load(config);
  require_dir(cfg.transfer.dir, "[transfer] dir");
  const auto paths = split_list(models_arg);
  if (paths.empty()) config_error("--model needs at least one model file");
  for (const auto& p : paths) require_file(p, "model");
  std::vector<std::optional<std::size_t>> subsets = cfg.transfer.subsets;
  if (!subset_arg.empty()) {
    subsets.clear();
    for (const auto& s : split_list(subset_arg)) {
      if (s == "all") {
        subsets.push_back(std::nullopt);
      } else {
        try {
          subsets.push_back(std::stoul(s));
        } catch (const std::exception&) {
          config_error("--subset entries must be integers or 'all', got '" + s + "'");
        }
      }
    }
  }

  const auto ds = load_split_dataset(cfg.transfer.dir);
  const LabeledSet train = make_whole_set(ds.images, "train", ds.mean);
  const LabeledSet val = make_whole_set(ds.images, "val", ds.mean);
  fs::create_directories(out);

  std::vector<std::vector<Real>> table(subsets.size() + 1, std::vector<Real>(paths.size()));
  for (std::size_t m = 0; m < paths.size(); ++m) {
    const Model source = load_model(paths[m]);
    Model zero = source;
    table[0][m] = evaluate_set(zero, val, SelectionMetric::auc).metric;
    for (std::size_t s = 0; s < subsets.size(); ++s) {
      Model model = source;
      TransferOptions opt;
      opt.subset_patients = subsets[s];
      opt.epochs = cfg.transfer.epochs;
      opt.learning_rate = cfg.transfer.learning_rate;
      opt.weight_decay = cfg.transfer.weight_decay;
      opt.batch_size = cfg.transfer.batch_size;
      opt.seed = derive_seed(cfg.seed, "transfer");
      const auto r = finetune_transfer(model, train, val, opt);
      table[s + 1][m] = r.val_auc;
      const std::string tag = subsets[s] ? std::to_string(*subsets[s]) : "all";
      save_model(model, out / (fs::path(paths[m]).stem().string() + "_" + tag + ".p2wi"));
      std::printf("model %s subset=%s patients=%zu val_auc=%.6f\n", paths[m].c_str(), tag.c_str(), r.patients,
                  r.val_auc);
    }
  }
  std::ofstream f(out / "transfer_auc.csv");
  if (!f) data_error("cannot write transfer table");
  f.precision(17);
  f << "subset";
  for (const auto& p : paths) f << ',' << fs::path(p).stem().string();
  f << '\n';
  for (std::size_t s = 0; s <= subsets.size(); ++s) {
    f << (s == 0 ? std::string("zero_shot") : subsets[s - 1] ? std::to_string(*subsets[s - 1]) : std::string("all"));
    for (const Real v : table[s]) f << ',' << v;
    f << '\n';
  }
  return 0;
}

int cmd_two_step(const fs::path& config, const fs::path& model_path, const fs::path& data, const fs::path& out,
                 fs::path features) {
  const RunConfig cfg = RunConfig::load(config);
  const fs::path dir = data.empty() ? cfg.data.dir : data;
  require_dir(dir, "dataset directory");
  require_file(model_path, "patch model");
  if (features.empty()) features = sibling(out, ".features.csv");
  const auto ds = load_split_dataset(dir);
  const LabeledSet train = make_whole_set(ds.images, "train", ds.mean);
  const LabeledSet test = make_whole_set(ds.images, "test", ds.mean);
  Model patch = load_model(model_path);
  if (!patch.is_patch()) config_error("two-step baseline needs a patch classifier");
  const auto r = run_two_step(patch, train, test, cfg.eval.features, cfg.eval.forest, derive_seed(cfg.seed, "forest"));
  print_eval("two-step", test.labels, r.test_scores, cfg.eval.threshold);
  std::vector<ScoredRow> rows;
  for (std::size_t i = 0; i < test.size(); ++i) rows.push_back({test.ids[i], test.labels[i], r.test_scores[i]});
  write_scores_csv(out, rows);
  write_features_csv(features, feature_names(cfg.eval.features, patch.spec().patch_classes), test.ids, test.labels,
                     r.test_features);
  return 0;
}

int report(ErrorKind kind, const std::string& msg) {
  const char* name = kind == ErrorKind::config ? "config" : kind == ErrorKind::data ? "data" : "numeric";
  std::string one_line = msg;
  for (char& c : one_line) {
    if (c == '\n') c = ' ';
  }
  std::fprintf(stderr, "p2w: error[%s]: %s\n", name, one_line.c_str());
  return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"p2w: patch classifier to whole-image classifier pipeline"};
  app.require_subcommand(1);

  fs::path config, out, data, model, donor, metrics, roc, image, features;
  std::string scheme, variant, models, split = "test", activation = "softmax", subset, platform;
  bool augment = false;
  std::optional<double> mean;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config)->required();
  gen->add_option("--out", out)->required();
  gen->add_option("--platform", platform, "override [data] platform (A or B)");

  auto* pt = app.add_subcommand("pretrain", "train the auxiliary donor used to seed the patch stem");
  pt->add_option("--config", config)->required();
  pt->add_option("--out", out)->required();

  auto* tp = app.add_subcommand("train-patch", "train a patch classifier");
  tp->add_option("--config", config)->required();
  tp->add_option("--scheme", scheme, "s1 or s10");
  tp->add_option("--data", data, "dataset directory (default [data] dir)");
  tp->add_option("--donor", donor, "pretrained donor (default: pretrain when [pretrain] epochs > 0)");
  tp->add_option("--out", out)->required();
  tp->add_option("--metrics", metrics);

  auto* cv = app.add_subcommand("convert", "convert a patch classifier to a whole-image classifier");
  cv->add_option("--patch-model", model)->required();
  cv->add_option("--variant", variant, "allconv_no_heatmap, allconv_with_heatmap or fc_top");
  cv->add_option("--config", config, "takes top blocks and heads from [whole]");
  cv->add_option("--out", out)->required();

  auto* tw = app.add_subcommand("train-whole", "train a converted whole-image classifier");
  tw->add_option("--config", config)->required();
  tw->add_option("--model", model)->required();
  tw->add_option("--data", data);
  tw->add_option("--out", out)->required();
  tw->add_option("--metrics", metrics);

  auto* ev = app.add_subcommand("evaluate", "score whole images; several models form an ensemble");
  ev->add_option("--models", models)->required();
  ev->add_option("--split", split);
  ev->add_flag("--augment", augment, "average over the four flips");
  ev->add_option("--config", config);
  ev->add_option("--data", data);
  ev->add_option("--out", out)->required();
  ev->add_option("--roc", roc);

  auto* hm = app.add_subcommand("heatmap", "dump a patch classifier heatmap");
  hm->add_option("--model", model)->required();
  hm->add_option("--image", image)->required();
  hm->add_option("--activation", activation, "relu or softmax");
  hm->add_option("--mean", mean, "training mean to subtract");
  hm->add_option("--data", data, "dataset directory holding mean.txt");
  hm->add_option("--out", out)->required();

  auto* ft = app.add_subcommand("finetune", "fine-tune on the [transfer] dataset over patient subsets");
  ft->add_option("--model", models, "one or more comma-separated models")->required();
  ft->add_option("--config", config)->required();
  ft->add_option("--subset", subset, "N, all, or a comma list (default [transfer] subsets)");
  ft->add_option("--out", out, "output directory")->required();

  auto* ts = app.add_subcommand("two-step", "heatmap features + random forest baseline");
  ts->add_option("--config", config)->required();
  ts->add_option("--model", model)->required();
  ts->add_option("--data", data);
  ts->add_option("--out", out)->required();
  ts->add_option("--features", features);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(ErrorKind::config, e.what());
  }

  try {
    if (*gen) return cmd_gen_data(config, out, platform);
    if (*pt) return cmd_pretrain(config, out);
    if (*tp) return cmd_train_patch(config, scheme, data, donor, out, metrics);
    if (*cv) return cmd_convert(model, variant, config, out);
    if (*tw) return cmd_train_whole(config, model, data, out, metrics);
    if (*ev) return cmd_evaluate(models, split, augment, config, data, out, roc);
    if (*hm) return cmd_heatmap(model, image, activation, mean, data, out);
    if (*ft) return cmd_finetune(models, config, subset, out);
    if (*ts) return cmd_two_step(config, model, data, out, features);
  } catch (const Error& e) {
    return report(e.kind(), e.what());
  } catch (const ShapeError& e) {
    return report(ErrorKind::config, e.what());
  } catch (const std::exception& e) {
    return report(ErrorKind::numeric, e.what());
  }
  return 0;
}
