#include "p2w/pipeline.hpp"

#include "p2w/error.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace p2w {

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

int morphology_class(int patch_class) {
  switch (patch_class) {
    case 0: return 0;
    case 1:
    case 2: return 1;
    case 3:
    case 4: return 2;
    default: data_error("unknown patch class " + std::to_string(patch_class));
  }
}

LabeledSet make_patch_set(std::span<const AnnotatedImage> images, std::string_view split,
                          SamplingScheme scheme, std::size_t patch_size, double overlap_min,
                          std::uint64_t seed, double mean, PatchLabels labels) {
  LabeledSet set;
  set.mean = mean;
  for (const auto& im : images) {
    if (im.split != split) continue;
    for (auto& p : sample_patches(im, scheme, patch_size, overlap_min, seed)) {
      const int cls = labels == PatchLabels::morphology ? morphology_class(p.cls) : p.cls;
      set.add(to_tensor(p.pixels), cls, im.patient_id, im.id + "@" + std::to_string(p.x) + "," + std::to_string(p.y));
    }
  }
  return set;
}

LabeledSet make_whole_set(std::span<const AnnotatedImage> images, std::string_view split, double mean) {
  LabeledSet set;
  set.mean = mean;
  for (const auto& im : images) {
    if (im.split == split) set.add(to_tensor(im.pixels), im.label, im.patient_id, im.id);
  }
  return set;
}

std::vector<AnnotatedImage> make_dataset(const RunConfig& cfg, Platform platform, std::size_t patients,
                                         std::uint64_t seed) {
  auto images = generate_dataset(patients, cfg.data.images_per_patient, platform, cfg.data.prevalence,
                                 derive_seed(seed, "generate"), cfg.data.generator);
  split_stratified(images, cfg.data.train_frac, cfg.data.val_frac, derive_seed(seed, "split"));
  return images;
}

Model pretrain_donor(const RunConfig& cfg, std::uint64_t seed) {
  const auto images = make_dataset(cfg, Platform::A, cfg.pretrain.patients, derive_seed(seed, "data"));
  const double mean = compute_train_mean(images);
  auto set = [&](const char* split) {
    return make_patch_set(images, split, cfg.pretrain.scheme, cfg.patch.size, cfg.patch.overlap_min,
                          derive_seed(seed, split), mean, PatchLabels::morphology);
  };
  const LabeledSet train = set("train"), val = set("val");
  Model donor = build_patch_classifier(cfg.patch.blocks, cfg.patch.size, cfg.patch.size, kMorphologyClasses,
                                       cfg.patch.padding, derive_seed(seed, "init"));
  TrainSchedule schedule;
  schedule.stages = {{cfg.pretrain.learning_rate, TrainableTop::all(), cfg.pretrain.epochs, 0}};
  schedule.batch_size = cfg.pretrain.batch_size;
  schedule.adam = cfg.patch.schedule.adam;
  TrainOptions opt;
  opt.balance_classes = cfg.patch.balance;
  opt.metric = SelectionMetric::accuracy;
  opt.seed = derive_seed(seed, "train");
  run_schedule(donor, train, val, schedule, opt);
  return donor;
}

PatchRun train_patch_classifier(const RunConfig& cfg, std::span<const AnnotatedImage> images, double mean,
                                SamplingScheme scheme, const Model* donor, std::uint64_t seed) {
  auto set = [&](const char* split) {
    return make_patch_set(images, split, scheme, cfg.patch.size, cfg.patch.overlap_min, derive_seed(seed, split),
                          mean);
  };
  const LabeledSet train = set("train"), val = set("val"), test = set("test");
  Model model = donor ? replace_patch_head(*donor, kPatchClasses, derive_seed(seed, "head"))
                      : build_patch_classifier(cfg.patch.blocks, cfg.patch.size, cfg.patch.size, kPatchClasses,
                                               cfg.patch.padding, derive_seed(seed, "init"));
  TrainOptions opt;
  opt.balance_classes = cfg.patch.balance;
  if (cfg.patch.augment) opt.augmentation = AugmentationPolicy::reference();
  opt.metric = SelectionMetric::accuracy;
  opt.seed = derive_seed(seed, "train");
  TrainResult result = run_schedule(model, train, val, cfg.patch.schedule, opt);
  const Real acc = test.empty() ? 0 : evaluate_set(model, test, SelectionMetric::accuracy).metric;
  return {std::move(model), std::move(result), acc, train.size()};
}

WholeRun train_whole_classifier(const RunConfig& cfg, const Model& patch, const ConversionSpec& conv,
                                std::span<const AnnotatedImage> images, double mean, std::uint64_t seed) {
  ConversionSpec c = conv;
  c.seed = derive_seed(seed, "convert");
  if (c.variant == Variant::fc_top && c.image_h == 0) {
    c.image_h = cfg.data.generator.height;
    c.image_w = cfg.data.generator.width;
  }
  Model model = convert_to_whole_image(patch, c);
  const LabeledSet train = make_whole_set(images, "train", mean);
  const LabeledSet val = make_whole_set(images, "val", mean);
  const LabeledSet test = make_whole_set(images, "test", mean);
  TrainOptions opt;
  opt.balance_classes = cfg.whole.balance;
  if (cfg.whole.augment) opt.augmentation = AugmentationPolicy::reference();
  opt.metric = SelectionMetric::auc;
  opt.seed = derive_seed(seed, "train");
  TrainResult result = run_schedule(model, train, val, cfg.whole.schedule, opt);
  if (cfg.whole.resume_epochs > 0) {
    opt.seed = derive_seed(seed, "resume");
    const auto more = resume_schedule(model, train, val, cfg.whole.schedule, cfg.whole.resume_epochs, opt);
    const std::size_t epochs = result.log.size(), stages = cfg.whole.schedule.stages.size();
    for (auto row : more.log) {
      row.epoch += epochs;
      row.stage += stages;
      result.log.push_back(row);
    }
  }
  Evaluation ev = test.empty() ? Evaluation{} : evaluate_set(model, test, SelectionMetric::auc);
  return {std::move(model), std::move(result), std::move(ev)};
}

}  // namespace p2w
