#pragma once

// Glue between the synthetic dataset, the training sets and the staged
// training runs. Shared by the CLI and the acceptance suite.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "p2w/config.hpp"
#include "p2w/synthdata.hpp"
#include "p2w/trainkit.hpp"

namespace p2w {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel on every step (large per-layer buffers otherwise go through mmap).
/// No-op outside glibc.
void tune_allocator();

enum class PatchLabels {
  lesion_type,  // the five patch classes
  morphology,   // background / mass / calcification
};
inline constexpr std::size_t kMorphologyClasses = 3;
int morphology_class(int patch_class);

/// Patches sampled from every image of `split` (raw pixels, mean attached).
LabeledSet make_patch_set(std::span<const AnnotatedImage> images, std::string_view split,
                          SamplingScheme scheme, std::size_t patch_size, double overlap_min,
                          std::uint64_t seed, double mean, PatchLabels labels = PatchLabels::lesion_type);

/// Whole images of `split` with their image-level labels.
LabeledSet make_whole_set(std::span<const AnnotatedImage> images, std::string_view split, double mean);

/// Generates `patients` patients under cfg.data and splits them.
std::vector<AnnotatedImage> make_dataset(const RunConfig& cfg, Platform platform, std::size_t patients,
                                         std::uint64_t seed);

/// Trains the auxiliary morphology task on its own dataset; the result is
/// the donor whose stem seeds the patch classifier.
Model pretrain_donor(const RunConfig& cfg, std::uint64_t seed);

struct PatchRun {
  Model model;
  TrainResult result;
  Real test_accuracy = 0;
  std::size_t train_patches = 0;
};

/// Staged patch-classifier training; `donor` (may be null) supplies the stem.
PatchRun train_patch_classifier(const RunConfig& cfg, std::span<const AnnotatedImage> images, double mean,
                                SamplingScheme scheme, const Model* donor, std::uint64_t seed);

struct WholeRun {
  Model model;
  TrainResult result;
  Evaluation test;
};

/// Converts `patch`, trains the whole-image schedule (plus any resumption)
/// and evaluates on the test split.
WholeRun train_whole_classifier(const RunConfig& cfg, const Model& patch, const ConversionSpec& conv,
                                std::span<const AnnotatedImage> images, double mean, std::uint64_t seed);

}  // namespace p2w
