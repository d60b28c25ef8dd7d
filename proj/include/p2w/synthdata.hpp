#pragma once

// Synthetic annotated grayscale benchmark: generator, patient-level
// stratified splits, S1/S10 patch sampling, preprocessing and file I/O.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "p2w/tensor.hpp"

namespace p2w {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(h * w, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const GrayImage&) const = default;
};

enum class RoiClass { benign_calc, malignant_calc, benign_mass, malignant_mass };
enum class Platform { A, B };
enum class View { CC, MLO };

std::string_view to_string(RoiClass c);
RoiClass parse_roi_class(std::string_view s);
bool is_malignant(RoiClass c);
std::string_view to_string(Platform p);
Platform parse_platform(std::string_view s);
std::string_view to_string(View v);

/// Patch classes: 0 background, 1 malignant mass, 2 benign mass,
/// 3 malignant calcification, 4 benign calcification.
inline constexpr std::size_t kPatchClasses = 5;
int patch_class(RoiClass c);

struct Box {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t w = 0;
  std::size_t h = 0;
  bool operator==(const Box&) const = default;
};

std::size_t intersection_area(const Box& a, const Box& b);

struct Roi {
  RoiClass cls;
  Box box;
  bool operator==(const Roi&) const = default;
};

struct AnnotatedImage {
  std::string id;
  GrayImage pixels;
  std::vector<Roi> rois;
  int label = 0;  // 1 iff some ROI is malignant
  std::string patient_id;
  View view = View::CC;
  Platform platform = Platform::A;
  std::string split;  // train / val / test, empty before splitting
};

struct GeneratorConfig {
  std::size_t height = 128;
  std::size_t width = 128;
  double radius_lo = 4;
  double radius_hi = 12;
  /// Chance that an image carries a benign lesion (in addition to any
  /// malignant one).
  double benign_prob = 0.6;
  double noise_sd = 5;
  /// Lesion brightness over the local tissue, drawn per lesion.
  double contrast_lo = 35;
  double contrast_hi = 70;
  // Platform B intensity transform: offset + contrast * 255 * (v / 255)^gamma.
  double b_gamma = 0.75;
  double b_contrast = 0.8;
  double b_offset = 25;
};

/// Deterministic per (seed, patient, view). Platform changes only the final
/// intensity transform, never the structure.
std::vector<AnnotatedImage> generate_dataset(std::size_t patients, std::size_t images_per_patient,
                                             Platform platform, double lesion_prevalence,
                                             std::uint64_t seed, const GeneratorConfig& config = {});

struct ManifestRow {
  std::string path;
  std::string patient_id;
  std::string view;
  int label;
  std::string split;
  std::string platform;
};

/// Patient-level stratified split by patient positivity; writes
/// `AnnotatedImage::split` and returns the manifest rows.
std::vector<ManifestRow> split_stratified(std::vector<AnnotatedImage>& images, double train_frac = 0.85,
                                          double val_frac_of_train = 0.10, std::uint64_t seed = 0);

enum class SamplingScheme { S1, S10 };
SamplingScheme parse_scheme(std::string_view s);

struct PatchSample {
  GrayImage pixels;
  int cls;  // patch class
  std::string source;
  std::size_t x;
  std::size_t y;
};

/// |patch n reference| / |patch| for two boxes.
double overlap_ratio(const Box& patch, const Box& reference);

/// S1: one ROI-centered patch and one background patch per ROI. S10: ten
/// patches with overlap >= overlap_min against the centered patch, and ten
/// background patches, per ROI. Background patches touch no ROI box.
std::vector<PatchSample> sample_patches(const AnnotatedImage& image, SamplingScheme scheme,
                                        std::size_t patch_size, double overlap_min = 0.9,
                                        std::uint64_t seed = 0);

/// Bilinear resize with half-pixel centers.
std::vector<double> resize_bilinear(const GrayImage& image, std::size_t height, std::size_t width);

/// Resize to target, convert to reals and subtract the training mean:
/// [1, 1, height, width].
Tensor preprocess(const GrayImage& image, std::size_t height, std::size_t width, double train_mean);
/// Raw pixels as a [1, 1, h, w] tensor.
Tensor to_tensor(const GrayImage& image);

/// Pixel-weighted mean over the images whose split is "train".
double compute_train_mean(std::span<const AnnotatedImage> images);

// ------------------------------------------------------------------- I/O

void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

/// images/<id>.pgm, manifest.csv, rois.csv and mean.txt (when splits exist).
void write_dataset(const std::filesystem::path& dir, std::span<const AnnotatedImage> images);

struct DatasetOnDisk {
  std::vector<AnnotatedImage> images;
  double mean = 0;
  bool has_mean = false;
};
DatasetOnDisk read_dataset(const std::filesystem::path& dir);

}  // namespace p2w
