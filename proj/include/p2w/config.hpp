#pragma once

// Run configuration: flat INI sections of key = value lines.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "p2w/baseline2step.hpp"
#include "p2w/netgraph.hpp"
#include "p2w/synthdata.hpp"
#include "p2w/trainkit.hpp"

namespace p2w {

class Ini {
 public:
  static Ini parse(std::string_view text, const std::string& source = "<config>");
  static Ini load(const std::filesystem::path& path);

  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return data_; }
  const std::string& source() const { return source_; }

 private:
  std::string source_;
  std::map<std::string, std::map<std::string, std::string>> data_;
};

/// "lr:layers:epochs[:weight_decay]" entries separated by commas, where
/// layers is an integer, "all" or "new".
std::vector<Stage> parse_stages(std::string_view text);

struct RunConfig {
  std::uint64_t seed = 1;

  struct Data {
    std::size_t patients = 120;
    std::size_t images_per_patient = 2;
    double prevalence = 0.4;
    Platform platform = Platform::A;
    GeneratorConfig generator;
    double train_frac = 0.85;
    double val_frac = 0.10;
    std::filesystem::path dir;  // dataset used by training / evaluation commands
  } data;

  struct Patch {
    std::vector<BlockSpec> blocks;
    std::size_t size = 32;
    ops::Padding padding = ops::Padding::same;
    SamplingScheme scheme = SamplingScheme::S10;
    double overlap_min = 0.9;
    TrainSchedule schedule;
    bool balance = true;
    bool augment = false;
  } patch;

  /// Auxiliary patch task standing in for generic pretraining: background /
  /// mass / calcification on an independently seeded dataset, all layers
  /// trained. Zero epochs skips it and the stem starts from random weights.
  struct Pretrain {
    std::size_t patients = 120;
    std::size_t epochs = 4;
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    SamplingScheme scheme = SamplingScheme::S10;
  } pretrain;

  struct Whole {
    ConversionSpec conversion;
    TrainSchedule schedule;
    bool balance = true;
    bool augment = false;
    std::size_t resume_epochs = 0;
  } whole;

  struct Eval {
    bool augment = false;
    std::optional<double> threshold;
    FeatureConfig features;
    ForestParams forest;
  } eval;

  struct Transfer {
    std::filesystem::path dir;
    std::vector<std::optional<std::size_t>> subsets;  // nullopt = all
    std::size_t epochs = 10;
    double learning_rate = 1e-5;
    double weight_decay = 0;
    std::size_t batch_size = 2;
  } transfer;

  /// Parses and validates everything; unknown keys are rejected. Paths are
  /// resolved relative to the config file's directory.
  static RunConfig parse(const Ini& ini, const std::filesystem::path& base = {});
  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace p2w
