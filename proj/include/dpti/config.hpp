#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpti/losses.hpp"
#include "dpti/model.hpp"
#include "dpti/synth.hpp"

namespace dpti {

struct OptimConfig {
  double base_lr = 3.5e-4;
  std::size_t warmup_epochs = 10;
  double warmup_start_lr = 3.5e-5;
  std::vector<std::size_t> decay_epochs = {40, 90, 150};
  double decay_factor = 0.1;
  std::size_t total_epochs = 180;
};

/// Linear warmup from warmup_start_lr to base_lr over warmup_epochs, then
/// base_lr times decay_factor per decay epoch already reached.
double learning_rate(const OptimConfig& optim, std::size_t epoch);

struct AugmentConfig {
  bool flip = true;
  bool erase = true;
  bool pad_crop = true;
  double flip_prob = 0.5;
  double erase_prob = 0.5;
};

/// Everything a run needs. Serialized as flat `key = value` lines with dotted
/// section keys; `#` starts a comment. The identity count of the classifier
/// is taken from the corpus at training time and is not a config key.
struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  LossOptions loss_options;
  OptimConfig optim;
  std::size_t batch_p = 8;
  std::size_t batch_k = 4;
  /// PK sampling passes over the training split per epoch.
  std::size_t batch_passes = 1;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  CorpusConfig data;
  std::string corpus_path = "corpus";
  std::string out_dir = "run";
  /// Write an intermediate checkpoint every this many epochs; 0 disables.
  std::size_t checkpoint_every = 10;

  /// Scaled 40-epoch schedule used for acceptance runs. Each desk epoch
  /// makes four PK passes over the small training split.
  static RunConfig desk();

  void validate() const;
};

std::string to_text(const RunConfig& config);
/// Applies `key = value` lines on top of `base`. Unknown keys and malformed
/// values raise ConfigError naming the line.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
/// Sets one key; throws ConfigError for unknown keys or bad values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

/// `key: old -> new` for every differing key. With `for_resume`, keys that
/// may legitimately change between a run and its continuation
/// (optim.total_epochs, paths.*, checkpoint.every) are ignored.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b, bool for_resume = false);

}  // namespace dpti
