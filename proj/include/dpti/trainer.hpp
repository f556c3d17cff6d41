#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpti/checkpoint.hpp"
#include "dpti/config.hpp"
#include "dpti/model.hpp"
#include "dpti/synth.hpp"

namespace dpti {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed, ordered list of parameters.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig config = {});

  /// Applies one update using the gradients currently stored on the params.
  void step(double lr);

  std::uint64_t steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v, std::uint64_t t);

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

/// One epoch of P×K batches over (sample index, label) pairs. Each identity's
/// instances are shuffled and cut into chunks of K (wrapping around when it
/// has fewer); each round takes one chunk per identity and groups the
/// shuffled identities P at a time. A trailing group with fewer than two
/// identities is dropped.
std::vector<std::vector<std::size_t>> pk_batches(std::span<const std::size_t> indices, std::span<const int> labels,
                                                 std::size_t p, std::size_t k, std::uint64_t seed);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double identity = 0.0;
  double triplet = 0.0;
  double diversity = 0.0;
  std::size_t steps = 0;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochLog& log);

class Trainer {
 public:
  Trainer(const RunConfig& config, const Corpus& corpus);

  /// Trains the next epoch and returns its mean losses.
  EpochLog train_epoch();

  std::size_t epoch() const { return epoch_; }
  const RunConfig& config() const { return config_; }
  const ReidModel& model() const { return model_; }
  ReidModel& model() { return model_; }

  Container checkpoint() const;
  void save(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer state, epoch and generator state.
  /// Refuses with ConfigError listing the differences when the stored
  /// config is incompatible with this trainer's config.
  void restore(const Container& checkpoint);

 private:
  RunConfig config_;
  const Corpus& corpus_;
  ReidModel model_;
  Adam adam_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::vector<int> train_labels_;
};

/// Identity classes of the corpus (its identity count).
std::size_t class_count(const Corpus& corpus);

/// Builds a model from a checkpoint alone (config text and parameters).
struct LoadedModel {
  RunConfig config;
  std::unique_ptr<ReidModel> model;
  std::size_t epoch = 0;
};
LoadedModel load_model(const Container& checkpoint);
LoadedModel load_model(const std::filesystem::path& path);

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Continue from this checkpoint if set.
  std::filesystem::path resume;
  bool quiet = true;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::uint64_t checkpoint_hash = 0;
  std::vector<EpochLog> log;
};

/// Trains up to config.optim.total_epochs, appending to out_dir/train_log.jsonl
/// and writing out_dir/checkpoint_eNNN.dpti periodically and
/// out_dir/final.dpti at the end.
TrainResult run_training(const RunConfig& config, const Corpus& corpus, const TrainOptions& options);

}  // namespace dpti
