#include "dpti/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>

#include "dpti/errors.hpp"

namespace dpti {

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto g = params_[i].grad();
    auto x = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
    }
  }
}

void Adam::restore(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v, std::uint64_t t) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw DimensionError("Adam::restore: parameter count mismatch");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (m[i].size() != params_[i].size() || v[i].size() != params_[i].size()) {
      throw DimensionError("Adam::restore: moment size mismatch for parameter " + std::to_string(i));
    }
  }
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

std::vector<std::vector<std::size_t>> pk_batches(std::span<const std::size_t> indices, std::span<const int> labels,
                                                 std::size_t p, std::size_t k, std::uint64_t seed) {
  if (indices.size() != labels.size()) throw DimensionError("pk_batches: indices and labels differ in count");
  if (p < 2 || k < 1) throw ConfigError("pk_batches: need P >= 2 and K >= 1");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < indices.size(); ++i) by_id[labels[i]].push_back(indices[i]);
  if (by_id.size() < 2) throw DataError("pk_batches: need at least two identities");

  Rng rng(seed);
  std::vector<int> ids;
  std::size_t rounds = 0;
  for (auto& [id, members] : by_id) {
    rng.shuffle(std::span<std::size_t>(members));
    ids.push_back(id);
    rounds = std::max(rounds, (members.size() + k - 1) / k);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t r = 0; r < rounds; ++r) {
    rng.shuffle(std::span<int>(ids));
    for (std::size_t start = 0; start < ids.size(); start += p) {
      const std::size_t end = std::min(ids.size(), start + p);
      if (end - start < 2) continue;
      std::vector<std::size_t> batch;
      for (std::size_t i = start; i < end; ++i) {
        const auto& members = by_id[ids[i]];
        for (std::size_t j = 0; j < k; ++j) batch.push_back(members[(r * k + j) % members.size()]);
      }
      batches.push_back(std::move(batch));
    }
  }
  return batches;
}

nlohmann::json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch},       {"lr", log.lr},       {"loss", log.loss},
          {"identity", log.identity}, {"triplet", log.triplet}, {"diversity", log.diversity},
          {"steps", log.steps},       {"seconds", log.seconds}};
}

std::size_t class_count(const Corpus& corpus) { return corpus.splits.identities.size(); }

namespace {

ModelConfig model_config_for(const RunConfig& config, std::size_t classes) {
  ModelConfig m = config.model;
  m.num_classes = classes;
  return m;
}

const RunConfig& validated(const RunConfig& config) {
  config.validate();
  return config;
}

RunConfig echo_config(const RunConfig& config) {
  RunConfig echo = config;
  echo.corpus_path.clear();
  echo.out_dir.clear();
  return echo;
}

Tensor augment_sample(const Tensor& image, const AugmentConfig& a, std::uint64_t seed) {
  Rng rng(seed);
  AugmentFlags flags;
  flags.flip = a.flip && rng.bernoulli(a.flip_prob);
  flags.erase = a.erase && rng.bernoulli(a.erase_prob);
  flags.pad = flags.crop = a.pad_crop;
  return augment(image, flags, rng.next_u64());
}

}  // namespace

Trainer::Trainer(const RunConfig& config, const Corpus& corpus)
    : config_(validated(config)),
      corpus_(corpus),
      model_(model_config_for(config, class_count(corpus)), config.seed),
      adam_(model_.store().tensors()),
      rng_(mix_seed(config.seed, 0x7A1)) {
  if (corpus.config.height != config.model.backbone.input_h || corpus.config.width != config.model.backbone.input_w) {
    throw ConfigError("corpus images are " + std::to_string(corpus.config.height) + "x" +
                      std::to_string(corpus.config.width) + " but the backbone expects " +
                      std::to_string(config.model.backbone.input_h) + "x" +
                      std::to_string(config.model.backbone.input_w));
  }
  if (corpus.splits.train.empty()) throw DataError("corpus has no training samples");
  for (std::size_t idx : corpus.splits.train) train_labels_.push_back(corpus.splits.records.at(idx).identity);
}

EpochLog Trainer::train_epoch() {
  const auto start = std::chrono::steady_clock::now();
  EpochLog log;
  log.epoch = epoch_;
  log.lr = learning_rate(config_.optim, epoch_);
  const std::uint64_t epoch_seed = rng_.next_u64();
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t pass = 0; pass < config_.batch_passes; ++pass) {
    auto more = pk_batches(corpus_.splits.train, train_labels_, config_.batch_p, config_.batch_k,
                           mix_seed(epoch_seed, 1, pass));
    batches.insert(batches.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  }

  for (std::size_t s = 0; s < batches.size(); ++s) {
    const std::uint64_t step_seed = mix_seed(epoch_seed, 2, s);
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (std::size_t i = 0; i < batches[s].size(); ++i) {
      const std::size_t idx = batches[s][i];
      images.push_back(augment_sample(corpus_.images[idx], config_.augment, mix_seed(step_seed, i)));
      labels.push_back(corpus_.splits.records[idx].identity);
    }
    Graph graph(Mode::kTraining, mix_seed(step_seed, 0xD0));
    const BatchOutputs outputs = model_.forward_batch(images, graph, config_.loss_options.clean_diversity && config_.loss.gamma > 0.0);
    const LossBreakdown loss = joint_loss(outputs, labels, config_.loss, config_.loss_options);
    const double total = loss.total.item();
    if (!std::isfinite(total)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch_) + ", step " + std::to_string(s));
    }
    model_.store().zero_grad();
    loss.total.backward();
    adam_.step(log.lr);
    log.loss += total;
    log.identity += loss.identity;
    log.triplet += loss.triplet;
    log.diversity += loss.diversity;
  }
  log.steps = batches.size();
  const auto n = static_cast<double>(std::max<std::size_t>(1, log.steps));
  log.loss /= n;
  log.identity /= n;
  log.triplet /= n;
  log.diversity /= n;
  ++epoch_;
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

Container Trainer::checkpoint() const {
  Container c;
  c.put_text("config", to_text(echo_config(config_)));
  c.put_i64("num_classes", static_cast<std::int64_t>(model_.config().num_classes));
  c.put_i64("epoch", static_cast<std::int64_t>(epoch_));
  c.put_text("rng", rng_.state());
  c.put_i64("adam.step", static_cast<std::int64_t>(adam_.steps()));
  const auto& entries = model_.store().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    c.put_tensor("param/" + name, t);
    c.put_f64("adam.m/" + name, t.shape(), adam_.first_moments()[i]);
    c.put_f64("adam.v/" + name, t.shape(), adam_.second_moments()[i]);
  }
  return c;
}

void Trainer::save(const std::filesystem::path& path) const { checkpoint().save(path); }

namespace {

void load_parameters(const Container& c, ParameterStore& store) {
  for (const auto& [name, t] : store.entries()) {
    const Shape shape = t.shape();
    const auto values = c.get_f64("param/" + name, &shape);
    Tensor target = t;
    std::copy(values.begin(), values.end(), target.mutable_data().begin());
  }
}

}  // namespace

void Trainer::restore(const Container& c) {
  const RunConfig stored = parse_config(c.get_text("config"));
  const auto diff = config_diff(stored, config_, true);
  if (!diff.empty()) {
    std::string msg = "refusing to resume: checkpoint config differs:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw ConfigError(msg);
  }
  if (static_cast<std::size_t>(c.get_i64("num_classes")) != model_.config().num_classes) {
    throw ConfigError("refusing to resume: checkpoint was trained on a different identity count");
  }
  load_parameters(c, model_.store());
  std::vector<std::vector<double>> m, v;
  for (const auto& [name, t] : model_.store().entries()) {
    const Shape shape = t.shape();
    m.push_back(c.get_f64("adam.m/" + name, &shape));
    v.push_back(c.get_f64("adam.v/" + name, &shape));
  }
  adam_.restore(std::move(m), std::move(v), static_cast<std::uint64_t>(c.get_i64("adam.step")));
  epoch_ = static_cast<std::size_t>(c.get_i64("epoch"));
  rng_.restore(c.get_text("rng"));
}

LoadedModel load_model(const Container& c) {
  LoadedModel out;
  out.config = parse_config(c.get_text("config"));
  out.epoch = static_cast<std::size_t>(c.get_i64("epoch"));
  const auto classes = static_cast<std::size_t>(c.get_i64("num_classes"));
  out.model = std::make_unique<ReidModel>(model_config_for(out.config, classes), out.config.seed);
  load_parameters(c, out.model->store());
  return out;
}

LoadedModel load_model(const std::filesystem::path& path) { return load_model(Container::load(path)); }

TrainResult run_training(const RunConfig& config, const Corpus& corpus, const TrainOptions& options) {
  namespace fs = std::filesystem;
  Trainer trainer(config, corpus);
  if (!options.resume.empty()) trainer.restore(Container::load(options.resume));
  std::error_code ec;
  fs::create_directories(options.out_dir, ec);
  if (ec) throw DataError("cannot create output directory " + options.out_dir.string() + ": " + ec.message());

  const fs::path log_path = options.out_dir / "train_log.jsonl";
  std::ofstream log_file(log_path, options.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log_file) throw DataError("cannot open " + log_path.string());
  {
    std::ofstream echo(options.out_dir / "config.txt");
    echo << to_text(config);
  }

  TrainResult result;
  while (trainer.epoch() < config.optim.total_epochs) {
    EpochLog log = trainer.train_epoch();
    log_file << to_json(log).dump() << '\n';
    log_file.flush();
    if (options.on_epoch) options.on_epoch(log);
    result.log.push_back(log);
    const std::size_t done = trainer.epoch();
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.optim.total_epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_e%03zu.dpti", done);
      trainer.save(options.out_dir / name);
    }
  }
  result.checkpoint = options.out_dir / "final.dpti";
  trainer.save(result.checkpoint);
  result.checkpoint_hash = file_hash(result.checkpoint);
  return result;
}

}  // namespace dpti
