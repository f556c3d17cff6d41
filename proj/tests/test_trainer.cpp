#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "dpti/config.hpp"
#include "dpti/errors.hpp"
#include "dpti/evaluate.hpp"
#include "dpti/trainer.hpp"
#include "oracles.hpp"

using namespace dpti;
namespace fs = std::filesystem;

namespace {

// Small enough that an epoch takes a fraction of a second.
RunConfig tiny_config() {
  RunConfig c = RunConfig::desk();
  c.model.backbone.stages = {{4, 1, 2}, {8, 1, 2}, {8, 1, 1}};
  c.model.backbone.tap_stage = 2;
  c.model.backbone.final_stage_stride = 1;
  c.model.backbone.input_h = c.data.height = 32;
  c.model.backbone.input_w = c.data.width = 16;
  c.model.dim = 8;
  c.model.heads = 2;
  c.model.parts = 2;
  c.model.mode = HeadMode::kDynamic;
  c.data.n_ids = 4;
  c.data.per_id = 6;
  c.batch_p = 2;
  c.batch_k = 2;
  c.batch_passes = 1;
  c.optim.total_epochs = 4;
  c.optim.warmup_epochs = 1;
  c.optim.decay_epochs = {3};
  c.checkpoint_every = 0;
  return c;
}

std::string tiny_config_text() {
  return "backbone.channels = 4,8,8\n"
         "backbone.blocks = 1,1,1\n"
         "backbone.strides = 2,2,1\n"
         "backbone.tap_stage = 2\n"
         "model.dim = 8\nmodel.heads = 2\nmodel.parts = 2\n"
         "data.height = 32\ndata.width = 16\ndata.n_ids = 4\ndata.per_id = 6\n"
         "batch.p = 2\nbatch.k = 2\nbatch.passes = 1\n"
         "optim.warmup_epochs = 1\noptim.decay_epochs = 3\noptim.total_epochs = 2\n"
         "checkpoint.every = 0\n";
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dpti_test_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double oracle_lr(std::size_t epoch) {
  // Default schedule written out by hand.
  if (epoch < 10) return 3.5e-5 + (3.5e-4 - 3.5e-5) * static_cast<double>(epoch) / 10.0;
  if (epoch < 40) return 3.5e-4;
  if (epoch < 90) return 3.5e-5;
  if (epoch < 150) return 3.5e-6;
  return 3.5e-7;
}

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(DPTI_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string last_token_after(const std::string& text, const std::string& marker) {
  const auto pos = text.rfind(marker);
  if (pos == std::string::npos) return {};
  std::istringstream in(text.substr(pos + marker.size()));
  std::string token;
  in >> token;
  return token;
}

const Corpus& tiny_corpus() {
  static const Corpus corpus = generate_corpus(tiny_config().data);
  return corpus;
}

}  // namespace

TEST_CASE("learning rate schedule matches the closed form at every epoch") {
  const OptimConfig full;
  CHECK(learning_rate(full, 0) == doctest::Approx(3.5e-5).epsilon(1e-12));
  CHECK(learning_rate(full, 10) == doctest::Approx(3.5e-4).epsilon(1e-12));
  CHECK(learning_rate(full, 40) == doctest::Approx(3.5e-5).epsilon(1e-12));
  for (std::size_t e = 0; e <= 200; ++e) CHECK(learning_rate(full, e) == doctest::Approx(oracle_lr(e)).epsilon(1e-12));

  const auto desk = RunConfig::desk().optim;
  CHECK(desk.total_epochs == 40);
  CHECK(desk.decay_epochs == std::vector<std::size_t>{9, 20, 33});
  CHECK(learning_rate(desk, 0) == doctest::Approx(3.5e-5).epsilon(1e-12));
  CHECK(learning_rate(desk, 8) == doctest::Approx(3.5e-4).epsilon(1e-12));
  CHECK(learning_rate(desk, 9) == doctest::Approx(3.5e-5).epsilon(1e-12));
  CHECK(learning_rate(desk, 39) == doctest::Approx(3.5e-7).epsilon(1e-12));
  CHECK(RunConfig::desk().batch_passes == 4);
  CHECK(RunConfig::desk().loss_options.clean_diversity);
}

TEST_CASE("config defaults, text round trip and key errors") {
  const RunConfig defaults;
  CHECK(defaults.optim.base_lr == 3.5e-4);
  CHECK(defaults.optim.warmup_epochs == 10);
  CHECK(defaults.optim.total_epochs == 180);
  CHECK(defaults.model.heads == 8);
  CHECK(defaults.model.parts == 8);
  CHECK(defaults.model.ffn_dropout == 0.1);
  CHECK(defaults.model.attn_dropout == 0.2);
  CHECK(defaults.batch_p == 8);
  CHECK(defaults.batch_k == 4);
  CHECK_FALSE(defaults.loss_options.clean_diversity);

  RunConfig c = tiny_config();
  c.loss.gamma = 0.25;
  c.loss_options.metric = TripletMetric::kCosine;
  c.loss_options.clean_diversity = true;
  c.model.mode = HeadMode::kDynamicWeighted;
  c.data.protocol = Protocol::kPartial;
  c.corpus_path = "some/where";
  const RunConfig back = parse_config(to_text(c));
  CHECK(config_diff(c, back).empty());
  CHECK(to_text(back) == to_text(c));

  const RunConfig from_text = parse_config(tiny_config_text(), RunConfig::desk());
  CHECK(from_text.model.backbone.input_h == 32);
  CHECK(from_text.model.backbone.stages.size() == 3);
  CHECK_NOTHROW(from_text.validate());

  CHECK_THROWS_AS(parse_config("model.colour = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.dim = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.mode = G+Q\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("just text\n"), ConfigError);
  CHECK_NOTHROW(parse_config("# comment only\n\nseed = 3   # trailing\n"));
  CHECK(parse_config("seed = 3 # trailing\n").seed == 3);

  RunConfig bad = tiny_config();
  bad.batch_k = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.batch_passes = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  RunConfig other = c;
  other.optim.total_epochs = 99;
  other.out_dir = "elsewhere";
  other.checkpoint_every = 3;
  CHECK(config_diff(c, other, true).empty());
  other.model.dim = 16;
  const auto diff = config_diff(c, other, true);
  REQUIRE(diff.size() == 1);
  CHECK(diff[0] == "model.dim: 8 -> 16");
}

TEST_CASE("pk_batches: P identities times K instances, all from the given split") {
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (int id = 0; id < 6; ++id)
    for (int j = 0; j < 3 + id % 3; ++j) {
      idx.push_back(100 + idx.size());
      labels.push_back(id * 10);
    }
  std::map<std::size_t, int> label_of;
  for (std::size_t i = 0; i < idx.size(); ++i) label_of[idx[i]] = labels[i];

  const auto batches = pk_batches(idx, labels, 3, 2, 5);
  CHECK(!batches.empty());
  std::set<std::size_t> seen;
  for (const auto& b : batches) {
    CHECK(b.size() % 2 == 0);
    std::map<int, int> per_id;
    for (std::size_t s : b) {
      REQUIRE(label_of.count(s) == 1);
      ++per_id[label_of[s]];
      seen.insert(s);
    }
    CHECK(per_id.size() >= 2);
    CHECK(per_id.size() <= 3);
    for (const auto& [id, n] : per_id) CHECK(n == 2);
  }
  CHECK(seen.size() == idx.size());

  // Seven identities in groups of three leave a lone identity each round.
  std::vector<std::size_t> idx7 = idx;
  std::vector<int> labels7 = labels;
  for (int j = 0; j < 2; ++j) {
    idx7.push_back(500 + j);
    labels7.push_back(70);
  }
  for (const auto& b : pk_batches(idx7, labels7, 3, 2, 5)) CHECK(b.size() >= 4);
  CHECK(pk_batches(idx, labels, 3, 2, 5) == batches);
  CHECK(pk_batches(idx, labels, 3, 2, 6) != batches);

  CHECK_THROWS_AS(pk_batches(idx, labels, 1, 2, 0), ConfigError);
  const std::vector<int> one_id(idx.size(), 1);
  CHECK_THROWS_AS(pk_batches(idx, one_id, 2, 2, 0), DataError);
}

TEST_CASE("Adam matches a hand-written bias-corrected update") {
  Rng rng(3);
  Tensor p = oracle::random_tensor(rng, {5}, -1, 1, true);
  std::vector<double> x = p.to_vector(), m(5, 0.0), v(5, 0.0);
  Adam adam({p});
  for (int t = 1; t <= 6; ++t) {
    const Tensor loss = sum(mul(mul(p, p), p));
    p.zero_grad();
    loss.backward();
    const double lr = 0.01 * t;
    adam.step(lr);
    for (std::size_t j = 0; j < 5; ++j) {
      const double g = 3.0 * x[j] * x[j];
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      const double mh = m[j] / (1.0 - std::pow(0.9, t)), vh = v[j] / (1.0 - std::pow(0.999, t));
      x[j] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(oracle::max_abs_diff(p.data(), x) < 1e-14);
  }
  CHECK(adam.steps() == 6);
}

TEST_CASE("training on a tiny corpus reduces the loss and logs every component") {
  RunConfig c = tiny_config();
  c.optim.total_epochs = 12;
  c.optim.base_lr = 1e-3;
  c.optim.decay_epochs = {};
  Trainer trainer(c, tiny_corpus());
  std::vector<EpochLog> logs;
  for (std::size_t e = 0; e < c.optim.total_epochs; ++e) logs.push_back(trainer.train_epoch());
  CHECK(logs.front().loss > logs.back().loss);
  for (const auto& l : logs) {
    CHECK(l.steps > 0);
    CHECK(std::isfinite(l.loss));
    CHECK(l.loss == doctest::Approx(c.loss.alpha * l.identity + c.loss.beta * l.triplet + c.loss.gamma * l.diversity)
                        .epsilon(1e-9));
    CHECK(l.seconds >= 0.0);
  }
  CHECK(logs[0].lr == doctest::Approx(learning_rate(c.optim, 0)));
  const auto j = to_json(logs[3]);
  for (const char* key : {"epoch", "lr", "loss", "identity", "triplet", "diversity", "seconds"}) CHECK(j.contains(key));
}

TEST_CASE("resume from a checkpoint equals uninterrupted training, bit for bit") {
  const fs::path dir = scratch("resume");
  RunConfig c = tiny_config();
  c.optim.total_epochs = 4;
  TrainOptions straight{dir / "straight"};
  const auto a = run_training(c, tiny_corpus(), straight);

  RunConfig half = c;
  half.optim.total_epochs = 2;
  const auto first = run_training(half, tiny_corpus(), TrainOptions{dir / "split"});
  TrainOptions rest{dir / "split"};
  rest.resume = first.checkpoint;
  const auto b = run_training(c, tiny_corpus(), rest);

  CHECK(a.checkpoint_hash == b.checkpoint_hash);
  CHECK(read_file(a.checkpoint) == read_file(b.checkpoint));
  CHECK(b.log.size() == 2);
  CHECK(b.log.front().epoch == 2);

  std::ifstream log(dir / "split" / "train_log.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line);) ++lines;
  CHECK(lines == 4);

  const auto again = run_training(c, tiny_corpus(), TrainOptions{dir / "again"});
  CHECK(again.checkpoint_hash == a.checkpoint_hash);
}

TEST_CASE("restore refuses a checkpoint trained with a different config") {
  const Corpus& corpus = tiny_corpus();
  Trainer trainer(tiny_config(), corpus);
  trainer.train_epoch();
  const Container ck = trainer.checkpoint();

  RunConfig other = tiny_config();
  other.loss.gamma = 0.0;
  Trainer mismatched(other, corpus);
  try {
    mismatched.restore(ck);
    FAIL("restore accepted a mismatched config");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("loss.gamma") != std::string::npos);
  }

  RunConfig longer = tiny_config();
  longer.optim.total_epochs = 50;
  Trainer compatible(longer, corpus);
  CHECK_NOTHROW(compatible.restore(ck));
  CHECK(compatible.epoch() == 1);
}

TEST_CASE("load_model reproduces the trained descriptors") {
  const Corpus& corpus = tiny_corpus();
  Trainer trainer(tiny_config(), corpus);
  trainer.train_epoch();
  const Container ck = Container::deserialize(trainer.checkpoint().serialize());
  const LoadedModel loaded = load_model(ck);
  CHECK(loaded.epoch == 1);
  CHECK(loaded.config.corpus_path.empty());
  const auto a = descriptor_set(trainer.model(), corpus, corpus.splits.query, HeadMode::kDynamic);
  const auto b = descriptor_set(*loaded.model, corpus, corpus.splits.query, HeadMode::kDynamic);
  CHECK(a.vectors == b.vectors);
}

TEST_CASE("trainer rejects a corpus whose image size differs from the backbone input") {
  RunConfig c = tiny_config();
  CorpusConfig other = c.data;
  other.height = 64;
  other.width = 32;
  const Corpus corpus = generate_corpus(other);
  CHECK_THROWS_AS(Trainer(c, corpus), ConfigError);
}

TEST_CASE("a model trained on the tiny corpus memorizes its training split") {
  RunConfig c = tiny_config();
  c.optim.total_epochs = 15;
  c.optim.base_lr = 1e-3;
  c.optim.decay_epochs = {};
  c.augment = {false, false, false, 0.0, 0.0};
  Trainer trainer(c, tiny_corpus());
  for (std::size_t e = 0; e < c.optim.total_epochs; ++e) trainer.train_epoch();
  const auto& train = tiny_corpus().splits.train;
  const auto rep = evaluate(trainer.model(), tiny_corpus(), train, train, HeadMode::kDynamic);
  CHECK(rep.rank(1) == 1.0);
}

TEST_CASE("untrained model against the label-permutation chance baseline") {
  // Random convolutions keep colour, which already separates synthetic
  // identities, so an untrained model lands well above permutation chance
  // and well below a trained one.
  const RunConfig c = RunConfig::desk();
  const Corpus corpus = generate_corpus(c.data);
  ModelConfig m = c.model;
  m.num_classes = class_count(corpus);
  const ReidModel model(m, 0);
  const auto q = descriptor_set(model, corpus, corpus.splits.query, HeadMode::kDynamic);
  const auto g = descriptor_set(model, corpus, corpus.splits.gallery, HeadMode::kDynamic);
  const double map = compute_report(rank_all(q, g)).map;

  Rng rng(17);
  double s = 0.0, s2 = 0.0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    auto shuffled = g;
    rng.shuffle(std::span(shuffled.labels));
    const double v = compute_report(rank_all(q, shuffled)).map;
    s += v;
    s2 += v * v;
  }
  const double mean = s / trials, sd = std::sqrt(std::max(0.0, s2 / trials - mean * mean));
  MESSAGE("untrained mAP " << map << ", permutation chance " << mean << " +- " << sd);
  // With 2 gallery positives among 64 the chance level is near 2/64 plus the
  // early-rank bonus; the permutation mean must sit in that range.
  CHECK(mean > 0.03);
  CHECK(mean < 0.2);
  CHECK(map > mean);
  CHECK(map < 0.6);
}

TEST_CASE("attention map pixels: constant column is gray, maxima survive upsampling") {
  const std::vector<double> flat(8, 0.125);
  for (auto p : attention_map_pixels(flat, 4, 2, 64, 32)) CHECK(p == 128);

  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor col = softmax(oracle::random_tensor(rng, {8}, -3, 3), 0);
    const auto v = col.to_vector();
    const auto px = attention_map_pixels(v, 4, 2, 64, 32);
    const std::size_t arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    const std::size_t argpx = static_cast<std::size_t>(std::max_element(px.begin(), px.end()) - px.begin());
    const std::size_t cell = (argpx / 32) * 4 / 64 * 2 + (argpx % 32) * 2 / 32;
    CHECK(cell == arg);
    CHECK(px[argpx] == 255);
  }
}

TEST_CASE("cli: generate, train, eval, attention maps and exit codes") {
  const fs::path dir = scratch("cli");
  const fs::path cfg = dir / "tiny.cfg";
  std::ofstream(cfg) << tiny_config_text();
  const std::string c = " --config " + cfg.string();

  const auto gen1 = cli("generate" + c + " --out " + (dir / "corpus").string());
  REQUIRE(gen1.code == 0);
  CHECK(gen1.out.find("wrote 24 samples") != std::string::npos);
  const auto gen2 = cli("generate" + c + " --out " + (dir / "corpus2").string());
  CHECK(last_token_after(gen1.out, "manifest hash") == last_token_after(gen2.out, "manifest hash"));
  const auto gen3 = cli("generate" + c + " --seed 5 --out " + (dir / "corpus3").string());
  CHECK(last_token_after(gen1.out, "manifest hash") != last_token_after(gen3.out, "manifest hash"));

  const auto partial = cli("generate" + c + " --protocol partial --out " + (dir / "partial").string());
  REQUIRE(partial.code == 0);
  const Corpus pc = read_corpus(dir / "partial");
  for (std::size_t q : pc.splits.query) {
    const auto& crop = pc.splits.records[q].recipe.partial_crop;
    REQUIRE(crop.has_value());
    CHECK(*crop < 1.0);
  }

  const std::string corpus = " --corpus " + (dir / "corpus").string();
  const auto t1 = cli("train" + c + corpus + " --out " + (dir / "run1").string());
  REQUIRE(t1.code == 0);
  const auto t2 = cli("train" + c + corpus + " --out " + (dir / "run2").string());
  REQUIRE(t2.code == 0);
  CHECK(!last_token_after(t1.out, "hash").empty());
  CHECK(last_token_after(t1.out, "hash") == last_token_after(t2.out, "hash"));
  CHECK(fs::exists(dir / "run1" / "train_log.jsonl"));

  const auto ev = cli("eval --checkpoint " + (dir / "run1" / "final.dpti").string() + corpus + " --out " +
                      (dir / "run1").string());
  REQUIRE(ev.code == 0);
  std::ifstream report_file(dir / "run1" / "report.json");
  const auto report = nlohmann::json::parse(report_file);
  CHECK(report["map"].get<double>() >= 0.0);
  CHECK(report["map"].get<double>() <= 1.0);
  CHECK(report["mode"] == "G+D");

  const auto warn = cli("eval --checkpoint " + (dir / "run1" / "final.dpti").string() + corpus + " --mode G+P");
  CHECK(warn.code == 0);
  CHECK(warn.out.find("warning") != std::string::npos);

  const auto maps = cli("attention-maps --checkpoint " + (dir / "run1" / "final.dpti").string() + corpus +
                        " --samples 0,5 --out " + (dir / "maps").string());
  REQUIRE(maps.code == 0);
  for (const char* stem : {"sample00000", "sample00005"}) {
    CHECK(fs::exists(dir / "maps" / (std::string(stem) + "_t0.pgm")));
    CHECK(fs::exists(dir / "maps" / (std::string(stem) + "_t1.pgm")));
    std::ifstream csv(dir / "maps" / (std::string(stem) + ".csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "template,y,x,value");
    std::map<int, double> sums;
    while (std::getline(csv, line)) {
      int t = 0, y = 0, x = 0;
      double v = 0.0;
      REQUIRE(std::sscanf(line.c_str(), "%d,%d,%d,%lf", &t, &y, &x, &v) == 4);
      sums[t] += v;
    }
    REQUIRE(sums.size() == 2);
    for (const auto& [t, s] : sums) CHECK(std::abs(s - 1.0) < 1e-9);
  }

  std::ofstream(dir / "bad.cfg") << "model.colour = 3\n";
  CHECK(cli("train --config " + (dir / "bad.cfg").string()).code == 2);
  CHECK(cli("train" + c + " --corpus " + (dir / "missing").string()).code == 3);
  CHECK(cli("eval --checkpoint " + (dir / "missing.dpti").string()).code == 3);
  CHECK(cli("eval").code == 2);
  CHECK(cli("train --no-such-flag").code == 2);
  CHECK(cli("attention-maps --checkpoint " + (dir / "run1" / "final.dpti").string() + corpus + " --samples 999")
            .code == 3);

  std::ofstream(dir / "other.cfg") << tiny_config_text() << "loss.gamma = 0\n";
  const auto refuse = cli("train --config " + (dir / "other.cfg").string() + corpus + " --resume " +
                          (dir / "run1" / "final.dpti").string() + " --epochs 3 --out " + (dir / "run3").string());
  CHECK(refuse.code == 2);
  CHECK(refuse.out.find("loss.gamma") != std::string::npos);
}
