// Command-line front end: generate | train | eval | ablate | attention-maps | grad-check.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dpti/checkpoint.hpp"
#include "dpti/config.hpp"
#include "dpti/errors.hpp"
#include "dpti/evaluate.hpp"
#include "dpti/experiments.hpp"
#include "dpti/synth.hpp"
#include "dpti/trainer.hpp"

namespace fs = std::filesystem;
using namespace dpti;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::string protocol;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "Run config file (key = value lines)");
  cmd->add_option("--seed", flags.seed, "Seed override");
  cmd->add_option("--out", flags.out, "Output directory");
  cmd->add_option("--mode", flags.mode, "Head mode: G, G+P, G+T, G+D or G+D+W");
  cmd->add_option("--protocol", flags.protocol, "holistic, occluded or partial");
}

RunConfig base_config(const CommonFlags& flags) {
  RunConfig config = RunConfig::desk();
  if (!flags.config_path.empty()) config = load_config(flags.config_path, config);
  if (!flags.mode.empty()) config.model.mode = parse_head_mode(flags.mode);
  if (!flags.protocol.empty()) config.data.protocol = parse_protocol(flags.protocol);
  if (!flags.out.empty()) config.out_dir = flags.out;
  return config;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::size_t> parse_indices(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--samples: '" + item + "' is not a sample index");
    }
  }
  return out;
}

int cmd_generate(const CommonFlags& flags) {
  RunConfig config = base_config(flags);
  if (flags.seed) config.data.seed = *flags.seed;
  const fs::path dir = flags.out.empty() ? fs::path(config.corpus_path) : fs::path(flags.out);
  const Corpus corpus = generate_corpus(config.data);
  write_corpus(corpus, dir);
  std::printf("wrote %zu samples (%zu train, %zu query, %zu gallery) to %s; manifest hash %s\n",
              corpus.splits.records.size(), corpus.splits.train.size(), corpus.splits.query.size(),
              corpus.splits.gallery.size(), dir.c_str(), hex64(file_hash(dir / "manifest.jsonl")).c_str());
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& corpus_dir, const std::string& resume,
              std::optional<std::size_t> epochs) {
  RunConfig config = base_config(flags);
  if (flags.seed) config.seed = *flags.seed;
  if (!corpus_dir.empty()) config.corpus_path = corpus_dir;
  if (epochs) config.optim.total_epochs = *epochs;
  config.validate();
  const Corpus corpus = read_corpus(config.corpus_path);
  TrainOptions options;
  options.out_dir = config.out_dir;
  options.resume = resume;
  options.on_epoch = [](const EpochLog& log) {
    std::printf("epoch %3zu  lr %.3e  loss %.4f  (id %.4f tri %.4f div %.4f)  %.1fs\n", log.epoch, log.lr, log.loss,
                log.identity, log.triplet, log.diversity, log.seconds);
    std::fflush(stdout);
  };
  const TrainResult result = run_training(config, corpus, options);
  std::printf("checkpoint %s  hash %s\n", result.checkpoint.c_str(), hex64(result.checkpoint_hash).c_str());
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint, const std::string& corpus_dir,
             bool uniform_presence, const std::string& export_dir, const std::string& gallery_split) {
  if (checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  const LoadedModel loaded = load_model(fs::path(checkpoint));
  const HeadMode trained = loaded.config.model.mode;
  const HeadMode mode = flags.mode.empty() ? trained : parse_head_mode(flags.mode);
  if (mode != trained && !(trained == HeadMode::kDynamic && mode == HeadMode::kDynamicWeighted)) {
    std::fprintf(stderr, "warning: checkpoint was trained as %s; evaluating as %s\n",
                 std::string(mode_name(trained)).c_str(), std::string(mode_name(mode)).c_str());
  }
  Corpus corpus = read_corpus(corpus_dir.empty() ? fs::path(loaded.config.corpus_path) : fs::path(corpus_dir));
  if (!flags.protocol.empty() && parse_protocol(flags.protocol) != corpus.config.protocol) {
    CorpusConfig c = corpus.config;
    c.protocol = parse_protocol(flags.protocol);
    corpus = generate_corpus(c);
  }
  HeadOptions options;
  options.force_uniform_presence = uniform_presence;
  const std::size_t threads = thread_budget();
  const auto& gallery = gallery_split == "train" ? corpus.splits.train : corpus.splits.gallery;
  const auto& queries = gallery_split == "train" ? corpus.splits.train : corpus.splits.query;
  if (gallery_split != "gallery" && gallery_split != "train") {
    throw ConfigError("--gallery-split must be gallery or train");
  }
  const RetrievalReport report = evaluate(*loaded.model, corpus, queries, gallery, mode, options, threads);
  const std::string text = to_json(report).dump(2) + "\n";
  if (!flags.out.empty()) {
    write_text(fs::path(flags.out) / "report.json", text);
  }
  std::fputs(text.c_str(), stdout);
  if (!export_dir.empty()) {
    const auto& m = loaded.model->config();
    export_descriptors(descriptor_set(*loaded.model, corpus, queries, mode, options, threads), mode, m.parts, m.dim,
                       fs::path(export_dir) / "query");
    export_descriptors(descriptor_set(*loaded.model, corpus, gallery, mode, options, threads), mode, m.parts, m.dim,
                       fs::path(export_dir) / "gallery");
  }
  return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& modes_text) {
  RunConfig config = base_config(flags);
  if (flags.seed) config.seed = *flags.seed;
  config.validate();
  std::vector<HeadMode> modes;
  if (modes_text.empty()) {
    modes.assign(std::begin(kAllHeadModes), std::end(kAllHeadModes));
  } else {
    std::stringstream ss(modes_text);
    std::string item;
    while (std::getline(ss, item, ',')) modes.push_back(parse_head_mode(item));
  }
  const AblationTable table = run_ablation(config, modes, thread_budget(), [](const std::string& line) {
    std::fprintf(stderr, "%s\n", line.c_str());
  });
  const std::string text = to_text(table);
  std::fputs(text.c_str(), stdout);
  const fs::path dir = config.out_dir;
  write_text(dir / "ablation.json", to_json(table).dump(2) + "\n");
  write_text(dir / "ablation.txt", text);
  return 0;
}

int cmd_attention_maps(const CommonFlags& flags, const std::string& checkpoint, const std::string& corpus_dir,
                       const std::string& samples) {
  if (checkpoint.empty()) throw ConfigError("attention-maps: --checkpoint is required");
  const LoadedModel loaded = load_model(fs::path(checkpoint));
  const Corpus corpus = read_corpus(corpus_dir.empty() ? fs::path(loaded.config.corpus_path) : fs::path(corpus_dir));
  std::vector<std::size_t> ids = samples.empty() ? std::vector<std::size_t>{corpus.splits.query.front()}
                                                 : parse_indices(samples);
  const fs::path out = flags.out.empty() ? fs::path("attention_maps") : fs::path(flags.out);
  const auto written = export_attention_maps(*loaded.model, corpus, ids, out);
  std::printf("wrote %zu files to %s\n", written.size(), out.c_str());
  return 0;
}

int cmd_grad_check(const CommonFlags& flags, std::size_t entries, double threshold) {
  PipelineCheckConfig pc;
  if (flags.seed) pc.seed = *flags.seed;
  if (!flags.mode.empty()) pc.mode = parse_head_mode(flags.mode);
  pc.entries_per_param = entries;
  const PipelineCheckResult r = pipeline_grad_check(pc);
  std::printf(
      "grad-check: %zu entries over %zu tensors (%zu refined), max relative error %.3e (worst %s[%zu]: analytic %.6e numeric "
      "%.6e), %.1fs\n",
      r.check.entries_checked, r.param_tensors, r.check.refined_entries, r.check.max_relative_error, r.worst_param_name.c_str(),
      r.check.worst_entry, r.check.worst_analytic, r.check.worst_numeric, r.seconds);
  return r.check.max_relative_error < threshold ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic part template re-identification: data, training and evaluation"};
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, eval_flags, ablate_flags, maps_flags, check_flags;
  std::string corpus_dir, resume, checkpoint, export_dir, modes, samples, gallery_split = "gallery";
  std::optional<std::size_t> epochs;
  bool uniform_presence = false;
  std::size_t entries = 16;
  double threshold = 1e-4;

  auto* gen = app.add_subcommand("generate", "Render a synthetic corpus to disk");
  add_common(gen, gen_flags);

  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  add_common(train, train_flags);
  train->add_option("--corpus", corpus_dir, "Corpus directory (default: paths.corpus)");
  train->add_option("--resume", resume, "Continue from this checkpoint");
  train->add_option("--epochs", epochs, "Override optim.total_epochs");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file");
  eval->add_option("--corpus", corpus_dir, "Corpus directory");
  eval->add_flag("--uniform-presence", uniform_presence, "Force equal mean activations before weighting");
  eval->add_option("--export-descriptors", export_dir, "Write query/gallery descriptors here");
  eval->add_option("--gallery-split", gallery_split, "gallery (default) or train (train vs train sanity check)");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every head mode on all protocols");
  add_common(ablate, ablate_flags);
  ablate->add_option("--modes", modes, "Comma-separated subset of modes");

  auto* maps = app.add_subcommand("attention-maps", "Export template attention maps");
  add_common(maps, maps_flags);
  maps->add_option("--checkpoint", checkpoint, "Checkpoint file");
  maps->add_option("--corpus", corpus_dir, "Corpus directory");
  maps->add_option("--samples", samples, "Comma-separated sample indices");

  auto* check = app.add_subcommand("grad-check", "Finite-difference check of the full pipeline");
  add_common(check, check_flags);
  check->add_option("--entries", entries, "Sampled entries per parameter tensor (0 = all)");
  check->add_option("--threshold", threshold, "Maximum accepted relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    thread_budget();
    if (*gen) return cmd_generate(gen_flags);
    if (*train) return cmd_train(train_flags, corpus_dir, resume, epochs);
    if (*eval) return cmd_eval(eval_flags, checkpoint, corpus_dir, uniform_presence, export_dir, gallery_split);
    if (*ablate) return cmd_ablate(ablate_flags, modes);
    if (*maps) return cmd_attention_maps(maps_flags, checkpoint, corpus_dir, samples);
    if (*check) return cmd_grad_check(check_flags, entries, threshold);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
