#include "dpti/experiments.hpp"

#include <chrono>
#include <cstdio>

#include "dpti/evaluate.hpp"
#include "dpti/losses.hpp"
#include "dpti/model.hpp"
#include "dpti/synth.hpp"
#include "dpti/trainer.hpp"

namespace dpti {

PipelineCheckResult pipeline_grad_check(const PipelineCheckConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.dim = config.dim;
  mc.parts = config.parts;
  mc.heads = config.heads;
  mc.ffn_dropout = 0.0;
  mc.attn_dropout = 0.0;
  mc.mode = config.mode;
  mc.num_classes = config.identities;
  ReidModel model(mc, config.seed);

  Rng rng(mix_seed(config.seed, 0x6C));
  std::vector<Tensor> images;
  std::vector<int> labels;
  const auto& bb = mc.backbone;
  for (std::size_t id = 0; id < config.identities; ++id) {
    for (std::size_t k = 0; k < config.per_identity; ++k) {
      std::vector<double> pixels(bb.input_channels * bb.input_h * bb.input_w);
      for (double& p : pixels) p = rng.uniform();
      images.push_back(Tensor::from({bb.input_channels, bb.input_h, bb.input_w}, std::move(pixels)));
      labels.push_back(static_cast<int>(id));
    }
  }
  LossOptions options;
  options.smoothing = 0.0;
  const LossWeights weights;
  auto loss = [&] {
    Graph graph(Mode::kInference);
    return joint_loss(model.forward_batch(images, graph), labels, weights, options).total;
  };
  std::vector<Tensor> params = model.store().tensors();
  GradCheckOptions go;
  go.epsilon = config.epsilon;
  go.denominator_floor = config.denominator_floor;
  go.max_entries_per_param = config.entries_per_param;
  go.refinements = config.refinements;
  go.seed = config.seed;

  PipelineCheckResult out;
  out.check = grad_check(loss, params, go);
  out.param_tensors = params.size();
  out.worst_param_name = model.store().entries().at(out.check.worst_param).first;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

AblationCell to_cell(const RetrievalReport& report) {
  AblationCell c;
  c.rank1 = report.rank(1);
  c.rank5 = report.rank(std::min<std::size_t>(5, report.n_gallery));
  c.map = report.map;
  c.minp = report.minp;
  return c;
}

AblationTable run_ablation(const RunConfig& base, const std::vector<HeadMode>& modes, std::size_t threads,
                           const std::function<void(const std::string&)>& progress) {
  std::vector<Corpus> corpora;
  for (Protocol p : {Protocol::kHolistic, Protocol::kOccluded, Protocol::kPartial}) {
    CorpusConfig c = base.data;
    c.protocol = p;
    corpora.push_back(generate_corpus(c));
  }
  AblationTable table;
  for (HeadMode mode : modes) {
    RunConfig config = base;
    config.model.mode = mode;
    config.data.protocol = Protocol::kHolistic;
    Trainer trainer(config, corpora[0]);
    while (trainer.epoch() < config.optim.total_epochs) {
      const EpochLog log = trainer.train_epoch();
      if (progress) {
        char line[160];
        std::snprintf(line, sizeof(line), "%s epoch %zu loss %.4f (%.1fs)", std::string(mode_name(mode)).c_str(),
                      log.epoch, log.loss, log.seconds);
        progress(line);
      }
    }
    AblationRow row;
    row.mode = mode;
    row.holistic = to_cell(evaluate(trainer.model(), corpora[0], mode, {}, threads));
    row.occluded = to_cell(evaluate(trainer.model(), corpora[1], mode, {}, threads));
    row.partial = to_cell(evaluate(trainer.model(), corpora[2], mode, {}, threads));
    table.rows.push_back(row);
  }
  return table;
}

namespace {

nlohmann::json cell_json(const AblationCell& c) {
  return {{"rank1", c.rank1}, {"rank5", c.rank5}, {"map", c.map}, {"minp", c.minp}};
}

}  // namespace

nlohmann::json to_json(const AblationTable& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"mode", std::string(mode_name(r.mode))},
                    {"holistic", cell_json(r.holistic)},
                    {"occluded", cell_json(r.occluded)},
                    {"partial", cell_json(r.partial)}});
  }
  return {{"rows", rows}};
}

std::string to_text(const AblationTable& table) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-6s | %-27s | %-27s | %-27s\n", "mode", "holistic R1/R5/mAP/mINP",
                "occluded R1/R5/mAP/mINP", "partial R1/R5/mAP/mINP");
  out += line;
  out += std::string(97, '-') + "\n";
  for (const auto& r : table.rows) {
    std::snprintf(line, sizeof(line), "%-6s |", std::string(mode_name(r.mode)).c_str());
    out += line;
    for (const AblationCell* c : {&r.holistic, &r.occluded, &r.partial}) {
      std::snprintf(line, sizeof(line), " %5.3f %5.3f %5.3f %5.3f    |", c->rank1, c->rank5, c->map, c->minp);
      out += line;
    }
    out.pop_back();
    out += "\n";
  }
  return out;
}

}  // namespace dpti
