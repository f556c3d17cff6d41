#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpti/config.hpp"
#include "dpti/head.hpp"
#include "dpti/retrieval.hpp"
#include "dpti/tensor.hpp"

namespace dpti {

/// Finite-difference check of the whole pipeline (backbone, template module,
/// head, classifier, joint loss) on random images with dropout off.
struct PipelineCheckConfig {
  std::size_t dim = 16;
  std::size_t parts = 4;
  std::size_t heads = 4;
  std::size_t identities = 3;
  std::size_t per_identity = 2;
  HeadMode mode = HeadMode::kDynamicWeighted;
  double epsilon = 1e-5;
  double denominator_floor = 1e-6;
  std::size_t refinements = 2;
  std::size_t entries_per_param = 16;
  std::uint64_t seed = 0;
};

struct PipelineCheckResult {
  GradCheckResult check;
  std::string worst_param_name;
  std::size_t param_tensors = 0;
  double seconds = 0.0;
};

PipelineCheckResult pipeline_grad_check(const PipelineCheckConfig& config);

/// Variant × protocol metrics of an ablation sweep.
struct AblationCell {
  double rank1 = 0.0, rank5 = 0.0, map = 0.0, minp = 0.0;
};
struct AblationRow {
  HeadMode mode = HeadMode::kDynamic;
  AblationCell holistic, occluded, partial;
};
struct AblationTable {
  std::vector<AblationRow> rows;
};

AblationCell to_cell(const RetrievalReport& report);

/// Trains every mode with the same seed and budget on the holistic train
/// split (identical across protocols) and evaluates it on the holistic,
/// occluded and partial query sets.
AblationTable run_ablation(const RunConfig& base, const std::vector<HeadMode>& modes, std::size_t threads = 1,
                           const std::function<void(const std::string&)>& progress = {});

nlohmann::json to_json(const AblationTable& table);
std::string to_text(const AblationTable& table);

}  // namespace dpti
