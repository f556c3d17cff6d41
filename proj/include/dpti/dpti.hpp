#pragma once

#include <cstddef>
#include <string>

#include "dpti/attention.hpp"
#include "dpti/params.hpp"
#include "dpti/tensor.hpp"

namespace dpti {

struct DptiConfig {
  std::size_t in_channels = 64;
  std::size_t parts = 8;
  AttentionConfig attention;
};

/// Input-specific part templates and the raw template-attention weights.
struct PartTemplates {
  Tensor templates;      // d × N, t_i
  Tensor gamma;          // (h_l·w_l) × N, raw γ_i = A_lᵀ q_{t,i}
  Tensor gamma_softmax;  // softmax of each γ column over spatial positions
  TokenSet encoded;      // A_l, d × (h_l·w_l)
};

/// Dynamic part template initialization.
///
/// The tap map is reduced to d channels by a 1×1 conv, self-attended into
/// A_l, correlated with N learnt part queries (γ_i = A_lᵀ q_{t,i}), and each
/// template is the value-projected softmax(γ_i)-weighted sum of A_l columns:
/// t_i = W_tv A_l softmax(γ_i). No dropout is applied after the encoder.
class DptiModule {
 public:
  DptiModule(DptiConfig config, ParameterStore& store, Rng& rng, const std::string& prefix = "dpti");

  /// Reduce + self-attention; the A_l matrix.
  TokenSet encode(const Tensor& tap, Graph& graph) const;
  PartTemplates templates_from(const TokenSet& encoded) const;
  PartTemplates init_templates(const Tensor& tap, Graph& graph) const;

  const DptiConfig& config() const { return config_; }
  const AttentionLayer& encoder() const { return encoder_; }
  Tensor part_queries() const { return part_queries_; }
  Tensor value_projection() const { return w_tv_; }
  Tensor reduce_weight() const { return reduce_w_; }
  Tensor reduce_bias() const { return reduce_b_; }

 private:
  DptiConfig config_;
  Tensor reduce_w_, reduce_b_;
  AttentionLayer encoder_;
  Tensor part_queries_;  // d × N
  Tensor w_tv_;          // d × d
};

/// γ̄_i: mean over spatial positions of each raw (pre-softmax) γ column.
Tensor mean_activation(const PartTemplates& templates);

}  // namespace dpti
