#include "dpti/dpti.hpp"

#include <cmath>
#include <stdexcept>

namespace dpti {

DptiModule::DptiModule(DptiConfig config, ParameterStore& store, Rng& rng, const std::string& prefix)
    : config_(config),
      reduce_w_(store.add(prefix + ".reduce.weight",
                          init::he_normal({config.attention.dim, config.in_channels, 1, 1}, config.in_channels, rng))),
      reduce_b_(store.add(prefix + ".reduce.bias", Tensor::zeros({config.attention.dim}))),
      encoder_(config.attention, store, rng, prefix + ".encoder") {
  if (config_.parts < 1) throw std::invalid_argument("dpti: at least one part template is required");
  const std::size_t d = config_.attention.dim;
  part_queries_ = store.add(prefix + ".part_queries",
                            init::normal({d, config_.parts}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  w_tv_ = store.add(prefix + ".w_tv", init::lecun_normal({d, d}, d, rng));
}

TokenSet DptiModule::encode(const Tensor& tap, Graph& graph) const {
  if (tap.rank() != 3 || tap.dim(0) != config_.in_channels) {
    throw DimensionError("dpti: tap must have " + std::to_string(config_.in_channels) + " channels, got " +
                         shape_str(tap.shape()));
  }
  const Tensor reduced = conv2d(tap, reduce_w_, reduce_b_, {1, 0});
  return encoder_.self_attention_encode(to_tokens(reduced), graph);
}

PartTemplates DptiModule::templates_from(const TokenSet& encoded) const {
  PartTemplates out;
  out.encoded = encoded;
  // T × N; column i is A_lᵀ q_{t,i}.
  out.gamma = matmul(transpose(encoded.tokens), part_queries_);
  out.gamma_softmax = softmax(out.gamma, 0);
  out.templates = matmul(w_tv_, matmul(encoded.tokens, out.gamma_softmax));
  return out;
}

PartTemplates DptiModule::init_templates(const Tensor& tap, Graph& graph) const {
  return templates_from(encode(tap, graph));
}

Tensor mean_activation(const PartTemplates& templates) {
  if (!templates.gamma.defined()) throw std::invalid_argument("mean_activation: templates not populated");
  return mean(templates.gamma, 0);
}

}  // namespace dpti
