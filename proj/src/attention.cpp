#include "dpti/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace dpti {

void AttentionConfig::validate() const {
  if (dim == 0 || heads == 0) throw std::invalid_argument("attention: dim and heads must be positive");
  if (dim % heads != 0) {
    throw std::invalid_argument("attention: dim " + std::to_string(dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (ffn_dropout < 0.0 || ffn_dropout >= 1.0 || attn_dropout < 0.0 || attn_dropout >= 1.0) {
    throw std::invalid_argument("attention: dropout probabilities must be in [0, 1)");
  }
}

TokenSet to_tokens(const Tensor& feature_map) {
  if (feature_map.rank() != 3) {
    throw DimensionError("to_tokens: expected c×h×w, got " + shape_str(feature_map.shape()));
  }
  const std::size_t c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
  return {reshape(feature_map, {c, h * w}), h, w};
}

AttentionLayer::AttentionLayer(AttentionConfig config, ParameterStore& store, Rng& rng, const std::string& prefix)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.dim, hid = config_.hidden();
  wq_ = store.add(prefix + ".w_q", init::lecun_normal({d, d}, d, rng));
  wk_ = store.add(prefix + ".w_k", init::lecun_normal({d, d}, d, rng));
  wv_ = store.add(prefix + ".w_v", init::lecun_normal({d, d}, d, rng));
  w1_ = store.add(prefix + ".ffn.w1", init::he_normal({hid, d}, d, rng));
  b1_ = store.add(prefix + ".ffn.b1", Tensor::zeros({hid}));
  w2_ = store.add(prefix + ".ffn.w2", init::lecun_normal({d, hid}, hid, rng));
  b2_ = store.add(prefix + ".ffn.b2", Tensor::zeros({d}));
}

Tensor AttentionLayer::attend(const Tensor& queries, const Tensor& context, Graph& graph,
                              AttentionTrace* trace) const {
  const std::size_t d = config_.dim;
  if (queries.rank() != 2 || queries.dim(0) != d) {
    throw DimensionError("attention: queries must be " + std::to_string(d) + "×Q, got " +
                         shape_str(queries.shape()));
  }
  if (context.rank() != 2 || context.dim(0) != d) {
    throw DimensionError("attention: context must be " + std::to_string(d) + "×T, got " +
                         shape_str(context.shape()));
  }
  const Tensor q = matmul(wq_, queries);
  const Tensor k = matmul(wk_, context);
  const Tensor v = matmul(wv_, context);

  const std::size_t dk = config_.head_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> heads;
  heads.reserve(config_.heads);
  if (trace) trace->beta.clear();
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const std::size_t lo = h * dk, hi = lo + dk;
    const Tensor qh = config_.heads == 1 ? q : slice(q, 0, lo, hi);
    const Tensor kh = config_.heads == 1 ? k : slice(k, 0, lo, hi);
    const Tensor vh = config_.heads == 1 ? v : slice(v, 0, lo, hi);
    // scores: T × Q; column i holds Kᵀ q_i.
    const Tensor scores = scale(matmul(transpose(kh), qh), inv_sqrt_dk);
    Tensor beta = softmax(scores, 0);
    if (trace) trace->beta.push_back(beta);
    beta = dropout(beta, config_.attn_dropout, graph);
    heads.push_back(matmul(vh, beta));
  }
  const Tensor g = config_.heads == 1 ? heads.front() : concat(heads, 0);

  const Tensor pre = add(g, queries);
  Tensor hidden = relu(add_row_bias(matmul(w1_, pre), b1_));
  hidden = dropout(hidden, config_.ffn_dropout, graph);
  const Tensor ffn = add_row_bias(matmul(w2_, hidden), b2_);
  return add(ffn, config_.conventional_residual ? pre : g);
}

TokenSet AttentionLayer::self_attention_encode(const TokenSet& x, Graph& graph, AttentionTrace* trace) const {
  if (x.tokens.rank() != 2 || x.tokens.dim(1) != x.count()) {
    throw DimensionError("self_attention_encode: token count does not match origin shape");
  }
  return {attend(x.tokens, x.tokens, graph, trace), x.h, x.w};
}

Tensor AttentionLayer::cross_attention(const Tensor& queries, const TokenSet& context, Graph& graph,
                                       AttentionTrace* trace) const {
  return attend(queries, context.tokens, graph, trace);
}

}  // namespace dpti
