#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dpti/params.hpp"
#include "dpti/tensor.hpp"

namespace dpti {

struct AttentionConfig {
  std::size_t dim = 64;
  std::size_t heads = 8;
  /// FFN hidden width; 0 means 2·dim.
  std::size_t ffn_dim = 0;
  double ffn_dropout = 0.1;
  double attn_dropout = 0.2;
  /// a = FFN(g + f) + (g + f) instead of the default a = FFN(g + f) + g.
  bool conventional_residual = false;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden() const { return ffn_dim == 0 ? 2 * dim : ffn_dim; }
  void validate() const;
};

/// Feature map c×h×w viewed as c×(h·w) column tokens; token i = y·w + x.
struct TokenSet {
  Tensor tokens;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t count() const { return h * w; }
};

TokenSet to_tokens(const Tensor& feature_map);

/// Per-head attention weights β (keys × queries) from the last forward.
struct AttentionTrace {
  std::vector<Tensor> beta;
};

/// One encoder layer: projections W_q, W_k, W_v (no bias), scaled dot-product
/// attention per head, then the FFN (two affine maps with ReLU).
///
/// For queries f_i and context tokens F:
///   q_i = W_q f_i,  K = W_k F,  V = W_v F
///   β_i = softmax(Kᵀ q_i / √d_k),  g_i = V β_i   (per head, heads concatenated)
///   a_i = FFN(g_i + f_i) + g_i
class AttentionLayer {
 public:
  AttentionLayer(AttentionConfig config, ParameterStore& store, Rng& rng, const std::string& prefix);

  /// Self-attention: every token queries all tokens of the same set.
  TokenSet self_attention_encode(const TokenSet& x, Graph& graph, AttentionTrace* trace = nullptr) const;

  /// Queries d×Q attend over the context tokens; the residual f term is the
  /// unprojected query.
  Tensor cross_attention(const Tensor& queries, const TokenSet& context, Graph& graph,
                         AttentionTrace* trace = nullptr) const;

  const AttentionConfig& config() const { return config_; }
  Tensor w_q() const { return wq_; }
  Tensor w_k() const { return wk_; }
  Tensor w_v() const { return wv_; }
  Tensor ffn_w1() const { return w1_; }
  Tensor ffn_b1() const { return b1_; }
  Tensor ffn_w2() const { return w2_; }
  Tensor ffn_b2() const { return b2_; }

 private:
  Tensor attend(const Tensor& queries, const Tensor& context, Graph& graph, AttentionTrace* trace) const;

  AttentionConfig config_;
  Tensor wq_, wk_, wv_;
  Tensor w1_, b1_, w2_, b2_;
};

}  // namespace dpti
