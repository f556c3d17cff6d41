#include "dpti/model.hpp"

#include <cmath>

#include "dpti/errors.hpp"

namespace dpti {

AttentionConfig ModelConfig::attention() const {
  AttentionConfig a;
  a.dim = dim;
  a.heads = heads;
  a.ffn_dropout = ffn_dropout;
  a.attn_dropout = attn_dropout;
  a.conventional_residual = conventional_residual;
  return a;
}

void ModelConfig::validate() const {
  try {
    backbone.validate();
    attention().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (parts < 2 && has_parts(mode)) throw ConfigError("model: part modes need at least 2 parts");
  if (num_classes < 2) throw ConfigError("model: need at least 2 identity classes");
  if (ffn_dropout < 0.0 || ffn_dropout >= 1.0 || attn_dropout < 0.0 || attn_dropout >= 1.0) {
    throw ConfigError("model: dropout rates must lie in [0, 1)");
  }
}

namespace {

const ModelConfig& checked(const ModelConfig& config) {
  config.validate();
  return config;
}

}  // namespace

ReidModel::ReidModel(const ModelConfig& config, std::uint64_t seed)
    : config_(checked(config)),
      init_rng_(mix_seed(seed, 0xA11)),
      backbone_(config_.backbone, store_, init_rng_),
      dpti_(DptiConfig{tap_shape(config_.backbone).channels, config_.parts, config_.attention()}, store_, init_rng_),
      head_(HeadConfig{final_shape(config_.backbone).channels, config_.parts, config_.attention()}, store_,
            init_rng_) {
  const std::size_t length = config_.descriptor_length();
  classifier_w_ = store_.add("classifier.weight", init::lecun_normal({config_.num_classes, length}, length, init_rng_));
  classifier_b_ = store_.add("classifier.bias", Tensor::zeros({config_.num_classes}));
}

Descriptor ReidModel::describe(const Tensor& image, Graph& graph, const HeadOptions& options) const {
  return describe(image, config_.mode, graph, options);
}

Descriptor ReidModel::describe(const Tensor& image, HeadMode mode, Graph& graph, const HeadOptions& options) const {
  const FeaturePyramid pyramid = backbone_.extract(image, graph);
  return head_.forward(pyramid, &dpti_, mode, graph, options);
}

Tensor ReidModel::logits(const Descriptor& descriptor) const {
  const std::size_t length = descriptor.vector.size();
  if (length != classifier_w_.dim(1)) {
    throw DimensionError("classifier expects descriptors of length " + std::to_string(classifier_w_.dim(1)) +
                         ", got " + std::to_string(length));
  }
  const Tensor column = matmul(classifier_w_, reshape(descriptor.vector, {length, 1}));
  return add(reshape(column, {config_.num_classes}), classifier_b_);
}

BatchOutputs ReidModel::forward_batch(std::span<const Tensor> images, Graph& graph, bool clean_parts) const {
  BatchOutputs out;
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  Graph clean(Mode::kInference);
  for (const Tensor& image : images) {
    const FeaturePyramid pyramid = backbone_.extract(image, graph);
    Descriptor d = head_.forward(pyramid, &dpti_, config_.mode, graph);
    rows.push_back(reshape(logits(d), {1, config_.num_classes}));
    if (clean_parts && d.parts) {
      out.parts.push_back(*head_.forward(pyramid, &dpti_, config_.mode, clean).parts);
    } else if (d.parts) {
      out.parts.push_back(*d.parts);
    }
    out.descriptors.push_back(std::move(d.vector));
  }
  out.logits = concat(rows, 0);
  return out;
}

}  // namespace dpti
