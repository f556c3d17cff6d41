#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dpti/backbone.hpp"
#include "dpti/dpti.hpp"
#include "dpti/head.hpp"
#include "dpti/losses.hpp"
#include "dpti/params.hpp"

namespace dpti {

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::desk();
  std::size_t dim = 64;
  std::size_t heads = 8;
  std::size_t parts = 8;
  double ffn_dropout = 0.1;
  double attn_dropout = 0.2;
  bool conventional_residual = false;
  HeadMode mode = HeadMode::kDynamic;
  std::size_t num_classes = 32;

  AttentionConfig attention() const;
  std::size_t descriptor_length() const { return dpti::descriptor_length(mode, dim, parts); }
  void validate() const;
};

/// Backbone, template module, descriptor head and identity classifier.
///
/// Every submodule is built regardless of the head mode so that parameter
/// names and shapes depend only on the dimensions; the classifier width
/// follows the training mode's descriptor length.
class ReidModel {
 public:
  ReidModel(const ModelConfig& config, std::uint64_t seed);

  ReidModel(const ReidModel&) = delete;
  ReidModel& operator=(const ReidModel&) = delete;

  Descriptor describe(const Tensor& image, Graph& graph, const HeadOptions& options = {}) const;
  Descriptor describe(const Tensor& image, HeadMode mode, Graph& graph, const HeadOptions& options = {}) const;
  /// Classifier row for one descriptor; length num_classes.
  Tensor logits(const Descriptor& descriptor) const;
  /// Descriptors, B × C logits and part matrices for a batch. With clean_parts the
  /// part matrices come from an extra head pass in inference mode (gradients kept).
  BatchOutputs forward_batch(std::span<const Tensor> images, Graph& graph, bool clean_parts = false) const;

  const ModelConfig& config() const { return config_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const Backbone& backbone() const { return backbone_; }
  const DptiModule& dpti() const { return dpti_; }
  const DescriptorHead& head() const { return head_; }

 private:
  ModelConfig config_;
  ParameterStore store_;
  Rng init_rng_;
  Backbone backbone_;
  DptiModule dpti_;
  DescriptorHead head_;
  Tensor classifier_w_, classifier_b_;
};

}  // namespace dpti
