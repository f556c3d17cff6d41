#include "dpti/backbone.hpp"

#include <stdexcept>

namespace dpti {

BackboneConfig BackboneConfig::desk() {
  BackboneConfig c;
  c.stages = {{16, 1, 2}, {32, 1, 2}, {64, 1, 2}, {128, 1, 1}};
  c.input_h = 64;
  c.input_w = 32;
  c.tap_stage = 3;
  c.final_stage_stride = 1;
  return c;
}

BackboneConfig BackboneConfig::full_scale() {
  BackboneConfig c;
  c.stages = {{256, 1, 4}, {512, 1, 2}, {1024, 1, 2}, {2048, 1, 1}};
  c.input_h = 256;
  c.input_w = 128;
  c.tap_stage = 3;
  c.final_stage_stride = 1;
  return c;
}

std::size_t BackboneConfig::stage_stride(std::size_t stage_index) const {
  return stage_index + 1 == stages.size() ? final_stage_stride : stages.at(stage_index).stride;
}

void BackboneConfig::validate() const {
  if (stages.empty()) throw std::invalid_argument("backbone: at least one stage is required");
  if (tap_stage < 1 || tap_stage >= stages.size()) {
    throw std::invalid_argument("backbone: tap_stage must satisfy 1 <= l < " + std::to_string(stages.size()) +
                                ", got " + std::to_string(tap_stage));
  }
  if (final_stage_stride < 1) throw std::invalid_argument("backbone: final_stage_stride must be >= 1");
  if (kernel < 1) throw std::invalid_argument("backbone: kernel must be >= 1");
  if (input_channels < 1 || input_h < 1 || input_w < 1) {
    throw std::invalid_argument("backbone: input dimensions must be positive");
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].channels < 1 || stages[i].blocks < 1) {
      throw std::invalid_argument("backbone: stage " + std::to_string(i + 1) +
                                  " needs positive channels and blocks");
    }
    if (stage_stride(i) < 1) throw std::invalid_argument("backbone: strides must be >= 1");
  }
  // Surfaces spatial underflow as a DimensionError.
  (void)stage_shapes(*this);
}

std::vector<MapShape> stage_shapes(const BackboneConfig& config) {
  std::vector<MapShape> out;
  std::size_t h = config.input_h, w = config.input_w;
  const std::size_t pad = config.kernel / 2;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    for (std::size_t b = 0; b < config.stages[s].blocks; ++b) {
      const std::size_t stride = b == 0 ? config.stage_stride(s) : 1;
      h = conv_output_size(h, config.kernel, stride, pad);
      w = conv_output_size(w, config.kernel, stride, pad);
    }
    out.push_back({config.stages[s].channels, h, w});
  }
  return out;
}

MapShape tap_shape(const BackboneConfig& config) { return stage_shapes(config).at(config.tap_stage - 1); }

MapShape final_shape(const BackboneConfig& config) { return stage_shapes(config).back(); }

std::size_t conv_param_count(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, bool bias) {
  return in_channels * out_channels * kernel * kernel + (bias ? out_channels : 0);
}

std::size_t count_params(const BackboneConfig& config) {
  config.validate();
  std::size_t total = 0;
  std::size_t in = config.input_channels;
  for (const auto& stage : config.stages) {
    for (std::size_t b = 0; b < stage.blocks; ++b) {
      total += conv_param_count(in, stage.channels, config.kernel);
      in = stage.channels;
    }
  }
  return total;
}

Backbone::Backbone(BackboneConfig config, ParameterStore& store, Rng& rng, const std::string& prefix)
    : config_(std::move(config)) {
  config_.validate();
  std::size_t in = config_.input_channels;
  const std::size_t k = config_.kernel;
  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    std::vector<Conv> blocks;
    for (std::size_t b = 0; b < config_.stages[s].blocks; ++b) {
      const std::size_t out = config_.stages[s].channels;
      const std::string name = prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      Conv conv{store.add(name + ".weight", init::he_normal({out, in, k, k}, in * k * k, rng)),
                store.add(name + ".bias", Tensor::zeros({out})), b == 0 ? config_.stage_stride(s) : 1};
      blocks.push_back(std::move(conv));
      in = out;
    }
    stages_.push_back(std::move(blocks));
  }
}

FeaturePyramid Backbone::extract(const Tensor& image, Graph& /*graph*/) const {
  if (image.rank() != 3 || image.dim(0) != config_.input_channels || image.dim(1) != config_.input_h ||
      image.dim(2) != config_.input_w) {
    throw DimensionError("backbone: expected image " +
                         shape_str({config_.input_channels, config_.input_h, config_.input_w}) + ", got " +
                         shape_str(image.shape()));
  }
  FeaturePyramid out;
  Tensor x = image;
  const std::size_t pad = config_.kernel / 2;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (const auto& conv : stages_[s]) {
      x = relu(conv2d(x, conv.weight, conv.bias, {conv.stride, pad}));
    }
    if (s + 1 == config_.tap_stage) out.tap = x;
  }
  out.final = x;
  return out;
}

}  // namespace dpti
