#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dpti/params.hpp"
#include "dpti/tensor.hpp"

namespace dpti {

struct StageSpec {
  std::size_t channels = 0;
  std::size_t blocks = 1;
  /// Stride of the stage's first conv. Ignored for the final stage, whose
  /// stride is BackboneConfig::final_stage_stride.
  std::size_t stride = 2;
};

/// Staged conv feature extractor. Each block is conv(k×k, pad k/2) → ReLU;
/// only the first block of a stage is strided.
struct BackboneConfig {
  std::vector<StageSpec> stages;
  std::size_t input_channels = 3;
  std::size_t input_h = 64;
  std::size_t input_w = 32;
  /// 1-based index of the stage whose output is tapped as the intermediate map.
  std::size_t tap_stage = 3;
  std::size_t final_stage_stride = 1;
  std::size_t kernel = 3;

  /// Four stages, channels 16/32/64/128, strides 2/2/2/1, input 64×32, tap 3.
  static BackboneConfig desk();
  /// 256×128 input with a stride-4 first stage, strides 4/2/2/1.
  static BackboneConfig full_scale();

  std::size_t stage_stride(std::size_t stage_index) const;
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

struct MapShape {
  std::size_t channels = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  bool operator==(const MapShape&) const = default;
};

/// Output shape of every stage, from the closed-form conv size formula.
std::vector<MapShape> stage_shapes(const BackboneConfig& config);
MapShape tap_shape(const BackboneConfig& config);
MapShape final_shape(const BackboneConfig& config);

struct FeaturePyramid {
  Tensor tap;    // n_l × h_l × w_l
  Tensor final;  // n × h × w
};

std::size_t conv_param_count(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                             bool bias = true);
std::size_t count_params(const BackboneConfig& config);

class Backbone {
 public:
  Backbone(BackboneConfig config, ParameterStore& store, Rng& rng, const std::string& prefix = "backbone");

  FeaturePyramid extract(const Tensor& image, Graph& graph) const;
  const BackboneConfig& config() const { return config_; }

 private:
  struct Conv {
    Tensor weight;
    Tensor bias;
    std::size_t stride;
  };
  BackboneConfig config_;
  std::vector<std::vector<Conv>> stages_;
};

}  // namespace dpti
