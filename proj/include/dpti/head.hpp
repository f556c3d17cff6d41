#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpti/attention.hpp"
#include "dpti/backbone.hpp"
#include "dpti/dpti.hpp"
#include "dpti/params.hpp"

namespace dpti {

/// Descriptor variants:
///   G      global descriptor only
///   G+P    parts queried by grid-section means of the tap encoder output
///   G+T    parts queried by static learnt templates
///   G+D    parts queried by dynamically initialized templates
///   G+D+W  G+D with adaptive part weighting
enum class HeadMode { kGlobal, kGrid, kStatic, kDynamic, kDynamicWeighted };

inline constexpr HeadMode kAllHeadModes[] = {HeadMode::kGlobal, HeadMode::kGrid, HeadMode::kStatic,
                                             HeadMode::kDynamic, HeadMode::kDynamicWeighted};

std::string_view mode_name(HeadMode mode);
/// Accepts "G", "G+P", "G+T", "G+D", "G+D+W"; throws ConfigError otherwise.
HeadMode parse_head_mode(std::string_view text);
bool has_parts(HeadMode mode);
bool needs_dpti(HeadMode mode);
std::size_t descriptor_length(HeadMode mode, std::size_t dim, std::size_t parts);

struct HeadConfig {
  std::size_t in_channels = 128;
  std::size_t parts = 8;
  AttentionConfig attention;
};

struct Descriptor {
  HeadMode mode = HeadMode::kDynamic;
  Tensor vector;  // concat(global, part columns), after optional weighting
  Tensor global;  // d
  std::optional<Tensor> parts;     // d × N, unweighted f_{p,i}
  std::optional<Tensor> presence;  // N, ρ
  std::optional<PartTemplates> templates;
};

struct HeadOptions {
  /// Replace γ̄ with a constant vector before the presence softmax.
  bool force_uniform_presence = false;
};

/// Part attention over the final map plus the GAP global descriptor.
///
/// F̃ = 1×1-reduce(F); F_a = self-attention(F̃); parts = cross-attention of
/// the templates over F_a; global = mean of F_a columns. In G+D+W, ρ =
/// softmax(γ̄) and part i is scaled by N·ρ_i before concatenation.
class DescriptorHead {
 public:
  DescriptorHead(HeadConfig config, ParameterStore& store, Rng& rng, const std::string& prefix = "head");

  Descriptor forward(const FeaturePyramid& pyramid, const DptiModule* dpti, HeadMode mode, Graph& graph,
                     const HeadOptions& options = {}) const;

  const HeadConfig& config() const { return config_; }
  Tensor static_templates() const { return static_templates_; }
  const AttentionLayer& encoder() const { return encoder_; }
  const AttentionLayer& part_attention() const { return part_attention_; }

 private:
  HeadConfig config_;
  Tensor reduce_w_, reduce_b_;
  AttentionLayer encoder_;
  AttentionLayer part_attention_;
  Tensor static_templates_;
};

/// Token index sets of the N grid sections of an h×w token grid (row-major
/// token numbering). N horizontal stripes when h >= N; otherwise the r×c
/// factorization of N closest to square, ties toward more rows.
std::vector<std::vector<std::size_t>> grid_sections(std::size_t h, std::size_t w, std::size_t n);
/// d × N matrix of grid-section means.
Tensor grid_templates(const TokenSet& tokens, std::size_t n);

/// 1 − cos(a, b) in [0, 2]; throws DegenerateError on a zero vector.
double cosine_distance(std::span<const double> a, std::span<const double> b);
double match_distance(const Descriptor& a, const Descriptor& b);

}  // namespace dpti
