#include "dpti/head.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

#include "dpti/errors.hpp"

namespace dpti {

std::string_view mode_name(HeadMode mode) {
  switch (mode) {
    case HeadMode::kGlobal:
      return "G";
    case HeadMode::kGrid:
      return "G+P";
    case HeadMode::kStatic:
      return "G+T";
    case HeadMode::kDynamic:
      return "G+D";
    case HeadMode::kDynamicWeighted:
      return "G+D+W";
  }
  return "?";
}

HeadMode parse_head_mode(std::string_view text) {
  for (HeadMode m : kAllHeadModes) {
    if (mode_name(m) == text) return m;
  }
  throw ConfigError("unknown head mode '" + std::string(text) + "' (expected G, G+P, G+T, G+D or G+D+W)");
}

bool has_parts(HeadMode mode) { return mode != HeadMode::kGlobal; }

bool needs_dpti(HeadMode mode) {
  return mode == HeadMode::kGrid || mode == HeadMode::kDynamic || mode == HeadMode::kDynamicWeighted;
}

std::size_t descriptor_length(HeadMode mode, std::size_t dim, std::size_t parts) {
  return has_parts(mode) ? (parts + 1) * dim : dim;
}

DescriptorHead::DescriptorHead(HeadConfig config, ParameterStore& store, Rng& rng, const std::string& prefix)
    : config_(config),
      reduce_w_(store.add(prefix + ".reduce.weight",
                          init::he_normal({config.attention.dim, config.in_channels, 1, 1}, config.in_channels, rng))),
      reduce_b_(store.add(prefix + ".reduce.bias", Tensor::zeros({config.attention.dim}))),
      encoder_(config.attention, store, rng, prefix + ".encoder"),
      part_attention_(config.attention, store, rng, prefix + ".part_attention") {
  const std::size_t d = config_.attention.dim;
  static_templates_ = store.add(prefix + ".static_templates",
                                init::normal({d, config_.parts}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
}

Descriptor DescriptorHead::forward(const FeaturePyramid& pyramid, const DptiModule* dpti, HeadMode mode,
                                   Graph& graph, const HeadOptions& options) const {
  if (needs_dpti(mode) && dpti == nullptr) {
    throw ConfigError("head mode " + std::string(mode_name(mode)) + " requires the template module");
  }
  if (dpti && has_parts(mode) && dpti->config().parts != config_.parts) {
    throw ConfigError("head and template module disagree on the number of parts");
  }
  if (pyramid.final.rank() != 3 || pyramid.final.dim(0) != config_.in_channels) {
    throw DimensionError("head: final map must have " + std::to_string(config_.in_channels) + " channels, got " +
                         shape_str(pyramid.final.shape()));
  }

  Descriptor out;
  out.mode = mode;
  const TokenSet reduced = to_tokens(conv2d(pyramid.final, reduce_w_, reduce_b_, {1, 0}));
  const TokenSet attended = encoder_.self_attention_encode(reduced, graph);
  out.global = mean(attended.tokens, 1);
  if (!has_parts(mode)) {
    out.vector = out.global;
    return out;
  }

  Tensor queries;
  switch (mode) {
    case HeadMode::kGrid:
      queries = grid_templates(dpti->encode(pyramid.tap, graph), config_.parts);
      break;
    case HeadMode::kStatic:
      queries = static_templates_;
      break;
    default:
      out.templates = dpti->init_templates(pyramid.tap, graph);
      queries = out.templates->templates;
      break;
  }

  const Tensor parts = part_attention_.cross_attention(queries, attended, graph);
  out.parts = parts;
  Tensor weighted = parts;
  if (mode == HeadMode::kDynamicWeighted) {
    const Tensor gamma_bar = options.force_uniform_presence ? Tensor::zeros({config_.parts})
                                                            : mean_activation(*out.templates);
    out.presence = softmax(gamma_bar, 0);
    weighted = scale_columns(parts, scale(*out.presence, static_cast<double>(config_.parts)));
  }
  const std::size_t d = config_.attention.dim;
  out.vector = concat({out.global, reshape(transpose(weighted), {config_.parts * d})}, 0);
  return out;
}

std::vector<std::vector<std::size_t>> grid_sections(std::size_t h, std::size_t w, std::size_t n) {
  if (n == 0 || h == 0 || w == 0) throw DimensionError("grid_sections: empty grid or zero sections");
  std::size_t rows = 0, cols = 0;
  if (h >= n) {
    rows = n;
    cols = 1;
  } else {
    std::size_t best_gap = std::numeric_limits<std::size_t>::max();
    for (std::size_t r = 1; r <= n; ++r) {
      if (n % r != 0) continue;
      const std::size_t c = n / r;
      if (r > h || c > w) continue;
      const std::size_t gap = r > c ? r - c : c - r;
      if (gap < best_gap || (gap == best_gap && r > rows)) {
        best_gap = gap;
        rows = r;
        cols = c;
      }
    }
    if (rows == 0) {
      throw DimensionError("grid_sections: cannot split a " + std::to_string(h) + "x" + std::to_string(w) +
                           " grid into " + std::to_string(n) + " sections");
    }
  }
  std::vector<std::vector<std::size_t>> sections;
  sections.reserve(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t y0 = r * h / rows, y1 = (r + 1) * h / rows;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t x0 = c * w / cols, x1 = (c + 1) * w / cols;
      std::vector<std::size_t> tokens;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) tokens.push_back(y * w + x);
      sections.push_back(std::move(tokens));
    }
  }
  return sections;
}

Tensor grid_templates(const TokenSet& tokens, std::size_t n) {
  const auto sections = grid_sections(tokens.h, tokens.w, n);
  const std::size_t d = tokens.tokens.dim(0), t = tokens.count();
  std::vector<Tensor> columns;
  columns.reserve(n);
  for (const auto& section : sections) {
    std::vector<std::size_t> idx;
    idx.reserve(d * section.size());
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t tok : section) idx.push_back(i * t + tok);
    const Tensor block = reshape(gather(tokens.tokens, idx), {d, section.size()});
    columns.push_back(reshape(mean(block, 1), {d, 1}));
  }
  return concat(columns, 1);
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_distance: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateError("cosine_distance: zero-norm descriptor");
  const double cos = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(1.0 - cos, 0.0, 2.0);
}

double match_distance(const Descriptor& a, const Descriptor& b) {
  return cosine_distance(a.vector.data(), b.vector.data());
}

}  // namespace dpti
