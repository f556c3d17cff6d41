#include "dpti/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "dpti/checkpoint.hpp"
#include "dpti/errors.hpp"
#include "dpti/losses.hpp"

namespace dpti {

std::size_t thread_budget() {
  const char* env = std::getenv("DPTI_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("DPTI_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<std::size_t>(v);
}

std::vector<Descriptor> describe_samples(const ReidModel& model, std::span<const Tensor> images, HeadMode mode,
                                         const HeadOptions& options, std::size_t threads) {
  std::vector<Descriptor> out(images.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    NoGradGuard no_grad;
    for (std::size_t i = begin; i < end; ++i) {
      Graph graph(Mode::kInference);
      out[i] = model.describe(images[i], mode, graph, options);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, images.size()));
  if (threads == 1) {
    work(0, images.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (images.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(images.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  for (const auto& d : out) {
    for (double v : d.vector.data()) {
      if (!std::isfinite(v)) throw NumericError("non-finite descriptor value");
    }
  }
  return out;
}

DescriptorSet descriptor_set(const ReidModel& model, const Corpus& corpus, std::span<const std::size_t> indices,
                             HeadMode mode, const HeadOptions& options, std::size_t threads) {
  std::vector<Tensor> images;
  images.reserve(indices.size());
  for (std::size_t i : indices) images.push_back(corpus.images.at(i));
  const auto descriptors = describe_samples(model, images, mode, options, threads);
  DescriptorSet set;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    set.add(descriptors[i].vector.to_vector(), corpus.splits.records.at(indices[i]).identity);
  }
  return set;
}

RetrievalReport evaluate(const ReidModel& model, const Corpus& corpus, std::span<const std::size_t> queries,
                         std::span<const std::size_t> gallery, HeadMode mode, const HeadOptions& options,
                         std::size_t threads) {
  const DescriptorSet q = descriptor_set(model, corpus, queries, mode, options, threads);
  const DescriptorSet g = descriptor_set(model, corpus, gallery, mode, options, threads);
  const auto ranked = rank_all(q, g, threads);
  return compute_report(ranked, std::string(mode_name(mode)));
}

RetrievalReport evaluate(const ReidModel& model, const Corpus& corpus, HeadMode mode, const HeadOptions& options,
                         std::size_t threads) {
  return evaluate(model, corpus, corpus.splits.query, corpus.splits.gallery, mode, options, threads);
}

void export_descriptors(const DescriptorSet& set, HeadMode mode, std::size_t parts, std::size_t dim,
                        const std::filesystem::path& dir) {
  std::vector<std::uint8_t> bytes;
  for (const auto& v : set.vectors) append_f64_le(bytes, v);
  write_file(dir / "descriptors.bin", bytes);
  const nlohmann::json meta = {{"length", set.vectors.empty() ? 0 : set.vectors.front().size()},
                               {"mode", std::string(mode_name(mode))},
                               {"N", parts},
                               {"d", dim},
                               {"count", set.size()},
                               {"labels", set.labels}};
  const std::string text = meta.dump(2) + "\n";
  write_file(dir / "descriptors.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

double mean_part_cosine_sq(const ReidModel& model, const Corpus& corpus, std::span<const std::size_t> indices,
                           HeadMode mode) {
  if (!has_parts(mode)) throw ConfigError("mean_part_cosine_sq: mode has no part vectors");
  if (indices.empty()) throw DataError("mean_part_cosine_sq: no samples");
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i : indices) {
    Graph graph(Mode::kInference);
    const Descriptor d = model.describe(corpus.images.at(i), mode, graph);
    total += diversity_loss(*d.parts).item();
  }
  return total / static_cast<double>(indices.size());
}

namespace {

/// Region label covering the majority of the pixels of each tap cell, or -1.
std::vector<int> cell_regions(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width,
                              std::size_t h, std::size_t w) {
  std::vector<int> out(h * w, -1);
  for (std::size_t cy = 0; cy < h; ++cy) {
    for (std::size_t cx = 0; cx < w; ++cx) {
      const std::size_t y0 = cy * height / h, y1 = (cy + 1) * height / h;
      const std::size_t x0 = cx * width / w, x1 = (cx + 1) * width / w;
      std::array<std::size_t, kBodyRegions> counts{};
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
          if (mask[y * width + x] < kBodyRegions) ++counts[mask[y * width + x]];
      const auto best = std::max_element(counts.begin(), counts.end());
      if (2 * *best > (y1 - y0) * (x1 - x0)) out[cy * w + cx] = static_cast<int>(best - counts.begin());
    }
  }
  return out;
}

}  // namespace

OcclusionStudy occlusion_monotonicity(const ReidModel& model, const Corpus& corpus,
                                      std::span<const std::size_t> indices) {
  OcclusionStudy study;
  NoGradGuard no_grad;
  const std::size_t height = corpus.config.height, width = corpus.config.width;
  for (std::size_t idx : indices) {
    const Tensor& image = corpus.images.at(idx);
    const auto& mask = corpus.masks.at(idx);
    Graph graph(Mode::kInference);
    const Descriptor clean = model.describe(image, HeadMode::kDynamicWeighted, graph);
    const PartTemplates& tmpl = *clean.templates;
    const std::size_t h = tmpl.encoded.h, w = tmpl.encoded.w, n = tmpl.gamma.dim(1);
    const auto cells = cell_regions(mask, height, width, h, w);
    const auto soft = tmpl.gamma_softmax.data();
    for (std::size_t r = 0; r < kBodyRegions; ++r) {
      if (std::find(cells.begin(), cells.end(), static_cast<int>(r)) == cells.end()) continue;
      std::size_t best = 0;
      double best_mass = -1.0;
      for (std::size_t j = 0; j < n; ++j) {
        double mass = 0.0;
        for (std::size_t t = 0; t < h * w; ++t)
          if (cells[t] == static_cast<int>(r)) mass += soft[t * n + j];
        if (mass > best_mass) {
          best_mass = mass;
          best = j;
        }
      }
      std::vector<double> painted = image.to_vector();
      const std::size_t plane = height * width;
      for (std::size_t p = 0; p < plane; ++p) {
        if (mask[p] != r) continue;
        for (std::size_t c = 0; c < 3; ++c) painted[c * plane + p] = 0.5;
      }
      Graph g2(Mode::kInference);
      const Descriptor masked = model.describe(Tensor::from(image.shape(), std::move(painted)),
                                               HeadMode::kDynamicWeighted, g2);
      ++study.trials;
      if ((*masked.presence)[best] < (*clean.presence)[best]) ++study.decreases;
    }
  }
  return study;
}

std::vector<std::uint8_t> attention_map_pixels(std::span<const double> column, std::size_t h, std::size_t w,
                                               std::size_t out_h, std::size_t out_w) {
  if (column.size() != h * w) throw DimensionError("attention_map_pixels: column length differs from h*w");
  const auto [lo, hi] = std::minmax_element(column.begin(), column.end());
  const double range = *hi - *lo;
  std::vector<std::uint8_t> pixels(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const double v = column[(y * h / out_h) * w + (x * w / out_w)];
      pixels[y * out_w + x] =
          range > 0.0 ? static_cast<std::uint8_t>(std::lround(255.0 * (v - *lo) / range)) : std::uint8_t{128};
    }
  }
  return pixels;
}

std::vector<std::filesystem::path> export_attention_maps(const ReidModel& model, const Corpus& corpus,
                                                         std::span<const std::size_t> samples,
                                                         const std::filesystem::path& out_dir) {
  std::vector<std::filesystem::path> written;
  NoGradGuard no_grad;
  const std::size_t height = corpus.config.height, width = corpus.config.width;
  for (std::size_t idx : samples) {
    if (idx >= corpus.images.size()) {
      throw DataError("sample " + std::to_string(idx) + " does not exist (corpus has " +
                      std::to_string(corpus.images.size()) + ")");
    }
    Graph graph(Mode::kInference);
    const PartTemplates t = model.dpti().init_templates(model.backbone().extract(corpus.images[idx], graph).tap, graph);
    const std::size_t h = t.encoded.h, w = t.encoded.w, n = t.gamma.dim(1);
    const auto soft = t.gamma_softmax.data();
    char stem[64];
    std::snprintf(stem, sizeof(stem), "sample%05zu", idx);

    std::string csv = "template,y,x,value\n";
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<double> column(h * w);
      for (std::size_t p = 0; p < h * w; ++p) {
        column[p] = soft[p * n + j];
        char line[96];
        std::snprintf(line, sizeof(line), "%zu,%zu,%zu,%.17g\n", j, p / w, p % w, column[p]);
        csv += line;
      }
      const auto pixels = attention_map_pixels(column, h, w, height, width);
      const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
      std::vector<std::uint8_t> bytes(header.begin(), header.end());
      bytes.insert(bytes.end(), pixels.begin(), pixels.end());
      const auto path = out_dir / (std::string(stem) + "_t" + std::to_string(j) + ".pgm");
      write_file(path, bytes);
      written.push_back(path);
    }
    const auto csv_path = out_dir / (std::string(stem) + ".csv");
    write_file(csv_path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
    written.push_back(csv_path);
  }
  return written;
}

}  // namespace dpti
