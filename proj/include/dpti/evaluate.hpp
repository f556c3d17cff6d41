#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dpti/model.hpp"
#include "dpti/retrieval.hpp"
#include "dpti/synth.hpp"

namespace dpti {

/// Worker count from DPTI_THREADS (default 1, minimum 1).
std::size_t thread_budget();

/// Inference-mode descriptors (dropout off, no graph recording) for the
/// given corpus samples. Results do not depend on `threads`.
std::vector<Descriptor> describe_samples(const ReidModel& model, std::span<const Tensor> images, HeadMode mode,
                                         const HeadOptions& options = {}, std::size_t threads = 1);

DescriptorSet descriptor_set(const ReidModel& model, const Corpus& corpus, std::span<const std::size_t> indices,
                             HeadMode mode, const HeadOptions& options = {}, std::size_t threads = 1);

/// Query split against gallery split.
RetrievalReport evaluate(const ReidModel& model, const Corpus& corpus, HeadMode mode, const HeadOptions& options = {},
                         std::size_t threads = 1);
RetrievalReport evaluate(const ReidModel& model, const Corpus& corpus, std::span<const std::size_t> queries,
                         std::span<const std::size_t> gallery, HeadMode mode, const HeadOptions& options = {},
                         std::size_t threads = 1);

/// descriptors.bin (row-major f64 LE) plus descriptors.json with length,
/// mode, N, d, count and labels.
void export_descriptors(const DescriptorSet& set, HeadMode mode, std::size_t parts, std::size_t dim,
                        const std::filesystem::path& dir);

/// Mean over samples of the mean pairwise squared cosine between part vectors.
double mean_part_cosine_sq(const ReidModel& model, const Corpus& corpus, std::span<const std::size_t> indices,
                           HeadMode mode);

struct OcclusionStudy {
  std::size_t trials = 0;
  std::size_t decreases = 0;
  double rate() const { return trials ? static_cast<double>(decreases) / static_cast<double>(trials) : 0.0; }
};

/// For each sample and body region: find the template whose softmax(γ)
/// mass inside that region is largest, paint the region flat gray, and
/// count whether that template's presence weight ρ drops.
OcclusionStudy occlusion_monotonicity(const ReidModel& model, const Corpus& corpus,
                                      std::span<const std::size_t> indices);

/// Writes, per sample, N binary PGM maps (softmax(γ) columns on the tap grid,
/// min-max normalized, nearest-neighbour upsampled to the input size; a
/// constant column becomes uniform gray 128) and one CSV of raw values
/// (template, y, x, value). Returns the written paths.
std::vector<std::filesystem::path> export_attention_maps(const ReidModel& model, const Corpus& corpus,
                                                         std::span<const std::size_t> samples,
                                                         const std::filesystem::path& out_dir);

/// 8-bit grayscale for one softmax(γ) column (h_l·w_l values), upsampled to
/// out_h × out_w.
std::vector<std::uint8_t> attention_map_pixels(std::span<const double> column, std::size_t h, std::size_t w,
                                               std::size_t out_h, std::size_t out_w);

}  // namespace dpti
