#pragma once

// Deterministic synthetic pedestrian-like corpus.
//
// A person is a stack of K = 4 vertical body regions (head, torso, legs,
// feet), each with a base colour and a zero-mean sinusoidal stripe texture,
// on a cluttered background. Occluded samples receive a textured rectangle;
// partial samples keep a top-anchored fraction of rows and void the rest.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpti/rng.hpp"
#include "dpti/tensor.hpp"

namespace dpti {

inline constexpr std::size_t kBodyRegions = 4;

namespace mask {
inline constexpr std::uint8_t kBackground = 250;
inline constexpr std::uint8_t kOccluder = 251;
inline constexpr std::uint8_t kVoid = 252;
}  // namespace mask

enum class Pattern : std::uint8_t { kAlongX = 0, kAlongY = 1 };

struct RegionAppearance {
  std::array<double, 3> color{};
  int frequency = 1;  // whole periods across the region
  double phase = 0.0;
  Pattern pattern = Pattern::kAlongX;
};

struct IdentitySpec {
  int id = 0;
  std::vector<RegionAppearance> regions;
  double noise_sigma = 0.03;
  double texture_amplitude = 0.15;
};

struct ViewJitter {
  double brightness = 1.0;
  double shift_x = 0.0;  // fraction of image width
  double shift_y = 0.0;  // fraction of image height
};

/// Rectangle in normalized [0, 1] image coordinates.
struct OcclusionSpec {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  std::uint64_t texture_seed = 0;
};

struct SampleRecipe {
  IdentitySpec identity;
  ViewJitter jitter;
  std::optional<OcclusionSpec> occlusion;
  /// Retained top fraction of rows, in (0.3, 1].
  std::optional<double> partial_crop;

  void validate() const;
};

struct RenderedSample {
  Tensor image;                     // 3 × H × W, values in [0, 1]
  std::vector<std::uint8_t> mask;   // H × W region index or mask::k*
};

RenderedSample render(const SampleRecipe& recipe, std::size_t height, std::size_t width, std::uint64_t seed);

/// Pixel bounds [y0, y1) × [x0, x1) of each body region before clipping.
struct RegionBox {
  long y0 = 0, y1 = 0, x0 = 0, x1 = 0;
};
std::array<RegionBox, kBodyRegions> region_boxes(const ViewJitter& jitter, std::size_t height, std::size_t width);

/// Identities with pairwise-distinct appearance: any two differ by more than
/// 0.2 (per-channel) in at least two regions, one of them in the upper body.
std::vector<IdentitySpec> make_identities(std::size_t count, std::uint64_t seed, double noise_sigma = 0.03);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentFlags {
  bool flip = false;
  bool erase = false;
  bool pad = false;
  bool crop = false;
};

struct EraseRect {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
};

inline constexpr double kEraseMinArea = 0.02;
inline constexpr double kEraseMaxArea = 0.2;
inline constexpr std::size_t kAugmentPad = 4;

Tensor flip_horizontal(const Tensor& image);
/// Overwrites the rectangle with uniform noise; a zero-area rectangle is a no-op.
Tensor erase(const Tensor& image, const EraseRect& rect, Rng& rng);
/// Area fraction ~ U[0.02, 0.2], aspect ratio log-uniform in [0.3, 3.3].
EraseRect sample_erase_rect(std::size_t height, std::size_t width, Rng& rng, double* area_fraction = nullptr);
/// Zero-pad by `pad`, then take the original-size window at (off_y, off_x).
Tensor pad_crop(const Tensor& image, std::size_t pad, std::size_t off_y, std::size_t off_x);

/// flip mirrors the width axis; erase overwrites a random rectangle with
/// noise; pad+crop zero-pads by kAugmentPad and crops a random window of the
/// original size (pad alone takes the centre window, i.e. the identity).
Tensor augment(const Tensor& image, const AugmentFlags& flags, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Splits and corpus

enum class Protocol { kHolistic, kOccluded, kPartial };
enum class Split { kTrain, kQuery, kGallery };

std::string protocol_name(Protocol p);
Protocol parse_protocol(const std::string& text);
std::string split_name(Split s);
Split parse_split(const std::string& text);

struct CorpusConfig {
  std::size_t n_ids = 32;
  std::size_t per_id = 12;
  Protocol protocol = Protocol::kHolistic;
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 32;
  double noise_sigma = 0.03;
  double max_shift_x = 0.06;
  double max_shift_y = 0.06;
  double min_brightness = 0.85;
  double max_brightness = 1.15;
};

struct SampleRecord {
  std::size_t index = 0;
  int identity = 0;
  Split split = Split::kTrain;
  std::uint64_t seed = 0;
  SampleRecipe recipe;
};

struct CorpusSplits {
  std::vector<IdentitySpec> identities;
  std::vector<SampleRecord> records;  // ordered by index
  std::vector<std::size_t> train, query, gallery;
};

/// Per identity: max(1, per_id/6) query and gallery instances, the rest
/// train. The split assignment and view jitter do not depend on the
/// protocol; only query recipes gain occluders or partial crops.
CorpusSplits make_splits(const CorpusConfig& config);
CorpusSplits make_splits(std::size_t n_ids, std::size_t per_id, Protocol protocol, std::uint64_t seed);

struct Corpus {
  CorpusConfig config;
  CorpusSplits splits;
  std::vector<Tensor> images;
  std::vector<std::vector<std::uint8_t>> masks;
};

Corpus generate_corpus(const CorpusConfig& config);

nlohmann::json to_json(const SampleRecipe& recipe);
SampleRecipe recipe_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CorpusConfig& config);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

/// Writes corpus.json, manifest.jsonl, images/NNNNN.bin (f64 LE), masks/NNNNN.bin (u8).
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace dpti
