#include "dpti/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "dpti/checkpoint.hpp"
#include "dpti/errors.hpp"

namespace dpti {

namespace {

constexpr double kBodyTop = 0.05;
constexpr double kBodyBottom = 0.95;
constexpr std::array<double, kBodyRegions + 1> kRegionFractions = {0.0, 0.18, 0.50, 0.82, 1.0};
constexpr std::array<std::array<double, 2>, kBodyRegions> kRegionSpans = {
    {{0.35, 0.65}, {0.20, 0.80}, {0.25, 0.75}, {0.22, 0.78}}};

constexpr double kDistinctColorGap = 0.2;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

bool regions_differ(const RegionAppearance& a, const RegionAppearance& b) {
  for (std::size_t c = 0; c < 3; ++c) {
    if (std::abs(a.color[c] - b.color[c]) > kDistinctColorGap) return true;
  }
  return false;
}

bool identities_distinct(const IdentitySpec& a, const IdentitySpec& b) {
  std::size_t differing = 0;
  bool upper = false;
  for (std::size_t r = 0; r < kBodyRegions; ++r) {
    if (regions_differ(a.regions[r], b.regions[r])) {
      ++differing;
      upper = upper || r < 2;
    }
  }
  return differing >= 2 && upper;
}

struct PixelRect {
  long y0, y1, x0, x1;
};

PixelRect to_pixels(const OcclusionSpec& o, std::size_t height, std::size_t width) {
  const auto h = static_cast<double>(height), w = static_cast<double>(width);
  return {std::lround(o.y0 * h), std::lround(o.y1 * h), std::lround(o.x0 * w), std::lround(o.x1 * w)};
}

bool overlaps(const RegionBox& box, const PixelRect& r) {
  return box.y0 < r.y1 && r.y0 < box.y1 && box.x0 < r.x1 && r.x0 < box.x1;
}

}  // namespace

void SampleRecipe::validate() const {
  if (identity.regions.size() != kBodyRegions) {
    throw DataError("recipe: identity must define " + std::to_string(kBodyRegions) + " regions");
  }
  for (const auto& r : identity.regions) {
    if (r.frequency < 1) throw DataError("recipe: texture frequency must be >= 1");
  }
  if (identity.noise_sigma < 0.0) throw DataError("recipe: noise_sigma must be nonnegative");
  if (occlusion) {
    const auto& o = *occlusion;
    const bool inside = o.x0 >= 0.0 && o.y0 >= 0.0 && o.x1 <= 1.0 && o.y1 <= 1.0 && o.x0 < o.x1 && o.y0 < o.y1;
    if (!inside) throw DataError("recipe: occlusion rectangle outside image bounds or empty");
    if (o.x0 == 0.0 && o.y0 == 0.0 && o.x1 == 1.0 && o.y1 == 1.0) {
      throw DataError("recipe: occlusion may not cover the whole image");
    }
  }
  if (partial_crop && (*partial_crop <= 0.3 || *partial_crop > 1.0)) {
    throw DataError("recipe: partial_crop must lie in (0.3, 1]");
  }
}

std::array<RegionBox, kBodyRegions> region_boxes(const ViewJitter& jitter, std::size_t height, std::size_t width) {
  const auto h = static_cast<double>(height), w = static_cast<double>(width);
  const double top = (kBodyTop + jitter.shift_y) * h;
  const double body_h = (kBodyBottom - kBodyTop) * h;
  std::array<RegionBox, kBodyRegions> boxes{};
  for (std::size_t r = 0; r < kBodyRegions; ++r) {
    boxes[r].y0 = std::lround(top + kRegionFractions[r] * body_h);
    boxes[r].y1 = std::lround(top + kRegionFractions[r + 1] * body_h);
    boxes[r].x0 = std::lround((kRegionSpans[r][0] + jitter.shift_x) * w);
    boxes[r].x1 = std::lround((kRegionSpans[r][1] + jitter.shift_x) * w);
  }
  return boxes;
}

RenderedSample render(const SampleRecipe& recipe, std::size_t height, std::size_t width, std::uint64_t seed) {
  recipe.validate();
  if (height < 8 || width < 8) throw DataError("render: image must be at least 8×8");
  Rng rng(seed);
  const std::size_t plane = height * width;
  std::vector<double> img(3 * plane);
  std::vector<std::uint8_t> labels(plane, mask::kBackground);

  // Background: per-channel base level with a slow diagonal wave.
  std::array<double, 3> bg_base{};
  for (auto& b : bg_base) b = rng.uniform(0.25, 0.6);
  const double bg_fx = rng.uniform(0.05, 0.3), bg_fy = rng.uniform(0.05, 0.3);
  const double bg_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double wave = 0.08 * std::sin(bg_fx * static_cast<double>(x) + bg_fy * static_cast<double>(y) + bg_phase);
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * width + x] = bg_base[c] + wave;
    }
  }

  const auto boxes = region_boxes(recipe.jitter, height, width);
  const auto& id = recipe.identity;
  for (std::size_t r = 0; r < kBodyRegions; ++r) {
    const RegionBox& box = boxes[r];
    const RegionAppearance& app = id.regions[r];
    const long n = app.pattern == Pattern::kAlongX ? box.x1 - box.x0 : box.y1 - box.y0;
    for (long y = std::max(0L, box.y0); y < std::min(static_cast<long>(height), box.y1); ++y) {
      for (long x = std::max(0L, box.x0); x < std::min(static_cast<long>(width), box.x1); ++x) {
        const long k = app.pattern == Pattern::kAlongX ? x - box.x0 : y - box.y0;
        const double t = 2.0 * std::numbers::pi * static_cast<double>(app.frequency) * static_cast<double>(k) /
                             static_cast<double>(n) +
                         app.phase;
        const double mod = 1.0 + id.texture_amplitude * std::sin(t);
        const auto pix = static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x);
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + pix] = app.color[c] * recipe.jitter.brightness * mod;
        labels[pix] = static_cast<std::uint8_t>(r);
      }
    }
  }

  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + i] += id.noise_sigma * rng.normal();
  }

  if (recipe.occlusion) {
    const PixelRect rect = to_pixels(*recipe.occlusion, height, width);
    Rng tex(recipe.occlusion->texture_seed);
    constexpr long kBlock = 4;
    const long bw = (rect.x1 - rect.x0 + kBlock - 1) / kBlock, bh = (rect.y1 - rect.y0 + kBlock - 1) / kBlock;
    std::vector<std::array<double, 3>> blocks(static_cast<std::size_t>(std::max(0L, bw * bh)));
    for (auto& b : blocks)
      for (auto& v : b) v = tex.uniform(0.05, 0.95);
    for (long y = rect.y0; y < rect.y1; ++y) {
      for (long x = rect.x0; x < rect.x1; ++x) {
        const auto& b = blocks[static_cast<std::size_t>(((y - rect.y0) / kBlock) * bw + (x - rect.x0) / kBlock)];
        const auto pix = static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x);
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + pix] = b[c];
        labels[pix] = mask::kOccluder;
      }
    }
  }

  if (recipe.partial_crop) {
    const auto keep = static_cast<std::size_t>(std::lround(*recipe.partial_crop * static_cast<double>(height)));
    for (std::size_t y = keep; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * width + x] = 0.0;
        labels[y * width + x] = mask::kVoid;
      }
    }
  }

  for (double& v : img) v = clamp01(v);
  return {Tensor::from({3, height, width}, std::move(img)), std::move(labels)};
}

std::vector<IdentitySpec> make_identities(std::size_t count, std::uint64_t seed, double noise_sigma) {
  Rng rng(mix_seed(seed, 0x1D));
  std::vector<IdentitySpec> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw DataError("make_identities: cannot find distinct appearances");
      IdentitySpec spec;
      spec.id = static_cast<int>(i);
      spec.noise_sigma = noise_sigma;
      for (std::size_t r = 0; r < kBodyRegions; ++r) {
        RegionAppearance app;
        for (auto& c : app.color) c = rng.uniform(0.15, 0.85);
        app.frequency = 1 + static_cast<int>(rng.below(3));
        app.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        app.pattern = rng.bernoulli(0.5) ? Pattern::kAlongX : Pattern::kAlongY;
        spec.regions.push_back(app);
      }
      const bool ok = std::all_of(out.begin(), out.end(),
                                  [&](const IdentitySpec& other) { return identities_distinct(spec, other); });
      if (ok) {
        out.push_back(std::move(spec));
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

Tensor flip_horizontal(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.size());
  const auto x = image.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t i = 0; i < w; ++i) out[(k * h + y) * w + i] = x[(k * h + y) * w + (w - 1 - i)];
  return Tensor::from(image.shape(), std::move(out));
}

Tensor erase(const Tensor& image, const EraseRect& rect, Rng& rng) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out = image.to_vector();
  const std::size_t y1 = std::min(h, rect.y0 + rect.h), x1 = std::min(w, rect.x0 + rect.w);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = rect.y0; y < y1; ++y)
      for (std::size_t x = rect.x0; x < x1; ++x) out[(k * h + y) * w + x] = rng.uniform();
  return Tensor::from(image.shape(), std::move(out));
}

EraseRect sample_erase_rect(std::size_t height, std::size_t width, Rng& rng, double* area_fraction) {
  const double area = rng.uniform(kEraseMinArea, kEraseMaxArea);
  const double log_ratio = rng.uniform(std::log(0.3), std::log(3.3));
  const double ratio = std::exp(log_ratio);
  const auto total = static_cast<double>(height * width);
  auto eh = static_cast<std::size_t>(std::lround(std::sqrt(area * total * ratio)));
  auto ew = static_cast<std::size_t>(std::lround(std::sqrt(area * total / ratio)));
  eh = std::clamp<std::size_t>(eh, 1, height);
  ew = std::clamp<std::size_t>(ew, 1, width);
  if (area_fraction) *area_fraction = area;
  EraseRect r;
  r.h = eh;
  r.w = ew;
  r.y0 = rng.below(height - eh + 1);
  r.x0 = rng.below(width - ew + 1);
  return r;
}

Tensor pad_crop(const Tensor& image, std::size_t pad, std::size_t off_y, std::size_t off_x) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (off_y > 2 * pad || off_x > 2 * pad) throw std::invalid_argument("pad_crop: offset beyond padded image");
  std::vector<double> out(image.size(), 0.0);
  const auto x = image.data();
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y + off_y) - static_cast<long>(pad);
      if (sy < 0 || sy >= static_cast<long>(h)) continue;
      for (std::size_t i = 0; i < w; ++i) {
        const long sx = static_cast<long>(i + off_x) - static_cast<long>(pad);
        if (sx < 0 || sx >= static_cast<long>(w)) continue;
        out[(k * h + y) * w + i] = x[(k * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
    }
  }
  return Tensor::from(image.shape(), std::move(out));
}

Tensor augment(const Tensor& image, const AugmentFlags& flags, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out = image;
  if (flags.pad && flags.crop) {
    const std::size_t oy = rng.below(2 * kAugmentPad + 1);
    const std::size_t ox = rng.below(2 * kAugmentPad + 1);
    out = pad_crop(out, kAugmentPad, oy, ox);
  }
  if (flags.flip) out = flip_horizontal(out);
  if (flags.erase) out = erase(out, sample_erase_rect(out.dim(1), out.dim(2), rng), rng);
  return out;
}

// ---------------------------------------------------------------------------
// Splits

std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::kHolistic:
      return "holistic";
    case Protocol::kOccluded:
      return "occluded";
    case Protocol::kPartial:
      return "partial";
  }
  return "?";
}

Protocol parse_protocol(const std::string& text) {
  if (text == "holistic") return Protocol::kHolistic;
  if (text == "occluded") return Protocol::kOccluded;
  if (text == "partial") return Protocol::kPartial;
  throw ConfigError("unknown protocol '" + text + "' (expected holistic, occluded or partial)");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kQuery:
      return "query";
    case Split::kGallery:
      return "gallery";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "query") return Split::kQuery;
  if (text == "gallery") return Split::kGallery;
  throw DataError("unknown split '" + text + "'");
}

namespace {

OcclusionSpec sample_occlusion(const ViewJitter& jitter, const CorpusConfig& config, Rng& rng) {
  const auto boxes = region_boxes(jitter, config.height, config.width);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double area = rng.uniform(0.2, 0.4);
    const double w = rng.uniform(0.5, 1.0);
    const double h = std::min(0.7, area / w);
    OcclusionSpec o;
    o.x0 = rng.uniform(0.0, 1.0 - w);
    o.y0 = rng.uniform(0.1, 1.0 - h);
    o.x1 = o.x0 + w;
    o.y1 = o.y0 + h;
    o.texture_seed = rng.next_u64();
    const PixelRect rect = to_pixels(o, config.height, config.width);
    const bool one_visible = std::any_of(boxes.begin(), boxes.end(), [&](const RegionBox& b) { return !overlaps(b, rect); });
    if (one_visible) return o;
  }
  throw DataError("sample_occlusion: no occluder leaves a region visible");
}

}  // namespace

CorpusSplits make_splits(const CorpusConfig& config) {
  if (config.n_ids < 2) throw DataError("make_splits: need at least 2 identities");
  const std::size_t q = std::max<std::size_t>(1, config.per_id / 6);
  const std::size_t g = q;
  if (config.per_id < q + g + 2) {
    throw DataError("make_splits: " + std::to_string(config.per_id) +
                    " instances per identity is insufficient (need >= 4: query, gallery and two train)");
  }
  CorpusSplits out;
  out.identities = make_identities(config.n_ids, config.seed, config.noise_sigma);
  out.records.reserve(config.n_ids * config.per_id);
  for (std::size_t id = 0; id < config.n_ids; ++id) {
    std::vector<std::size_t> order(config.per_id);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    Rng assign(mix_seed(config.seed, id, 0x5));
    assign.shuffle(std::span<std::size_t>(order));
    std::vector<Split> split_of(config.per_id, Split::kTrain);
    for (std::size_t k = 0; k < q; ++k) split_of[order[k]] = Split::kQuery;
    for (std::size_t k = q; k < q + g; ++k) split_of[order[k]] = Split::kGallery;

    for (std::size_t k = 0; k < config.per_id; ++k) {
      SampleRecord rec;
      rec.index = id * config.per_id + k;
      rec.identity = static_cast<int>(id);
      rec.split = split_of[k];
      rec.seed = mix_seed(config.seed, rec.index);
      rec.recipe.identity = out.identities[id];
      Rng view(mix_seed(config.seed, rec.index, 0x7));
      rec.recipe.jitter.brightness = view.uniform(config.min_brightness, config.max_brightness);
      rec.recipe.jitter.shift_x = view.uniform(-config.max_shift_x, config.max_shift_x);
      rec.recipe.jitter.shift_y = view.uniform(-config.max_shift_y, config.max_shift_y);
      if (rec.split == Split::kQuery) {
        Rng degrade(mix_seed(config.seed, rec.index, 0x9));
        if (config.protocol == Protocol::kOccluded) {
          rec.recipe.occlusion = sample_occlusion(rec.recipe.jitter, config, degrade);
        } else if (config.protocol == Protocol::kPartial) {
          rec.recipe.partial_crop = degrade.uniform(0.45, 0.8);
        }
      }
      switch (rec.split) {
        case Split::kTrain:
          out.train.push_back(rec.index);
          break;
        case Split::kQuery:
          out.query.push_back(rec.index);
          break;
        case Split::kGallery:
          out.gallery.push_back(rec.index);
          break;
      }
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

CorpusSplits make_splits(std::size_t n_ids, std::size_t per_id, Protocol protocol, std::uint64_t seed) {
  CorpusConfig c;
  c.n_ids = n_ids;
  c.per_id = per_id;
  c.protocol = protocol;
  c.seed = seed;
  return make_splits(c);
}

Corpus generate_corpus(const CorpusConfig& config) {
  Corpus corpus;
  corpus.config = config;
  corpus.splits = make_splits(config);
  corpus.images.reserve(corpus.splits.records.size());
  corpus.masks.reserve(corpus.splits.records.size());
  for (const auto& rec : corpus.splits.records) {
    auto sample = render(rec.recipe, config.height, config.width, rec.seed);
    corpus.images.push_back(std::move(sample.image));
    corpus.masks.push_back(std::move(sample.mask));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const SampleRecipe& recipe) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : recipe.identity.regions) {
    regions.push_back({{"color", r.color},
                       {"frequency", r.frequency},
                       {"phase", r.phase},
                       {"pattern", r.pattern == Pattern::kAlongX ? "x" : "y"}});
  }
  nlohmann::json j = {
      {"identity",
       {{"id", recipe.identity.id},
        {"regions", regions},
        {"noise_sigma", recipe.identity.noise_sigma},
        {"texture_amplitude", recipe.identity.texture_amplitude}}},
      {"jitter",
       {{"brightness", recipe.jitter.brightness}, {"shift_x", recipe.jitter.shift_x}, {"shift_y", recipe.jitter.shift_y}}},
      {"occlusion", nullptr},
      {"partial_crop", nullptr}};
  if (recipe.occlusion) {
    const auto& o = *recipe.occlusion;
    j["occlusion"] = {{"x0", o.x0}, {"y0", o.y0}, {"x1", o.x1}, {"y1", o.y1}, {"texture_seed", o.texture_seed}};
  }
  if (recipe.partial_crop) j["partial_crop"] = *recipe.partial_crop;
  return j;
}

SampleRecipe recipe_from_json(const nlohmann::json& j) {
  SampleRecipe r;
  const auto& id = j.at("identity");
  r.identity.id = id.at("id").get<int>();
  r.identity.noise_sigma = id.at("noise_sigma").get<double>();
  r.identity.texture_amplitude = id.at("texture_amplitude").get<double>();
  for (const auto& reg : id.at("regions")) {
    RegionAppearance a;
    a.color = reg.at("color").get<std::array<double, 3>>();
    a.frequency = reg.at("frequency").get<int>();
    a.phase = reg.at("phase").get<double>();
    a.pattern = reg.at("pattern").get<std::string>() == "x" ? Pattern::kAlongX : Pattern::kAlongY;
    r.identity.regions.push_back(a);
  }
  const auto& jit = j.at("jitter");
  r.jitter.brightness = jit.at("brightness").get<double>();
  r.jitter.shift_x = jit.at("shift_x").get<double>();
  r.jitter.shift_y = jit.at("shift_y").get<double>();
  if (!j.at("occlusion").is_null()) {
    const auto& o = j.at("occlusion");
    r.occlusion = OcclusionSpec{o.at("x0").get<double>(), o.at("y0").get<double>(), o.at("x1").get<double>(),
                                o.at("y1").get<double>(), o.at("texture_seed").get<std::uint64_t>()};
  }
  if (!j.at("partial_crop").is_null()) r.partial_crop = j.at("partial_crop").get<double>();
  return r;
}

nlohmann::json to_json(const CorpusConfig& c) {
  return {{"n_ids", c.n_ids},
          {"per_id", c.per_id},
          {"protocol", protocol_name(c.protocol)},
          {"seed", c.seed},
          {"height", c.height},
          {"width", c.width},
          {"noise_sigma", c.noise_sigma},
          {"max_shift_x", c.max_shift_x},
          {"max_shift_y", c.max_shift_y},
          {"min_brightness", c.min_brightness},
          {"max_brightness", c.max_brightness}};
}

CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.n_ids = j.at("n_ids").get<std::size_t>();
  c.per_id = j.at("per_id").get<std::size_t>();
  c.protocol = parse_protocol(j.at("protocol").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.max_shift_x = j.at("max_shift_x").get<double>();
  c.max_shift_y = j.at("max_shift_y").get<double>();
  c.min_brightness = j.at("min_brightness").get<double>();
  c.max_brightness = j.at("max_brightness").get<double>();
  return c;
}

namespace {

std::string sample_file(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu.bin", index);
  return buf;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  try {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
  } catch (const fs::filesystem_error& e) {
    throw DataError("cannot create corpus directory " + dir.string() + ": " + e.what());
  }
  nlohmann::json meta = to_json(corpus.config);
  meta["n_samples"] = corpus.splits.records.size();
  const std::string meta_text = meta.dump(2) + "\n";
  write_file(dir / "corpus.json", std::span(reinterpret_cast<const std::uint8_t*>(meta_text.data()), meta_text.size()));

  std::string manifest;
  for (const auto& rec : corpus.splits.records) {
    const std::string name = sample_file(rec.index);
    nlohmann::json j = {{"index", rec.index},
                        {"id", rec.identity},
                        {"split", split_name(rec.split)},
                        {"seed", rec.seed},
                        {"image", "images/" + name},
                        {"mask", "masks/" + name},
                        {"recipe", to_json(rec.recipe)}};
    manifest += j.dump() + "\n";
    std::vector<std::uint8_t> bytes;
    append_f64_le(bytes, corpus.images[rec.index].data());
    write_file(dir / "images" / name, bytes);
    write_file(dir / "masks" / name, corpus.masks[rec.index]);
  }
  write_file(dir / "manifest.jsonl", std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
}

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  try {
    const auto meta_bytes = read_file(dir / "corpus.json");
    corpus.config = corpus_config_from_json(nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end()));
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw DataError("missing manifest.jsonl in " + dir.string());
    std::map<int, IdentitySpec> identities;
    std::string line;
    const std::size_t h = corpus.config.height, w = corpus.config.width;
    while (std::getline(manifest, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      SampleRecord rec;
      rec.index = j.at("index").get<std::size_t>();
      rec.identity = j.at("id").get<int>();
      rec.split = parse_split(j.at("split").get<std::string>());
      rec.seed = j.at("seed").get<std::uint64_t>();
      rec.recipe = recipe_from_json(j.at("recipe"));
      if (rec.index != corpus.splits.records.size()) throw DataError("manifest records out of order");
      identities.emplace(rec.identity, rec.recipe.identity);
      auto image = decode_f64_le(read_file(dir / j.at("image").get<std::string>()));
      if (image.size() != 3 * h * w) throw DataError("image " + j.at("image").get<std::string>() + " has wrong size");
      corpus.images.push_back(Tensor::from({3, h, w}, std::move(image)));
      corpus.masks.push_back(read_file(dir / j.at("mask").get<std::string>()));
      switch (rec.split) {
        case Split::kTrain:
          corpus.splits.train.push_back(rec.index);
          break;
        case Split::kQuery:
          corpus.splits.query.push_back(rec.index);
          break;
        case Split::kGallery:
          corpus.splits.gallery.push_back(rec.index);
          break;
      }
      corpus.splits.records.push_back(std::move(rec));
    }
    for (auto& [id, spec] : identities) corpus.splits.identities.push_back(spec);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed corpus metadata in " + dir.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw DataError(e.what());
  } catch (const std::runtime_error& e) {
    if (dynamic_cast<const DataError*>(&e)) throw;
    throw DataError(std::string("reading corpus ") + dir.string() + ": " + e.what());
  }
  return corpus;
}

}  // namespace dpti
