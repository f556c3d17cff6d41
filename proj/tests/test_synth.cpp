#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "dpti/errors.hpp"
#include "dpti/synth.hpp"

using namespace dpti;

namespace {

SampleRecipe plain_recipe(std::uint64_t seed, double noise = 0.03) {
  SampleRecipe r;
  r.identity = make_identities(1, seed, noise).front();
  return r;
}

double mean_sq_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

std::size_t clipped_area(const RegionBox& b, std::size_t h, std::size_t w) {
  const long y0 = std::max(0L, b.y0), y1 = std::min(static_cast<long>(h), b.y1);
  const long x0 = std::max(0L, b.x0), x1 = std::min(static_cast<long>(w), b.x1);
  return y1 > y0 && x1 > x0 ? static_cast<std::size_t>((y1 - y0) * (x1 - x0)) : 0;
}

}  // namespace

TEST_CASE("render is deterministic per seed") {
  const auto r = plain_recipe(1, 0.0);
  const auto a = render(r, 64, 32, 5), b = render(r, 64, 32, 5);
  CHECK(a.image.to_vector() == b.image.to_vector());
  CHECK(a.mask == b.mask);
  const auto noisy = plain_recipe(1);
  CHECK(render(noisy, 64, 32, 5).image.to_vector() == render(noisy, 64, 32, 5).image.to_vector());
  CHECK(render(noisy, 64, 32, 5).image.to_vector() != render(noisy, 64, 32, 6).image.to_vector());
  for (double v : a.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("partial crop 0.5 voids the bottom half") {
  auto r = plain_recipe(2);
  r.partial_crop = 0.5;
  const auto s = render(r, 64, 32, 1);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 32; ++x) CHECK((s.mask[y * 32 + x] == mask::kVoid) == (y >= 32));
}

TEST_CASE("region means match the recipe colours within 3 sigma") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = plain_recipe(seed);
    const auto s = render(r, 64, 32, seed + 100);
    for (std::size_t reg = 0; reg < kBodyRegions; ++reg) {
      std::array<double, 3> mean{};
      std::size_t n = 0;
      for (std::size_t p = 0; p < 64 * 32; ++p) {
        if (s.mask[p] != reg) continue;
        ++n;
        for (std::size_t c = 0; c < 3; ++c) mean[c] += s.image[c * 64 * 32 + p];
      }
      REQUIRE(n > 0);
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(std::abs(mean[c] / static_cast<double>(n) - r.identity.regions[reg].color[c]) <=
              3 * r.identity.noise_sigma);
    }
  }
}

TEST_CASE("recipe validation") {
  auto r = plain_recipe(3);
  r.partial_crop = 0.3;
  CHECK_THROWS_AS(render(r, 64, 32, 0), DataError);
  r.partial_crop.reset();
  r.occlusion = OcclusionSpec{0.5, 0.5, 1.2, 0.9, 1};
  CHECK_THROWS_AS(render(r, 64, 32, 0), DataError);
  r.occlusion = OcclusionSpec{0.0, 0.0, 1.0, 1.0, 1};
  CHECK_THROWS_AS(render(r, 64, 32, 0), DataError);
  r.occlusion.reset();
  r.identity.regions.pop_back();
  CHECK_THROWS_AS(render(r, 64, 32, 0), DataError);
}

TEST_CASE("identities are pairwise distinct") {
  const auto ids = make_identities(32, 7);
  for (std::size_t a = 0; a < ids.size(); ++a)
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      std::size_t differing = 0;
      for (std::size_t r = 0; r < kBodyRegions; ++r) {
        double gap = 0.0;
        for (std::size_t c = 0; c < 3; ++c)
          gap = std::max(gap, std::abs(ids[a].regions[r].color[c] - ids[b].regions[r].color[c]));
        if (gap > ids[a].noise_sigma) ++differing;
      }
      CHECK(differing >= 1);
    }
}

TEST_CASE("augmentation examples") {
  Rng rng(4);
  const Tensor img = render(plain_recipe(4), 64, 32, 1).image;
  CHECK(flip_horizontal(flip_horizontal(img)).to_vector() == img.to_vector());
  CHECK(flip_horizontal(img).to_vector() != img.to_vector());
  CHECK(erase(img, EraseRect{3, 3, 0, 0}, rng).to_vector() == img.to_vector());
  CHECK(pad_crop(img, kAugmentPad, kAugmentPad, kAugmentPad).to_vector() == img.to_vector());
  const Tensor shifted = pad_crop(img, 4, 0, 0);
  CHECK(shifted.shape() == img.shape());
  CHECK(shifted[0] == 0.0);
  CHECK(augment(img, {}, 9).to_vector() == img.to_vector());
  const AugmentFlags all{true, true, true, true};
  CHECK(augment(img, all, 9).to_vector() == augment(img, all, 9).to_vector());
  CHECK(augment(img, all, 9).shape() == img.shape());
  CHECK(augment(img, {.pad = true}, 9).to_vector() == img.to_vector());
}

TEST_CASE("erase area fraction is sampled in [0.02, 0.2]") {
  Rng rng(5);
  double sum = 0.0, realised = 0.0;
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    double area = 0.0;
    const EraseRect r = sample_erase_rect(64, 32, rng, &area);
    CHECK(area >= kEraseMinArea);
    CHECK(area <= kEraseMaxArea);
    CHECK(r.y0 + r.h <= 64);
    CHECK(r.x0 + r.w <= 32);
    sum += area;
    realised += static_cast<double>(r.h * r.w) / (64.0 * 32.0);
  }
  CHECK(sum / kDraws == doctest::Approx(0.11).epsilon(0.02));
  CHECK(realised / kDraws > kEraseMinArea);
  CHECK(realised / kDraws < kEraseMaxArea);
}

TEST_CASE("split counts and protocol contracts") {
  const auto s = make_splits(10, 6, Protocol::kHolistic, 1);
  CHECK(s.train.size() == 40);
  CHECK(s.query.size() == 10);
  CHECK(s.gallery.size() == 10);
  for (int id = 0; id < 10; ++id) {
    std::array<int, 3> count{};
    for (const auto& r : s.records)
      if (r.identity == id) ++count[static_cast<std::size_t>(r.split)];
    CHECK(count == std::array<int, 3>{4, 1, 1});
  }

  const auto partial = make_splits(10, 12, Protocol::kPartial, 2);
  const auto occluded = make_splits(10, 12, Protocol::kOccluded, 2);
  const auto holistic = make_splits(10, 12, Protocol::kHolistic, 2);
  for (std::size_t i = 0; i < partial.records.size(); ++i) {
    const auto& p = partial.records[i];
    const bool query = p.split == Split::kQuery;
    CHECK(p.recipe.partial_crop.has_value() == query);
    if (query) CHECK(*p.recipe.partial_crop < 1.0);
    CHECK(occluded.records[i].recipe.occlusion.has_value() == query);
    CHECK_FALSE(p.recipe.occlusion.has_value());
    CHECK(occluded.records[i].split == p.split);
    CHECK(holistic.records[i].split == p.split);
    CHECK(holistic.records[i].recipe.jitter.shift_x == p.recipe.jitter.shift_x);
  }

  std::set<int> qids, gids;
  std::set<std::size_t> qidx(partial.query.begin(), partial.query.end());
  for (std::size_t i : partial.query) qids.insert(partial.records[i].identity);
  for (std::size_t i : partial.gallery) {
    gids.insert(partial.records[i].identity);
    CHECK(qidx.count(i) == 0);
  }
  CHECK(qids == gids);

  CHECK_THROWS_AS(make_splits(10, 3, Protocol::kHolistic, 1), DataError);
  CHECK_THROWS_AS(make_splits(1, 12, Protocol::kHolistic, 1), DataError);
}

TEST_CASE("occluders never hide every region") {
  CorpusConfig c;
  c.n_ids = 16;
  c.per_id = 12;
  c.protocol = Protocol::kOccluded;
  c.seed = 9;
  const Corpus corpus = generate_corpus(c);
  std::size_t occluded = 0;
  for (std::size_t i : corpus.splits.query) {
    const auto& rec = corpus.splits.records[i];
    REQUIRE(rec.recipe.occlusion.has_value());
    ++occluded;
    const auto boxes = region_boxes(rec.recipe.jitter, c.height, c.width);
    const auto& m = corpus.masks[i];
    std::size_t occluder_pixels = 0;
    for (auto v : m) occluder_pixels += v == mask::kOccluder;
    CHECK(occluder_pixels > 0);
    CHECK(occluder_pixels < m.size());
    bool one_full = false;
    for (std::size_t r = 0; r < kBodyRegions; ++r) {
      const auto n = static_cast<std::size_t>(std::count(m.begin(), m.end(), static_cast<std::uint8_t>(r)));
      one_full = one_full || (n > 0 && n == clipped_area(boxes[r], c.height, c.width));
    }
    CHECK(one_full);
  }
  CHECK(occluded == 32);
}

TEST_CASE("inter-identity distance exceeds intra-identity distance") {
  CorpusConfig c;
  c.n_ids = 8;
  c.per_id = 6;
  c.seed = 3;
  const Corpus corpus = generate_corpus(c);
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t a = 0; a < corpus.images.size(); ++a)
    for (std::size_t b = a + 1; b < corpus.images.size(); ++b) {
      const double d = mean_sq_diff(corpus.images[a], corpus.images[b]);
      if (corpus.splits.records[a].identity == corpus.splits.records[b].identity) {
        intra += d;
        ++n_intra;
      } else {
        inter += d;
        ++n_inter;
      }
    }
  CHECK(inter / static_cast<double>(n_inter) > intra / static_cast<double>(n_intra));
}

TEST_CASE("corpus export round-trips bit-exactly") {
  CorpusConfig c;
  c.n_ids = 4;
  c.per_id = 6;
  c.protocol = Protocol::kOccluded;
  c.seed = 11;
  const Corpus corpus = generate_corpus(c);
  const auto dir = std::filesystem::temp_directory_path() / "dpti_test_corpus";
  std::filesystem::remove_all(dir);
  write_corpus(corpus, dir);
  const Corpus back = read_corpus(dir);
  REQUIRE(back.images.size() == corpus.images.size());
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    CHECK(back.images[i].to_vector() == corpus.images[i].to_vector());
    CHECK(back.masks[i] == corpus.masks[i]);
    CHECK(to_json(back.splits.records[i].recipe) == to_json(corpus.splits.records[i].recipe));
    CHECK(back.splits.records[i].split == corpus.splits.records[i].split);
  }
  CHECK(back.splits.query == corpus.splits.query);
  CHECK(to_json(back.config) == to_json(corpus.config));
  // A recipe re-rendered from the manifest reproduces the stored image.
  const auto& rec = back.splits.records[corpus.splits.query.front()];
  CHECK(render(rec.recipe, c.height, c.width, rec.seed).image.to_vector() ==
        corpus.images[corpus.splits.query.front()].to_vector());
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_corpus(dir), DataError);
}

TEST_CASE("protocol and split names round-trip") {
  for (Protocol p : {Protocol::kHolistic, Protocol::kOccluded, Protocol::kPartial})
    CHECK(parse_protocol(protocol_name(p)) == p);
  for (Split s : {Split::kTrain, Split::kQuery, Split::kGallery}) CHECK(parse_split(split_name(s)) == s);
  CHECK_THROWS_AS(parse_protocol("foggy"), ConfigError);
}
