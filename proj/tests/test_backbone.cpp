#include <stdexcept>

#include "doctest.h"
#include "dpti/backbone.hpp"
#include "oracles.hpp"

using namespace dpti;

namespace {

// Independent spatial arithmetic: floor((n + 2p - k) / s) + 1 per conv.
std::size_t shrink(std::size_t n, std::size_t k, std::size_t s) { return (n + 2 * (k / 2) - k) / s + 1; }

BackboneConfig small_config() {
  BackboneConfig c;
  c.stages = {{4, 1, 2}, {6, 2, 2}, {8, 1, 1}};
  c.input_h = 16;
  c.input_w = 8;
  c.tap_stage = 2;
  return c;
}

}  // namespace

TEST_CASE("desk config: tap 64x8x4 and final 128x8x4") {
  const auto c = BackboneConfig::desk();
  CHECK(tap_shape(c) == MapShape{64, 8, 4});
  CHECK(final_shape(c) == MapShape{128, 8, 4});
  const auto shapes = stage_shapes(c);
  REQUIRE(shapes.size() == 4);
  CHECK(shapes[0] == MapShape{16, 32, 16});
  CHECK(shapes[1] == MapShape{32, 16, 8});
  CHECK(c.final_stage_stride == 1);

  ParameterStore store;
  Rng rng(3);
  Backbone net(c, store, rng);
  Graph g;
  const auto pyr = net.extract(oracle::random_tensor(rng, {3, 64, 32}, 0.0, 1.0), g);
  CHECK(pyr.tap.shape() == Shape{64, 8, 4});
  CHECK(pyr.final.shape() == Shape{128, 8, 4});
}

TEST_CASE("full-scale config: tap and final spatial 16x8") {
  const auto c = BackboneConfig::full_scale();
  CHECK(tap_shape(c).h == 16);
  CHECK(tap_shape(c).w == 8);
  CHECK(final_shape(c).h == 16);
  CHECK(final_shape(c).w == 8);
}

TEST_CASE("stage shapes follow the floor formula for random configs") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    BackboneConfig c;
    const std::size_t n_stages = 2 + rng.below(3);
    c.kernel = 1 + 2 * rng.below(3);
    c.input_h = 8 + rng.below(60);
    c.input_w = 8 + rng.below(30);
    c.final_stage_stride = 1 + rng.below(2);
    c.tap_stage = 1 + rng.below(n_stages - 1);
    for (std::size_t s = 0; s < n_stages; ++s) c.stages.push_back({1 + rng.below(8), 1 + rng.below(2), 1 + rng.below(2)});
    std::size_t h = c.input_h, w = c.input_w;
    const auto shapes = stage_shapes(c);
    for (std::size_t s = 0; s < n_stages; ++s) {
      const std::size_t stride = s + 1 == n_stages ? c.final_stage_stride : c.stages[s].stride;
      for (std::size_t b = 0; b < c.stages[s].blocks; ++b) {
        h = shrink(h, c.kernel, b == 0 ? stride : 1);
        w = shrink(w, c.kernel, b == 0 ? stride : 1);
      }
      CHECK(shapes[s] == MapShape{c.stages[s].channels, h, w});
    }
  }
}

TEST_CASE("final stride 2 halves the final map relative to stride 1") {
  auto c = BackboneConfig::desk();
  const auto one = final_shape(c);
  c.final_stage_stride = 2;
  const auto two = final_shape(c);
  CHECK(two.h * 2 == one.h);
  CHECK(two.w * 2 == one.w);
  CHECK(two.channels == one.channels);
}

TEST_CASE("parameter count: single 1x1 conv and per-layer oracle") {
  CHECK(conv_param_count(3, 4, 1) == 16);
  for (const auto& c : {BackboneConfig::desk(), small_config()}) {
    std::size_t expected = 0, in = c.input_channels;
    for (const auto& stage : c.stages)
      for (std::size_t b = 0; b < stage.blocks; ++b) {
        expected += in * stage.channels * c.kernel * c.kernel + stage.channels;
        in = stage.channels;
      }
    CHECK(count_params(c) == expected);
    ParameterStore store;
    Rng rng(1);
    Backbone net(c, store, rng);
    CHECK(store.scalar_count() == expected);
  }
}

TEST_CASE("invalid configs are rejected") {
  BackboneConfig empty;
  CHECK_THROWS_AS(count_params(empty), std::invalid_argument);
  auto c = BackboneConfig::desk();
  c.tap_stage = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.tap_stage = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = BackboneConfig::desk();
  c.stages[1].channels = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = BackboneConfig::desk();
  c.final_stage_stride = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("wrong input size raises a dimension error") {
  ParameterStore store;
  Rng rng(2);
  Backbone net(BackboneConfig::desk(), store, rng);
  Graph g;
  CHECK_THROWS_AS(net.extract(Tensor::zeros({3, 32, 32}), g), DimensionError);
  CHECK_THROWS_AS(net.extract(Tensor::zeros({1, 64, 32}), g), DimensionError);
}

TEST_CASE("zero image with zero biases gives an all-zero pyramid") {
  ParameterStore store;
  Rng rng(4);
  Backbone net(small_config(), store, rng);
  Graph g;
  const auto pyr = net.extract(Tensor::zeros({3, 16, 8}), g);
  for (double v : pyr.tap.data()) CHECK(v == 0.0);
  for (double v : pyr.final.data()) CHECK(v == 0.0);
}

TEST_CASE("extract is deterministic and gradients reach every conv") {
  ParameterStore store;
  Rng rng(5);
  const auto c = small_config();
  Backbone net(c, store, rng);
  const Tensor img = oracle::random_tensor(rng, {3, 16, 8}, 0.0, 1.0);
  Graph g1, g2;
  const auto a = net.extract(img, g1), b = net.extract(img, g2);
  CHECK(a.final.to_vector() == b.final.to_vector());
  CHECK(a.tap.to_vector() == b.tap.to_vector());

  auto params = store.tensors();
  const auto r = grad_check(
      [&] {
        Graph g;
        const auto p = net.extract(img, g);
        return add(sum(square(p.final)), sum(p.tap));
      },
      params, {.epsilon = 1e-6, .refinements = 2});
  CHECK(r.max_relative_error < 1e-5);
}
