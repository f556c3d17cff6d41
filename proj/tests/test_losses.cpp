#include <cmath>
#include <limits>

#include "doctest.h"
#include "dpti/errors.hpp"
#include "dpti/losses.hpp"
#include "dpti/model.hpp"
#include "oracles.hpp"

using namespace dpti;
using oracle::random_tensor;

namespace {

double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s + 1e-12);
}

// Enumerates every (anchor, positive, negative) triple and keeps, per anchor,
// the triple with the largest hinge argument.
double exhaustive_triplet(const std::vector<std::vector<double>>& x, const std::vector<int>& labels, double margin) {
  double total = 0.0;
  for (std::size_t a = 0; a < x.size(); ++a) {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < x.size(); ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t n = 0; n < x.size(); ++n) {
        if (labels[n] == labels[a]) continue;
        worst = std::max(worst, euclid(x[a], x[p]) - euclid(x[a], x[n]) + margin);
      }
    }
    total += std::max(0.0, worst);
  }
  return total / static_cast<double>(x.size());
}

double ce_oracle(const std::vector<double>& row, int label, double eps) {
  long double m = row[0], s = 0.0L;
  for (double v : row) m = std::max<long double>(m, v);
  for (double v : row) s += std::exp(static_cast<long double>(v) - m);
  const long double lse = m + std::log(s);
  long double mean_logp = 0.0L;
  for (double v : row) mean_logp += (v - lse) / static_cast<long double>(row.size());
  return static_cast<double>(-(1.0L - eps) * (row[static_cast<std::size_t>(label)] - lse) - eps * mean_logp);
}

}  // namespace

TEST_CASE("diversity loss examples") {
  CHECK(diversity_loss(Tensor::from({3, 3}, {1, 0, 0, 0, 2, 0, 0, 0, 3})).item() == 0.0);
  CHECK(diversity_loss(Tensor::from({2, 3}, {1, 1, 1, 2, 2, 2})).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(diversity_loss(Tensor::from({3, 2}, {1, -1, 2, -2, -0.5, 0.5})).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(diversity_loss(Tensor::zeros({4})), DimensionError);
  CHECK_THROWS(diversity_loss(Tensor::zeros({4, 1})));
}

TEST_CASE("diversity loss matches the double-loop oracle and its invariances") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor p = random_tensor(rng, {8, 4});
    const double v = diversity_loss(p).item();
    CHECK(std::abs(v - oracle::diversity(oracle::from_tensor(p))) < 1e-12);

    auto m = p.to_vector();
    const std::size_t col = rng.below(4);
    for (std::size_t r = 0; r < 8; ++r) m[r * 4 + col] *= -2.5;
    CHECK(diversity_loss(Tensor::from({8, 4}, m)).item() == doctest::Approx(v).epsilon(1e-12));

    m = p.to_vector();
    for (std::size_t r = 0; r < 8; ++r) std::swap(m[r * 4 + 0], m[r * 4 + 3]);
    CHECK(diversity_loss(Tensor::from({8, 4}, m)).item() == doctest::Approx(v).epsilon(1e-12));
  }
}

TEST_CASE("minimizing diversity alone decorrelates the parts") {
  Rng rng(2);
  Tensor p = random_tensor(rng, {8, 4}, -1, 1, true);
  for (int step = 0; step < 500; ++step) {
    p.zero_grad();
    diversity_loss(p).backward();
    auto data = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= 0.5 * g[i];
  }
  const auto m = oracle::from_tensor(p);
  double worst = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) {
      const auto a = oracle::column(m, i), b = oracle::column(m, j);
      worst = std::max(worst, oracle::dot(a, b) * oracle::dot(a, b) / (oracle::dot(a, a) * oracle::dot(b, b)));
    }
  CHECK(worst < 0.01);
}

TEST_CASE("triplet loss examples") {
  const std::vector<int> labels{0, 0, 1, 1};
  std::vector<Tensor> far{Tensor::from({2}, {0, 0}), Tensor::from({2}, {0, 0}), Tensor::from({2}, {10, 0}),
                          Tensor::from({2}, {10, 0})};
  CHECK(triplet_loss(far, labels, 0.3).item() == 0.0);
  std::vector<Tensor> same(4, Tensor::from({2}, {1, 1}));
  CHECK(triplet_loss(same, labels, 0.3).item() == doctest::Approx(0.3).epsilon(1e-9));
  CHECK_THROWS_AS(triplet_loss(same, std::vector<int>{0, 0, 1, 2}, 0.3), DataError);
  CHECK_THROWS_AS(triplet_loss(same, std::vector<int>{0, 0, 0, 0}, 0.3), DataError);
  CHECK_THROWS_AS(triplet_loss(same, std::vector<int>{0, 0, 1}, 0.3), DimensionError);
}

TEST_CASE("batch-hard triplet loss equals the exhaustive oracle on 4x2 PK batches") {
  Rng rng(3);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> xs;
    std::vector<std::vector<double>> raw;
    for (int i = 0; i < 8; ++i) {
      xs.push_back(random_tensor(rng, {5}));
      raw.push_back(xs.back().to_vector());
    }
    CHECK(triplet_loss(xs, labels, 0.3).item() == doctest::Approx(exhaustive_triplet(raw, labels, 0.3)).epsilon(1e-12));
  }
}

TEST_CASE("cosine triplet metric") {
  const std::vector<int> labels{0, 0, 1, 1};
  std::vector<Tensor> xs{Tensor::from({2}, {1, 0}), Tensor::from({2}, {2, 0}), Tensor::from({2}, {0, 1}),
                         Tensor::from({2}, {0, 3})};
  // Positives coincide in angle and negatives are orthogonal: 0 - 1 + 0.3 < 0.
  CHECK(triplet_loss(xs, labels, 0.3, TripletMetric::kCosine).item() == 0.0);
  CHECK(triplet_loss(xs, labels, 1.5, TripletMetric::kCosine).item() == doctest::Approx(0.5));
}

TEST_CASE("identity loss examples and log-sum-exp oracle") {
  const std::vector<int> one{1};
  CHECK(identity_loss(Tensor::from({1, 3}, {-50, 50, -50}), one, 0.0).item() < 1e-40);
  CHECK(identity_loss(Tensor::full({1, 7}, 2.0), one, 0.0).item() == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  CHECK(identity_loss(Tensor::full({1, 7}, 2.0), one, 0.3).item() == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  CHECK_THROWS_AS(identity_loss(Tensor::zeros({1, 3}), std::vector<int>{3}, 0.0), std::out_of_range);
  CHECK_THROWS_AS(identity_loss(Tensor::zeros({2, 3}), one, 0.0), DimensionError);
  CHECK_THROWS(identity_loss(Tensor::zeros({1, 3}), one, 1.0));

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + rng.below(5), c = 2 + rng.below(6);
    const double eps = trial % 2 ? 0.1 : 0.0;
    const Tensor logits = random_tensor(rng, {b, c}, -20, 20);
    std::vector<int> labels(b);
    double expected = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      labels[i] = static_cast<int>(rng.below(c));
      const auto v = logits.to_vector();
      expected += ce_oracle({v.begin() + static_cast<long>(i * c), v.begin() + static_cast<long>((i + 1) * c)},
                            labels[i], eps);
    }
    CHECK(identity_loss(logits, labels, eps).item() == doctest::Approx(expected / b).epsilon(1e-12));
  }
}

TEST_CASE("joint loss is the weighted sum of its components") {
  Rng rng(5);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  for (int trial = 0; trial < 20; ++trial) {
    BatchOutputs out;
    for (int i = 0; i < 6; ++i) {
      out.descriptors.push_back(random_tensor(rng, {6}));
      out.parts.push_back(random_tensor(rng, {4, 3}));
    }
    out.logits = random_tensor(rng, {6, 3}, -3, 3);
    const LossWeights w{rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2)};
    const LossOptions opts{.margin = 0.3, .smoothing = 0.1};
    double div = 0.0;
    for (const auto& p : out.parts) div += oracle::diversity(oracle::from_tensor(p)) / 6.0;
    const double id = identity_loss(out.logits, labels, 0.1).item();
    const double tri = triplet_loss(out.descriptors, labels, 0.3).item();
    const auto joint = joint_loss(out, labels, w, opts);
    CHECK(joint.total.item() == doctest::Approx(w.alpha * id + w.beta * tri + w.gamma * div).epsilon(1e-12));
    CHECK(joint.identity == doctest::Approx(id).epsilon(1e-15));
    CHECK(joint.triplet == doctest::Approx(tri).epsilon(1e-15));
    CHECK(joint.diversity == doctest::Approx(div).epsilon(1e-12));
  }

  BatchOutputs out;
  for (int i = 0; i < 6; ++i) {
    out.descriptors.push_back(random_tensor(rng, {6}));
    out.parts.push_back(Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  }
  out.logits = random_tensor(rng, {6, 3});
  CHECK(joint_loss(out, labels, {1, 0, 0}).total.item() == identity_loss(out.logits, labels, 0.1).item());
  CHECK(joint_loss(out, labels, {0, 0, 1}).total.item() == 0.0);
  CHECK_THROWS_AS(joint_loss(out, labels, {0, 0, 0}), ConfigError);
  CHECK_THROWS_AS(joint_loss(out, labels, {-1, 1, 1}), ConfigError);
}

TEST_CASE("loss gradients check and reach every parameter group") {
  ModelConfig c;
  c.backbone.stages = {{4, 1, 2}, {6, 1, 2}, {8, 1, 1}};
  c.backbone.input_h = 16;
  c.backbone.input_w = 8;
  c.backbone.tap_stage = 2;
  c.dim = 8;
  c.heads = 2;
  c.parts = 3;
  c.num_classes = 3;
  c.mode = HeadMode::kDynamicWeighted;
  ReidModel model(c, 6);
  Rng rng(7);
  std::vector<Tensor> images;
  for (int i = 0; i < 4; ++i) images.push_back(random_tensor(rng, {3, 16, 8}, 0, 1));
  const std::vector<int> labels{0, 0, 1, 1};
  Graph g;
  joint_loss(model.forward_batch(images, g), labels, {}).total.backward();
  for (const auto& [name, t] : model.store().entries()) {
    if (name.starts_with("head.static_templates")) continue;  // unused outside G+T
    double norm = 0.0;
    for (double v : t.grad()) norm += v * v;
    CHECK_MESSAGE(norm > 0.0, name);
  }

  std::vector<Tensor> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(random_tensor(rng, {5}, -1, 1, true));
  const Tensor parts = random_tensor(rng, {5, 3}, -1, 1, true);
  const Tensor logits = random_tensor(rng, {4, 3}, -1, 1, true);
  std::vector<Tensor> params = xs;
  params.push_back(parts);
  params.push_back(logits);
  const auto r = grad_check(
      [&] {
        BatchOutputs out{xs, logits, {parts, parts, parts, parts}};
        return joint_loss(out, labels, {1, 1, 0.5}).total;
      },
      params, {.epsilon = 1e-6, .refinements = 2});
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("clean diversity parts are the inference-mode parts and still carry gradients") {
  ModelConfig c;
  c.backbone.stages = {{4, 1, 2}, {6, 1, 2}, {8, 1, 1}};
  c.backbone.input_h = 16;
  c.backbone.input_w = 8;
  c.backbone.tap_stage = 2;
  c.dim = 8;
  c.heads = 2;
  c.parts = 3;
  c.num_classes = 2;
  c.ffn_dropout = 0.3;
  c.attn_dropout = 0.3;
  ReidModel model(c, 8);
  Rng rng(9);
  std::vector<Tensor> images;
  for (int i = 0; i < 2; ++i) images.push_back(random_tensor(rng, {3, 16, 8}, 0, 1));

  Graph noisy(Mode::kTraining, 3), noisy_again(Mode::kTraining, 3);
  const BatchOutputs plain = model.forward_batch(images, noisy);
  const BatchOutputs clean = model.forward_batch(images, noisy_again, true);
  for (std::size_t i = 0; i < images.size(); ++i) {
    // The training pass is untouched; only the part matrices switch to the dropout-free pass.
    CHECK(clean.descriptors[i].to_vector() == plain.descriptors[i].to_vector());
    Graph inference;
    CHECK(clean.parts[i].to_vector() == model.describe(images[i], inference).parts->to_vector());
    CHECK(clean.parts[i].to_vector() != plain.parts[i].to_vector());
  }

  diversity_loss(clean.parts[0]).backward();
  double norm = 0.0;
  for (const auto& [name, t] : model.store().entries()) {
    if (!name.starts_with("dpti.")) continue;
    for (double v : t.grad()) norm += v * v;
  }
  CHECK(norm > 0.0);
}
