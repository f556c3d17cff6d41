#include "dpti/losses.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "dpti/errors.hpp"

namespace dpti {

namespace {

// Keeps sqrt differentiable when two descriptors coincide.
constexpr double kDistanceEps = 1e-12;

double value_distance(std::span<const double> a, std::span<const double> b, TripletMetric metric) {
  if (metric == TripletMetric::kEuclidean) {
    double ss = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(ss + kDistanceEps);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

void LossWeights::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (alpha == 0.0 && beta == 0.0 && gamma == 0.0) throw ConfigError("at least one loss weight must be positive");
}

void validate_batch_labels(std::span<const int> labels) {
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  for (const auto& [id, n] : counts) {
    if (n < 2) {
      throw DataError("identity " + std::to_string(id) + " has a single instance in the batch; triplet mining needs >= 2");
    }
  }
}

Tensor diversity_loss(const Tensor& parts) {
  if (parts.rank() != 2) throw DimensionError("diversity_loss: expected d×N, got " + shape_str(parts.shape()));
  const std::size_t n = parts.dim(1);
  if (n < 2) throw std::invalid_argument("diversity_loss: needs at least two part vectors");
  const Tensor unit = l2_normalize(parts, 0);
  const Tensor cos_sq = square(matmul(transpose(unit), unit));
  std::vector<double> off_diagonal(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) off_diagonal[i * n + i] = 0.0;
  const Tensor masked = mul(cos_sq, Tensor::from({n, n}, std::move(off_diagonal)));
  return scale(sum(masked), 1.0 / static_cast<double>(n * (n - 1)));
}

Tensor triplet_loss(std::span<const Tensor> descriptors, std::span<const int> labels, double margin,
                    TripletMetric metric) {
  if (descriptors.size() != labels.size()) {
    throw DimensionError("triplet_loss: " + std::to_string(descriptors.size()) + " descriptors but " +
                         std::to_string(labels.size()) + " labels");
  }
  validate_batch_labels(labels);
  const std::size_t b = descriptors.size();
  const std::size_t dim = descriptors.front().size();
  for (const auto& t : descriptors) {
    if (t.size() != dim) throw DimensionError("triplet_loss: descriptors differ in length");
  }

  std::vector<Tensor> rows;
  rows.reserve(b);
  for (const auto& t : descriptors) {
    const Tensor flat = reshape(t, {dim});
    rows.push_back(metric == TripletMetric::kCosine ? l2_normalize(flat) : flat);
  }
  auto distance = [&](std::size_t i, std::size_t j) {
    if (metric == TripletMetric::kEuclidean) {
      return sqrt(add_scalar(sum(square(sub(rows[i], rows[j]))), kDistanceEps));
    }
    return add_scalar(scale(sum(mul(rows[i], rows[j])), -1.0), 1.0);
  };

  bool has_negative = false;
  std::vector<Tensor> per_anchor;
  per_anchor.reserve(b);
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t hard_pos = b, hard_neg = b;
    double pos_d = -1.0, neg_d = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      const double dj = value_distance(descriptors[a].data(), descriptors[j].data(), metric);
      if (labels[j] == labels[a]) {
        if (hard_pos == b || dj > pos_d) {
          hard_pos = j;
          pos_d = dj;
        }
      } else if (hard_neg == b || dj < neg_d) {
        hard_neg = j;
        neg_d = dj;
      }
    }
    if (hard_neg == b) continue;
    has_negative = true;
    per_anchor.push_back(relu(add_scalar(sub(distance(a, hard_pos), distance(a, hard_neg)), margin)));
  }
  if (!has_negative) throw DataError("triplet_loss: batch contains a single identity");
  return mean(concat(per_anchor, 0));
}

Tensor identity_loss(const Tensor& logits, std::span<const int> labels, double smoothing) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("identity_loss: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw std::invalid_argument("identity_loss: smoothing must be in [0, 1)");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> picks(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw std::out_of_range("identity_loss: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    picks[i] = i * c + static_cast<std::size_t>(labels[i]);
  }
  const Tensor logp = log_softmax(logits, 1);
  Tensor per_sample = scale(gather(logp, picks), -(1.0 - smoothing));
  if (smoothing > 0.0) per_sample = sub(per_sample, scale(mean(logp, 1), smoothing));
  return mean(per_sample);
}

LossBreakdown joint_loss(const BatchOutputs& outputs, std::span<const int> labels, const LossWeights& weights,
                         const LossOptions& options) {
  weights.validate();
  LossBreakdown out;
  std::vector<Tensor> terms;
  if (weights.alpha > 0.0) {
    const Tensor l = identity_loss(outputs.logits, labels, options.smoothing);
    out.identity = l.item();
    terms.push_back(scale(l, weights.alpha));
  }
  if (weights.beta > 0.0) {
    const Tensor l = triplet_loss(outputs.descriptors, labels, options.margin, options.metric);
    out.triplet = l.item();
    terms.push_back(scale(l, weights.beta));
  }
  if (weights.gamma > 0.0 && !outputs.parts.empty()) {
    std::vector<Tensor> per_sample;
    per_sample.reserve(outputs.parts.size());
    for (const auto& p : outputs.parts) per_sample.push_back(diversity_loss(p));
    const Tensor l = mean(concat(per_sample, 0));
    out.diversity = l.item();
    terms.push_back(scale(l, weights.gamma));
  }
  if (terms.empty()) throw ConfigError("joint_loss: no active loss component");
  out.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = add(out.total, terms[i]);
  return out;
}

}  // namespace dpti
