#pragma once

#include <span>
#include <vector>

#include "dpti/tensor.hpp"

namespace dpti {

struct LossWeights {
  double alpha = 1.0;  // identity cross-entropy
  double beta = 1.0;   // triplet
  double gamma = 0.5;  // diversity
  void validate() const;
};

enum class TripletMetric { kEuclidean, kCosine };

struct LossOptions {
  double margin = 0.3;
  double smoothing = 0.1;
  TripletMetric metric = TripletMetric::kEuclidean;
  // Take the diversity term from a second, dropout-free head pass over the same
  // backbone features. Dropout noise alone can decorrelate part columns.
  bool clean_diversity = false;
};

/// Throws DataError unless every identity appears at least twice.
void validate_batch_labels(std::span<const int> labels);

/// Mean over ordered pairs i≠j of the squared cosine between part columns:
/// 1/(N(N−1)) Σ ⟨f_i, f_j⟩² / (‖f_i‖² ‖f_j‖²). Requires N ≥ 2 and no zero column.
Tensor diversity_loss(const Tensor& parts);

/// Batch-hard triplet loss: per anchor, [max_pos d − min_neg d + margin]_+,
/// averaged over anchors. Euclidean distances on the raw descriptors, or
/// 1 − cos when metric is kCosine.
Tensor triplet_loss(std::span<const Tensor> descriptors, std::span<const int> labels, double margin,
                    TripletMetric metric = TripletMetric::kEuclidean);

/// Mean cross-entropy of logits[B×C] with label smoothing ε:
/// −(1−ε) log p_y − ε/C Σ_c log p_c.
Tensor identity_loss(const Tensor& logits, std::span<const int> labels, double smoothing);

struct BatchOutputs {
  std::vector<Tensor> descriptors;  // unnormalized descriptor vectors
  Tensor logits;                    // B × C
  std::vector<Tensor> parts;        // unweighted d × N per sample; empty for mode G
};

struct LossBreakdown {
  Tensor total;
  double identity = 0.0;
  double triplet = 0.0;
  double diversity = 0.0;
};

/// α·L_class + β·L_tri + γ·mean_b L_div(parts_b). Components with zero
/// weight are not evaluated.
LossBreakdown joint_loss(const BatchOutputs& outputs, std::span<const int> labels, const LossWeights& weights,
                         const LossOptions& options = {});

}  // namespace dpti
