#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "xtc/model.hpp"
#include "xtc/tensor.hpp"

namespace xtc {

/// Loss weights of the distillation objective; each is 0 or 1.
struct KDWeights {
  int gamma = 1;  // logit term
  int beta = 1;   // attention + hidden terms

  void validate() const;
  bool operator==(const KDWeights&) const = default;
};

/// (student layer, teacher layer), both 0-based.
using KDPairing = std::vector<std::pair<std::size_t, std::size_t>>;

/// Student layer i distills against the teacher layer it was initialized from.
KDPairing pairing_from_selection(const LayerSelection& selection);
/// Identity pairing for equal depths.
KDPairing identity_pairing(std::size_t layers);
void validate_pairing(const KDPairing& pairing, std::size_t student_layers,
                      std::size_t teacher_layers);

enum class AttentionTarget { kProbabilities, kScores };

/// Mean squared error over all entries (and batch rows).
Tensor loss_hidden(const Tensor& student_hidden, const Tensor& teacher_hidden);
/// Mean over heads of per-head MSE; inputs are [h, l, l] or [B, h, l, l].
Tensor loss_att(const Tensor& student_maps, const Tensor& teacher_maps);
/// Soft cross entropy at temperature 1, averaged over the batch.
Tensor loss_logit(const Tensor& student_logits, const Tensor& teacher_logits);

struct KDTerms {
  Tensor logit;   // scalar
  Tensor hidden;  // scalar, summed over paired layers
  Tensor att;     // scalar, summed over paired layers
};

/// Computes every term regardless of weights. Teacher outputs must not
/// require grad.
KDTerms kd_terms(const ModelOutputs& student, const ModelOutputs& teacher,
                 const KDPairing& pairing,
                 AttentionTarget target = AttentionTarget::kProbabilities);

/// gamma * logit + beta * (att + hidden); terms with weight 0 are left out
/// of the graph.
Tensor combine_terms(const KDTerms& terms, const KDWeights& weights);

Tensor kd_objective(const ModelOutputs& student, const ModelOutputs& teacher,
                    const KDPairing& pairing, const KDWeights& weights,
                    AttentionTarget target = AttentionTarget::kProbabilities);

}  // namespace xtc
