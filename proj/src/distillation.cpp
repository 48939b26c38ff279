#include "xtc/distillation.hpp"

#include <vector>

#include "xtc/errors.hpp"

namespace xtc {

void KDWeights::validate() const {
  if ((gamma != 0 && gamma != 1) || (beta != 0 && beta != 1)) {
    throw ConfigError("gamma and beta must each be 0 or 1", "distill.weights");
  }
  if (gamma + beta < 1) throw ConfigError("all-zero objective", "distill.weights");
}

KDPairing pairing_from_selection(const LayerSelection& selection) {
  KDPairing p;
  for (std::size_t i = 0; i < selection.indices.size(); ++i) {
    p.emplace_back(i, selection.indices[i] - 1);
  }
  return p;
}

KDPairing identity_pairing(std::size_t layers) {
  KDPairing p;
  for (std::size_t i = 0; i < layers; ++i) p.emplace_back(i, i);
  return p;
}

void validate_pairing(const KDPairing& pairing, std::size_t student_layers,
                      std::size_t teacher_layers) {
  std::vector<int> seen(student_layers, 0);
  for (const auto& [s, t] : pairing) {
    if (s >= student_layers || t >= teacher_layers) {
      throw ConfigError("pairing index out of range", "distill.pairing");
    }
    ++seen[s];
  }
  for (int c : seen) {
    if (c != 1) throw ConfigError("every student layer must be paired once", "distill.pairing");
  }
}

Tensor loss_hidden(const Tensor& student_hidden, const Tensor& teacher_hidden) {
  if (student_hidden.shape() != teacher_hidden.shape()) {
    throw DimensionError("loss_hidden: shape mismatch " + shape_str(student_hidden.shape()) +
                         " vs " + shape_str(teacher_hidden.shape()));
  }
  return mse(student_hidden, teacher_hidden);
}

Tensor loss_att(const Tensor& student_maps, const Tensor& teacher_maps) {
  const auto& s = student_maps.shape();
  const auto& t = teacher_maps.shape();
  if (s.size() < 3 || t.size() < 3) {
    throw DimensionError("loss_att: expected [h, l, l] or [B, h, l, l] maps");
  }
  if (s[s.size() - 3] != t[t.size() - 3]) {
    throw DimensionError("loss_att: head count " + std::to_string(s[s.size() - 3]) + " vs " +
                         std::to_string(t[t.size() - 3]));
  }
  if (s != t) {
    throw DimensionError("loss_att: map shapes differ " + shape_str(s) + " vs " + shape_str(t));
  }
  // Every head's map has the same size, so the mean over heads of per-head
  // means (and over the batch) is the mean over all entries.
  return mse(student_maps, teacher_maps);
}

Tensor loss_logit(const Tensor& student_logits, const Tensor& teacher_logits) {
  return soft_cross_entropy(student_logits, teacher_logits);
}

KDTerms kd_terms(const ModelOutputs& student, const ModelOutputs& teacher,
                 const KDPairing& pairing, AttentionTarget target) {
  validate_pairing(pairing, student.hiddens.size(), teacher.hiddens.size());
  const auto& s_maps = target == AttentionTarget::kScores ? student.attention_scores
                                                          : student.attentions;
  const auto& t_maps = target == AttentionTarget::kScores ? teacher.attention_scores
                                                          : teacher.attentions;
  KDTerms terms;
  terms.logit = loss_logit(student.logits, teacher.logits);
  for (const auto& [s, t] : pairing) {
    const Tensor h = loss_hidden(student.hiddens[s], teacher.hiddens[t]);
    const Tensor a = loss_att(s_maps[s], t_maps[t]);
    terms.hidden = terms.hidden.defined() ? add(terms.hidden, h) : h;
    terms.att = terms.att.defined() ? add(terms.att, a) : a;
  }
  if (!terms.hidden.defined()) {
    terms.hidden = Tensor::scalar(0.0F);
    terms.att = Tensor::scalar(0.0F);
  }
  return terms;
}

Tensor combine_terms(const KDTerms& terms, const KDWeights& weights) {
  weights.validate();
  const bool logit = weights.gamma == 1;
  const bool layer = weights.beta == 1;
  if (logit && layer) return add(terms.logit, add(terms.att, terms.hidden));
  if (logit) return terms.logit;
  return add(terms.att, terms.hidden);
}

Tensor kd_objective(const ModelOutputs& student, const ModelOutputs& teacher,
                    const KDPairing& pairing, const KDWeights& weights,
                    AttentionTarget target) {
  weights.validate();
  return combine_terms(kd_terms(student, teacher, pairing, target), weights);
}

}  // namespace xtc
