#ifndef TRISPEECH_LOSSES_HPP
#define TRISPEECH_LOSSES_HPP

// Supervised and semi-supervised training losses. Per-modality terms follow
// a fixed shape: combined = lambda_ctc * ctc + (1 - lambda_ctc) * attention,
// aggregated across modalities with the video weight lambda_v, and across
// labelled/unlabelled streams with gamma_v / gamma_a.

#include <array>
#include <map>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/model.hpp"
#include "trispeech/tensor.hpp"

namespace trispeech {

struct LossWeights {
  double lambda_ctc = 0.1;
  double lambda_v = 0.3;
  double gamma_a = 0.5;
  double gamma_v = 0.2;
  double tau = 0.8;

  void validate() const {
    for (double x : {lambda_ctc, lambda_v, gamma_a, gamma_v, tau})
      if (x < 0.0 || x > 1.0) throw ConfigError("loss weights must lie in [0,1]");
  }
};

// Per-sample CTC negative log-likelihood; infeasible label lengths are
// reported rather than clamped so the caller can skip and count them.
template <typename S>
struct MaybeLoss {
  Tensor<S> value;
  bool feasible = false;
};

template <typename S>
MaybeLoss<S> ctc_loss(Tensor<S> log_probs, const std::vector<int>& labels, int blank) {
  MaybeLoss<S> out;
  if (log_probs.dim(0) < ctc_min_frames(labels)) return out;  // skipped, counted upstream
  out.value = ctc_loss_op(log_probs, labels, blank);
  out.feasible = true;
  return out;
}

// Summed cross-entropy over positions: logits come from the teacher-forced
// decoder on sos+labels, targets are labels+eos.
template <typename S>
Tensor<S> attention_ce_loss(Tensor<S> logits, const std::vector<int>& targets) {
  if (logits.dim(0) != static_cast<int64_t>(targets.size()))
    throw ShapeError("attention CE: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.dim(0)) + " logit rows");
  auto lp = log_softmax(logits, 1);
  auto picked = gather_rows(lp, targets);
  return scale(sum(picked), S(-1));
}

template <typename S>
Tensor<S> combine_modality(Tensor<S> ctc, Tensor<S> attention, const LossWeights& w) {
  return add(scale(ctc, static_cast<S>(w.lambda_ctc)),
             scale(attention, static_cast<S>(1.0 - w.lambda_ctc)));
}

template <typename S>
struct PerModalityLosses {
  std::map<Modality, Tensor<S>> combined;

  Tensor<S> at(Modality m) const {
    auto it = combined.find(m);
    if (it == combined.end() || !it->second.valid())
      throw ContractError(std::string("missing modality loss: ") + modality_name(m));
    return it->second;
  }
};

// Eq. 4 aggregate over the three modalities.
template <typename S>
Tensor<S> supervised_loss(const PerModalityLosses<S>& per_mod, const LossWeights& w) {
  auto v = per_mod.at(Modality::V);
  auto a = per_mod.at(Modality::A);
  auto av = per_mod.at(Modality::AV);
  return add(scale(v, static_cast<S>(w.lambda_v)),
             scale(add(a, av), static_cast<S>(1.0 - w.lambda_v)));
}

// Frame-wise cross-entropy between student CTC log-probs and the teacher's
// per-frame argmax: the confidence mask selects frames, kept frames sum (the
// same summed-CE convention as the labelled losses), an empty mask gives 0.
template <typename S>
Tensor<S> unlabelled_ctc_loss(Tensor<S> student_log_probs, const std::vector<int>& teacher_frames,
                              const std::vector<uint8_t>& conf_mask) {
  if (student_log_probs.dim(0) != static_cast<int64_t>(teacher_frames.size()) ||
      teacher_frames.size() != conf_mask.size())
    throw ContractError("unlabelled CTC: student and teacher frame counts differ");
  auto picked = gather_rows(student_log_probs, teacher_frames);
  std::vector<S> weights(conf_mask.size(), S(0));
  for (size_t i = 0; i < conf_mask.size(); ++i)
    if (conf_mask[i]) weights[i] = S(-1);
  return weighted_sum(picked, weights);
}

// Token-wise cross-entropy against the teacher's greedy pseudo-sequence,
// confidence-masked; kept tokens sum, so an all-ones mask reduces exactly to
// attention_ce_loss on the pseudo tokens. The student is teacher-forced with
// sos + pseudo tokens; logits rows align with pseudo_tokens.
template <typename S>
Tensor<S> unlabelled_attention_loss(Tensor<S> student_logits, const std::vector<int>& pseudo_tokens,
                                    const std::vector<uint8_t>& conf_mask) {
  if (student_logits.dim(0) != static_cast<int64_t>(pseudo_tokens.size()) ||
      pseudo_tokens.size() != conf_mask.size())
    throw ContractError("unlabelled attention: logits and pseudo-label lengths differ");
  auto lp = log_softmax(student_logits, 1);
  auto picked = gather_rows(lp, pseudo_tokens);
  std::vector<S> weights(conf_mask.size(), S(0));
  for (size_t i = 0; i < conf_mask.size(); ++i)
    if (conf_mask[i]) weights[i] = S(-1);
  return weighted_sum(picked, weights);
}

// Eq. 7: gamma-weighted blend of labelled and unlabelled per-modality losses.
template <typename S>
Tensor<S> semi_loss(const PerModalityLosses<S>& labelled, const PerModalityLosses<S>& unlabelled,
                    const LossWeights& w) {
  const S gv = static_cast<S>(w.gamma_v);
  const S ga = static_cast<S>(w.gamma_a);
  const S lv = static_cast<S>(w.lambda_v);
  auto lab = add(scale(labelled.at(Modality::V), gv * lv),
                 scale(add(labelled.at(Modality::A), labelled.at(Modality::AV)),
                       ga * (S(1) - lv)));
  auto unlab = add(scale(unlabelled.at(Modality::V), (S(1) - gv) * lv),
                   scale(add(unlabelled.at(Modality::A), unlabelled.at(Modality::AV)),
                         (S(1) - ga) * (S(1) - lv)));
  return add(lab, unlab);
}

// Batch mean of already-built per-sample scalar losses.
template <typename S>
Tensor<S> batch_mean(Graph<S>& g, const std::vector<Tensor<S>>& terms) {
  if (terms.empty()) return g.scalar(S(0));
  Tensor<S> acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, S(1) / static_cast<S>(terms.size()));
}

}  // namespace trispeech

#endif  // TRISPEECH_LOSSES_HPP
