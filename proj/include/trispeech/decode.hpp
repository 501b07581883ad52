#ifndef TRISPEECH_DECODE_HPP
#define TRISPEECH_DECODE_HPP

// Inference-time decoding and scoring: greedy CTC collapse, CTC prefix
// scores, joint CTC-attention beam search, and token-level WER.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/data.hpp"
#include "trispeech/model.hpp"

namespace trispeech {

struct DecodeConfig {
  double alpha = 0.1;        // weight of the CTC score against attention
  int beam_size = 8;         // desk default; the "paper" preset uses 40
  double beta = 0.0;         // LM shallow-fusion weight: declared extension
                             // point, fixed at 0 and never called
  double max_len_factor = 1.0;  // output cap as a fraction of input frames

  void validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0,1]");
    if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
    if (max_len_factor <= 0.0) throw ConfigError("max_len_factor must be positive");
  }
};

// Per-frame argmax, collapse consecutive repeats, drop blanks.
template <typename S>
std::vector<int> greedy_ctc_decode(const std::vector<S>& log_probs, int64_t T, int64_t V,
                                   int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int64_t t = 0; t < T; ++t) {
    int best = 0;
    S best_lp = log_probs[static_cast<size_t>(t * V)];
    for (int64_t v = 1; v < V; ++v)
      if (log_probs[static_cast<size_t>(t * V + v)] > best_lp) {
        best_lp = log_probs[static_cast<size_t>(t * V + v)];
        best = static_cast<int>(v);
      }
    if (best != blank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CTC prefix scoring: forward variables over blank/non-blank states restricted
// to a prefix, with extensions in O(T). Internally double for log-space
// stability regardless of the model scalar type.

class CtcPrefixScorer {
 public:
  static constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  template <typename S>
  CtcPrefixScorer(const std::vector<S>& log_probs, int64_t T, int64_t V, int blank)
      : T_(T), V_(V), blank_(blank), lp_(static_cast<size_t>(T * V)) {
    for (size_t i = 0; i < lp_.size(); ++i) lp_[i] = static_cast<double>(log_probs[i]);
  }

  struct State {
    std::vector<double> r_n;  // prefix emitted, frame t inside the last symbol's run
    std::vector<double> r_b;  // prefix emitted, frame t blank after completion
    double psi = 0.0;         // log P(output begins with prefix)
    int last = -1;            // last token of the prefix, -1 for empty
  };

  State initial() const {
    State s;
    s.r_n.assign(static_cast<size_t>(T_), kNegInf);
    s.r_b.resize(static_cast<size_t>(T_));
    double acc = 0.0;
    for (int64_t t = 0; t < T_; ++t) {
      acc += lp(t, blank_);
      s.r_b[static_cast<size_t>(t)] = acc;
    }
    s.psi = 0.0;  // every output extends the empty prefix
    return s;
  }

  // Appends one non-blank token to the prefix.
  State extend(const State& g, int token) const {
    if (token == blank_) throw ContractError("ctc prefix cannot extend with blank");
    State h;
    h.last = token;
    h.r_n.assign(static_cast<size_t>(T_), kNegInf);
    h.r_b.assign(static_cast<size_t>(T_), kNegInf);
    double psi = kNegInf;
    for (int64_t t = 0; t < T_; ++t) {
      // phi: the previous prefix is complete just before frame t and the new
      // token may start here. A repeated token must cross a blank first.
      double phi_prev;
      if (t == 0) {
        phi_prev = (g.last == -1) ? 0.0 : kNegInf;
      } else {
        phi_prev = g.r_b[static_cast<size_t>(t - 1)];
        if (token != g.last) phi_prev = lse(phi_prev, g.r_n[static_cast<size_t>(t - 1)]);
      }
      const double start_here = phi_prev + lp(t, token);
      psi = lse(psi, start_here);
      const double prev_rn = (t == 0) ? kNegInf : h.r_n[static_cast<size_t>(t - 1)];
      h.r_n[static_cast<size_t>(t)] = lse(prev_rn, phi_prev) + lp(t, token);
      if (t > 0)
        h.r_b[static_cast<size_t>(t)] =
            lse(h.r_b[static_cast<size_t>(t - 1)], h.r_n[static_cast<size_t>(t - 1)]) +
            lp(t, blank_);
    }
    h.psi = psi;
    return h;
  }

  // log P(output is exactly the prefix): end-state restriction.
  double completed(const State& s) const {
    return lse(s.r_n[static_cast<size_t>(T_ - 1)], s.r_b[static_cast<size_t>(T_ - 1)]);
  }

 private:
  double lp(int64_t t, int64_t v) const { return lp_[static_cast<size_t>(t * V_ + v)]; }
  static double lse(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
  }

  int64_t T_, V_;
  int blank_;
  std::vector<double> lp_;
};

// log P(output begins with prefix); empty prefix scores 0.
template <typename S>
double ctc_prefix_score(const std::vector<S>& log_probs, int64_t T, int64_t V, int blank,
                        const std::vector<int>& prefix) {
  CtcPrefixScorer scorer(log_probs, T, V, blank);
  auto state = scorer.initial();
  for (int tok : prefix) state = scorer.extend(state, tok);
  return state.psi;
}

// log P(output equals prefix exactly), i.e. -ctc_loss of that labelling.
template <typename S>
double ctc_completed_score(const std::vector<S>& log_probs, int64_t T, int64_t V, int blank,
                           const std::vector<int>& prefix) {
  CtcPrefixScorer scorer(log_probs, T, V, blank);
  auto state = scorer.initial();
  for (int tok : prefix) state = scorer.extend(state, tok);
  return scorer.completed(state);
}

// ---------------------------------------------------------------------------
// hybrid CTC-attention beam search

struct Hypothesis {
  std::vector<int> tokens;
  double s_att = 0.0;
  double s_ctc = 0.0;
  double combined = 0.0;
  bool finished = false;
  CtcPrefixScorer::State ctc_state;
};

struct BeamResult {
  std::vector<int> tokens;
  double s_att = 0.0;
  double s_ctc = 0.0;
  double combined = 0.0;
  bool finished = false;  // false: no hypothesis closed within max_len
};

// Length-synchronous beam over decoder expansions. Every candidate carries
// combined = alpha * ctc_prefix + (1 - alpha) * attention log-prob; closing
// with eos swaps the prefix score for the completed-sequence restriction.
// Candidates come from `candidates` (content tokens); sos/blank/pad never
// expand and eos is handled as the closing move.
template <typename S>
BeamResult hybrid_beam_search(ModelRun<S>& run, Tensor<S> enc_final, Tensor<S> ctc_log_probs,
                              const DecodeConfig& cfg, int sos, int eos, int blank,
                              const std::vector<int>& candidates, int64_t max_len) {
  cfg.validate();
  const int64_t T = ctc_log_probs.dim(0);
  const int64_t V = ctc_log_probs.dim(1);
  CtcPrefixScorer scorer(ctc_log_probs.values(), T, V, blank);
  const double alpha = cfg.alpha;

  std::vector<Hypothesis> live(1);
  live[0].ctc_state = scorer.initial();
  std::optional<Hypothesis> best_finished;
  Hypothesis best_partial = live[0];

  // eos competes with content tokens in the ranking; selected closures retire
  // to the finished pool and stop occupying beam slots.
  for (int64_t step = 0; step <= max_len && !live.empty(); ++step) {
    std::vector<Hypothesis> pool;
    for (auto& hyp : live) {
      std::vector<int> y_in = {sos};
      y_in.insert(y_in.end(), hyp.tokens.begin(), hyp.tokens.end());
      auto logits = run.decode_teacher_forced(enc_final, y_in);
      auto lp = log_softmax(logits, 1);
      const int64_t row = (lp.dim(0) - 1) * lp.dim(1);

      Hypothesis closed = hyp;
      closed.finished = true;
      closed.s_att = hyp.s_att + static_cast<double>(lp.value_at(row + eos));
      closed.s_ctc = scorer.completed(hyp.ctc_state);
      closed.combined = alpha * closed.s_ctc + (1.0 - alpha) * closed.s_att;
      pool.push_back(std::move(closed));

      if (step == max_len) continue;  // forced closure round at the cap
      for (int c : candidates) {
        Hypothesis ext = hyp;
        ext.tokens.push_back(c);
        ext.s_att = hyp.s_att + static_cast<double>(lp.value_at(row + c));
        ext.ctc_state = scorer.extend(hyp.ctc_state, c);
        ext.s_ctc = ext.ctc_state.psi;
        ext.combined = alpha * ext.s_ctc + (1.0 - alpha) * ext.s_att;
        pool.push_back(std::move(ext));
      }
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.combined > b.combined; });
    if (static_cast<int>(pool.size()) > cfg.beam_size)
      pool.resize(static_cast<size_t>(cfg.beam_size));
    live.clear();
    for (auto& h : pool) {
      if (h.finished) {
        if (!best_finished || h.combined > best_finished->combined) best_finished = h;
      } else {
        live.push_back(std::move(h));
      }
    }
    for (const auto& h : live)
      if (h.combined > best_partial.combined) best_partial = h;
  }

  BeamResult out;
  const Hypothesis* pick = nullptr;
  if (best_finished) {
    pick = &*best_finished;
    out.finished = true;
  } else {
    log_info("beam search found no finished hypothesis; returning best partial");
    pick = &best_partial;
  }
  out.tokens = pick->tokens;
  out.s_att = pick->s_att;
  out.s_ctc = pick->s_ctc;
  out.combined = pick->combined;
  return out;
}

// ---------------------------------------------------------------------------
// WER

inline int64_t edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const size_t R = ref.size(), H = hyp.size();
  std::vector<int64_t> prev(H + 1), cur(H + 1);
  for (size_t j = 0; j <= H; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= R; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= H; ++j) {
      const int64_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[H];
}

// Per-utterance WER; a zero-length reference with a nonempty hypothesis has
// no defined per-utterance rate (its edits still count in corpus totals).
inline std::optional<double> utterance_wer(const std::vector<int>& ref,
                                           const std::vector<int>& hyp) {
  if (ref.empty()) {
    if (hyp.empty()) return 0.0;
    return std::nullopt;
  }
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

inline double wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  auto w = utterance_wer(ref, hyp);
  if (!w) throw ContractError("wer undefined for an empty reference and nonempty hypothesis");
  return *w;
}

struct WerAccumulator {
  int64_t total_edits = 0;
  int64_t total_ref = 0;
  void add(const std::vector<int>& ref, const std::vector<int>& hyp) {
    total_edits += edit_distance(ref, hyp);
    total_ref += static_cast<int64_t>(ref.size());
  }
  double corpus_wer() const {
    if (total_ref == 0) return total_edits == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return static_cast<double>(total_edits) / static_cast<double>(total_ref);
  }
};

// ---------------------------------------------------------------------------
// evaluation

struct EvalEntry {
  int64_t id = 0;
  std::string modality;
  std::vector<int> reference;
  std::vector<int> hypothesis;
  int64_t edits = 0;
  std::optional<double> wer;
};

struct EvalReport {
  std::vector<EvalEntry> entries;
  double corpus_wer = 0.0;
  int64_t total_edits = 0;
  int64_t total_ref = 0;
};

// Decodes one sample with the requested modality path and the shared weights.
template <typename S>
BeamResult decode_sample(ModelState<S>& model, const TensorData<float>& video,
                         const TensorData<float>& audio, Modality modality,
                         const DecodeConfig& cfg, const Vocab& vocab) {
  Graph<S> g;
  ModelRun<S> run(g, model, /*frozen=*/true);
  Tensor<S> features;
  switch (modality) {
    case Modality::V: features = run.extract_video(video); break;
    case Modality::A: features = run.extract_audio(audio); break;
    case Modality::AV:
      features = run.fuse_av(run.extract_video(video), run.extract_audio(audio));
      break;
  }
  auto enc = run.encode(features);
  auto ctc_lp = run.ctc_log_probs(enc.final);
  std::vector<int> candidates(static_cast<size_t>(vocab.content_size()));
  for (int i = 0; i < vocab.content_size(); ++i) candidates[static_cast<size_t>(i)] = i;
  const int64_t max_len =
      std::max<int64_t>(2, static_cast<int64_t>(std::ceil(cfg.max_len_factor *
                                                          static_cast<double>(ctc_lp.dim(0)))));
  return hybrid_beam_search(run, enc.final, ctc_lp, cfg, vocab.sos(), vocab.eos(), vocab.blank(),
                            candidates, max_len);
}

// Evaluates every utterance with one modality path; audio corruption, when
// requested, derives a per-utterance noise stream from (seed, id) so repeated
// evaluation is bit-identical.
template <typename S>
EvalReport evaluate(ModelState<S>& model, const std::vector<LabelledSample>& eval_set,
                    Modality modality, const DecodeConfig& cfg, const Vocab& vocab,
                    double snr_db = std::numeric_limits<double>::infinity(),
                    uint64_t noise_seed = 0) {
  EvalReport report;
  WerAccumulator acc;
  for (const auto& sample : eval_set) {
    TensorData<float> audio = sample.audio;
    if (!std::isinf(snr_db)) {
      Rng rng = derive_rng(noise_seed, "eval_noise", {static_cast<uint64_t>(sample.id)});
      corrupt_audio(&audio, snr_db, rng);
    }
    auto result = decode_sample(model, sample.video, audio, modality, cfg, vocab);
    EvalEntry e;
    e.id = sample.id;
    e.modality = modality_name(modality);
    e.reference = sample.labels;
    e.hypothesis = result.tokens;
    e.edits = edit_distance(e.reference, e.hypothesis);
    e.wer = utterance_wer(e.reference, e.hypothesis);
    acc.add(e.reference, e.hypothesis);
    report.entries.push_back(std::move(e));
  }
  report.corpus_wer = acc.corpus_wer();
  report.total_edits = acc.total_edits;
  report.total_ref = acc.total_ref;
  return report;
}

}  // namespace trispeech

#endif  // TRISPEECH_DECODE_HPP
