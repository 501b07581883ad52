#ifndef TRISPEECH_PSEUDO_HPP
#define TRISPEECH_PSEUDO_HPP

// EMA teacher maintenance and greedy pseudo-label generation with token-wise
// confidence filtering. One teacher forward on the unmasked audiovisual view
// serves the CTC stream, the attention stream, and all three student
// modality losses.

#include <atomic>
#include <cmath>
#include <optional>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/model.hpp"

namespace trispeech {

// theta_t <- mu * theta_t + (1 - mu) * theta_s, elementwise over every
// parameter. mu = 0 copies the student outright.
template <typename S>
void ema_update(ModelState<S>* teacher, ModelState<S>& student, double mu) {
  if (mu < 0.0 || mu > 1.0) throw ContractError("ema momentum must lie in [0,1]");
  std::vector<TensorData<S>*> t_params, s_params;
  std::vector<std::string> t_names, s_names;
  teacher->visit([&](const std::string& n, TensorData<S>& t) {
    t_params.push_back(&t);
    t_names.push_back(n);
  });
  student.visit([&](const std::string& n, TensorData<S>& t) {
    s_params.push_back(&t);
    s_names.push_back(n);
  });
  if (t_names != s_names) throw ContractError("teacher/student parameter structures differ");
  const S m = static_cast<S>(mu);
  for (size_t i = 0; i < t_params.size(); ++i) {
    if (t_params[i]->shape != s_params[i]->shape)
      throw ContractError("teacher/student shape mismatch at " + t_names[i]);
    auto& td = t_params[i]->data;
    const auto& sd = s_params[i]->data;
    for (size_t k = 0; k < td.size(); ++k) td[k] = m * td[k] + (S(1) - m) * sd[k];
  }
}

// Cosine ramp from mu0 at step 0 to exactly 1 at total_steps.
inline double momentum_schedule(int64_t step, int64_t total_steps, double mu0 = 0.999) {
  if (step < 0 || step > total_steps) throw ContractError("momentum step outside [0, total]");
  if (step == 0) return mu0;
  if (step == total_steps) return 1.0;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 1.0 - (1.0 - mu0) * (std::cos(M_PI * t) + 1.0) / 2.0;
}

struct PseudoLabelSet {
  std::vector<int> ctc_frames;      // per-frame argmax of the teacher CTC head
  std::vector<float> ctc_conf;      // its probability
  std::vector<uint8_t> ctc_kept;    // conf >= tau
  std::vector<int> attn_tokens;     // greedy sequence, ends at eos or the cap
  std::vector<float> attn_conf;
  std::vector<uint8_t> attn_kept;
  bool attn_hit_cap = false;
  // per-step teacher distributions, kept for replay-style diagnostics
  std::vector<std::vector<float>> attn_step_probs;
};

inline std::vector<uint8_t> confidence_filter(const std::vector<float>& conf, double tau) {
  if (tau < 0.0 || tau > 1.0) throw ContractError("tau must lie in [0,1]");
  std::vector<uint8_t> kept(conf.size());
  for (size_t i = 0; i < conf.size(); ++i) kept[i] = conf[i] >= tau ? 1 : 0;
  return kept;
}

// Kept-token bookkeeping over a logging window; an empty window reports
// absent rather than zero.
struct KeptStats {
  int64_t kept = 0;
  int64_t total = 0;
  void add(const std::vector<uint8_t>& mask) {
    for (uint8_t m : mask) kept += m ? 1 : 0;
    total += static_cast<int64_t>(mask.size());
  }
  std::optional<double> fraction() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(kept) / static_cast<double>(total);
  }
  void reset() { kept = total = 0; }
};

// Counts teacher encoder forwards so the per-step amortisation contract
// (exactly one per unlabelled sample) stays auditable.
inline std::atomic<uint64_t>& teacher_forward_count() {
  static std::atomic<uint64_t> count{0};
  return count;
}

// Runs the frozen teacher once on the unmasked audiovisual view and derives
// both pseudo-label streams. Greedy attention decoding feeds each argmax back
// as the next input token; eos, if produced, is kept with its confidence.
template <typename S>
PseudoLabelSet generate_pseudo_labels(ModelState<S>& teacher, const TensorData<float>& video,
                                      const TensorData<float>& audio, int sos, int eos,
                                      double tau, int64_t max_len) {
  teacher_forward_count().fetch_add(1, std::memory_order_relaxed);
  Graph<S> g;
  ModelRun<S> run(g, teacher, /*frozen=*/true);
  auto fav = run.fuse_av(run.extract_video(video), run.extract_audio(audio));
  auto enc = run.encode(fav);

  PseudoLabelSet out;
  // CTC stream: per-frame argmax over the full vocabulary (blank included).
  auto ctc_lp = run.ctc_log_probs(enc.final);
  const int64_t T = ctc_lp.dim(0), V = ctc_lp.dim(1);
  for (int64_t t = 0; t < T; ++t) {
    int best = 0;
    S best_lp = ctc_lp.value_at(t * V);
    for (int64_t v = 1; v < V; ++v)
      if (ctc_lp.value_at(t * V + v) > best_lp) {
        best_lp = ctc_lp.value_at(t * V + v);
        best = static_cast<int>(v);
      }
    out.ctc_frames.push_back(best);
    out.ctc_conf.push_back(static_cast<float>(std::exp(static_cast<double>(best_lp))));
  }
  out.ctc_kept = confidence_filter(out.ctc_conf, tau);

  // Attention stream: greedy autoregressive decode from sos.
  std::vector<int> prefix = {sos};
  for (int64_t step = 0; step < max_len; ++step) {
    auto logits = run.decode_teacher_forced(enc.final, prefix);
    auto probs = softmax(logits, 1);
    const int64_t row = (logits.dim(0) - 1) * V;
    int best = 0;
    S best_p = probs.value_at(row);
    std::vector<float> dist(static_cast<size_t>(V));
    for (int64_t v = 0; v < V; ++v) {
      dist[static_cast<size_t>(v)] = static_cast<float>(probs.value_at(row + v));
      if (probs.value_at(row + v) > best_p) {
        best_p = probs.value_at(row + v);
        best = static_cast<int>(v);
      }
    }
    out.attn_step_probs.push_back(std::move(dist));
    out.attn_tokens.push_back(best);
    out.attn_conf.push_back(static_cast<float>(best_p));
    if (best == eos) break;
    prefix.push_back(best);
  }
  out.attn_hit_cap = out.attn_tokens.empty() || out.attn_tokens.back() != eos;
  out.attn_kept = confidence_filter(out.attn_conf, tau);
  return out;
}

}  // namespace trispeech

#endif  // TRISPEECH_PSEUDO_HPP
