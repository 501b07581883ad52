#ifndef TRISPEECH_TRAIN_HPP
#define TRISPEECH_TRAIN_HPP

// The three training loops (supervised, semi-supervised, pre-training), the
// run manifest that pins every knob of a run, and JSONL metrics.
//
// Epochs are driven by the labelled stream for supervised and semi runs and
// by the unlabelled stream for pre-training. All randomness is drawn from
// streams derived per (seed, purpose, epoch, sample id), so the labelled
// data path of a semi run is draw-for-draw identical to the supervised run
// with the same seed, whatever happens on the unlabelled side.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "trispeech/data.hpp"
#include "trispeech/decode.hpp"
#include "trispeech/losses.hpp"
#include "trispeech/model.hpp"
#include "trispeech/model_io.hpp"
#include "trispeech/optim.hpp"
#include "trispeech/pretrain.hpp"
#include "trispeech/pseudo.hpp"

namespace trispeech {

struct RunManifest {
  std::string stage = "supervised";  // supervised | semi | pretrain
  std::string corpus_dir;
  std::string out_dir;
  std::string init_checkpoint;  // optional pre-training handoff for semi
  uint64_t seed = 42;
  std::string precision = "f32";  // f32 | f64

  ModelConfig model;
  LossWeights weights;
  OptimConfig optim;
  AugmentConfig augment;
  SpanMaskConfig span_mask;
  DecodeConfig decode;

  // EMA momentum start. The cosine ramp to 1 is fixed; 0.999 matches runs of
  // ~1e5 steps, where the teacher trails by ~1% of training. Desk runs are a
  // few hundred steps, so fixtures shrink the lag to keep the same timescale.
  double ema_mu0 = 0.999;

  // ablation and diagnostic knobs
  bool unshared = false;           // train on a single modality loss
  std::string only_modality = "v";
  int unlabelled_warmup_steps = 0;  // zero unlabelled losses for W steps
  bool ft_tricks = false;           // frozen extractors + layer-wise lr decay
  std::string pretrain_target = "av";
  bool pretrain_avg_blocks = true;
  int metrics_eval_utterances = 16;
  int eval_wer_every_epochs = 0;  // 0 = only the trainer's cheap eval metrics

  void validate() const {
    if (stage != "supervised" && stage != "semi" && stage != "pretrain")
      throw ConfigError("unknown stage '" + stage + "'");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be f32 or f64");
    if (unshared && only_modality != "v" && only_modality != "a" && only_modality != "av")
      throw ConfigError("only_modality must be one of v/a/av");
    if (ema_mu0 < 0.0 || ema_mu0 > 1.0) throw ConfigError("ema_mu0 must lie in [0,1]");
    weights.validate();
    optim.validate();
    augment.validate();
    span_mask.validate();
    decode.validate();
    model.validate();
  }

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

inline nlohmann::json RunManifest::to_json() const {
  nlohmann::json j;
  j["stage"] = stage;
  j["corpus_dir"] = corpus_dir;
  j["out_dir"] = out_dir;
  j["init_checkpoint"] = init_checkpoint;
  j["seed"] = seed;
  j["precision"] = precision;
  j["model"] = model_config_to_json(model);
  j["weights"] = {{"lambda_ctc", weights.lambda_ctc}, {"lambda_v", weights.lambda_v},
                  {"gamma_a", weights.gamma_a},       {"gamma_v", weights.gamma_v},
                  {"tau", weights.tau}};
  j["optim"] = {{"peak_lr", optim.peak_lr},
                {"warmup_epochs", optim.warmup_epochs},
                {"total_epochs", optim.total_epochs},
                {"beta1", optim.beta1},
                {"beta2", optim.beta2},
                {"weight_decay", optim.weight_decay},
                {"grad_clip", optim.grad_clip},
                {"batch_labelled", optim.batch_labelled},
                {"batch_unlabelled", optim.batch_unlabelled},
                {"frame_cap_labelled", optim.frame_cap_labelled},
                {"frame_cap_unlabelled", optim.frame_cap_unlabelled}};
  j["augment"] = {{"video_mask_max_frac", augment.video_mask_max_frac},
                  {"audio_mask_max_frac", augment.audio_mask_max_frac},
                  {"frames_per_second", augment.frames_per_second}};
  j["span_mask"] = {{"start_prob", span_mask.start_prob}, {"span_frames", span_mask.span_frames}};
  j["decode"] = {{"alpha", decode.alpha},
                 {"beam_size", decode.beam_size},
                 {"beta", decode.beta},
                 {"max_len_factor", decode.max_len_factor}};
  j["ema_mu0"] = ema_mu0;
  j["unshared"] = unshared;
  j["only_modality"] = only_modality;
  j["unlabelled_warmup_steps"] = unlabelled_warmup_steps;
  j["ft_tricks"] = ft_tricks;
  j["pretrain_target"] = pretrain_target;
  j["pretrain_avg_blocks"] = pretrain_avg_blocks;
  j["metrics_eval_utterances"] = metrics_eval_utterances;
  j["eval_wer_every_epochs"] = eval_wer_every_epochs;
  return j;
}

inline RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.stage = j.value("stage", m.stage);
  m.corpus_dir = j.value("corpus_dir", m.corpus_dir);
  m.out_dir = j.value("out_dir", m.out_dir);
  m.init_checkpoint = j.value("init_checkpoint", m.init_checkpoint);
  m.seed = j.value("seed", m.seed);
  m.precision = j.value("precision", m.precision);
  if (j.contains("model")) m.model = model_config_from_json(j.at("model"));
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    m.weights.lambda_ctc = w.value("lambda_ctc", m.weights.lambda_ctc);
    m.weights.lambda_v = w.value("lambda_v", m.weights.lambda_v);
    m.weights.gamma_a = w.value("gamma_a", m.weights.gamma_a);
    m.weights.gamma_v = w.value("gamma_v", m.weights.gamma_v);
    m.weights.tau = w.value("tau", m.weights.tau);
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    m.optim.peak_lr = o.value("peak_lr", m.optim.peak_lr);
    m.optim.warmup_epochs = o.value("warmup_epochs", m.optim.warmup_epochs);
    m.optim.total_epochs = o.value("total_epochs", m.optim.total_epochs);
    m.optim.beta1 = o.value("beta1", m.optim.beta1);
    m.optim.beta2 = o.value("beta2", m.optim.beta2);
    m.optim.weight_decay = o.value("weight_decay", m.optim.weight_decay);
    m.optim.grad_clip = o.value("grad_clip", m.optim.grad_clip);
    m.optim.batch_labelled = o.value("batch_labelled", m.optim.batch_labelled);
    m.optim.batch_unlabelled = o.value("batch_unlabelled", m.optim.batch_unlabelled);
    m.optim.frame_cap_labelled = o.value("frame_cap_labelled", m.optim.frame_cap_labelled);
    m.optim.frame_cap_unlabelled = o.value("frame_cap_unlabelled", m.optim.frame_cap_unlabelled);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    m.augment.video_mask_max_frac = a.value("video_mask_max_frac", m.augment.video_mask_max_frac);
    m.augment.audio_mask_max_frac = a.value("audio_mask_max_frac", m.augment.audio_mask_max_frac);
    m.augment.frames_per_second = a.value("frames_per_second", m.augment.frames_per_second);
  }
  if (j.contains("span_mask")) {
    const auto& s = j.at("span_mask");
    m.span_mask.start_prob = s.value("start_prob", m.span_mask.start_prob);
    m.span_mask.span_frames = s.value("span_frames", m.span_mask.span_frames);
  }
  if (j.contains("decode")) {
    const auto& d = j.at("decode");
    m.decode.alpha = d.value("alpha", m.decode.alpha);
    m.decode.beam_size = d.value("beam_size", m.decode.beam_size);
    m.decode.beta = d.value("beta", m.decode.beta);
    m.decode.max_len_factor = d.value("max_len_factor", m.decode.max_len_factor);
  }
  m.ema_mu0 = j.value("ema_mu0", m.ema_mu0);
  m.unshared = j.value("unshared", m.unshared);
  m.only_modality = j.value("only_modality", m.only_modality);
  m.unlabelled_warmup_steps = j.value("unlabelled_warmup_steps", m.unlabelled_warmup_steps);
  m.ft_tricks = j.value("ft_tricks", m.ft_tricks);
  m.pretrain_target = j.value("pretrain_target", m.pretrain_target);
  m.pretrain_avg_blocks = j.value("pretrain_avg_blocks", m.pretrain_avg_blocks);
  m.metrics_eval_utterances = j.value("metrics_eval_utterances", m.metrics_eval_utterances);
  m.eval_wer_every_epochs = j.value("eval_wer_every_epochs", m.eval_wer_every_epochs);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// metrics

struct MetricEvent {
  std::string stage;
  int64_t epoch;
  int64_t step;
  std::string split;
  std::string modality;
  std::string metric;
  double value;
};

class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw IoError("cannot open metrics file " + path);
    }
  }

  void log(const std::string& stage, int64_t epoch, int64_t step, const std::string& split,
           const std::string& modality, const std::string& metric, double value) {
    events_.push_back({stage, epoch, step, split, modality, metric, value});
    if (file_.is_open()) {
      nlohmann::json j = {{"stage", stage},   {"epoch", epoch},   {"step", step},
                          {"split", split},   {"modality", modality}, {"metric", metric},
                          {"value", value}};
      file_ << j.dump() << "\n";
    }
  }

  void flush() {
    if (file_.is_open()) file_.flush();
  }

  const std::vector<MetricEvent>& events() const { return events_; }

  std::vector<double> series(const std::string& metric, const std::string& modality = "",
                             const std::string& split = "") const {
    std::vector<double> out;
    for (const auto& e : events_)
      if (e.metric == metric && (modality.empty() || e.modality == modality) &&
          (split.empty() || e.split == split))
        out.push_back(e.value);
    return out;
  }

 private:
  std::ofstream file_;
  std::vector<MetricEvent> events_;
};

// ---------------------------------------------------------------------------
// batching: utterance-count batches under a video-frame cap

namespace detail {

inline std::vector<size_t> epoch_order(size_t n, uint64_t seed, const std::string& tag,
                                       int64_t epoch) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = derive_rng(seed, tag, {static_cast<uint64_t>(epoch)});
  for (size_t i = n; i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

template <typename SampleT>
std::vector<std::vector<size_t>> make_batches(const std::vector<SampleT>& samples,
                                              const std::vector<size_t>& order, int batch_size,
                                              int frame_cap) {
  std::vector<std::vector<size_t>> batches;
  std::vector<size_t> cur;
  int64_t frames = 0;
  for (size_t idx : order) {
    const int64_t t = samples[idx].video.shape[0];
    if (!cur.empty() &&
        (static_cast<int>(cur.size()) >= batch_size || frames + t > frame_cap)) {
      batches.push_back(cur);
      cur.clear();
      frames = 0;
    }
    cur.push_back(idx);
    frames += t;
  }
  if (!cur.empty()) batches.push_back(cur);
  return batches;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// training results

template <typename S>
struct TrainResult {
  ModelState<S> student;
  std::optional<ModelState<S>> teacher;
  int64_t total_steps = 0;
  int64_t skipped_steps = 0;
  double final_train_loss = 0.0;
};

namespace detail {

// Per-modality labelled losses for one batch: Eq. 1-3 with batch means.
// Infeasible-CTC samples are skipped from the CTC mean and counted.
template <typename S>
struct LabelledBatchLosses {
  PerModalityLosses<S> per_mod;
  int skipped_ctc = 0;
  std::map<Modality, double> ctc_value, attn_value;
};

template <typename S>
Tensor<S> feature_for(ModelRun<S>& run, Modality m, const TensorData<float>& video,
                      const TensorData<float>& audio) {
  switch (m) {
    case Modality::V: return run.extract_video(video);
    case Modality::A: return run.extract_audio(audio);
    default: return run.fuse_av(run.extract_video(video), run.extract_audio(audio));
  }
}

template <typename S>
LabelledBatchLosses<S> labelled_losses(ModelRun<S>& run, Graph<S>& g, const Vocab& vocab,
                                       const std::vector<const LabelledSample*>& batch,
                                       const std::vector<TensorData<float>>& aug_video,
                                       const std::vector<TensorData<float>>& aug_audio,
                                       const LossWeights& w,
                                       const std::vector<Modality>& modalities) {
  LabelledBatchLosses<S> out;
  // Extract per-sample features once; fused view reuses the v/a extractions.
  std::vector<Tensor<S>> fv(batch.size()), fa(batch.size()), fav(batch.size());
  const bool need_v = std::count(modalities.begin(), modalities.end(), Modality::V) ||
                      std::count(modalities.begin(), modalities.end(), Modality::AV);
  const bool need_a = std::count(modalities.begin(), modalities.end(), Modality::A) ||
                      std::count(modalities.begin(), modalities.end(), Modality::AV);
  for (size_t i = 0; i < batch.size(); ++i) {
    if (need_v) fv[i] = run.extract_video(aug_video[i]);
    if (need_a) fa[i] = run.extract_audio(aug_audio[i]);
    if (std::count(modalities.begin(), modalities.end(), Modality::AV))
      fav[i] = run.fuse_av(fv[i], fa[i]);
  }
  for (Modality m : modalities) {
    std::vector<Tensor<S>> ctc_terms, attn_terms;
    for (size_t i = 0; i < batch.size(); ++i) {
      Tensor<S> feats = m == Modality::V ? fv[i] : (m == Modality::A ? fa[i] : fav[i]);
      auto enc = run.encode(feats);
      auto lp = run.ctc_log_probs(enc.final);
      auto maybe = ctc_loss(lp, batch[i]->labels, vocab.blank());
      if (maybe.feasible) {
        ctc_terms.push_back(maybe.value);
      } else {
        ++out.skipped_ctc;
      }
      std::vector<int> y_in = {vocab.sos()};
      y_in.insert(y_in.end(), batch[i]->labels.begin(), batch[i]->labels.end());
      std::vector<int> targets = batch[i]->labels;
      targets.push_back(vocab.eos());
      auto logits = run.decode_teacher_forced(enc.final, y_in);
      attn_terms.push_back(attention_ce_loss(logits, targets));
    }
    auto ctc_mean = batch_mean(g, ctc_terms);
    auto attn_mean = batch_mean(g, attn_terms);
    out.per_mod.combined[m] = combine_modality(ctc_mean, attn_mean, w);
    out.ctc_value[m] = static_cast<double>(ctc_mean.scalar());
    out.attn_value[m] = static_cast<double>(attn_mean.scalar());
  }
  return out;
}

template <typename S>
void log_epoch_eval_metrics(const RunManifest& manifest, ModelState<S>& model, const Vocab& vocab,
                            const std::vector<LabelledSample>& eval_set, int64_t epoch,
                            int64_t step, MetricsWriter* metrics) {
  const size_t n = std::min<size_t>(eval_set.size(),
                                    static_cast<size_t>(manifest.metrics_eval_utterances));
  if (n == 0) return;
  for (Modality m : kModalities) {
    double correct = 0, total = 0, ctc_sum = 0;
    int ctc_count = 0;
    for (size_t i = 0; i < n; ++i) {
      const auto& s = eval_set[i];
      Graph<S> g;
      ModelRun<S> run(g, model, /*frozen=*/true);
      auto feats = feature_for(run, m, s.video, s.audio);
      auto enc = run.encode(feats);
      auto lp = run.ctc_log_probs(enc.final);
      auto maybe = ctc_loss(lp, s.labels, vocab.blank());
      if (maybe.feasible) {
        ctc_sum += static_cast<double>(maybe.value.scalar());
        ++ctc_count;
      }
      std::vector<int> y_in = {vocab.sos()};
      y_in.insert(y_in.end(), s.labels.begin(), s.labels.end());
      std::vector<int> targets = s.labels;
      targets.push_back(vocab.eos());
      auto logits = run.decode_teacher_forced(enc.final, y_in);
      const int64_t V = logits.dim(1);
      for (size_t t = 0; t < targets.size(); ++t) {
        int best = 0;
        S best_v = logits.value_at(static_cast<int64_t>(t) * V);
        for (int64_t v = 1; v < V; ++v)
          if (logits.value_at(static_cast<int64_t>(t) * V + v) > best_v) {
            best_v = logits.value_at(static_cast<int64_t>(t) * V + v);
            best = static_cast<int>(v);
          }
        correct += best == targets[t] ? 1 : 0;
        total += 1;
      }
    }
    metrics->log(manifest.stage, epoch, step, "eval", modality_name(m), "attn_accuracy",
                 total > 0 ? correct / total : 0.0);
    if (ctc_count > 0)
      metrics->log(manifest.stage, epoch, step, "eval", modality_name(m), "ctc_loss",
                   ctc_sum / ctc_count);
  }
}

template <typename S>
void log_epoch_wer(const RunManifest& manifest, ModelState<S>& model, const Vocab& vocab,
                   const std::vector<LabelledSample>& eval_set, int64_t epoch, int64_t step,
                   MetricsWriter* metrics) {
  if (manifest.eval_wer_every_epochs <= 0) return;
  if ((epoch + 1) % manifest.eval_wer_every_epochs != 0 &&
      epoch + 1 != manifest.optim.total_epochs)
    return;
  const size_t n = std::min<size_t>(eval_set.size(),
                                    static_cast<size_t>(manifest.metrics_eval_utterances));
  if (n == 0) return;
  std::vector<LabelledSample> subset(eval_set.begin(), eval_set.begin() + static_cast<long>(n));
  for (Modality m : kModalities) {
    auto rep = evaluate(model, subset, m, manifest.decode, vocab);
    metrics->log(manifest.stage, epoch, step, "eval", modality_name(m), "wer", rep.corpus_wer);
  }
}

inline void check_skip_budget(int64_t skipped, int64_t total) {
  if (total > 0 && static_cast<double>(skipped) > 0.01 * static_cast<double>(total))
    throw NumericError("non-finite loss in " + std::to_string(skipped) + " of " +
                       std::to_string(total) +
                       " steps (>1%); the run is numerically unstable");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// supervised training (Eq. 4), with the "unshared" single-modality ablation

template <typename S>
TrainResult<S> train_supervised(const RunManifest& manifest, const Corpus& corpus,
                                MetricsWriter* metrics) {
  manifest.validate();
  if (corpus.labelled.empty()) throw ConfigError("supervised training needs labelled data");
  const Vocab vocab(corpus.config.vocab_size);
  ModelState<S> model = ModelState<S>::init(manifest.model, manifest.seed);
  if (!manifest.init_checkpoint.empty()) {
    BlobFile f = BlobFile::load(manifest.init_checkpoint);
    unpack_model_subset(f, &model,
                        {"video_", "audio_", "proj_", "fuse", "enc.", "enc_ln", "mask_token"});
  }
  AdamW<S> opt(model, manifest.optim);

  std::vector<Modality> modalities;
  if (manifest.unshared) {
    modalities = {manifest.only_modality == "v"
                      ? Modality::V
                      : (manifest.only_modality == "a" ? Modality::A : Modality::AV)};
  } else {
    modalities = {Modality::V, Modality::A, Modality::AV};
  }

  const auto& lab = corpus.labelled;
  const int64_t steps_per_epoch = static_cast<int64_t>(detail::make_batches(
      lab, detail::epoch_order(lab.size(), manifest.seed, "shuffle_labelled", 0),
      manifest.optim.batch_labelled, manifest.optim.frame_cap_labelled).size());
  const int64_t total_steps = steps_per_epoch * manifest.optim.total_epochs;
  const int64_t warmup_steps = steps_per_epoch * manifest.optim.warmup_epochs;

  TrainResult<S> result{std::move(model), std::nullopt};
  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < manifest.optim.total_epochs; ++epoch) {
    auto order = detail::epoch_order(lab.size(), manifest.seed, "shuffle_labelled", epoch);
    auto batches = detail::make_batches(lab, order, manifest.optim.batch_labelled,
                                        manifest.optim.frame_cap_labelled);
    double epoch_loss = 0;
    int64_t epoch_steps = 0;
    for (const auto& batch_idx : batches) {
      std::vector<const LabelledSample*> batch;
      std::vector<TensorData<float>> aug_v, aug_a;
      for (size_t idx : batch_idx) {
        const auto& s = lab[idx];
        batch.push_back(&s);
        TensorData<float> v = s.video, a = s.audio;
        Rng rng = derive_rng(manifest.seed, "augment",
                             {static_cast<uint64_t>(epoch), static_cast<uint64_t>(s.id)});
        zero_mask_augment(&v, &a, manifest.augment, corpus.config.audio_rate_ratio, rng);
        aug_v.push_back(std::move(v));
        aug_a.push_back(std::move(a));
      }
      Graph<S> g;
      ModelRun<S> run(g, result.student);
      auto lb = detail::labelled_losses(run, g, vocab, batch, aug_v, aug_a, manifest.weights,
                                        modalities);
      Tensor<S> loss = manifest.unshared ? lb.per_mod.at(modalities[0])
                                         : supervised_loss(lb.per_mod, manifest.weights);
      const double loss_v = static_cast<double>(loss.scalar());
      ++result.total_steps;
      if (!std::isfinite(loss_v)) {
        ++result.skipped_steps;
        ++global_step;
        continue;
      }
      opt.zero_grad();
      g.backward(loss);
      const double lr = lr_schedule(global_step + 1, warmup_steps, total_steps,
                                    manifest.optim.peak_lr);
      if (!opt.step(lr)) ++result.skipped_steps;
      metrics->log(manifest.stage, epoch, global_step, "train", "all", "loss", loss_v);
      for (Modality m : modalities) {
        metrics->log(manifest.stage, epoch, global_step, "train", modality_name(m), "ctc_loss",
                     lb.ctc_value[m]);
        metrics->log(manifest.stage, epoch, global_step, "train", modality_name(m), "attn_loss",
                     lb.attn_value[m]);
      }
      epoch_loss += loss_v;
      ++epoch_steps;
      ++global_step;
    }
    metrics->log(manifest.stage, epoch, global_step, "train", "all", "epoch_loss",
                 epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0);
    metrics->log(manifest.stage, epoch, global_step, "train", "all", "lr",
                 lr_schedule(global_step, warmup_steps, total_steps, manifest.optim.peak_lr));
    detail::log_epoch_eval_metrics(manifest, result.student, vocab, corpus.eval, epoch,
                                   global_step, metrics);
    detail::log_epoch_wer(manifest, result.student, vocab, corpus.eval, epoch, global_step,
                          metrics);
    result.final_train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
  }
  detail::check_skip_budget(result.skipped_steps, result.total_steps);
  metrics->flush();
  return result;
}

// ---------------------------------------------------------------------------
// semi-supervised training (Eq. 7) with the EMA teacher

template <typename S>
TrainResult<S> train_semi(const RunManifest& manifest, const Corpus& corpus,
                          MetricsWriter* metrics) {
  manifest.validate();
  if (corpus.labelled.empty()) throw ConfigError("semi training needs labelled data");
  if (corpus.unlabelled.empty()) {
    log_info("no unlabelled data: semi-supervised training falls back to supervised");
    RunManifest fallback = manifest;
    fallback.stage = "supervised";
    return train_supervised<S>(fallback, corpus, metrics);
  }
  const Vocab vocab(corpus.config.vocab_size);
  ModelState<S> student = ModelState<S>::init(manifest.model, manifest.seed);
  if (!manifest.init_checkpoint.empty()) {
    BlobFile f = BlobFile::load(manifest.init_checkpoint);
    unpack_model_subset(f, &student,
                        {"video_", "audio_", "proj_", "fuse", "enc.", "enc_ln", "mask_token"});
  }
  ModelState<S> teacher = student;  // mean-teacher start: a copy
  AdamW<S> opt(student, manifest.optim);
  if (manifest.ft_tricks) {
    // layer-wise lr decay from the top encoder block down; extractors frozen
    const int nb = manifest.model.encoder_blocks;
    opt.set_lr_multipliers([nb](const std::string& name) -> double {
      if (name.rfind("video_", 0) == 0 || name.rfind("audio_", 0) == 0 ||
          name.rfind("proj_", 0) == 0 || name.rfind("fuse", 0) == 0)
        return 0.0;
      if (name.rfind("enc.", 0) == 0) {
        const int blk = std::stoi(name.substr(4, name.find('.', 4) - 4));
        return std::pow(0.65, nb - 1 - blk);
      }
      return 1.0;
    });
  }

  const std::vector<Modality> modalities = {Modality::V, Modality::A, Modality::AV};
  const auto& lab = corpus.labelled;
  const auto& unlab = corpus.unlabelled;
  const int64_t steps_per_epoch = static_cast<int64_t>(detail::make_batches(
      lab, detail::epoch_order(lab.size(), manifest.seed, "shuffle_labelled", 0),
      manifest.optim.batch_labelled, manifest.optim.frame_cap_labelled).size());
  const int64_t total_steps = steps_per_epoch * manifest.optim.total_epochs;
  const int64_t warmup_steps = steps_per_epoch * manifest.optim.warmup_epochs;

  TrainResult<S> result{std::move(student), std::nullopt};
  int64_t global_step = 0;
  size_t unlab_cursor = 0;
  std::vector<size_t> unlab_order =
      detail::epoch_order(unlab.size(), manifest.seed, "shuffle_unlabelled", 0);
  int64_t unlab_pass = 0;

  for (int64_t epoch = 0; epoch < manifest.optim.total_epochs; ++epoch) {
    auto order = detail::epoch_order(lab.size(), manifest.seed, "shuffle_labelled", epoch);
    auto batches = detail::make_batches(lab, order, manifest.optim.batch_labelled,
                                        manifest.optim.frame_cap_labelled);
    double epoch_loss = 0;
    int64_t epoch_steps = 0;
    KeptStats kept_ctc, kept_attn;
    double conf_ctc_sum = 0, conf_attn_sum = 0;
    int64_t conf_ctc_n = 0, conf_attn_n = 0;

    for (const auto& batch_idx : batches) {
      // labelled half: identical streams to the supervised loop
      std::vector<const LabelledSample*> lab_batch;
      std::vector<TensorData<float>> lab_v, lab_a;
      for (size_t idx : batch_idx) {
        const auto& s = lab[idx];
        lab_batch.push_back(&s);
        TensorData<float> v = s.video, a = s.audio;
        Rng rng = derive_rng(manifest.seed, "augment",
                             {static_cast<uint64_t>(epoch), static_cast<uint64_t>(s.id)});
        zero_mask_augment(&v, &a, manifest.augment, corpus.config.audio_rate_ratio, rng);
        lab_v.push_back(std::move(v));
        lab_a.push_back(std::move(a));
      }
      // unlabelled half: cycle the shuffled pool
      std::vector<const UnlabelledSample*> unlab_batch;
      int64_t frames = 0;
      while (static_cast<int>(unlab_batch.size()) < manifest.optim.batch_unlabelled) {
        if (unlab_cursor >= unlab_order.size()) {
          ++unlab_pass;
          unlab_order = detail::epoch_order(unlab.size(), manifest.seed, "shuffle_unlabelled",
                                            unlab_pass);
          unlab_cursor = 0;
        }
        const auto& s = unlab[unlab_order[unlab_cursor]];
        if (!unlab_batch.empty() &&
            frames + s.video.shape[0] > manifest.optim.frame_cap_unlabelled)
          break;
        unlab_batch.push_back(&s);
        frames += s.video.shape[0];
        ++unlab_cursor;
      }

      // teacher pseudo-labels from unmasked AV inputs, one forward per sample
      std::vector<PseudoLabelSet> pseudo;
      pseudo.reserve(unlab_batch.size());
      for (const auto* s : unlab_batch) {
        pseudo.push_back(generate_pseudo_labels(teacher, s->video, s->audio, vocab.sos(),
                                                vocab.eos(), manifest.weights.tau,
                                                s->video.shape[0] + 2));
        kept_ctc.add(pseudo.back().ctc_kept);
        kept_attn.add(pseudo.back().attn_kept);
        for (float c : pseudo.back().ctc_conf) {
          conf_ctc_sum += c;
          ++conf_ctc_n;
        }
        for (float c : pseudo.back().attn_conf) {
          conf_attn_sum += c;
          ++conf_attn_n;
        }
      }

      Graph<S> g;
      ModelRun<S> run(g, result.student);
      auto lb = detail::labelled_losses(run, g, vocab, lab_batch, lab_v, lab_a, manifest.weights,
                                        modalities);

      // student on masked unlabelled inputs, all three modalities
      PerModalityLosses<S> unlab_losses;
      const bool warmup_zero = global_step < manifest.unlabelled_warmup_steps;
      {
        std::vector<Tensor<S>> fv(unlab_batch.size()), fa(unlab_batch.size()),
            fav(unlab_batch.size());
        for (size_t i = 0; i < unlab_batch.size(); ++i) {
          const auto* s = unlab_batch[i];
          TensorData<float> v = s->video, a = s->audio;
          Rng rng = derive_rng(manifest.seed, "augment",
                               {static_cast<uint64_t>(epoch), static_cast<uint64_t>(s->id)});
          zero_mask_augment(&v, &a, manifest.augment, corpus.config.audio_rate_ratio, rng);
          fv[i] = run.extract_video(v);
          fa[i] = run.extract_audio(a);
          fav[i] = run.fuse_av(fv[i], fa[i]);
        }
        for (Modality m : modalities) {
          std::vector<Tensor<S>> ctc_terms, attn_terms;
          for (size_t i = 0; i < unlab_batch.size(); ++i) {
            Tensor<S> feats = m == Modality::V ? fv[i] : (m == Modality::A ? fa[i] : fav[i]);
            auto enc = run.encode(feats);
            auto lp = run.ctc_log_probs(enc.final);
            ctc_terms.push_back(unlabelled_ctc_loss(lp, pseudo[i].ctc_frames,
                                                    pseudo[i].ctc_kept));
            std::vector<int> y_in = {vocab.sos()};
            if (pseudo[i].attn_tokens.size() > 1)
              y_in.insert(y_in.end(), pseudo[i].attn_tokens.begin(),
                          pseudo[i].attn_tokens.end() - 1);
            auto logits = run.decode_teacher_forced(enc.final, y_in);
            attn_terms.push_back(unlabelled_attention_loss(logits, pseudo[i].attn_tokens,
                                                           pseudo[i].attn_kept));
          }
          auto ctc_mean = batch_mean(g, ctc_terms);
          auto attn_mean = batch_mean(g, attn_terms);
          unlab_losses.combined[m] =
              warmup_zero ? g.scalar(S(0)) : combine_modality(ctc_mean, attn_mean,
                                                              manifest.weights);
        }
      }

      Tensor<S> loss = semi_loss(lb.per_mod, unlab_losses, manifest.weights);
      const double loss_v = static_cast<double>(loss.scalar());
      ++result.total_steps;
      if (!std::isfinite(loss_v)) {
        ++result.skipped_steps;
        ++global_step;
        continue;
      }
      opt.zero_grad();
      g.backward(loss);
      const double lr = lr_schedule(global_step + 1, warmup_steps, total_steps,
                                    manifest.optim.peak_lr);
      if (!opt.step(lr)) ++result.skipped_steps;
      const double mu = momentum_schedule(global_step, std::max<int64_t>(1, total_steps - 1), manifest.ema_mu0);
      ema_update(&teacher, result.student, mu);
      metrics->log(manifest.stage, epoch, global_step, "train", "all", "loss", loss_v);
      epoch_loss += loss_v;
      ++epoch_steps;
      ++global_step;
    }

    metrics->log(manifest.stage, epoch, global_step, "train", "all", "epoch_loss",
                 epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0);
    metrics->log(manifest.stage, epoch, global_step, "train", "all", "mu",
                 momentum_schedule(std::min(global_step, std::max<int64_t>(1, total_steps - 1)),
                                   std::max<int64_t>(1, total_steps - 1), manifest.ema_mu0));
    if (auto f = kept_ctc.fraction())
      metrics->log(manifest.stage, epoch, global_step, "train", "all", "kept_fraction_ctc", *f);
    if (auto f = kept_attn.fraction())
      metrics->log(manifest.stage, epoch, global_step, "train", "all", "kept_fraction_attn", *f);
    if (conf_ctc_n)
      metrics->log(manifest.stage, epoch, global_step, "train", "all", "mean_conf_ctc",
                   conf_ctc_sum / static_cast<double>(conf_ctc_n));
    if (conf_attn_n)
      metrics->log(manifest.stage, epoch, global_step, "train", "all", "mean_conf_attn",
                   conf_attn_sum / static_cast<double>(conf_attn_n));
    detail::log_epoch_eval_metrics(manifest, result.student, vocab, corpus.eval, epoch,
                                   global_step, metrics);
    detail::log_epoch_wer(manifest, result.student, vocab, corpus.eval, epoch, global_step,
                          metrics);
    result.final_train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
  }
  detail::check_skip_budget(result.skipped_steps, result.total_steps);
  result.teacher = std::move(teacher);
  metrics->flush();
  return result;
}

// ---------------------------------------------------------------------------
// self-supervised pre-training (Eq. 9)

template <typename S>
TrainResult<S> run_pretrain(const RunManifest& manifest, const Corpus& corpus,
                            MetricsWriter* metrics) {
  manifest.validate();
  if (corpus.unlabelled.empty()) throw ConfigError("pre-training needs unlabelled data");
  ModelState<S> student = ModelState<S>::init(manifest.model, manifest.seed);
  ModelState<S> teacher = student;
  AdamW<S> opt(student, manifest.optim);
  const TargetModality target = target_modality_from(manifest.pretrain_target);

  const auto& unlab = corpus.unlabelled;
  const int64_t steps_per_epoch = static_cast<int64_t>(detail::make_batches(
      unlab, detail::epoch_order(unlab.size(), manifest.seed, "shuffle_unlabelled", 0),
      manifest.optim.batch_unlabelled, manifest.optim.frame_cap_unlabelled).size());
  const int64_t total_steps = steps_per_epoch * manifest.optim.total_epochs;
  const int64_t warmup_steps = steps_per_epoch * manifest.optim.warmup_epochs;

  TrainResult<S> result{std::move(student), std::nullopt};
  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < manifest.optim.total_epochs; ++epoch) {
    auto order = detail::epoch_order(unlab.size(), manifest.seed, "shuffle_unlabelled", epoch);
    auto batches = detail::make_batches(unlab, order, manifest.optim.batch_unlabelled,
                                        manifest.optim.frame_cap_unlabelled);
    double epoch_loss = 0;
    double masked_frac_sum = 0;
    int64_t masked_frac_n = 0;
    int64_t epoch_steps = 0;
    for (const auto& batch_idx : batches) {
      // teacher targets from unmasked inputs; one per sample, shared by the
      // three student modality predictions
      std::vector<const UnlabelledSample*> batch;
      std::vector<TensorData<S>> targets;
      std::vector<MaskSpec> masks;
      for (size_t idx : batch_idx) {
        const auto& s = unlab[idx];
        batch.push_back(&s);
        targets.push_back(build_targets(teacher, s.video, s.audio, target,
                                        manifest.pretrain_avg_blocks));
        Rng rng = derive_rng(manifest.seed, "spanmask",
                             {static_cast<uint64_t>(epoch), static_cast<uint64_t>(s.id)});
        masks.push_back(sample_span_mask(s.video.shape[0], manifest.span_mask,
                                         corpus.config.audio_rate_ratio, rng));
        int64_t masked = 0;
        for (uint8_t h : masks.back().video) masked += h;
        masked_frac_sum += static_cast<double>(masked) /
                           static_cast<double>(masks.back().video.size());
        ++masked_frac_n;
      }

      Graph<S> g;
      ModelRun<S> run(g, result.student);
      PerModalityLosses<S> per_mod;
      std::map<Modality, double> mod_loss_value;
      std::vector<Tensor<S>> fv(batch.size()), fa(batch.size()), fav(batch.size());
      for (size_t i = 0; i < batch.size(); ++i) {
        TensorData<float> v = batch[i]->video, a = batch[i]->audio;
        zero_masked_frames(&v, &a, masks[i]);
        fv[i] = run.apply_mask_token(run.extract_video(v), masks[i].video);
        fa[i] = run.apply_mask_token(run.extract_audio(a), masks[i].video);
        fav[i] = run.apply_mask_token(run.fuse_av(fv[i], fa[i]), masks[i].video);
      }
      for (Modality m : kModalities) {
        std::vector<Tensor<S>> terms;
        for (size_t i = 0; i < batch.size(); ++i) {
          Tensor<S> feats = m == Modality::V ? fv[i] : (m == Modality::A ? fa[i] : fav[i]);
          auto pred = run.predictor_forward(run.encode(feats).final);
          terms.push_back(masked_cosine_loss(pred, targets[i], masks[i].video));
        }
        per_mod.combined[m] = batch_mean(g, terms);
        mod_loss_value[m] = static_cast<double>(per_mod.combined[m].scalar());
      }
      Tensor<S> loss = pretrain_loss(per_mod, manifest.weights.lambda_v);
      const double loss_v = static_cast<double>(loss.scalar());
      ++result.total_steps;
      if (!std::isfinite(loss_v)) {
        ++result.skipped_steps;
        ++global_step;
        continue;
      }
      opt.zero_grad();
      g.backward(loss);
      const double lr = lr_schedule(global_step + 1, warmup_steps, total_steps,
                                    manifest.optim.peak_lr);
      if (!opt.step(lr)) ++result.skipped_steps;
      const double mu = momentum_schedule(global_step, std::max<int64_t>(1, total_steps - 1), manifest.ema_mu0);
      ema_update(&teacher, result.student, mu);
      metrics->log(manifest.stage, epoch, global_step, "train", "all", "loss", loss_v);
      for (Modality m : kModalities)
        metrics->log(manifest.stage, epoch, global_step, "train", modality_name(m),
                     "cosine_loss", mod_loss_value[m]);
      epoch_loss += loss_v;
      ++epoch_steps;
      ++global_step;
    }
    metrics->log(manifest.stage, epoch, global_step, "train", "all", "epoch_loss",
                 epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0);
    metrics->log(manifest.stage, epoch, global_step, "train", "all", "masked_fraction",
                 masked_frac_n ? masked_frac_sum / static_cast<double>(masked_frac_n) : 0.0);
    metrics->log(manifest.stage, epoch, global_step, "train", "all", "mu",
                 momentum_schedule(std::min(global_step, std::max<int64_t>(1, total_steps - 1)),
                                   std::max<int64_t>(1, total_steps - 1), manifest.ema_mu0));
    metrics->log(manifest.stage, epoch, global_step, "train", "all", "lr",
                 lr_schedule(global_step, warmup_steps, total_steps, manifest.optim.peak_lr));
    result.final_train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
  }
  detail::check_skip_budget(result.skipped_steps, result.total_steps);
  result.teacher = std::move(teacher);
  metrics->flush();
  return result;
}

}  // namespace trispeech

#endif  // TRISPEECH_TRAIN_HPP
