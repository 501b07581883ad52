#ifndef TRISPEECH_PRETRAIN_HPP
#define TRISPEECH_PRETRAIN_HPP

// Self-supervised pre-training: span masking, teacher target construction
// (block-averaged, instance-normalised), and the masked cosine loss.

#include <string>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/losses.hpp"
#include "trispeech/model.hpp"
#include "trispeech/rng.hpp"

namespace trispeech {

struct SpanMaskConfig {
  double start_prob = 0.4;
  int span_frames = 3;

  void validate() const {
    if (start_prob < 0.0 || start_prob > 1.0) throw ConfigError("start_prob must lie in [0,1]");
    if (span_frames < 1) throw ConfigError("span_frames must be >= 1");
  }
};

struct MaskSpec {
  std::vector<uint8_t> video;  // 1 = masked, per video frame
  std::vector<uint8_t> audio;  // the video mask upsampled by r
};

// Each video index starts a span of span_frames with probability start_prob;
// spans clip at the sequence end and union together. The audio mask is the
// r-fold upsampling of the video mask.
inline MaskSpec sample_span_mask(int64_t t_v, const SpanMaskConfig& cfg, int audio_rate_ratio,
                                 Rng& rng) {
  cfg.validate();
  MaskSpec spec;
  spec.video.assign(static_cast<size_t>(t_v), 0);
  for (int64_t i = 0; i < t_v; ++i)
    if (rng.bernoulli(cfg.start_prob))
      for (int64_t j = i; j < std::min(t_v, i + cfg.span_frames); ++j)
        spec.video[static_cast<size_t>(j)] = 1;
  spec.audio.assign(static_cast<size_t>(t_v * audio_rate_ratio), 0);
  for (int64_t i = 0; i < t_v; ++i)
    if (spec.video[static_cast<size_t>(i)])
      for (int64_t j = i * audio_rate_ratio; j < (i + 1) * audio_rate_ratio; ++j)
        spec.audio[static_cast<size_t>(j)] = 1;
  return spec;
}

// Zeroes the raw frames under the mask, so masked positions carry no sample
// information into the extractors' temporal receptive fields.
inline void zero_masked_frames(TensorData<float>* video, TensorData<float>* audio,
                               const MaskSpec& spec) {
  if (static_cast<int64_t>(spec.video.size()) != video->shape[0] ||
      static_cast<int64_t>(spec.audio.size()) != audio->shape[0])
    throw ShapeError("mask length does not match the sample");
  const int64_t vd = video->shape[1], ad = audio->shape[1];
  for (size_t t = 0; t < spec.video.size(); ++t)
    if (spec.video[t])
      std::fill_n(video->data.begin() + static_cast<int64_t>(t) * vd, vd, 0.0f);
  for (size_t t = 0; t < spec.audio.size(); ++t)
    if (spec.audio[t])
      std::fill_n(audio->data.begin() + static_cast<int64_t>(t) * ad, ad, 0.0f);
}

enum class TargetModality { AV, A, V };
inline const char* target_modality_name(TargetModality t) {
  switch (t) {
    case TargetModality::AV: return "av";
    case TargetModality::A: return "a";
    default: return "v";
  }
}
inline TargetModality target_modality_from(const std::string& s) {
  if (s == "av") return TargetModality::AV;
  if (s == "a") return TargetModality::A;
  if (s == "v") return TargetModality::V;
  throw ConfigError("unknown pretrain target modality '" + s + "'");
}

// e_b: per-block teacher encoder outputs averaged (or the last block alone),
// then instance-normalised per channel over time. Teacher runs frozen on the
// unmasked inputs; the same targets serve all three student modality
// predictions of the sample.
template <typename S>
TensorData<S> build_targets(ModelState<S>& teacher, const TensorData<float>& video,
                            const TensorData<float>& audio,
                            TargetModality target = TargetModality::AV,
                            bool average_blocks = true) {
  Graph<S> g;
  ModelRun<S> run(g, teacher, /*frozen=*/true);
  Tensor<S> features;
  switch (target) {
    case TargetModality::AV:
      features = run.fuse_av(run.extract_video(video), run.extract_audio(audio));
      break;
    case TargetModality::A: features = run.extract_audio(audio); break;
    case TargetModality::V: features = run.extract_video(video); break;
  }
  auto enc = run.encode(features);
  Tensor<S> acc;
  if (average_blocks) {
    for (auto& b : enc.block_outputs) acc = acc.valid() ? add(acc, b) : b;
    acc = scale(acc, S(1) / static_cast<S>(enc.block_outputs.size()));
  } else {
    acc = enc.block_outputs.back();
  }
  // Tighter eps than the model-side normalisations: targets must be unit
  // variance to ~1e-4 even for low-variance channels, and no gradient flows
  // through the teacher, so the small eps costs nothing numerically.
  auto normed = instance_norm(acc, S(1e-8));
  TensorData<S> out;
  out.shape = normed.shape();
  out.data = normed.values();
  return out;
}

// -(1/|masked|) * sum_t h_t cos(p_t, e_t) for one sample; zero-norm rows at
// masked positions contribute 0 with a logged warning.
template <typename S>
Tensor<S> masked_cosine_loss(Tensor<S> predictions, const TensorData<S>& targets,
                             const std::vector<uint8_t>& mask) {
  if (predictions.shape() != targets.shape)
    throw ShapeError("masked cosine: prediction shape " + shape_str(predictions.shape()) +
                     " vs target shape " + shape_str(targets.shape));
  const int64_t T = predictions.dim(0);
  if (static_cast<int64_t>(mask.size()) != T)
    throw ShapeError("masked cosine: mask length mismatch");
  Graph<S>& g = *predictions.graph();
  auto e = g.input(targets);
  auto dot_pe = rowwise_dot(predictions, e);
  auto dot_pp = rowwise_dot(predictions, predictions);
  auto dot_ee = rowwise_dot(e, e);
  auto cos_rows = mul(mul(dot_pe, rsqrt(dot_pp, S(1e-12))), rsqrt(dot_ee, S(1e-12)));

  std::vector<S> weights(static_cast<size_t>(T), S(0));
  int64_t kept = 0;
  for (int64_t t = 0; t < T; ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    if (dot_pp.value_at(t) <= S(1e-20) || dot_ee.value_at(t) <= S(1e-20)) {
      log_info("masked_cosine_loss: zero-norm vector at masked position " + std::to_string(t) +
               ", contributing 0");
      continue;
    }
    ++kept;
  }
  if (kept > 0) {
    const S w = S(-1) / static_cast<S>(kept);
    for (int64_t t = 0; t < T; ++t)
      if (mask[static_cast<size_t>(t)] && dot_pp.value_at(t) > S(1e-20) &&
          dot_ee.value_at(t) > S(1e-20))
        weights[static_cast<size_t>(t)] = w;
  }
  return weighted_sum(cos_rows, weights);
}

// Eq. 9: the same video-vs-rest blend as the supervised aggregate.
template <typename S>
Tensor<S> pretrain_loss(const PerModalityLosses<S>& per_mod, double lambda_v) {
  auto v = per_mod.at(Modality::V);
  auto a = per_mod.at(Modality::A);
  auto av = per_mod.at(Modality::AV);
  return add(scale(v, static_cast<S>(lambda_v)),
             scale(add(a, av), static_cast<S>(1.0 - lambda_v)));
}

}  // namespace trispeech

#endif  // TRISPEECH_PRETRAIN_HPP
