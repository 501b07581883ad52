#ifndef TRISPEECH_MODEL_HPP
#define TRISPEECH_MODEL_HPP

// Modality feature extractors, audiovisual fusion, the shared pre-LN
// transformer encoder-decoder, the CTC head, and the pre-training predictor.
// One ModelState serves all three modality paths; the teacher is a structural
// twin updated by EMA, never by gradients.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/rng.hpp"
#include "trispeech/tensor.hpp"

namespace trispeech {

enum class Modality { V = 0, A = 1, AV = 2 };
inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::V: return "v";
    case Modality::A: return "a";
    default: return "av";
  }
}
inline constexpr Modality kModalities[3] = {Modality::V, Modality::A, Modality::AV};

struct ModelConfig {
  int encoder_blocks = 4;
  int decoder_blocks = 2;
  int attn_dim = 64;
  int attn_heads = 4;
  int mlp_dim = 128;
  int predictor_blocks = 2;
  int predictor_dim = 64;
  int vocab_total = 24;  // content vocab + blank/sos/eos/pad
  int video_dim = 16;
  int audio_dim = 8;
  int audio_rate_ratio = 4;
  std::string preset = "desk";

  static ModelConfig desk() { return ModelConfig{}; }
  static ModelConfig base() {
    ModelConfig c;
    c.encoder_blocks = 12;
    c.decoder_blocks = 6;
    c.attn_dim = 512;
    c.attn_heads = 8;
    c.mlp_dim = 2048;
    c.predictor_dim = 512;
    c.preset = "base";
    return c;
  }

  void validate() const {
    if (attn_dim % attn_heads != 0) throw ConfigError("attn_dim must divide by attn_heads");
    if (encoder_blocks < 1 || decoder_blocks < 1 || predictor_blocks < 1)
      throw ConfigError("block counts must be positive");
    if (vocab_total < 6) throw ConfigError("vocab_total must cover content plus reserved ids");
    if (audio_rate_ratio < 1) throw ConfigError("audio_rate_ratio must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// parameter containers

template <typename S>
struct LinearP {
  TensorData<S> w;  // [in, out]
  TensorData<S> b;  // [out]
};

template <typename S>
struct ConvP {
  TensorData<S> w;  // [out, in, k]
  TensorData<S> b;  // [out]
  int64_t stride = 1, pad_l = 0, pad_r = 0;
};

template <typename S>
struct NormP {
  TensorData<S> gain;
  TensorData<S> bias;
};

template <typename S>
struct AttnP {
  NormP<S> ln;
  LinearP<S> q, k, v, o;
};

template <typename S>
struct MlpP {
  NormP<S> ln;
  LinearP<S> fc1, fc2;
};

template <typename S>
struct EncBlockP {
  AttnP<S> self;
  MlpP<S> mlp;
};

template <typename S>
struct DecBlockP {
  AttnP<S> self;
  AttnP<S> cross;
  MlpP<S> mlp;
};

// Splits the audio stride r into two conv strides (s1 * s2 = r).
inline std::pair<int64_t, int64_t> split_stride(int64_t r) {
  int64_t s2 = 1;
  for (int64_t d = 1; d * d <= r; ++d)
    if (r % d == 0) s2 = d;
  return {r / s2, s2};
}

template <typename S>
struct ModelState {
  ModelConfig cfg;

  ConvP<S> video_conv;            // temporal depth-3 stem
  LinearP<S> video_fc1, video_fc2;
  ConvP<S> audio_conv1, audio_conv2;  // strided stack, total stride r
  LinearP<S> proj_v, proj_a;      // per-modality projections
  LinearP<S> fuse;                // [2D -> D] channel-concat fusion
  std::vector<EncBlockP<S>> encoder;
  NormP<S> enc_ln;
  TensorData<S> dec_embed;        // [vocab_total, D]
  std::vector<DecBlockP<S>> decoder;
  NormP<S> dec_ln;
  LinearP<S> dec_out;             // D -> vocab_total
  LinearP<S> ctc_head;            // D -> vocab_total
  std::vector<EncBlockP<S>> predictor;
  NormP<S> pred_ln;
  std::optional<LinearP<S>> pred_in, pred_out;  // present iff predictor_dim != attn_dim
  TensorData<S> mask_token;       // [D]

  static ModelState init(const ModelConfig& cfg, uint64_t seed);

  // Enumerates every parameter in a fixed order with stable names.
  void visit(const std::function<void(const std::string&, TensorData<S>&)>& fn);
  void visit_const(const std::function<void(const std::string&, const TensorData<S>&)>& fn) const {
    const_cast<ModelState*>(this)->visit(
        [&](const std::string& n, TensorData<S>& t) { fn(n, t); });
  }

  void zero_grads() {
    visit([](const std::string&, TensorData<S>& t) { t.zero_grad(); });
  }
};

// ---------------------------------------------------------------------------
// initialisation

namespace detail {

template <typename S>
TensorData<S> xavier(Shape shape, int64_t fan_in, int64_t fan_out, uint64_t seed,
                     const std::string& name) {
  Rng rng = derive_rng(seed, "init:" + name);
  auto t = TensorData<S>::zeros(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : t.data) x = static_cast<S>((rng.uniform() * 2.0 - 1.0) * limit);
  return t;
}

template <typename S>
LinearP<S> init_linear(int64_t in, int64_t out, uint64_t seed, const std::string& name) {
  return {xavier<S>({in, out}, in, out, seed, name), TensorData<S>::zeros({out})};
}

template <typename S>
NormP<S> init_norm(int64_t dim) {
  auto gain = TensorData<S>::zeros({dim});
  std::fill(gain.data.begin(), gain.data.end(), S(1));
  return {std::move(gain), TensorData<S>::zeros({dim})};
}

template <typename S>
ConvP<S> init_conv(int64_t cin, int64_t cout, int64_t stride, uint64_t seed,
                   const std::string& name) {
  ConvP<S> c;
  const int64_t k = 2 * stride + 1;
  c.w = xavier<S>({cout, cin, k}, cin * k, cout, seed, name);
  c.b = TensorData<S>::zeros({cout});
  c.stride = stride;
  // total padding k - stride keeps out = in / stride for stride-divisible input
  c.pad_l = (k - stride) / 2;
  c.pad_r = (k - stride) - c.pad_l;
  return c;
}

template <typename S>
AttnP<S> init_attn(int64_t dim, int64_t kv_dim, uint64_t seed, const std::string& name) {
  AttnP<S> a;
  a.ln = init_norm<S>(dim);
  a.q = init_linear<S>(dim, dim, seed, name + ".q");
  a.k = init_linear<S>(kv_dim, dim, seed, name + ".k");
  a.v = init_linear<S>(kv_dim, dim, seed, name + ".v");
  a.o = init_linear<S>(dim, dim, seed, name + ".o");
  return a;
}

template <typename S>
MlpP<S> init_mlp(int64_t dim, int64_t hidden, uint64_t seed, const std::string& name) {
  MlpP<S> m;
  m.ln = init_norm<S>(dim);
  m.fc1 = init_linear<S>(dim, hidden, seed, name + ".fc1");
  m.fc2 = init_linear<S>(hidden, dim, seed, name + ".fc2");
  return m;
}

}  // namespace detail

template <typename S>
ModelState<S> ModelState<S>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  using namespace detail;
  ModelState<S> m;
  m.cfg = cfg;
  const int64_t D = cfg.attn_dim;
  m.video_conv = init_conv<S>(cfg.video_dim, D, 1, seed, "video_conv");
  m.video_fc1 = init_linear<S>(D, D, seed, "video_fc1");
  m.video_fc2 = init_linear<S>(D, D, seed, "video_fc2");
  auto [s1, s2] = split_stride(cfg.audio_rate_ratio);
  m.audio_conv1 = init_conv<S>(cfg.audio_dim, D, s1, seed, "audio_conv1");
  m.audio_conv2 = init_conv<S>(D, D, s2, seed, "audio_conv2");
  m.proj_v = init_linear<S>(D, D, seed, "proj_v");
  m.proj_a = init_linear<S>(D, D, seed, "proj_a");
  m.fuse = init_linear<S>(2 * D, D, seed, "fuse");
  for (int i = 0; i < cfg.encoder_blocks; ++i) {
    const std::string p = "enc." + std::to_string(i);
    m.encoder.push_back({init_attn<S>(D, D, seed, p + ".self"), init_mlp<S>(D, cfg.mlp_dim, seed, p + ".mlp")});
  }
  m.enc_ln = init_norm<S>(D);
  m.dec_embed = xavier<S>({cfg.vocab_total, D}, cfg.vocab_total, D, seed, "dec_embed");
  for (int i = 0; i < cfg.decoder_blocks; ++i) {
    const std::string p = "dec." + std::to_string(i);
    m.decoder.push_back({init_attn<S>(D, D, seed, p + ".self"),
                         init_attn<S>(D, D, seed, p + ".cross"),
                         init_mlp<S>(D, cfg.mlp_dim, seed, p + ".mlp")});
  }
  m.dec_ln = init_norm<S>(D);
  m.dec_out = init_linear<S>(D, cfg.vocab_total, seed, "dec_out");
  m.ctc_head = init_linear<S>(D, cfg.vocab_total, seed, "ctc_head");
  const int64_t P = cfg.predictor_dim;
  for (int i = 0; i < cfg.predictor_blocks; ++i) {
    const std::string p = "pred." + std::to_string(i);
    m.predictor.push_back({init_attn<S>(P, P, seed, p + ".self"), init_mlp<S>(P, cfg.mlp_dim, seed, p + ".mlp")});
  }
  m.pred_ln = init_norm<S>(P);
  if (P != D) {
    m.pred_in = init_linear<S>(D, P, seed, "pred_in");
    m.pred_out = init_linear<S>(P, D, seed, "pred_out");
  }
  {
    Rng rng = derive_rng(seed, "init:mask_token");
    m.mask_token = TensorData<S>::zeros({D});
    for (auto& x : m.mask_token.data) x = static_cast<S>(rng.normal(0.0, 0.02));
  }
  return m;
}

template <typename S>
void ModelState<S>::visit(const std::function<void(const std::string&, TensorData<S>&)>& fn) {
  auto lin = [&](const std::string& n, LinearP<S>& l) {
    fn(n + ".w", l.w);
    fn(n + ".b", l.b);
  };
  auto conv = [&](const std::string& n, ConvP<S>& c) {
    fn(n + ".w", c.w);
    fn(n + ".b", c.b);
  };
  auto norm = [&](const std::string& n, NormP<S>& x) {
    fn(n + ".gain", x.gain);
    fn(n + ".bias", x.bias);
  };
  auto attn = [&](const std::string& n, AttnP<S>& a) {
    norm(n + ".ln", a.ln);
    lin(n + ".q", a.q);
    lin(n + ".k", a.k);
    lin(n + ".v", a.v);
    lin(n + ".o", a.o);
  };
  auto mlp = [&](const std::string& n, MlpP<S>& m) {
    norm(n + ".ln", m.ln);
    lin(n + ".fc1", m.fc1);
    lin(n + ".fc2", m.fc2);
  };
  conv("video_conv", video_conv);
  lin("video_fc1", video_fc1);
  lin("video_fc2", video_fc2);
  conv("audio_conv1", audio_conv1);
  conv("audio_conv2", audio_conv2);
  lin("proj_v", proj_v);
  lin("proj_a", proj_a);
  lin("fuse", fuse);
  for (size_t i = 0; i < encoder.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    attn(p + ".self", encoder[i].self);
    mlp(p + ".mlp", encoder[i].mlp);
  }
  norm("enc_ln", enc_ln);
  fn("dec_embed", dec_embed);
  for (size_t i = 0; i < decoder.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    attn(p + ".self", decoder[i].self);
    attn(p + ".cross", decoder[i].cross);
    mlp(p + ".mlp", decoder[i].mlp);
  }
  norm("dec_ln", dec_ln);
  lin("dec_out", dec_out);
  lin("ctc_head", ctc_head);
  for (size_t i = 0; i < predictor.size(); ++i) {
    const std::string p = "pred." + std::to_string(i);
    attn(p + ".self", predictor[i].self);
    mlp(p + ".mlp", predictor[i].mlp);
  }
  norm("pred_ln", pred_ln);
  if (pred_in) lin("pred_in", *pred_in);
  if (pred_out) lin("pred_out", *pred_out);
  fn("mask_token", mask_token);
}

// ---------------------------------------------------------------------------
// forward passes

template <typename S>
Tensor<S> input_cast(Graph<S>& g, const TensorData<float>& t) {
  std::vector<S> v(t.data.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(t.data[i]);
  return g.input(t.shape, v, false);
}

template <typename S>
struct EncodeResult {
  Tensor<S> final;                      // after the closing layer norm
  std::vector<Tensor<S>> block_outputs; // raw residual-stream output per block
};

// Binds a graph to a model. A frozen run (the teacher) lifts parameters as
// plain inputs, so nothing it computes can ever receive gradient.
template <typename S>
class ModelRun {
 public:
  ModelRun(Graph<S>& g, ModelState<S>& m, bool frozen = false)
      : g_(g), m_(m), frozen_(frozen) {}

  Graph<S>& graph() { return g_; }
  const ModelConfig& cfg() const { return m_.cfg; }

  Tensor<S> P(TensorData<S>& p) { return frozen_ ? g_.input(p.shape, p.data) : g_.param(p); }

  Tensor<S> linear(Tensor<S> x, LinearP<S>& l) { return add_row(matmul(x, P(l.w)), P(l.b)); }

  Tensor<S> norm(Tensor<S> x, NormP<S>& n) {
    return layer_norm(x, P(n.gain), P(n.bias), S(1e-5));
  }

  // Per-modality extractor outputs, projection included; temporal length of
  // the video input is the reference clock for everything downstream.
  Tensor<S> extract_video(const TensorData<float>& video) {
    Tensor<S> x = input_cast(g_, video);
    x = gelu(conv1d(x, P(m_.video_conv.w), P(m_.video_conv.b), m_.video_conv.stride,
                    m_.video_conv.pad_l, m_.video_conv.pad_r));
    x = gelu(linear(x, m_.video_fc1));
    x = linear(x, m_.video_fc2);
    return linear(x, m_.proj_v);
  }

  Tensor<S> extract_audio(const TensorData<float>& audio) {
    if (audio.shape[0] % m_.cfg.audio_rate_ratio != 0)
      throw ShapeError("audio length " + std::to_string(audio.shape[0]) +
                       " not divisible by rate ratio " +
                       std::to_string(m_.cfg.audio_rate_ratio));
    Tensor<S> x = input_cast(g_, audio);
    x = gelu(conv1d(x, P(m_.audio_conv1.w), P(m_.audio_conv1.b), m_.audio_conv1.stride,
                    m_.audio_conv1.pad_l, m_.audio_conv1.pad_r));
    x = gelu(conv1d(x, P(m_.audio_conv2.w), P(m_.audio_conv2.b), m_.audio_conv2.stride,
                    m_.audio_conv2.pad_l, m_.audio_conv2.pad_r));
    return linear(x, m_.proj_a);
  }

  Tensor<S> fuse_av(Tensor<S> fv, Tensor<S> fa) {
    if (fv.dim(0) != fa.dim(0))
      throw ShapeError("fuse_av length mismatch: " + shape_str(fv.shape()) + " vs " +
                       shape_str(fa.shape()));
    return linear(concat_cols(fv, fa), m_.fuse);
  }

  // Replaces masked feature rows with the learned mask token.
  Tensor<S> apply_mask_token(Tensor<S> features, const std::vector<uint8_t>& masked) {
    const int64_t T = features.dim(0), D = features.dim(1);
    if (static_cast<int64_t>(masked.size()) != T)
      throw ShapeError("mask length must equal feature length");
    std::vector<S> keep(static_cast<size_t>(T * D)), take(static_cast<size_t>(T * D));
    for (int64_t t = 0; t < T; ++t)
      for (int64_t d = 0; d < D; ++d) {
        keep[static_cast<size_t>(t * D + d)] = masked[static_cast<size_t>(t)] ? S(0) : S(1);
        take[static_cast<size_t>(t * D + d)] = masked[static_cast<size_t>(t)] ? S(1) : S(0);
      }
    auto tok = matmul(g_.constant({T, 1}, std::vector<S>(static_cast<size_t>(T), S(1))),
                      transpose(reshape_vec(P(m_.mask_token))));
    return add(mul(features, g_.constant({T, D}, keep)), mul(tok, g_.constant({T, D}, take)));
  }

  EncodeResult<S> encode(Tensor<S> features, const std::vector<uint8_t>* valid = nullptr) {
    const int64_t T = features.dim(0);
    Tensor<S> x = add(features, positional_encoding(T, features.dim(1)));
    EncodeResult<S> out;
    for (auto& blk : m_.encoder) {
      x = add(x, self_attention(norm(x, blk.self.ln), blk.self, /*causal=*/false, valid));
      x = add(x, mlp_ff(x, blk.mlp));
      out.block_outputs.push_back(x);
    }
    out.final = norm(x, m_.enc_ln);
    return out;
  }

  // Teacher-forced decoder: y_in must begin with sos; logits cover the full
  // vocabulary including eos.
  Tensor<S> decode_teacher_forced(Tensor<S> enc_final, const std::vector<int>& y_in) {
    if (y_in.empty()) throw ContractError("decoder input must begin with sos");
    const int64_t T = static_cast<int64_t>(y_in.size());
    const int64_t D = m_.cfg.attn_dim;
    Tensor<S> x = scale(embed(P(m_.dec_embed), y_in), static_cast<S>(std::sqrt(double(D))));
    x = add(x, positional_encoding(T, D));
    for (auto& blk : m_.decoder) {
      x = add(x, self_attention(norm(x, blk.self.ln), blk.self, /*causal=*/true, nullptr));
      x = add(x, cross_attention(norm(x, blk.cross.ln), enc_final, blk.cross));
      x = add(x, mlp_ff(x, blk.mlp));
    }
    x = norm(x, m_.dec_ln);
    return linear(x, m_.dec_out);
  }

  Tensor<S> ctc_log_probs(Tensor<S> enc_final) {
    return log_softmax(linear(enc_final, m_.ctc_head), 1);
  }

  // Two-block transformer over student encoder outputs; full sequence is
  // predicted, the loss later restricts to masked positions.
  Tensor<S> predictor_forward(Tensor<S> enc_final) {
    Tensor<S> x = enc_final;
    if (m_.pred_in) x = linear(x, *m_.pred_in);
    for (auto& blk : m_.predictor) {
      x = add(x, self_attention(norm(x, blk.self.ln), blk.self, false, nullptr));
      x = add(x, mlp_ff(x, blk.mlp));
    }
    x = norm(x, m_.pred_ln);
    if (m_.pred_out) x = linear(x, *m_.pred_out);
    return x;
  }

  Tensor<S> positional_encoding(int64_t T, int64_t D) {
    std::vector<S> pe(static_cast<size_t>(T * D));
    for (int64_t t = 0; t < T; ++t)
      for (int64_t d = 0; d < D; ++d) {
        const double angle = static_cast<double>(t) /
                             std::pow(10000.0, 2.0 * static_cast<double>(d / 2) / static_cast<double>(D));
        pe[static_cast<size_t>(t * D + d)] =
            static_cast<S>((d % 2 == 0) ? std::sin(angle) : std::cos(angle));
      }
    return g_.constant({T, D}, pe);
  }

 private:
  Tensor<S> reshape_vec(Tensor<S> v) {
    // [D] -> [D,1] so it can matmul; cheap view substitute
    std::vector<S> d(v.values());
    auto* vn = v.node();
    return detail::make_op<S>(&g_, {v.numel(), 1}, std::move(d), v.requires_grad(),
                              [vn](detail::Node<S>& o) {
                                for (size_t i = 0; i < o.grad.size(); ++i) vn->grad[i] += o.grad[i];
                              });
  }

  Tensor<S> mlp_ff(Tensor<S> x, MlpP<S>& m) {
    return linear(gelu(linear(norm(x, m.ln), m.fc1)), m.fc2);
  }

  Tensor<S> attention_core(Tensor<S> q_in, Tensor<S> kv_in, AttnP<S>& p, bool causal,
                           const std::vector<uint8_t>* valid) {
    const int64_t D = m_.cfg.attn_dim;
    const int64_t H = m_.cfg.attn_heads;
    const int64_t dh = D / H;
    const int64_t Tq = q_in.dim(0), Tk = kv_in.dim(0);
    Tensor<S> q = linear(q_in, p.q);
    Tensor<S> k = linear(kv_in, p.k);
    Tensor<S> v = linear(kv_in, p.v);
    Tensor<S> mask;
    if (causal || valid) {
      std::vector<S> mv(static_cast<size_t>(Tq * Tk), S(0));
      for (int64_t i = 0; i < Tq; ++i)
        for (int64_t j = 0; j < Tk; ++j) {
          bool blocked = (causal && j > i) || (valid && !(*valid)[static_cast<size_t>(j)]);
          if (blocked) mv[static_cast<size_t>(i * Tk + j)] = S(-1e30);
        }
      mask = g_.constant({Tq, Tk}, mv);
    }
    Tensor<S> heads_out;
    for (int64_t h = 0; h < H; ++h) {
      auto qh = slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = slice_cols(v, h * dh, (h + 1) * dh);
      auto scores = scale(matmul(qh, transpose(kh)), static_cast<S>(1.0 / std::sqrt(double(dh))));
      if (mask.valid()) scores = add(scores, mask);
      auto ctx = matmul(softmax(scores, 1), vh);
      heads_out = (h == 0) ? ctx : concat_cols(heads_out, ctx);
    }
    return linear(heads_out, p.o);
  }

  Tensor<S> self_attention(Tensor<S> x, AttnP<S>& p, bool causal,
                           const std::vector<uint8_t>* valid) {
    return attention_core(x, x, p, causal, valid);
  }

  Tensor<S> cross_attention(Tensor<S> x, Tensor<S> memory, AttnP<S>& p) {
    return attention_core(x, memory, p, false, nullptr);
  }

  Graph<S>& g_;
  ModelState<S>& m_;
  bool frozen_;
};

// ---------------------------------------------------------------------------
// batch-dimension concatenation of the three modality views

template <typename S>
struct ModalityRow {
  Modality modality;
  int sample_index;
  Tensor<S> features;  // [T, D]
};

// One encoder call serves all three modalities: B samples in, 3B rows out,
// ordered V block, A block, AV block.
template <typename S>
std::vector<ModalityRow<S>> batch_modalities(const std::vector<Tensor<S>>& fv,
                                             const std::vector<Tensor<S>>& fa,
                                             const std::vector<Tensor<S>>& fav) {
  if (fv.size() != fa.size() || fv.size() != fav.size())
    throw ContractError("batch_modalities requires equal per-modality sample counts");
  std::vector<ModalityRow<S>> rows;
  rows.reserve(fv.size() * 3);
  for (size_t i = 0; i < fv.size(); ++i) rows.push_back({Modality::V, static_cast<int>(i), fv[i]});
  for (size_t i = 0; i < fa.size(); ++i) rows.push_back({Modality::A, static_cast<int>(i), fa[i]});
  for (size_t i = 0; i < fav.size(); ++i)
    rows.push_back({Modality::AV, static_cast<int>(i), fav[i]});
  return rows;
}

template <typename S>
std::vector<Tensor<S>> split_modality(const std::vector<ModalityRow<S>>& rows, Modality m) {
  std::vector<Tensor<S>> out;
  for (const auto& r : rows)
    if (r.modality == m) out.push_back(r.features);
  return out;
}

}  // namespace trispeech

#endif  // TRISPEECH_MODEL_HPP
