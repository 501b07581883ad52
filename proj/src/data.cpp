#include "trispeech/data.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace trispeech {

using nlohmann::json;

void CorpusConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (vocab_size > 36) throw ConfigError("vocab_size above 36 exceeds the toy alphabet");
  if (min_utterance_tokens < 1 || max_utterance_tokens < min_utterance_tokens)
    throw ConfigError("utterance token bounds must satisfy max >= min >= 1");
  if (frames_per_token < 1 || frames_per_token_jitter < 0 ||
      frames_per_token_jitter >= frames_per_token)
    throw ConfigError("frames_per_token must exceed its jitter");
  if (audio_rate_ratio < 1) throw ConfigError("audio_rate_ratio must be a positive integer");
  if (video_dim < 1 || audio_dim < 1) throw ConfigError("view dimensions must be positive");
  if (video_noise_sigma < 0 || audio_noise_sigma < 0)
    throw ConfigError("noise sigmas must be non-negative");
}

std::string CorpusConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["min_utterance_tokens"] = min_utterance_tokens;
  j["max_utterance_tokens"] = max_utterance_tokens;
  j["frames_per_token"] = frames_per_token;
  j["frames_per_token_jitter"] = frames_per_token_jitter;
  j["video_dim"] = video_dim;
  j["audio_rate_ratio"] = audio_rate_ratio;
  j["audio_dim"] = audio_dim;
  j["video_noise_sigma"] = video_noise_sigma;
  j["audio_noise_sigma"] = audio_noise_sigma;
  j["seed"] = seed;
  return j.dump();
}

CorpusConfig CorpusConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  CorpusConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.min_utterance_tokens = j.value("min_utterance_tokens", c.min_utterance_tokens);
  c.max_utterance_tokens = j.value("max_utterance_tokens", c.max_utterance_tokens);
  c.frames_per_token = j.value("frames_per_token", c.frames_per_token);
  c.frames_per_token_jitter = j.value("frames_per_token_jitter", c.frames_per_token_jitter);
  c.video_dim = j.value("video_dim", c.video_dim);
  c.audio_rate_ratio = j.value("audio_rate_ratio", c.audio_rate_ratio);
  c.audio_dim = j.value("audio_dim", c.audio_dim);
  c.video_noise_sigma = j.value("video_noise_sigma", c.video_noise_sigma);
  c.audio_noise_sigma = j.value("audio_noise_sigma", c.audio_noise_sigma);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void AugmentConfig::validate() const {
  if (video_mask_max_frac < 0 || video_mask_max_frac > 1 || audio_mask_max_frac < 0 ||
      audio_mask_max_frac > 1)
    throw ConfigError("mask fractions must lie in [0,1]");
  if (frames_per_second < 1) throw ConfigError("frames_per_second must be positive");
}

namespace {
constexpr const char* kAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789";
}

Vocab::Vocab(int content_size) : content_size_(content_size) {
  if (content_size < 2 || content_size > 36)
    throw ConfigError("vocab content size must be in [2,36]");
}

char Vocab::char_of(int id) const {
  if (id < 0 || id >= content_size_)
    throw DataError("id " + std::to_string(id) + " is not a content token");
  return kAlphabet[id];
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) {
    const char* p = std::strchr(kAlphabet, c);
    if (c == '\0' || p == nullptr || (p - kAlphabet) >= content_size_)
      throw DataError(std::string("cannot tokenize character '") + c + "'");
    ids.push_back(static_cast<int>(p - kAlphabet));
  }
  return ids;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(char_of(id));
  return out;
}

TokenPatterns TokenPatterns::make(const CorpusConfig& cfg) {
  TokenPatterns p;
  p.video.resize(static_cast<size_t>(cfg.vocab_size));
  p.audio.resize(static_cast<size_t>(cfg.vocab_size));
  for (int tok = 0; tok < cfg.vocab_size; ++tok) {
    Rng rv = derive_rng(cfg.seed, "pattern_video", {static_cast<uint64_t>(tok)});
    Rng ra = derive_rng(cfg.seed, "pattern_audio", {static_cast<uint64_t>(tok)});
    auto& vv = p.video[static_cast<size_t>(tok)];
    auto& av = p.audio[static_cast<size_t>(tok)];
    vv.resize(static_cast<size_t>(cfg.video_dim));
    av.resize(static_cast<size_t>(cfg.audio_dim));
    for (auto& x : vv) x = static_cast<float>(rv.normal());
    for (auto& x : av) x = static_cast<float>(ra.normal());
  }
  return p;
}

void render_views(const std::vector<int>& tokens, const CorpusConfig& cfg,
                  const TokenPatterns& patterns, Rng& rng, TensorData<float>* video,
                  TensorData<float>* audio) {
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw ContractError("render_views: token id out of range");
  std::vector<int> frames_per(tokens.size());
  int64_t t_v = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    int k = cfg.frames_per_token +
            static_cast<int>(rng.uniform_int(-cfg.frames_per_token_jitter,
                                             cfg.frames_per_token_jitter));
    frames_per[i] = std::max(1, k);
    t_v += frames_per[i];
  }
  const int64_t r = cfg.audio_rate_ratio;
  *video = TensorData<float>::zeros({t_v, cfg.video_dim});
  *audio = TensorData<float>::zeros({t_v * r, cfg.audio_dim});
  int64_t vf = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const auto& pv = patterns.video[static_cast<size_t>(tokens[i])];
    const auto& pa = patterns.audio[static_cast<size_t>(tokens[i])];
    for (int k = 0; k < frames_per[i]; ++k, ++vf) {
      for (int c = 0; c < cfg.video_dim; ++c)
        video->data[static_cast<size_t>(vf * cfg.video_dim + c)] =
            pv[static_cast<size_t>(c)] +
            static_cast<float>(rng.normal(0.0, cfg.video_noise_sigma));
      for (int64_t a = vf * r; a < (vf + 1) * r; ++a)
        for (int c = 0; c < cfg.audio_dim; ++c)
          audio->data[static_cast<size_t>(a * cfg.audio_dim + c)] =
              pa[static_cast<size_t>(c)] +
              static_cast<float>(rng.normal(0.0, cfg.audio_noise_sigma));
    }
  }
}

namespace {

std::vector<int> sample_tokens(const CorpusConfig& cfg, Rng& rng) {
  int len = static_cast<int>(rng.uniform_int(cfg.min_utterance_tokens, cfg.max_utterance_tokens));
  std::vector<int> toks(static_cast<size_t>(len));
  for (auto& t : toks) t = static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1));
  return toks;
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& cfg, int64_t n_utterances, double labelled_fraction,
                       int64_t n_eval) {
  cfg.validate();
  if (n_utterances < 1) throw ConfigError("n_utterances must be >= 1");
  if (!(labelled_fraction > 0.0) || labelled_fraction > 1.0)
    throw ConfigError("labelled_fraction must lie in (0,1]");
  if (n_eval < 0) n_eval = std::max<int64_t>(8, n_utterances / 8);

  const TokenPatterns patterns = TokenPatterns::make(cfg);
  const int64_t n_lab = static_cast<int64_t>(std::llround(labelled_fraction *
                                                          static_cast<double>(n_utterances)));

  Corpus corpus;
  corpus.config = cfg;
  auto make_utt = [&](int64_t idx, std::vector<int>* labels, TensorData<float>* video,
                      TensorData<float>* audio) {
    Rng rng = derive_rng(cfg.seed, "utterance", {static_cast<uint64_t>(idx)});
    *labels = sample_tokens(cfg, rng);
    render_views(*labels, cfg, patterns, rng, video, audio);
  };
  for (int64_t i = 0; i < n_utterances; ++i) {
    std::vector<int> labels;
    TensorData<float> video, audio;
    make_utt(i, &labels, &video, &audio);
    if (i < n_lab) {
      corpus.labelled.push_back({i, std::move(video), std::move(audio), std::move(labels)});
    } else {
      corpus.unlabelled.push_back({i, std::move(video), std::move(audio)});
    }
  }
  for (int64_t i = 0; i < n_eval; ++i) {
    std::vector<int> labels;
    TensorData<float> video, audio;
    make_utt(n_utterances + i, &labels, &video, &audio);
    corpus.eval.push_back({n_utterances + i, std::move(video), std::move(audio),
                           std::move(labels)});
  }
  return corpus;
}

namespace {

// One span per window: length ~ U[0, max_frac * window], uniform start.
void mask_view(TensorData<float>* view, int64_t window, double max_frac, Rng& rng) {
  const int64_t total = view->shape[0];
  const int64_t dim = view->shape[1];
  for (int64_t w0 = 0; w0 < total; w0 += window) {
    const int64_t wlen = std::min(window, total - w0);
    const double max_len = max_frac * static_cast<double>(wlen);
    const int64_t n = std::llround(rng.uniform() * max_len);
    if (n <= 0) continue;
    const int64_t start = rng.uniform_int(0, wlen - n);
    std::fill_n(view->data.begin() + (w0 + start) * dim, n * dim, 0.0f);
  }
}

}  // namespace

void zero_mask_augment(TensorData<float>* video, TensorData<float>* audio,
                       const AugmentConfig& cfg, int audio_rate_ratio, Rng& rng) {
  cfg.validate();
  mask_view(video, cfg.frames_per_second, cfg.video_mask_max_frac, rng);
  mask_view(audio, static_cast<int64_t>(cfg.frames_per_second) * audio_rate_ratio,
            cfg.audio_mask_max_frac, rng);
}

void corrupt_audio(TensorData<float>* audio, double snr_db, Rng& rng) {
  if (std::isinf(snr_db)) return;  // clean sentinel
  if (!std::isfinite(snr_db)) throw ConfigError("snr_db must be finite or +inf");
  double power = 0;
  for (float x : audio->data) power += static_cast<double>(x) * static_cast<double>(x);
  power /= static_cast<double>(audio->data.size());
  if (power <= 0) throw DataError("corrupt_audio on a zero-power signal");
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  for (auto& x : audio->data) x += static_cast<float>(rng.normal(0.0, sigma));
}

// ---------------------------------------------------------------------------
// persistence

namespace {

constexpr uint32_t kCorpusMagic = 0x54534331;  // "TSC1"

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of corpus file");
  return v;
}

void write_string(std::ofstream& os, const std::string& s) {
  write_pod<uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& is) {
  auto n = read_pod<uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("unexpected end of corpus file");
  return s;
}

void write_record(std::ofstream& os, int64_t id, const TensorData<float>& video,
                  const TensorData<float>& audio, const std::vector<int>& labels) {
  write_pod<int64_t>(os, id);
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.shape[0]));
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.shape[1]));
  os.write(reinterpret_cast<const char*>(video.data.data()),
           static_cast<std::streamsize>(video.data.size() * sizeof(float)));
  write_pod<uint32_t>(os, static_cast<uint32_t>(audio.shape[0]));
  write_pod<uint32_t>(os, static_cast<uint32_t>(audio.shape[1]));
  os.write(reinterpret_cast<const char*>(audio.data.data()),
           static_cast<std::streamsize>(audio.data.size() * sizeof(float)));
  write_pod<uint32_t>(os, static_cast<uint32_t>(labels.size()));
  for (int l : labels) write_pod<int32_t>(os, l);
}

void read_record(std::ifstream& is, int64_t* id, TensorData<float>* video,
                 TensorData<float>* audio, std::vector<int>* labels) {
  *id = read_pod<int64_t>(is);
  const int64_t tv = read_pod<uint32_t>(is);
  const int64_t vd = read_pod<uint32_t>(is);
  *video = TensorData<float>::zeros({tv, vd});
  is.read(reinterpret_cast<char*>(video->data.data()),
          static_cast<std::streamsize>(video->data.size() * sizeof(float)));
  const int64_t ta = read_pod<uint32_t>(is);
  const int64_t ad = read_pod<uint32_t>(is);
  *audio = TensorData<float>::zeros({ta, ad});
  is.read(reinterpret_cast<char*>(audio->data.data()),
          static_cast<std::streamsize>(audio->data.size() * sizeof(float)));
  const uint32_t nl = read_pod<uint32_t>(is);
  labels->resize(nl);
  for (auto& l : *labels) l = read_pod<int32_t>(is);
  if (!is) throw IoError("unexpected end of corpus file");
}

void write_split(const std::string& path, const CorpusConfig& cfg, uint64_t count,
                 const std::function<void(std::ofstream&, uint64_t)>& emit) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_pod<uint32_t>(os, kCorpusMagic);
  write_pod<uint32_t>(os, 1u);
  write_string(os, cfg.to_json());
  write_pod<uint64_t>(os, count);
  for (uint64_t i = 0; i < count; ++i) emit(os, i);
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_split(dir + "/labelled.bin", corpus.config, corpus.labelled.size(),
              [&](std::ofstream& os, uint64_t i) {
                const auto& s = corpus.labelled[i];
                write_record(os, s.id, s.video, s.audio, s.labels);
              });
  write_split(dir + "/unlabelled.bin", corpus.config, corpus.unlabelled.size(),
              [&](std::ofstream& os, uint64_t i) {
                const auto& s = corpus.unlabelled[i];
                write_record(os, s.id, s.video, s.audio, {});
              });
  write_split(dir + "/eval.bin", corpus.config, corpus.eval.size(),
              [&](std::ofstream& os, uint64_t i) {
                const auto& s = corpus.eval[i];
                write_record(os, s.id, s.video, s.audio, s.labels);
              });

  const Vocab vocab(corpus.config.vocab_size);
  std::ofstream mf(dir + "/manifest.jsonl");
  if (!mf) throw IoError("cannot open manifest for writing");
  auto manifest_line = [&](const char* split, int64_t id, const TensorData<float>& video,
                           const TensorData<float>& audio, const std::vector<int>& labels) {
    json j;
    j["split"] = split;
    j["id"] = id;
    j["t_v"] = video.shape[0];
    j["t_a"] = audio.shape[0];
    j["transcript"] = labels.empty() ? std::string() : vocab.detokenize(labels);
    mf << j.dump() << "\n";
  };
  for (const auto& s : corpus.labelled) manifest_line("labelled", s.id, s.video, s.audio, s.labels);
  for (const auto& s : corpus.unlabelled) manifest_line("unlabelled", s.id, s.video, s.audio, {});
  for (const auto& s : corpus.eval) manifest_line("eval", s.id, s.video, s.audio, s.labels);
}

namespace {

CorpusConfig read_split_header(std::ifstream& is, const std::string& path, uint64_t* count) {
  if (read_pod<uint32_t>(is) != kCorpusMagic) throw IoError(path + " is not a corpus file");
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != 1) throw IoError(path + " has unsupported version " + std::to_string(version));
  CorpusConfig cfg = CorpusConfig::from_json(read_string(is));
  *count = read_pod<uint64_t>(is);
  return cfg;
}

}  // namespace

Corpus load_corpus(const std::string& dir) {
  Corpus corpus;
  {
    std::ifstream is(dir + "/labelled.bin", std::ios::binary);
    if (!is) throw IoError("cannot open " + dir + "/labelled.bin");
    uint64_t count = 0;
    corpus.config = read_split_header(is, dir + "/labelled.bin", &count);
    for (uint64_t i = 0; i < count; ++i) {
      LabelledSample s;
      read_record(is, &s.id, &s.video, &s.audio, &s.labels);
      corpus.labelled.push_back(std::move(s));
    }
  }
  {
    std::ifstream is(dir + "/unlabelled.bin", std::ios::binary);
    if (!is) throw IoError("cannot open " + dir + "/unlabelled.bin");
    uint64_t count = 0;
    read_split_header(is, dir + "/unlabelled.bin", &count);
    for (uint64_t i = 0; i < count; ++i) {
      UnlabelledSample s;
      std::vector<int> ignored;
      read_record(is, &s.id, &s.video, &s.audio, &ignored);
      corpus.unlabelled.push_back(std::move(s));
    }
  }
  {
    std::ifstream is(dir + "/eval.bin", std::ios::binary);
    if (!is) throw IoError("cannot open " + dir + "/eval.bin");
    uint64_t count = 0;
    read_split_header(is, dir + "/eval.bin", &count);
    for (uint64_t i = 0; i < count; ++i) {
      LabelledSample s;
      read_record(is, &s.id, &s.video, &s.audio, &s.labels);
      corpus.eval.push_back(std::move(s));
    }
  }
  return corpus;
}

}  // namespace trispeech
