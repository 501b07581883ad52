#ifndef TRISPEECH_DATA_HPP
#define TRISPEECH_DATA_HPP

// Synthetic "talking-symbols" corpus: a latent token sequence rendered into a
// low-rate video-like view and a high-rate audio-like view. Video noise is
// higher than audio noise by default so the visual task is the harder one.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/rng.hpp"
#include "trispeech/tensor.hpp"

namespace trispeech {

struct CorpusConfig {
  int vocab_size = 20;
  int min_utterance_tokens = 3;
  int max_utterance_tokens = 8;
  int frames_per_token = 3;
  int frames_per_token_jitter = 1;
  int video_dim = 16;
  int audio_rate_ratio = 4;  // audio frames per video frame
  int audio_dim = 8;
  double video_noise_sigma = 0.5;
  double audio_noise_sigma = 0.1;
  uint64_t seed = 42;

  void validate() const;
  std::string to_json() const;
  static CorpusConfig from_json(const std::string& j);
};

struct AugmentConfig {
  double video_mask_max_frac = 0.4;
  double audio_mask_max_frac = 0.6;
  int frames_per_second = 8;  // video frames per "second" at desk scale

  void validate() const;
};

// Character-level toy tokenizer. Content ids are [0, content_size); the
// reserved blank/sos/eos/pad ids sit immediately above and never appear in
// tokenize output.
class Vocab {
 public:
  explicit Vocab(int content_size);
  int content_size() const { return content_size_; }
  int blank() const { return content_size_; }
  int sos() const { return content_size_ + 1; }
  int eos() const { return content_size_ + 2; }
  int pad() const { return content_size_ + 3; }
  int total() const { return content_size_ + 4; }

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;
  char char_of(int id) const;

 private:
  int content_size_;
};

struct LabelledSample {
  int64_t id = 0;
  TensorData<float> video;  // [T_v, video_dim]
  TensorData<float> audio;  // [r*T_v, audio_dim]
  std::vector<int> labels;
};

struct UnlabelledSample {
  int64_t id = 0;
  TensorData<float> video;
  TensorData<float> audio;
};

struct Corpus {
  CorpusConfig config;
  std::vector<LabelledSample> labelled;
  std::vector<UnlabelledSample> unlabelled;
  std::vector<LabelledSample> eval;
};

// Fixed per-token pattern vectors; the deterministic "appearance" and "sound"
// of each symbol.
struct TokenPatterns {
  std::vector<std::vector<float>> video;  // [vocab][video_dim]
  std::vector<std::vector<float>> audio;  // [vocab][audio_dim]
  static TokenPatterns make(const CorpusConfig& cfg);
};

// Renders one latent token sequence into both views. Each token emits
// k ~ frames_per_token +/- jitter video frames and r*k audio frames.
void render_views(const std::vector<int>& tokens, const CorpusConfig& cfg,
                  const TokenPatterns& patterns, Rng& rng, TensorData<float>* video,
                  TensorData<float>* audio);

// Deterministic function of (cfg, n_utterances, labelled_fraction): same seed
// gives a bit-identical corpus. The eval set is rendered from utterance
// indices disjoint from the train set.
Corpus generate_corpus(const CorpusConfig& cfg, int64_t n_utterances, double labelled_fraction,
                       int64_t n_eval = -1);

// Zero-masks one span per one-second window, independently for video and
// audio (student training inputs only). Span length is uniform in
// [0, max_frac * window]; start is uniform over valid offsets.
void zero_mask_augment(TensorData<float>* video, TensorData<float>* audio,
                       const AugmentConfig& cfg, int audio_rate_ratio, Rng& rng);

// Adds Gaussian noise scaled so signal-power / noise-power = 10^(snr_db/10).
// A non-finite snr_db means "clean" and leaves the audio untouched.
void corrupt_audio(TensorData<float>* audio, double snr_db, Rng& rng);

// One binary file per split plus a JSONL manifest.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

}  // namespace trispeech

#endif  // TRISPEECH_DATA_HPP
