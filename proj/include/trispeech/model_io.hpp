#ifndef TRISPEECH_MODEL_IO_HPP
#define TRISPEECH_MODEL_IO_HPP

#include <string>

#include "json.hpp"
#include "trispeech/model.hpp"
#include "trispeech/serialize.hpp"

namespace trispeech {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["encoder_blocks"] = c.encoder_blocks;
  j["decoder_blocks"] = c.decoder_blocks;
  j["attn_dim"] = c.attn_dim;
  j["attn_heads"] = c.attn_heads;
  j["mlp_dim"] = c.mlp_dim;
  j["predictor_blocks"] = c.predictor_blocks;
  j["predictor_dim"] = c.predictor_dim;
  j["vocab_total"] = c.vocab_total;
  j["video_dim"] = c.video_dim;
  j["audio_dim"] = c.audio_dim;
  j["audio_rate_ratio"] = c.audio_rate_ratio;
  j["preset"] = c.preset;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c = j.value("preset", std::string("desk")) == "base" ? ModelConfig::base()
                                                                   : ModelConfig::desk();
  c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.attn_dim = j.value("attn_dim", c.attn_dim);
  c.attn_heads = j.value("attn_heads", c.attn_heads);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
  c.predictor_blocks = j.value("predictor_blocks", c.predictor_blocks);
  c.predictor_dim = j.value("predictor_dim", c.predictor_dim);
  c.vocab_total = j.value("vocab_total", c.vocab_total);
  c.video_dim = j.value("video_dim", c.video_dim);
  c.audio_dim = j.value("audio_dim", c.audio_dim);
  c.audio_rate_ratio = j.value("audio_rate_ratio", c.audio_rate_ratio);
  c.preset = j.value("preset", c.preset);
  c.validate();
  return c;
}

// Appends every model parameter to `file` as f32 blobs under `prefix`.
template <typename S>
void pack_model(const ModelState<S>& m, BlobFile* file, const std::string& prefix = "") {
  m.visit_const([&](const std::string& name, const TensorData<S>& t) {
    file->blobs.emplace_back(prefix + name, t.template cast<float>());
  });
}

// Restores parameters from `file`; every parameter must be present with a
// matching shape.
template <typename S>
void unpack_model(const BlobFile& file, ModelState<S>* m, const std::string& prefix = "") {
  m->visit([&](const std::string& name, TensorData<S>& t) {
    const TensorData<float>* blob = file.find(prefix + name);
    if (!blob) throw IoError("checkpoint is missing parameter " + prefix + name);
    if (blob->shape != t.shape)
      throw IoError("checkpoint parameter " + prefix + name + " has shape " +
                    shape_str(blob->shape) + ", expected " + shape_str(t.shape));
    t = blob->template cast<S>();
  });
}

// Copies a selected subset of parameters by name prefix match. Used for the
// pre-training handoff, where encoder and extractor weights carry over while
// decoder and CTC head restart fresh.
template <typename S>
int unpack_model_subset(const BlobFile& file, ModelState<S>* m,
                        const std::vector<std::string>& name_prefixes,
                        const std::string& blob_prefix = "") {
  int loaded = 0;
  m->visit([&](const std::string& name, TensorData<S>& t) {
    bool wanted = false;
    for (const auto& p : name_prefixes)
      if (name.rfind(p, 0) == 0) wanted = true;
    if (!wanted) return;
    const TensorData<float>* blob = file.find(blob_prefix + name);
    if (!blob) throw IoError("checkpoint is missing parameter " + blob_prefix + name);
    if (blob->shape != t.shape)
      throw IoError("checkpoint parameter " + blob_prefix + name + " has unexpected shape");
    t = blob->template cast<S>();
    ++loaded;
  });
  return loaded;
}

template <typename S>
void save_model(const ModelState<S>& m, const std::string& path,
                const std::string& extra_config = "") {
  BlobFile f;
  nlohmann::json j;
  j["model"] = model_config_to_json(m.cfg);
  if (!extra_config.empty()) j["run"] = nlohmann::json::parse(extra_config);
  f.config_json = j.dump();
  pack_model(m, &f);
  f.save(path);
}

template <typename S>
ModelState<S> load_model(const std::string& path) {
  BlobFile f = BlobFile::load(path);
  nlohmann::json j = nlohmann::json::parse(f.config_json);
  ModelConfig cfg = model_config_from_json(j.at("model"));
  ModelState<S> m = ModelState<S>::init(cfg, /*seed=*/0);
  unpack_model(f, &m);
  return m;
}

}  // namespace trispeech

#endif  // TRISPEECH_MODEL_IO_HPP
