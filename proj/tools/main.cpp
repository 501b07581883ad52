// Command-line front end: corpus generation, the three training stages,
// evaluation, decoding, and metrics reporting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trispeech/decode.hpp"
#include "trispeech/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trispeech;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

// --set a.b.c=value overrides, parsed as JSON literals with string fallback.
void apply_overrides(json* cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;  // plain string
    }
    json* node = cfg;
    size_t start = 0;
    while (true) {
      auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
      if (key.empty()) throw ConfigError("--set has an empty key segment in '" + path + "'");
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      start = dot + 1;
    }
  }
}

Modality modality_from(const std::string& s) {
  if (s == "v") return Modality::V;
  if (s == "a") return Modality::A;
  if (s == "av") return Modality::AV;
  throw ConfigError("modality must be one of v/a/av, got '" + s + "'");
}

void write_eval_report(const EvalReport& report, const std::string& modality,
                       const Vocab& vocab, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (const auto& e : report.entries) {
    json j;
    j["id"] = e.id;
    j["modality"] = e.modality;
    j["reference"] = vocab.detokenize(e.reference);
    j["hypothesis"] = vocab.detokenize(e.hypothesis);
    j["edits"] = e.edits;
    if (e.wer)
      j["wer"] = *e.wer;
    else
      j["wer"] = nullptr;
    os << j.dump() << "\n";
  }
  json summary;
  summary["summary"] = true;
  summary["modality"] = modality;
  summary["corpus_wer"] = report.corpus_wer;
  summary["total_edits"] = report.total_edits;
  summary["total_reference_tokens"] = report.total_ref;
  os << summary.dump() << "\n";
}

struct TrainedArtifacts {
  std::string checkpoint;
  std::string teacher_checkpoint;
};

template <typename S>
TrainedArtifacts run_training(const RunManifest& manifest, const Corpus& corpus) {
  fs::create_directories(manifest.out_dir);
  {
    std::ofstream mf(manifest.out_dir + "/manifest.json");
    mf << manifest.to_json().dump(2) << "\n";
  }
  MetricsWriter metrics(manifest.out_dir + "/metrics.jsonl");
  TrainResult<S> result;
  if (manifest.stage == "supervised") {
    result = train_supervised<S>(manifest, corpus, &metrics);
  } else if (manifest.stage == "semi") {
    result = train_semi<S>(manifest, corpus, &metrics);
  } else {
    result = run_pretrain<S>(manifest, corpus, &metrics);
  }
  TrainedArtifacts out;
  out.checkpoint = manifest.out_dir + "/final.ckpt";
  save_model(result.student, out.checkpoint, manifest.to_json().dump());
  if (result.teacher) {
    out.teacher_checkpoint = manifest.out_dir + "/teacher.ckpt";
    save_model(*result.teacher, out.teacher_checkpoint, manifest.to_json().dump());
  }
  log_info("run complete: " + std::to_string(result.total_steps) + " steps, " +
           std::to_string(result.skipped_steps) + " skipped, final train loss " +
           std::to_string(result.final_train_loss));
  return out;
}

RunManifest manifest_for_training(const std::string& config_path,
                                  const std::vector<std::string>& sets, const std::string& stage,
                                  std::optional<uint64_t> seed, const std::string& out_dir) {
  json cfg = load_config(config_path);
  apply_overrides(&cfg, sets);
  cfg["stage"] = stage;
  if (!out_dir.empty()) cfg["out_dir"] = out_dir;
  if (seed) cfg["seed"] = *seed;
  RunManifest manifest = RunManifest::from_json(cfg);
  if (manifest.corpus_dir.empty())
    throw ConfigError("corpus_dir must be set (config key 'corpus_dir')");
  if (manifest.out_dir.empty()) throw ConfigError("--out directory is required");
  return manifest;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"trispeech: tri-modal speech recognition at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, ckpt_path, modality = "av", utt_filter;
  std::vector<std::string> sets;
  std::vector<std::string> run_dirs;
  std::optional<uint64_t> seed;
  double snr_db = std::numeric_limits<double>::infinity();
  uint64_t noise_seed = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_seed) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--set", sets, "override config keys, e.g. --set optim.peak_lr=0.001");
    cmd->add_option("--out", out_dir, "output directory")->required();
    auto* s = cmd->add_option("--seed", seed, "run seed");
    if (needs_seed) s->required();
  };

  auto* make_data = app.add_subcommand("make-data", "generate a synthetic corpus");
  add_common(make_data, false);

  auto* train = app.add_subcommand("train", "supervised training");
  add_common(train, true);
  auto* train_semi_cmd = app.add_subcommand("train-semi", "semi-supervised training");
  add_common(train_semi_cmd, true);
  auto* pretrain_cmd = app.add_subcommand("pretrain", "self-supervised pre-training");
  add_common(pretrain_cmd, true);

  auto* eval_cmd = app.add_subcommand("evaluate", "decode an eval split and report WER");
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "corpus directory")->required();
  eval_cmd->add_option("--modality", modality, "v, a, or av");
  eval_cmd->add_option("--snr-db", snr_db, "additive audio noise SNR (dB); omit for clean");
  eval_cmd->add_option("--noise-seed", noise_seed, "seed for evaluation noise");
  eval_cmd->add_option("--config", config_path, "JSON config (decode section)");
  eval_cmd->add_option("--set", sets, "config overrides");
  eval_cmd->add_option("--out", out_dir, "directory for the report JSONL");

  auto* decode_cmd = app.add_subcommand("decode", "print hypotheses for a corpus split");
  decode_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  decode_cmd->add_option("--data", data_dir, "corpus directory")->required();
  decode_cmd->add_option("--modality", modality, "v, a, or av");
  decode_cmd->add_option("--utt", utt_filter, "only decode the utterance with this id");
  decode_cmd->add_option("--config", config_path, "JSON config (decode section)");
  decode_cmd->add_option("--set", sets, "config overrides");

  auto* report_cmd = app.add_subcommand("report", "aggregate run metrics into CSV");
  report_cmd->add_option("--runs", run_dirs, "run output directories")->required();
  report_cmd->add_option("--out", out_dir, "CSV path (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (make_data->parsed()) {
    json cfg = load_config(config_path);
    apply_overrides(&cfg, sets);
    CorpusConfig cc = cfg.contains("corpus")
                          ? CorpusConfig::from_json(cfg.at("corpus").dump())
                          : CorpusConfig{};
    if (seed) cc.seed = *seed;
    const int64_t n = cfg.value("n_utterances", 400);
    const double fraction = cfg.value("labelled_fraction", 1.0);
    const int64_t n_eval = cfg.value("n_eval", -1);
    auto corpus = generate_corpus(cc, n, fraction, n_eval);
    save_corpus(corpus, out_dir);
    std::cout << "wrote corpus: " << corpus.labelled.size() << " labelled, "
              << corpus.unlabelled.size() << " unlabelled, " << corpus.eval.size()
              << " eval utterances -> " << out_dir << "\n";
    return 0;
  }

  if (train->parsed() || train_semi_cmd->parsed() || pretrain_cmd->parsed()) {
    const std::string stage =
        train->parsed() ? "supervised" : (train_semi_cmd->parsed() ? "semi" : "pretrain");
    RunManifest manifest = manifest_for_training(config_path, sets, stage, seed, out_dir);
    Corpus corpus = load_corpus(manifest.corpus_dir);
    manifest.model.vocab_total = corpus.config.vocab_size + 4;
    manifest.model.video_dim = corpus.config.video_dim;
    manifest.model.audio_dim = corpus.config.audio_dim;
    manifest.model.audio_rate_ratio = corpus.config.audio_rate_ratio;
    TrainedArtifacts artifacts = manifest.precision == "f64"
                                     ? run_training<double>(manifest, corpus)
                                     : run_training<float>(manifest, corpus);
    std::cout << "checkpoint: " << artifacts.checkpoint << "\n";
    return 0;
  }

  if (eval_cmd->parsed() || decode_cmd->parsed()) {
    json cfg = load_config(config_path);
    apply_overrides(&cfg, sets);
    DecodeConfig dc;
    if (cfg.contains("decode")) {
      const auto& d = cfg.at("decode");
      dc.alpha = d.value("alpha", dc.alpha);
      dc.beam_size = d.value("beam_size", dc.beam_size);
      dc.beta = d.value("beta", dc.beta);
      dc.max_len_factor = d.value("max_len_factor", dc.max_len_factor);
    }
    dc.validate();
    Corpus corpus = load_corpus(data_dir);
    Vocab vocab(corpus.config.vocab_size);
    auto model = load_model<float>(ckpt_path);
    const Modality m = modality_from(modality);

    if (decode_cmd->parsed()) {
      for (const auto& s : corpus.eval) {
        if (!utt_filter.empty() && std::to_string(s.id) != utt_filter) continue;
        auto result = decode_sample(model, s.video, s.audio, m, dc, vocab);
        std::cout << s.id << "\tref: " << vocab.detokenize(s.labels)
                  << "\thyp: " << vocab.detokenize(result.tokens)
                  << (result.finished ? "" : "\t(unfinished)") << "\n";
      }
      return 0;
    }

    auto report = evaluate(model, corpus.eval, m, dc, vocab, snr_db, noise_seed);
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      write_eval_report(report, modality, vocab,
                        out_dir + "/eval_" + modality + ".jsonl");
    }
    std::cout << "modality " << modality << ": corpus WER " << report.corpus_wer << " ("
              << report.total_edits << " edits / " << report.total_ref << " reference tokens, "
              << report.entries.size() << " utterances)\n";
    return 0;
  }

  if (report_cmd->parsed()) {
    // Per-epoch curves per run: the kept-fraction / accuracy / CTC-loss panels.
    std::ostringstream csv;
    csv << "run,stage,epoch,kept_fraction_ctc,kept_fraction_attn,mean_conf_ctc,mean_conf_attn";
    for (const char* m : {"v", "a", "av"}) csv << ",attn_accuracy_" << m << ",ctc_loss_" << m;
    csv << "\n";
    for (const auto& dir : run_dirs) {
      std::ifstream is(dir + "/metrics.jsonl");
      if (!is) throw IoError("cannot open " + dir + "/metrics.jsonl");
      struct Row {
        std::map<std::string, double> vals;
        std::string stage;
      };
      std::map<int64_t, Row> rows;
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        const std::string metric = j.at("metric");
        const std::string split = j.at("split");
        const std::string mod = j.at("modality");
        const int64_t epoch = j.at("epoch");
        auto& row = rows[epoch];
        row.stage = j.at("stage");
        if (metric == "kept_fraction_ctc" || metric == "kept_fraction_attn" ||
            metric == "mean_conf_ctc" || metric == "mean_conf_attn")
          row.vals[metric] = j.at("value");
        else if (split == "eval" && (metric == "attn_accuracy" || metric == "ctc_loss"))
          row.vals[metric + "_" + mod] = j.at("value");
      }
      for (const auto& [epoch, row] : rows) {
        csv << dir << "," << row.stage << "," << epoch;
        for (const char* key :
             {"kept_fraction_ctc", "kept_fraction_attn", "mean_conf_ctc", "mean_conf_attn",
              "attn_accuracy_v", "ctc_loss_v", "attn_accuracy_a", "ctc_loss_a",
              "attn_accuracy_av", "ctc_loss_av"}) {
          csv << ",";
          auto it = row.vals.find(key);
          if (it != row.vals.end()) csv << it->second;
        }
        csv << "\n";
      }
    }
    if (out_dir.empty()) {
      std::cout << csv.str();
    } else {
      std::ofstream os(out_dir);
      if (!os) throw IoError("cannot open " + out_dir + " for writing");
      os << csv.str();
    }
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    log_error(e.what());
    return 2;
  } catch (const DataError& e) {
    log_error(e.what());
    return 2;
  } catch (const UsageError& e) {
    log_error(e.what());
    return 1;
  } catch (const std::exception& e) {
    log_error(e.what());
    return 3;
  }
}
