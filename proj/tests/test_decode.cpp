#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "testutil.hpp"
#include "trispeech/decode.hpp"
#include "trispeech/losses.hpp"

using namespace trispeech;
using trispeech::testing::random_tensor_f;

namespace {

ModelConfig micro_cfg() {
  ModelConfig c;
  c.encoder_blocks = 2;
  c.decoder_blocks = 1;
  c.attn_dim = 8;
  c.attn_heads = 2;
  c.mlp_dim = 12;
  c.predictor_blocks = 1;
  c.predictor_dim = 8;
  c.vocab_total = 9;  // content 0..4, blank 5, sos 6, eos 7, pad 8
  c.video_dim = 5;
  c.audio_dim = 3;
  c.audio_rate_ratio = 4;
  return c;
}
constexpr int kBlank = 5, kSos = 6, kEos = 7;

// frame-major log-probs with a dominating token per frame
std::vector<double> frames_to_logprobs(const std::vector<int>& argmaxes, int64_t V) {
  std::vector<double> lp(argmaxes.size() * static_cast<size_t>(V), std::log(0.01));
  for (size_t t = 0; t < argmaxes.size(); ++t)
    lp[t * static_cast<size_t>(V) + static_cast<size_t>(argmaxes[t])] = std::log(0.9);
  return lp;
}

struct BruteBest {
  std::vector<int> tokens;
  double combined = -1e300;
  double s_att = 0, s_ctc = 0;
};

// Exhaustive oracle over every content-token sequence up to max_len.
BruteBest brute_force_best(ModelState<double>& model, const TensorData<float>& video,
                           double alpha, int content, int64_t max_len) {
  Graph<double> g;
  ModelRun<double> run(g, model, true);
  auto enc = run.encode(run.extract_video(video));
  auto ctc_lp = run.ctc_log_probs(enc.final);
  const int64_t V = ctc_lp.dim(1);

  BruteBest best;
  std::vector<int> seq;
  std::function<void(int64_t)> visit = [&](int64_t remaining) {
    // score this sequence closed by eos
    std::vector<int> y_in = {kSos};
    y_in.insert(y_in.end(), seq.begin(), seq.end());
    auto lp = log_softmax(run.decode_teacher_forced(enc.final, y_in), 1);
    double s_att = 0;
    for (size_t i = 0; i < seq.size(); ++i)
      s_att += lp.value_at(static_cast<int64_t>(i) * V + seq[i]);
    s_att += lp.value_at((static_cast<int64_t>(y_in.size()) - 1) * V + kEos);
    const double s_ctc = ctc_completed_score(ctc_lp.values(), ctc_lp.dim(0), V, kBlank, seq);
    const double combined = alpha * s_ctc + (1 - alpha) * s_att;
    if (combined > best.combined) best = {seq, combined, s_att, s_ctc};
    if (remaining == 0) return;
    for (int c = 0; c < content; ++c) {
      seq.push_back(c);
      visit(remaining - 1);
      seq.pop_back();
    }
  };
  visit(max_len);
  return best;
}

}  // namespace

TEST_CASE("greedy ctc collapse rules") {
  const int64_t V = 4;
  const int blank = 0;
  {
    auto lp = frames_to_logprobs({0, 1, 1, 0, 2}, V);
    CHECK(greedy_ctc_decode(lp, 5, V, blank) == std::vector<int>{1, 2});
  }
  {
    auto lp = frames_to_logprobs({0, 0, 0}, V);
    CHECK(greedy_ctc_decode(lp, 3, V, blank).empty());
  }
  {
    auto lp = frames_to_logprobs({1, 0, 1}, V);
    CHECK(greedy_ctc_decode(lp, 3, V, blank) == std::vector<int>{1, 1});
  }
}

TEST_CASE("ctc prefix score: empty prefix, full-sequence consistency, nesting") {
  Rng rng(61);
  const int64_t T = 6, V = 4;
  std::vector<double> logits(static_cast<size_t>(T * V));
  for (auto& x : logits) x = rng.normal();
  Graph<double> g;
  auto lp_t = log_softmax(g.input({T, V}, logits), 1);
  const auto& lp = lp_t.values();

  CHECK(ctc_prefix_score(lp, T, V, 0, {}) == 0.0);

  // completed full-sequence score equals -ctc_loss
  for (const auto& labels : std::vector<std::vector<int>>{{1}, {1, 2}, {2, 2}, {3, 1, 3}}) {
    auto r = ctc_loss(lp_t, labels, 0);
    REQUIRE(r.feasible);
    const double completed = ctc_completed_score(lp, T, V, 0, labels);
    CHECK(completed == doctest::Approx(-r.value.scalar()).epsilon(1e-9));
  }

  // probability nesting
  const double base = ctc_prefix_score(lp, T, V, 0, {1});
  for (int c = 1; c < V; ++c) {
    const double ext = ctc_prefix_score(lp, T, V, 0, {1, c});
    CHECK(ext <= base + 1e-12);
  }
  CHECK(base <= 0.0 + 1e-12);
}

TEST_CASE("hybrid beam search equals the exhaustive oracle at full beam") {
  auto cfg = micro_cfg();
  const int content = 5;
  const int64_t max_len = 3;
  for (uint64_t seed = 0; seed < 12; ++seed) {
    auto model = ModelState<double>::init(cfg, 100 + seed);
    Rng rng(200 + seed);
    auto video = random_tensor_f({4, 5}, rng);

    auto want = brute_force_best(model, video, 0.1, content, max_len);

    Graph<double> g;
    ModelRun<double> run(g, model, true);
    auto enc = run.encode(run.extract_video(video));
    auto ctc_lp = run.ctc_log_probs(enc.final);
    DecodeConfig dc;
    dc.alpha = 0.1;
    dc.beam_size = 200;  // >= 5^3: nothing is ever pruned
    std::vector<int> candidates = {0, 1, 2, 3, 4};
    auto got = hybrid_beam_search(run, enc.final, ctc_lp, dc, kSos, kEos, kBlank, candidates,
                                  max_len);
    REQUIRE(got.finished);
    CHECK(got.tokens == want.tokens);
    CHECK(got.combined == doctest::Approx(want.combined).epsilon(1e-9));

    // alpha = 0 reduces to pure attention search
    auto want_att = brute_force_best(model, video, 0.0, content, max_len);
    DecodeConfig att = dc;
    att.alpha = 0.0;
    auto got_att = hybrid_beam_search(run, enc.final, ctc_lp, att, kSos, kEos, kBlank, candidates,
                                      max_len);
    CHECK(got_att.tokens == want_att.tokens);
    CHECK(got_att.s_att == doctest::Approx(want_att.s_att).epsilon(1e-9));
  }
}

TEST_CASE("beam_size 1 with alpha 0 is greedy attention decoding") {
  auto cfg = micro_cfg();
  auto model = ModelState<double>::init(cfg, 301);
  Rng rng(302);
  auto video = random_tensor_f({5, 5}, rng);
  Graph<double> g;
  ModelRun<double> run(g, model, true);
  auto enc = run.encode(run.extract_video(video));
  auto ctc_lp = run.ctc_log_probs(enc.final);
  const int64_t V = ctc_lp.dim(1);

  // reference greedy decode over content tokens and eos
  std::vector<int> greedy;
  for (int64_t step = 0; step < 6; ++step) {
    std::vector<int> y_in = {kSos};
    y_in.insert(y_in.end(), greedy.begin(), greedy.end());
    auto lp = log_softmax(run.decode_teacher_forced(enc.final, y_in), 1);
    const int64_t row = (lp.dim(0) - 1) * V;
    int best = kEos;
    double best_lp = lp.value_at(row + kEos);
    for (int c = 0; c < 5; ++c)
      if (lp.value_at(row + c) > best_lp) {
        best_lp = lp.value_at(row + c);
        best = c;
      }
    if (best == kEos) break;
    greedy.push_back(best);
  }

  DecodeConfig dc;
  dc.alpha = 0.0;
  dc.beam_size = 1;
  auto got = hybrid_beam_search(run, enc.final, ctc_lp, dc, kSos, kEos, kBlank, {0, 1, 2, 3, 4}, 6);
  CHECK(got.tokens == greedy);
}

TEST_CASE("wider beams never return a worse combined score (fixed instances)") {
  auto cfg = micro_cfg();
  for (uint64_t seed = 0; seed < 6; ++seed) {
    auto model = ModelState<double>::init(cfg, 400 + seed);
    Rng rng(500 + seed);
    auto video = random_tensor_f({4, 5}, rng);
    Graph<double> g;
    ModelRun<double> run(g, model, true);
    auto enc = run.encode(run.extract_video(video));
    auto ctc_lp = run.ctc_log_probs(enc.final);
    double prev = -1e300;
    for (int beam : {1, 2, 4, 8, 200}) {
      DecodeConfig dc;
      dc.beam_size = beam;
      auto r = hybrid_beam_search(run, enc.final, ctc_lp, dc, kSos, kEos, kBlank, {0, 1, 2, 3, 4},
                                  3);
      CHECK(r.combined >= prev - 1e-12);
      prev = r.combined;
    }
  }
}

TEST_CASE("wer basics and corpus accumulation") {
  CHECK(wer({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(wer({1, 2, 3}, {1, 9, 3}) == doctest::Approx(1.0 / 3.0));
  CHECK(wer({1, 2, 3, 4}, {}) == 1.0);
  CHECK(edit_distance({1, 2}, {2, 1}) == 2);

  // edit distance is invariant to a shared prefix
  std::vector<int> x = {1, 2, 3}, y = {1, 9, 3};
  std::vector<int> px = {7, 8, 1, 2, 3}, py = {7, 8, 1, 9, 3};
  CHECK(edit_distance(px, py) == edit_distance(x, y));

  CHECK_FALSE(utterance_wer({}, {1}).has_value());
  CHECK(utterance_wer({}, {}) == 0.0);
  CHECK_THROWS_AS(wer({}, {1}), ContractError);

  WerAccumulator acc;
  acc.add({1, 2, 3}, {1, 2, 3});
  acc.add({1, 2}, {9, 9});
  acc.add({}, {4});  // empty reference still contributes edits to corpus totals
  CHECK(acc.total_edits == 3);
  CHECK(acc.total_ref == 5);
  CHECK(acc.corpus_wer() == doctest::Approx(0.6));
}

TEST_CASE("evaluate is deterministic and serves all modalities from one model") {
  CorpusConfig ccfg;
  ccfg.vocab_size = 5;
  ccfg.min_utterance_tokens = 2;
  ccfg.max_utterance_tokens = 3;
  ccfg.video_dim = 5;
  ccfg.audio_dim = 3;
  ccfg.audio_rate_ratio = 4;
  ccfg.seed = 77;
  auto corpus = generate_corpus(ccfg, 4, 1.0, 4);
  Vocab vocab(5);
  auto model = ModelState<float>::init(micro_cfg(), 600);
  DecodeConfig dc;
  dc.beam_size = 4;
  for (auto m : kModalities) {
    auto r1 = evaluate(model, corpus.eval, m, dc, vocab);
    auto r2 = evaluate(model, corpus.eval, m, dc, vocab);
    REQUIRE(r1.entries.size() == r2.entries.size());
    CHECK(r1.corpus_wer == r2.corpus_wer);
    for (size_t i = 0; i < r1.entries.size(); ++i)
      CHECK(r1.entries[i].hypothesis == r2.entries[i].hypothesis);
  }
  // corrupted evaluation is also reproducible given the same noise seed
  auto n1 = evaluate(model, corpus.eval, Modality::A, dc, vocab, -5.0, 9);
  auto n2 = evaluate(model, corpus.eval, Modality::A, dc, vocab, -5.0, 9);
  CHECK(n1.corpus_wer == n2.corpus_wer);
}
