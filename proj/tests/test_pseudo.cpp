#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "testutil.hpp"
#include "trispeech/pseudo.hpp"

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
  c.vocab_total = 9;  // 5 content + blank(5) sos(6) eos(7) pad(8)
  c.video_dim = 5;
  c.audio_dim = 3;
  c.audio_rate_ratio = 4;
  return c;
}
constexpr int kSos = 6, kEos = 7;
}  // namespace

TEST_CASE("ema_update endpoints and scalar arithmetic") {
  auto cfg = micro_cfg();
  auto student = ModelState<double>::init(cfg, 1);
  auto teacher = ModelState<double>::init(cfg, 2);

  SUBCASE("mu = 0 copies the student outright") {
    ema_update(&teacher, student, 0.0);
    bool equal = true;
    teacher.visit([&](const std::string& n, TensorData<double>& t) {
      TensorData<double>* s = nullptr;
      student.visit([&](const std::string& n2, TensorData<double>& t2) {
        if (n2 == n) s = &t2;
      });
      if (t.data != s->data) equal = false;
    });
    CHECK(equal);
  }
  SUBCASE("mu = 1 freezes the teacher") {
    auto before = teacher.enc_ln.gain.data;
    auto before_w = teacher.encoder[0].self.q.w.data;
    ema_update(&teacher, student, 1.0);
    CHECK(teacher.enc_ln.gain.data == before);
    CHECK(teacher.encoder[0].self.q.w.data == before_w);
  }
  SUBCASE("scalar case 0.999*1 + 0.001*0") {
    teacher.mask_token.data[0] = 1.0;
    student.mask_token.data[0] = 0.0;
    ema_update(&teacher, student, 0.999);
    CHECK(teacher.mask_token.data[0] == doctest::Approx(0.999).epsilon(1e-12));
  }
  SUBCASE("structure mismatch is a contract error") {
    auto other_cfg = cfg;
    other_cfg.encoder_blocks = 3;
    auto odd = ModelState<double>::init(other_cfg, 3);
    CHECK_THROWS_AS(ema_update(&teacher, odd, 0.5), ContractError);
  }
  SUBCASE("contraction toward the student") {
    const double mu = 0.7;
    auto gap_before = std::abs(teacher.mask_token.data[2] - student.mask_token.data[2]);
    ema_update(&teacher, student, mu);
    auto gap_after = std::abs(teacher.mask_token.data[2] - student.mask_token.data[2]);
    CHECK(gap_after == doctest::Approx(mu * gap_before).epsilon(1e-9));
  }
}

TEST_CASE("momentum schedule endpoints are exact") {
  CHECK(momentum_schedule(0, 1000) == 0.999);
  CHECK(momentum_schedule(1000, 1000) == 1.0);
  CHECK(momentum_schedule(500, 1000) == doctest::Approx(0.9995).epsilon(1e-12));
  CHECK(momentum_schedule(250, 1000) > 0.999);
  CHECK(momentum_schedule(750, 1000) < 1.0);
  CHECK_THROWS_AS(momentum_schedule(-1, 10), ContractError);
}

TEST_CASE("ctc pseudo-labels: one-hot, uniform, and length contracts") {
  auto cfg = micro_cfg();
  auto teacher = ModelState<float>::init(cfg, 4);
  Rng rng(5);
  auto video = random_tensor_f({6, 5}, rng);
  auto audio = random_tensor_f({24, 3}, rng);

  SUBCASE("near-one-hot head gives confidence 1") {
    std::fill(teacher.ctc_head.w.data.begin(), teacher.ctc_head.w.data.end(), 0.0f);
    std::fill(teacher.ctc_head.b.data.begin(), teacher.ctc_head.b.data.end(), 0.0f);
    teacher.ctc_head.b.data[3] = 100.0f;
    auto pl = generate_pseudo_labels(teacher, video, audio, kSos, kEos, 0.8, 8);
    CHECK(pl.ctc_frames.size() == 6);  // frames length = T_v
    for (size_t t = 0; t < pl.ctc_frames.size(); ++t) {
      CHECK(pl.ctc_frames[t] == 3);
      CHECK(pl.ctc_conf[t] == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(pl.ctc_kept[t] == 1);
    }
  }
  SUBCASE("uniform head: confidence 1/V, all filtered at tau=0.8") {
    std::fill(teacher.ctc_head.w.data.begin(), teacher.ctc_head.w.data.end(), 0.0f);
    std::fill(teacher.ctc_head.b.data.begin(), teacher.ctc_head.b.data.end(), 0.0f);
    auto pl = generate_pseudo_labels(teacher, video, audio, kSos, kEos, 0.8, 8);
    for (size_t t = 0; t < pl.ctc_conf.size(); ++t) {
      CHECK(pl.ctc_conf[t] == doctest::Approx(1.0 / 9.0).epsilon(1e-5));
      CHECK(pl.ctc_kept[t] == 0);
    }
  }
}

TEST_CASE("attention pseudo-labels: immediate eos and greedy replay oracle") {
  auto cfg = micro_cfg();
  auto teacher = ModelState<float>::init(cfg, 6);
  Rng rng(7);
  auto video = random_tensor_f({5, 5}, rng);
  auto audio = random_tensor_f({20, 3}, rng);

  SUBCASE("teacher emitting eos at step 0") {
    std::fill(teacher.dec_out.w.data.begin(), teacher.dec_out.w.data.end(), 0.0f);
    std::fill(teacher.dec_out.b.data.begin(), teacher.dec_out.b.data.end(), 0.0f);
    teacher.dec_out.b.data[static_cast<size_t>(kEos)] = 9.0f;
    auto pl = generate_pseudo_labels(teacher, video, audio, kSos, kEos, 0.8, 8);
    REQUIRE(pl.attn_tokens.size() == 1);
    CHECK(pl.attn_tokens[0] == kEos);
    const double p = 1.0 / (1.0 + 8.0 * std::exp(-9.0));
    CHECK(pl.attn_conf[0] == doctest::Approx(p).epsilon(1e-4));
    CHECK_FALSE(pl.attn_hit_cap);
  }
  SUBCASE("greedy equals per-step argmax of the stored distributions") {
    auto pl = generate_pseudo_labels(teacher, video, audio, kSos, kEos, 0.8, 7);
    REQUIRE(pl.attn_step_probs.size() == pl.attn_tokens.size());
    for (size_t i = 0; i < pl.attn_tokens.size(); ++i) {
      const auto& dist = pl.attn_step_probs[i];
      int arg = 0;
      for (size_t v = 1; v < dist.size(); ++v)
        if (dist[v] > dist[static_cast<size_t>(arg)]) arg = static_cast<int>(v);
      CHECK(pl.attn_tokens[i] == arg);
      CHECK(pl.attn_conf[i] == dist[static_cast<size_t>(arg)]);
    }
  }
  SUBCASE("greedy joint probability never beats the exhaustive best") {
    auto pl = generate_pseudo_labels(teacher, video, audio, kSos, kEos, 0.8, 3);
    double greedy_logp = 0;
    for (float c : pl.attn_conf) greedy_logp += std::log(c);

    // enumerate every outcome at horizon 3 by replaying teacher-forced probs
    Graph<float> g;
    ModelRun<float> run(g, teacher, true);
    auto enc = run.encode(run.fuse_av(run.extract_video(video), run.extract_audio(audio)));
    const int V = cfg.vocab_total;
    double best = -1e30;
    std::function<void(std::vector<int>&, double, int)> walk = [&](std::vector<int>& prefix,
                                                                   double logp, int depth) {
      if (depth == 3) {
        best = std::max(best, logp);
        return;
      }
      std::vector<int> y = {kSos};
      y.insert(y.end(), prefix.begin(), prefix.end());
      auto probs = softmax(run.decode_teacher_forced(enc.final, y), 1);
      const int64_t row = (static_cast<int64_t>(y.size()) - 1) * V;
      for (int v = 0; v < V; ++v) {
        const double p = probs.value_at(row + v);
        if (v == kEos) {
          best = std::max(best, logp + std::log(p));
        } else {
          prefix.push_back(v);
          walk(prefix, logp + std::log(p), depth + 1);
          prefix.pop_back();
        }
      }
    };
    std::vector<int> prefix;
    walk(prefix, 0.0, 0);
    CHECK(greedy_logp <= best + 1e-9);
  }
}

TEST_CASE("confidence filter thresholds") {
  CHECK(confidence_filter({0.9f, 0.7f, 0.85f}, 0.8) == std::vector<uint8_t>{1, 0, 1});
  CHECK(confidence_filter({0.1f, 0.5f}, 0.0) == std::vector<uint8_t>{1, 1});  // no filtering
  CHECK(confidence_filter({0.9999f, 1.0f}, 1.0) == std::vector<uint8_t>{0, 1});
}

TEST_CASE("kept fraction bookkeeping") {
  KeptStats stats;
  CHECK_FALSE(stats.fraction().has_value());  // empty window is absent, not 0
  stats.add({1, 1, 1});
  CHECK(stats.fraction() == 1.0);
  stats.add({0, 0, 1});
  CHECK(stats.fraction() == doctest::Approx(4.0 / 6.0));
  stats.reset();
  CHECK_FALSE(stats.fraction().has_value());
}

TEST_CASE("teacher parameters never build gradient state") {
  auto teacher = ModelState<float>::init(micro_cfg(), 8);
  Rng rng(9);
  auto video = random_tensor_f({4, 5}, rng);
  auto audio = random_tensor_f({16, 3}, rng);
  const uint64_t before = teacher_forward_count().load();
  auto pl = generate_pseudo_labels(teacher, video, audio, kSos, kEos, 0.8, 6);
  CHECK(teacher_forward_count().load() == before + 1);
  teacher.visit([&](const std::string&, TensorData<float>& t) { CHECK(t.grad.empty()); });
  CHECK(pl.ctc_frames.size() == 4);
}
