#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "testutil.hpp"
#include "trispeech/optim.hpp"

using namespace trispeech;

namespace {
ModelConfig tiny_cfg() {
  ModelConfig c;
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  c.attn_dim = 4;
  c.attn_heads = 1;
  c.mlp_dim = 4;
  c.predictor_blocks = 1;
  c.predictor_dim = 4;
  c.vocab_total = 6;
  c.video_dim = 2;
  c.audio_dim = 2;
  c.audio_rate_ratio = 1;
  return c;
}
}  // namespace

TEST_CASE("zero gradients and zero weight decay leave parameters unchanged") {
  auto m = ModelState<double>::init(tiny_cfg(), 1);
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(m, cfg);
  auto before = m.fuse.w.data;
  opt.zero_grad();
  CHECK(opt.step(0.1));
  CHECK(m.fuse.w.data == before);
}

TEST_CASE("one scalar step matches the hand-computed AdamW update") {
  auto m = ModelState<double>::init(tiny_cfg(), 2);
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(m, cfg);
  opt.zero_grad();
  // isolate one coordinate of one parameter
  const double p0 = m.mask_token.data[0];
  const double g = 0.5;
  m.mask_token.ensure_grad();
  m.mask_token.grad[0] = g;
  const double lr = 0.1;
  REQUIRE(opt.step(lr));
  const double m1 = (1 - cfg.beta1) * g;
  const double v1 = (1 - cfg.beta2) * g * g;
  const double mhat = m1 / (1 - cfg.beta1);
  const double vhat = v1 / (1 - cfg.beta2);
  const double want = p0 - lr * (mhat / (std::sqrt(vhat) + 1e-8));
  CHECK(std::abs(m.mask_token.data[0] - want) < 1e-12);
}

TEST_CASE("global-norm clipping halves a norm-6 gradient at clip 3") {
  auto m = ModelState<double>::init(tiny_cfg(), 3);
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(m, cfg);
  opt.zero_grad();
  m.mask_token.ensure_grad();
  m.mask_token.grad[0] = 6.0;  // global norm 6, clip 3 -> scale 1/2
  const double p0 = m.mask_token.data[0];
  REQUIRE(opt.step(1.0));
  CHECK(opt.last_grad_norm() == doctest::Approx(6.0));
  const double g = 3.0;  // effective gradient after clipping
  const double mhat = ((1 - cfg.beta1) * g) / (1 - cfg.beta1);
  const double vhat = ((1 - cfg.beta2) * g * g) / (1 - cfg.beta2);
  const double want = p0 - 1.0 * (mhat / (std::sqrt(vhat) + 1e-8));
  CHECK(std::abs(m.mask_token.data[0] - want) < 1e-12);
}

TEST_CASE("non-finite gradients skip the step and leave parameters intact") {
  auto m = ModelState<double>::init(tiny_cfg(), 4);
  OptimConfig cfg;
  AdamW<double> opt(m, cfg);
  opt.zero_grad();
  m.mask_token.ensure_grad();
  m.mask_token.grad[0] = std::numeric_limits<double>::quiet_NaN();
  auto before = m.mask_token.data;
  CHECK_FALSE(opt.step(0.1));
  CHECK(m.mask_token.data == before);
  CHECK(opt.step_count() == 0);
}

TEST_CASE("decoupled weight decay applies even with zero gradient") {
  auto m = ModelState<double>::init(tiny_cfg(), 5);
  OptimConfig cfg;  // weight decay 0.04
  AdamW<double> opt(m, cfg);
  opt.zero_grad();
  const double p0 = m.fuse.w.data[0];
  REQUIRE(opt.step(0.5));
  CHECK(m.fuse.w.data[0] == doctest::Approx(p0 - 0.5 * 0.04 * p0).epsilon(1e-12));
}

TEST_CASE("learning-rate multipliers freeze selected parameters") {
  auto m = ModelState<double>::init(tiny_cfg(), 6);
  OptimConfig cfg;
  AdamW<double> opt(m, cfg);
  opt.set_lr_multipliers([](const std::string& name) {
    return name.rfind("video_", 0) == 0 ? 0.0 : 1.0;
  });
  opt.zero_grad();
  m.video_fc1.w.ensure_grad();
  m.video_fc1.w.grad[0] = 1.0;
  m.fuse.w.ensure_grad();
  m.fuse.w.grad[0] = 1.0;
  auto frozen_before = m.video_fc1.w.data;
  auto live_before = m.fuse.w.data[0];
  REQUIRE(opt.step(0.1));
  CHECK(m.video_fc1.w.data == frozen_before);
  CHECK(m.fuse.w.data[0] != live_before);
}

TEST_CASE("lr schedule endpoints are exact") {
  const double peak = 3e-3;
  CHECK(lr_schedule(0, 100, 1000, peak) == 0.0);
  CHECK(lr_schedule(100, 100, 1000, peak) == peak);
  CHECK(lr_schedule(1000, 100, 1000, peak) == 0.0);
  CHECK(lr_schedule(50, 100, 1000, peak) == doctest::Approx(peak / 2).epsilon(1e-12));
  const double mid = lr_schedule(550, 100, 1000, peak);
  CHECK(mid == doctest::Approx(peak / 2).epsilon(1e-12));  // cosine midpoint
  CHECK(lr_schedule(999, 100, 1000, peak) > 0.0);
  CHECK(lr_schedule(999, 100, 1000, peak) < 1e-4 * peak + 1e-12);
}

TEST_CASE("optimizer state round-trips through a blob file") {
  auto m = ModelState<float>::init(tiny_cfg(), 7);
  OptimConfig cfg;
  AdamW<float> opt(m, cfg);
  opt.zero_grad();
  m.mask_token.ensure_grad();
  m.mask_token.grad[0] = 0.25f;
  REQUIRE(opt.step(0.01));
  BlobFile f;
  opt.pack(&f);
  AdamW<float> opt2(m, cfg);
  opt2.unpack(f, opt.step_count());
  CHECK(opt2.step_count() == 1);
}
