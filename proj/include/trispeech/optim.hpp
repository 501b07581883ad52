#ifndef TRISPEECH_OPTIM_HPP
#define TRISPEECH_OPTIM_HPP

// AdamW with decoupled weight decay, bias-corrected moments, and global-norm
// gradient clipping, plus the linear-warmup / cosine-decay learning rate
// schedule. Schedule endpoints are exact by construction.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/model.hpp"
#include "trispeech/serialize.hpp"

namespace trispeech {

struct OptimConfig {
  double peak_lr = 2e-3;
  int warmup_epochs = 2;
  int total_epochs = 12;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.04;
  double grad_clip = 3.0;
  int batch_labelled = 4;        // utterances per step
  int batch_unlabelled = 8;
  int frame_cap_labelled = 512;  // video frames per batch
  int frame_cap_unlabelled = 512;

  void validate() const {
    if (peak_lr <= 0) throw ConfigError("peak_lr must be positive");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
      throw ConfigError("warmup_epochs must be < total_epochs");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("betas must lie in [0,1)");
    if (grad_clip <= 0) throw ConfigError("grad_clip must be positive");
    if (batch_labelled < 1 || batch_unlabelled < 1) throw ConfigError("batch sizes must be >= 1");
    if (frame_cap_labelled < 1 || frame_cap_unlabelled < 1)
      throw ConfigError("frame caps must be >= 1");
  }
};

// Linear 0 -> peak over warmup steps, then cosine peak -> 0.
inline double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps,
                          double peak_lr) {
  if (step <= 0) return 0.0;
  if (step < warmup_steps)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step == warmup_steps) return peak_lr;
  if (step >= total_steps) return 0.0;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return peak_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

template <typename S>
class AdamW {
 public:
  AdamW(ModelState<S>& model, const OptimConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    model.visit([&](const std::string& name, TensorData<S>& p) {
      names_.push_back(name);
      params_.push_back(&p);
      m_.push_back(std::vector<S>(p.data.size(), S(0)));
      v_.push_back(std::vector<S>(p.data.size(), S(0)));
      lr_mult_.push_back(1.0);
    });
  }

  // Per-parameter learning-rate multipliers (layer-wise decay, freezing).
  void set_lr_multipliers(const std::function<double(const std::string&)>& fn) {
    for (size_t i = 0; i < names_.size(); ++i) lr_mult_[i] = fn(names_[i]);
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  double last_grad_norm() const { return last_grad_norm_; }
  int64_t step_count() const { return t_; }

  // Global-norm clip then one AdamW update. Returns false (and leaves
  // parameters untouched) when any gradient is non-finite.
  bool step(double lr) {
    double sq = 0.0;
    for (auto* p : params_) {
      p->ensure_grad();
      for (S g : p->grad) {
        const double gd = static_cast<double>(g);
        if (!std::isfinite(gd)) return false;
        sq += gd * gd;
      }
    }
    last_grad_norm_ = std::sqrt(sq);
    const double clip_scale =
        last_grad_norm_ > cfg_.grad_clip ? cfg_.grad_clip / last_grad_norm_ : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      const double eff_lr = lr * lr_mult_[i];
      for (size_t k = 0; k < p.data.size(); ++k) {
        const double g = static_cast<double>(p.grad[k]) * clip_scale;
        const double m = cfg_.beta1 * static_cast<double>(m_[i][k]) + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(v_[i][k]) + (1.0 - cfg_.beta2) * g * g;
        m_[i][k] = static_cast<S>(m);
        v_[i][k] = static_cast<S>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        const double update = mhat / (std::sqrt(vhat) + 1e-8) +
                              cfg_.weight_decay * static_cast<double>(p.data[k]);
        p.data[k] = static_cast<S>(static_cast<double>(p.data[k]) - eff_lr * update);
      }
    }
    return true;
  }

  void pack(BlobFile* file) const {
    for (size_t i = 0; i < names_.size(); ++i) {
      TensorData<S> m(params_[i]->shape, m_[i]);
      TensorData<S> v(params_[i]->shape, v_[i]);
      file->blobs.emplace_back("opt.m." + names_[i], m.template cast<float>());
      file->blobs.emplace_back("opt.v." + names_[i], v.template cast<float>());
    }
  }

  void unpack(const BlobFile& file, int64_t step_count_restore) {
    for (size_t i = 0; i < names_.size(); ++i) {
      const auto* bm = file.find("opt.m." + names_[i]);
      const auto* bv = file.find("opt.v." + names_[i]);
      if (!bm || !bv) throw IoError("checkpoint is missing optimizer state for " + names_[i]);
      auto mc = bm->template cast<S>();
      auto vc = bv->template cast<S>();
      m_[i] = mc.data;
      v_[i] = vc.data;
    }
    t_ = step_count_restore;
  }

 private:
  OptimConfig cfg_;
  std::vector<std::string> names_;
  std::vector<TensorData<S>*> params_;
  std::vector<std::vector<S>> m_, v_;
  std::vector<double> lr_mult_;
  int64_t t_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace trispeech

#endif  // TRISPEECH_OPTIM_HPP
