#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "weaktr/tensor.hpp"

namespace weaktr {

/// Parameters sharing one learning-rate scale (e.g. encoder at 0.1x during
/// retraining).
struct ParamGroup {
  std::vector<Parameter*> params;
  float lr_scale = 1.0f;
};

inline std::vector<ParamGroup> single_group(std::vector<Parameter*> params) {
  return {ParamGroup{std::move(params), 1.0f}};
}

inline void zero_grad(const std::vector<ParamGroup>& groups) {
  for (const ParamGroup& g : groups)
    for (Parameter* p : g.params) p->zero_grad();
}

/// Adaptive moments with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f,
                 float weight_decay = 0.05f)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const ParamGroup& g : groups_) {
      for (Parameter* p : g.params) {
        m_.emplace_back(p->numel(), 0.0f);
        v_.emplace_back(p->numel(), 0.0f);
      }
    }
  }

  void zero_grad() { weaktr::zero_grad(groups_); }

  void step(float lr) {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    std::size_t slot = 0;
    for (const ParamGroup& g : groups_) {
      const float glr = lr * g.lr_scale;
      for (Parameter* p : g.params) {
        std::vector<float>& m = m_[slot];
        std::vector<float>& v = v_[slot];
        ++slot;
        std::vector<float>& w = p->values();
        const std::vector<float>& grad = p->gradient();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const float gi = grad[i];
          m[i] = beta1_ * m[i] + (1.0f - beta1_) * gi;
          v[i] = beta2_ * v[i] + (1.0f - beta2_) * gi * gi;
          const float mhat = m[i] / bc1;
          const float vhat = v[i] / bc2;
          w[i] -= glr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[i]);
        }
      }
    }
  }

 private:
  std::vector<ParamGroup> groups_;
  float beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Momentum SGD (optionally with coupled weight decay; retraining uses 0).
class SgdMomentum {
 public:
  explicit SgdMomentum(std::vector<ParamGroup> groups, float momentum = 0.9f, float weight_decay = 0.0f)
      : groups_(std::move(groups)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const ParamGroup& g : groups_)
      for (Parameter* p : g.params) buf_.emplace_back(p->numel(), 0.0f);
  }

  void zero_grad() { weaktr::zero_grad(groups_); }

  void step(float lr) {
    std::size_t slot = 0;
    for (const ParamGroup& g : groups_) {
      const float glr = lr * g.lr_scale;
      for (Parameter* p : g.params) {
        std::vector<float>& b = buf_[slot];
        ++slot;
        std::vector<float>& w = p->values();
        const std::vector<float>& grad = p->gradient();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const float gi = grad[i] + weight_decay_ * w[i];
          b[i] = momentum_ * b[i] + gi;
          w[i] -= glr * b[i];
        }
      }
    }
  }

 private:
  std::vector<ParamGroup> groups_;
  float momentum_, weight_decay_;
  std::vector<std::vector<float>> buf_;
};

/// Linear warmup to base, then cosine decay to zero.
inline float lr_warmup_cosine(float base, std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
  }
  const std::int64_t decay_steps = total_steps - warmup_steps;
  if (decay_steps <= 0) return base;
  const double prog = static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps);
  return base * 0.5f * (1.0f + static_cast<float>(std::cos(3.14159265358979323846 * std::min(prog, 1.0))));
}

/// Polynomial decay, the usual segmentation schedule.
inline float lr_polynomial(float base, std::int64_t step, std::int64_t total_steps, float power = 0.9f) {
  if (total_steps <= 0) return base;
  const double prog = std::min(static_cast<double>(step) / static_cast<double>(total_steps), 1.0);
  return base * static_cast<float>(std::pow(1.0 - prog, power));
}

}  // namespace weaktr
