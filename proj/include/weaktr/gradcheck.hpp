#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "weaktr/tensor.hpp"

namespace weaktr {

struct GradCheckEntry {
  std::string name;
  float max_rel_error = 0.0f;
  float max_abs_error = 0.0f;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  float tolerance = 0.0f;
  bool pass = false;

  float worst() const {
    float w = 0.0f;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
};

/// Central finite differences against the analytic reverse-mode gradients.
///
/// Each parameter's error is the largest per-scalar deviation
/// |analytic - fd| normalized by that parameter's gradient scale
/// max(‖analytic‖∞, ‖fd‖∞, 1e-8); normalizing per scalar would drown
/// near-zero entries in float32 finite-difference noise. The report passes
/// iff every parameter's error is within tolerance.
inline GradCheckReport check_gradient(const std::function<Tensor()>& loss_fn, const std::vector<Parameter*>& params,
                                      float epsilon = 1e-2f, float tolerance = 1e-2f) {
  if (epsilon <= 0.0f) throw std::invalid_argument("check_gradient: epsilon must be positive");

  for (Parameter* p : params) p->zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw std::runtime_error("check_gradient: non-finite loss");
  backward(loss);

  std::vector<std::vector<float>> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->gradient());

  auto eval = [&]() {
    NoGradGuard ng;
    const float v = loss_fn().item();
    if (!std::isfinite(v)) throw std::runtime_error("check_gradient: non-finite loss during perturbation");
    return v;
  };

  GradCheckReport report;
  report.tolerance = tolerance;
  report.pass = true;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    std::vector<float>& v = p->values();
    const std::vector<float>& a = analytic[pi];
    float max_abs = 0.0f, scale = 0.0f;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float x = v[i];
      v[i] = x + epsilon;
      const float lp = eval();
      v[i] = x - epsilon;
      const float lm = eval();
      v[i] = x;
      const float fd = (lp - lm) / (2.0f * epsilon);
      max_abs = std::max(max_abs, std::fabs(a[i] - fd));
      scale = std::max({scale, std::fabs(a[i]), std::fabs(fd)});
    }
    GradCheckEntry e;
    e.name = p->name;
    e.max_abs_error = max_abs;
    e.max_rel_error = max_abs / std::max(scale, 1e-8f);
    if (e.max_rel_error > tolerance) report.pass = false;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace weaktr
