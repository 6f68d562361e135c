#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

#include "weaktr/tensor.hpp"

namespace weaktr {
namespace detail {

inline bool any_requires(std::initializer_list<const Tensor*> ts) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_out(Shape s, bool requires_grad) { return Tensor::zeros(std::move(s), requires_grad); }

inline void attach(Tensor& out, std::vector<Tensor> parents, std::function<void()> fn) {
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(fn);
}

/// C[M×N] = op(A)·op(B), double accumulation. Buffers: A is [M×K] row-major
/// (or [K×M] when ta), B is [K×N] (or [N×K] when tb). acc=true accumulates.
inline void gemm(const float* A, bool ta, const float* B, bool tb, std::int64_t M, std::int64_t K,
                 std::int64_t N, float* C, bool acc) {
  for (std::int64_t i = 0; i < M; ++i) {
    for (std::int64_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::int64_t p = 0; p < K; ++p) {
        const float av = ta ? A[p * M + i] : A[i * K + p];
        const float bv = tb ? B[j * K + p] : B[p * N + j];
        s += static_cast<double>(av) * static_cast<double>(bv);
      }
      const float v = static_cast<float>(s);
      C[i * N + j] = acc ? C[i * N + j] + v : v;
    }
  }
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                shape_str(t.shape));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor out = detail::make_out(a.shape, detail::any_requires({&a, &b}));
  const std::size_t n = a.data->size();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {a, b}, [a, b, og]() {
      const std::size_t m = og->size();
      if (a.grad)
        for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*og)[i];
      if (b.grad)
        for (std::size_t i = 0; i < m; ++i) (*b.grad)[i] += (*og)[i];
    });
  }
  return out;
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor out = detail::make_out(a.shape, detail::any_requires({&a, &b}));
  const std::size_t n = a.data->size();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {a, b}, [a, b, og]() {
      const std::size_t m = og->size();
      if (a.grad)
        for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*og)[i] * (*b.data)[i];
      if (b.grad)
        for (std::size_t i = 0; i < m; ++i) (*b.grad)[i] += (*og)[i] * (*a.data)[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, float s) {
  Tensor out = detail::make_out(a.shape, detail::any_requires({&a}));
  const std::size_t n = a.data->size();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {a}, [a, og, s]() {
      const std::size_t m = og->size();
      for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*og)[i] * s;
    });
  }
  return out;
}

/// Metadata-only view; shares data (and gradient) with the input.
inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(new_shape));
  }
  Tensor out;
  out.shape = std::move(new_shape);
  out.data = a.data;
  if (detail::any_requires({&a})) {
    out.grad = a.grad;
    out.node = std::make_shared<Node>();
    out.node->parents = {a};  // keeps the producing op reachable; grads alias
  }
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1) {
  detail::require_rank(a, 2, "slice_rows");
  const std::int64_t rows = a.shape[0], cols = a.shape[1];
  if (r0 < 0 || r1 > rows || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  Tensor out = detail::make_out({r1 - r0, cols}, detail::any_requires({&a}));
  std::copy(a.ptr() + r0 * cols, a.ptr() + r1 * cols, out.ptr());
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {a}, [a, og, r0, cols]() {
      const std::size_t m = og->size();
      float* g = a.grad->data() + static_cast<std::size_t>(r0 * cols);
      for (std::size_t i = 0; i < m; ++i) g[i] += (*og)[i];
    });
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1) {
  detail::require_rank(a, 2, "slice_cols");
  const std::int64_t rows = a.shape[0], cols = a.shape[1];
  if (c0 < 0 || c1 > cols || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  const std::int64_t w = c1 - c0;
  Tensor out = detail::make_out({rows, w}, detail::any_requires({&a}));
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy(a.ptr() + r * cols + c0, a.ptr() + r * cols + c1, out.ptr() + r * w);
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {a}, [a, og, rows, cols, c0, w]() {
      for (std::int64_t r = 0; r < rows; ++r) {
        float* g = a.grad->data() + r * cols + c0;
        const float* o = og->data() + r * w;
        for (std::int64_t j = 0; j < w; ++j) g[j] += o[j];
      }
    });
  }
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.shape[1] != b.shape[1]) {
    throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  const std::int64_t cols = a.shape[1];
  Tensor out = detail::make_out({a.shape[0] + b.shape[0], cols}, detail::any_requires({&a, &b}));
  std::copy(a.ptr(), a.ptr() + a.numel(), out.ptr());
  std::copy(b.ptr(), b.ptr() + b.numel(), out.ptr() + a.numel());
  if (out.requires_grad()) {
    auto og = out.grad;
    const std::size_t na = a.data->size();
    detail::attach(out, {a, b}, [a, b, og, na]() {
      if (a.grad)
        for (std::size_t i = 0; i < na; ++i) (*a.grad)[i] += (*og)[i];
      if (b.grad)
        for (std::size_t i = 0; i < b.grad->size(); ++i) (*b.grad)[i] += (*og)[na + i];
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::int64_t rows = parts[0].shape.at(0);
  std::int64_t total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.shape[0] != rows) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.shape[1];
    rg = rg || p.requires_grad();
  }
  rg = rg && grad_enabled();
  Tensor out = detail::make_out({rows, total}, rg);
  std::int64_t off = 0;
  for (const Tensor& p : parts) {
    const std::int64_t w = p.shape[1];
    for (std::int64_t r = 0; r < rows; ++r) {
      std::copy(p.ptr() + r * w, p.ptr() + (r + 1) * w, out.ptr() + r * total + off);
    }
    off += w;
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    auto ps = parts;
    detail::attach(out, parts, [ps, og, rows, total]() {
      std::int64_t off2 = 0;
      for (const Tensor& p : ps) {
        const std::int64_t w = p.shape[1];
        if (p.grad) {
          for (std::int64_t r = 0; r < rows; ++r) {
            float* g = p.grad->data() + r * w;
            const float* o = og->data() + r * total + off2;
            for (std::int64_t j = 0; j < w; ++j) g[j] += o[j];
          }
        }
        off2 += w;
      }
    });
  }
  return out;
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack0: no inputs");
  const Shape inner = parts[0].shape;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.shape != inner) throw std::invalid_argument("stack0: shape mismatch");
    rg = rg || p.requires_grad();
  }
  rg = rg && grad_enabled();
  Shape s;
  s.push_back(static_cast<std::int64_t>(parts.size()));
  s.insert(s.end(), inner.begin(), inner.end());
  Tensor out = detail::make_out(s, rg);
  const std::size_t step = parts[0].data->size();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    std::copy(parts[i].ptr(), parts[i].ptr() + step, out.ptr() + i * step);
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    auto ps = parts;
    detail::attach(out, parts, [ps, og, step]() {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        if (!ps[i].grad) continue;
        float* g = ps[i].grad->data();
        const float* o = og->data() + i * step;
        for (std::size_t j = 0; j < step; ++j) g[j] += o[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.shape[1] != b.shape[0]) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = detail::make_out({m, n}, detail::any_requires({&a, &b}));
  detail::gemm(a.ptr(), false, b.ptr(), false, m, k, n, out.ptr(), false);
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {a, b}, [a, b, og, m, k, n]() {
      if (a.grad) detail::gemm(og->data(), false, b.ptr(), true, m, n, k, a.grad->data(), true);
      if (b.grad) detail::gemm(a.ptr(), true, og->data(), false, k, m, n, b.grad->data(), true);
    });
  }
  return out;
}

/// a[m×k] · b[n×k]ᵀ → [m×n].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  if (a.shape[1] != b.shape[1]) {
    throw std::invalid_argument("matmul_nt: inner dimensions disagree, " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor out = detail::make_out({m, n}, detail::any_requires({&a, &b}));
  detail::gemm(a.ptr(), false, b.ptr(), true, m, k, n, out.ptr(), false);
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {a, b}, [a, b, og, m, k, n]() {
      if (a.grad) detail::gemm(og->data(), false, b.ptr(), false, m, n, k, a.grad->data(), true);
      if (b.grad) detail::gemm(og->data(), true, a.ptr(), false, n, m, k, b.grad->data(), true);
    });
  }
  return out;
}

/// x[m×k] · w[k×n] + bias[n] broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  if (x.shape[1] != w.shape[0] || bias.numel() != w.shape[1]) {
    throw std::invalid_argument("linear: shapes disagree, x=" + shape_str(x.shape) + " w=" + shape_str(w.shape) +
                                " b=" + shape_str(bias.shape));
  }
  const std::int64_t m = x.shape[0], k = x.shape[1], n = w.shape[1];
  Tensor out = detail::make_out({m, n}, detail::any_requires({&x, &w, &bias}));
  detail::gemm(x.ptr(), false, w.ptr(), false, m, k, n, out.ptr(), false);
  for (std::int64_t i = 0; i < m; ++i) {
    float* row = out.ptr() + i * n;
    for (std::int64_t j = 0; j < n; ++j) row[j] += (*bias.data)[j];
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {x, w, bias}, [x, w, bias, og, m, k, n]() {
      if (x.grad) detail::gemm(og->data(), false, w.ptr(), true, m, n, k, x.grad->data(), true);
      if (w.grad) detail::gemm(x.ptr(), true, og->data(), false, k, m, n, w.grad->data(), true);
      if (bias.grad) {
        for (std::int64_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::int64_t i = 0; i < m; ++i) s += (*og)[i * n + j];
          (*bias.grad)[j] += static_cast<float>(s);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

/// Softmax over the last axis, max-subtracted for stability.
inline Tensor softmax_last(const Tensor& t) {
  if (t.rank() < 1 || t.shape.back() < 1) throw std::invalid_argument("softmax_last: need last dimension >= 1");
  const std::int64_t d = t.shape.back();
  const std::int64_t rows = t.numel() / d;
  Tensor out = detail::make_out(t.shape, detail::any_requires({&t}));
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* in = t.ptr() + r * d;
    float* o = out.ptr() + r * d;
    float mx = in[0];
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (std::int64_t j = 0; j < d; ++j) o[j] *= inv;
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    auto od = out.data;
    detail::attach(out, {t}, [t, og, od, rows, d]() {
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* y = od->data() + r * d;
        const float* dy = og->data() + r * d;
        float* dx = t.grad->data() + r * d;
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(dy[j]) * y[j];
        for (std::int64_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

/// Per-row standardization over the last axis, then affine scale/shift.
inline Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f) {
  const std::int64_t d = t.shape.back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw std::invalid_argument("layer_norm: gamma/beta must match last dimension " + std::to_string(d));
  }
  if (eps <= 0.0f) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::int64_t rows = t.numel() / d;
  Tensor out = detail::make_out(t.shape, detail::any_requires({&t, &gamma, &beta}));
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  auto means = std::make_shared<std::vector<float>>(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* in = t.ptr() + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += in[j];
    mean /= d;
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = in[j] - mean;
      var += c * c;
    }
    var /= d;
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[r] = is;
    (*means)[r] = static_cast<float>(mean);
    float* o = out.ptr() + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] = (in[j] - static_cast<float>(mean)) * is * (*gamma.data)[j] + (*beta.data)[j];
    }
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t, gamma, beta}, [t, gamma, beta, og, inv_std, means, rows, d]() {
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* in = t.ptr() + r * d;
        const float* dy = og->data() + r * d;
        const float is = (*inv_std)[r];
        const float mean = (*means)[r];
        if (gamma.grad || beta.grad) {
          for (std::int64_t j = 0; j < d; ++j) {
            const float xh = (in[j] - mean) * is;
            if (gamma.grad) (*gamma.grad)[j] += dy[j] * xh;
            if (beta.grad) (*beta.grad)[j] += dy[j];
          }
        }
        if (t.grad) {
          double mg = 0.0, mgx = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            const float g = dy[j] * (*gamma.data)[j];
            const float xh = (in[j] - mean) * is;
            mg += g;
            mgx += static_cast<double>(g) * xh;
          }
          mg /= d;
          mgx /= d;
          float* dx = t.grad->data() + r * d;
          for (std::int64_t j = 0; j < d; ++j) {
            const float g = dy[j] * (*gamma.data)[j];
            const float xh = (in[j] - mean) * is;
            dx[j] += is * (g - static_cast<float>(mg) - xh * static_cast<float>(mgx));
          }
        }
      }
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& t) {
  Tensor out = detail::make_out(t.shape, detail::any_requires({&t}));
  const std::size_t n = t.data->size();
  for (std::size_t i = 0; i < n; ++i) {
    const float x = (*t.data)[i];
    (*out.data)[i] = x >= 0.0f ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    auto od = out.data;
    detail::attach(out, {t}, [t, og, od]() {
      const std::size_t m = og->size();
      for (std::size_t i = 0; i < m; ++i) {
        const float y = (*od)[i];
        (*t.grad)[i] += (*og)[i] * y * (1.0f - y);
      }
    });
  }
  return out;
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& t) {
  Tensor out = detail::make_out(t.shape, detail::any_requires({&t}));
  const std::size_t n = t.data->size();
  constexpr float kInvSqrt2 = 0.70710678118654752440f;
  for (std::size_t i = 0; i < n; ++i) {
    const float x = (*t.data)[i];
    (*out.data)[i] = 0.5f * x * (1.0f + std::erf(x * kInvSqrt2));
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t}, [t, og]() {
      constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
      const std::size_t m = og->size();
      for (std::size_t i = 0; i < m; ++i) {
        const float x = (*t.data)[i];
        const float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678118654752440f));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
        (*t.grad)[i] += (*og)[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Mean of each map. Rank >= 3 inputs are stacks of maps indexed by the
/// leading axis and yield one scalar per leading index; rank 1-2 inputs are
/// a single map and reduce to one scalar.
inline Tensor global_avg_pool(const Tensor& t) {
  if (!t.defined() || t.numel() == 0) throw std::domain_error("global_avg_pool: empty tensor");
  const bool keep_leading = t.rank() >= 3;
  const std::int64_t lead = keep_leading ? t.shape[0] : 1;
  const std::int64_t inner = t.numel() / lead;
  Tensor out = detail::make_out({lead}, detail::any_requires({&t}));
  for (std::int64_t i = 0; i < lead; ++i) {
    double s = 0.0;
    const float* p = t.ptr() + i * inner;
    for (std::int64_t j = 0; j < inner; ++j) s += p[j];
    (*out.data)[i] = static_cast<float>(s / inner);
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t}, [t, og, lead, inner]() {
      const float invn = 1.0f / static_cast<float>(inner);
      for (std::int64_t i = 0; i < lead; ++i) {
        const float g = (*og)[i] * invn;
        float* dx = t.grad->data() + i * inner;
        for (std::int64_t j = 0; j < inner; ++j) dx[j] += g;
      }
    });
  }
  return out;
}

/// Mean over the spatial axes of an [h×w×c] map, one value per channel.
inline Tensor spatial_mean(const Tensor& t) {
  detail::require_rank(t, 3, "spatial_mean");
  const std::int64_t h = t.shape[0], w = t.shape[1], c = t.shape[2];
  Tensor out = detail::make_out({c}, detail::any_requires({&t}));
  std::vector<double> acc(static_cast<std::size_t>(c), 0.0);
  const float* p = t.ptr();
  for (std::int64_t i = 0; i < h * w; ++i)
    for (std::int64_t k = 0; k < c; ++k) acc[k] += p[i * c + k];
  for (std::int64_t k = 0; k < c; ++k) (*out.data)[k] = static_cast<float>(acc[k] / (h * w));
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t}, [t, og, h, w, c]() {
      const float invn = 1.0f / static_cast<float>(h * w);
      float* dx = t.grad->data();
      for (std::int64_t i = 0; i < h * w; ++i)
        for (std::int64_t k = 0; k < c; ++k) dx[i * c + k] += (*og)[k] * invn;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& t) {
  if (!t.defined() || t.numel() == 0) throw std::domain_error("mean_all: empty tensor");
  const std::int64_t n = t.numel();
  Tensor out = detail::make_out({1}, detail::any_requires({&t}));
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += (*t.data)[i];
  (*out.data)[0] = static_cast<float>(s / n);
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t}, [t, og, n]() {
      const float g = (*og)[0] / static_cast<float>(n);
      for (std::int64_t i = 0; i < n; ++i) (*t.grad)[i] += g;
    });
  }
  return out;
}

/// Mean of t over positions where mask is nonzero; gradients flow only into
/// those positions. The mask must be a constant (no gradient of its own).
inline Tensor masked_mean(const Tensor& t, const Tensor& mask) {
  if (t.shape != mask.shape) {
    throw std::invalid_argument("masked_mean: shape mismatch " + shape_str(t.shape) + " vs " + shape_str(mask.shape));
  }
  if (mask.requires_grad()) throw std::invalid_argument("masked_mean: mask must be constant");
  const std::int64_t n = t.numel();
  double s = 0.0;
  std::int64_t cnt = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if ((*mask.data)[i] != 0.0f) {
      s += (*t.data)[i];
      ++cnt;
    }
  }
  if (cnt == 0) throw std::domain_error("masked_mean: mask selects no elements");
  Tensor out = detail::make_out({1}, detail::any_requires({&t}));
  (*out.data)[0] = static_cast<float>(s / cnt);
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t, mask}, [t, mask, og, n, cnt]() {
      const float g = (*og)[0] / static_cast<float>(cnt);
      for (std::int64_t i = 0; i < n; ++i) {
        if ((*mask.data)[i] != 0.0f) (*t.grad)[i] += g;
      }
    });
  }
  return out;
}

/// (1/n)·Σᵢ wᵢ·stackᵢ over the leading axis; both the stack and the weights
/// receive gradients.
inline Tensor weighted_head_sum(const Tensor& stack, const Tensor& weights) {
  if (stack.rank() < 2) throw std::invalid_argument("weighted_head_sum: stack must have a leading axis");
  const std::int64_t n = stack.shape[0];
  if (weights.numel() != n) {
    throw std::invalid_argument("weighted_head_sum: weights " + shape_str(weights.shape) + " vs " +
                                std::to_string(n) + " stack entries");
  }
  Shape inner(stack.shape.begin() + 1, stack.shape.end());
  const std::int64_t step = shape_numel(inner);
  Tensor out = detail::make_out(inner, detail::any_requires({&stack, &weights}));
  const float invn = 1.0f / static_cast<float>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const float wi = (*weights.data)[i] * invn;
    const float* src = stack.ptr() + i * step;
    float* dst = out.ptr();
    for (std::int64_t j = 0; j < step; ++j) dst[j] += wi * src[j];
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {stack, weights}, [stack, weights, og, n, step, invn]() {
      for (std::int64_t i = 0; i < n; ++i) {
        const float* src = stack.ptr() + i * step;
        if (stack.grad) {
          const float wi = (*weights.data)[i] * invn;
          float* g = stack.grad->data() + i * step;
          for (std::int64_t j = 0; j < step; ++j) g[j] += wi * (*og)[j];
        }
        if (weights.grad) {
          double s = 0.0;
          for (std::int64_t j = 0; j < step; ++j) s += static_cast<double>((*og)[j]) * src[j];
          (*weights.grad)[i] += static_cast<float>(s * invn);
        }
      }
    });
  }
  return out;
}

/// Rows rescaled to unit L2 norm (norms below eps are clamped to eps).
inline Tensor l2_normalize_rows(const Tensor& t, float eps = 1e-12f) {
  detail::require_rank(t, 2, "l2_normalize_rows");
  const std::int64_t rows = t.shape[0], d = t.shape[1];
  Tensor out = detail::make_out(t.shape, detail::any_requires({&t}));
  auto norms = std::make_shared<std::vector<float>>(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* in = t.ptr() + r * d;
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += static_cast<double>(in[j]) * in[j];
    const float nrm = std::max(static_cast<float>(std::sqrt(s)), eps);
    (*norms)[r] = nrm;
    float* o = out.ptr() + r * d;
    for (std::int64_t j = 0; j < d; ++j) o[j] = in[j] / nrm;
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t}, [t, og, norms, rows, d, eps]() {
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* in = t.ptr() + r * d;
        const float* dy = og->data() + r * d;
        float* dx = t.grad->data() + r * d;
        const float nrm = (*norms)[r];
        if (nrm <= eps) {
          for (std::int64_t j = 0; j < d; ++j) dx[j] += dy[j] / eps;
          continue;
        }
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(in[j]) * dy[j];
        const float k = static_cast<float>(dot) / (nrm * nrm * nrm);
        for (std::int64_t j = 0; j < d; ++j) dx[j] += dy[j] / nrm - in[j] * k;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

/// Align-corners bilinear upsampling of an [h×w×c] map.
inline Tensor upsample_bilinear(const Tensor& t, std::int64_t out_h, std::int64_t out_w) {
  detail::require_rank(t, 3, "upsample_bilinear");
  const std::int64_t h = t.shape[0], w = t.shape[1], c = t.shape[2];
  if (out_h < h || out_w < w) {
    throw std::domain_error("upsample_bilinear: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                            " smaller than source " + std::to_string(h) + "x" + std::to_string(w));
  }
  const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
  auto sample = [sy, sx, h, w, out_h, out_w](auto&& emit) {
    for (std::int64_t Y = 0; Y < out_h; ++Y) {
      const double fy = Y * sy;
      const std::int64_t y0 = static_cast<std::int64_t>(fy);
      const std::int64_t y1 = std::min(y0 + 1, h - 1);
      const float ty = static_cast<float>(fy - y0);
      for (std::int64_t X = 0; X < out_w; ++X) {
        const double fx = X * sx;
        const std::int64_t x0 = static_cast<std::int64_t>(fx);
        const std::int64_t x1 = std::min(x0 + 1, w - 1);
        const float tx = static_cast<float>(fx - x0);
        const float w00 = (1.0f - ty) * (1.0f - tx), w01 = (1.0f - ty) * tx;
        const float w10 = ty * (1.0f - tx), w11 = ty * tx;
        emit(Y, X, y0, x0, y1, x1, w00, w01, w10, w11);
      }
    }
  };
  Tensor out = detail::make_out({out_h, out_w, c}, detail::any_requires({&t}));
  sample([&](std::int64_t Y, std::int64_t X, std::int64_t y0, std::int64_t x0, std::int64_t y1, std::int64_t x1,
             float w00, float w01, float w10, float w11) {
    float* o = out.ptr() + (Y * out_w + X) * c;
    const float* p00 = t.ptr() + (y0 * w + x0) * c;
    const float* p01 = t.ptr() + (y0 * w + x1) * c;
    const float* p10 = t.ptr() + (y1 * w + x0) * c;
    const float* p11 = t.ptr() + (y1 * w + x1) * c;
    for (std::int64_t k = 0; k < c; ++k) o[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
  });
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {t}, [t, og, sample, out_w, w, c]() {
      sample([&](std::int64_t Y, std::int64_t X, std::int64_t y0, std::int64_t x0, std::int64_t y1, std::int64_t x1,
                 float w00, float w01, float w10, float w11) {
        const float* o = og->data() + (Y * out_w + X) * c;
        float* g = t.grad->data();
        for (std::int64_t k = 0; k < c; ++k) {
          g[(y0 * w + x0) * c + k] += w00 * o[k];
          g[(y0 * w + x1) * c + k] += w01 * o[k];
          g[(y1 * w + x0) * c + k] += w10 * o[k];
          g[(y1 * w + x1) * c + k] += w11 * o[k];
        }
      });
    });
  }
  return out;
}

/// 3x3 convolution over an [h×w×cin] map, zero padding, stride 1.
/// Kernel layout [3×3×cin×cout], bias [cout].
inline Tensor conv3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  detail::require_rank(x, 3, "conv3x3");
  detail::require_rank(kernel, 4, "conv3x3");
  const std::int64_t h = x.shape[0], w = x.shape[1], ci = x.shape[2];
  if (kernel.shape[0] != 3 || kernel.shape[1] != 3 || kernel.shape[2] != ci) {
    throw std::invalid_argument("conv3x3: kernel " + shape_str(kernel.shape) + " does not fit input " +
                                shape_str(x.shape));
  }
  const std::int64_t co = kernel.shape[3];
  if (bias.numel() != co) throw std::invalid_argument("conv3x3: bias size mismatch");
  Tensor out = detail::make_out({h, w, co}, detail::any_requires({&x, &kernel, &bias}));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t xx = 0; xx < w; ++xx) {
      float* o = out.ptr() + (y * w + xx) * co;
      for (std::int64_t oc = 0; oc < co; ++oc) o[oc] = (*bias.data)[oc];
      for (std::int64_t ky = 0; ky < 3; ++ky) {
        const std::int64_t sy = y + ky - 1;
        if (sy < 0 || sy >= h) continue;
        for (std::int64_t kx = 0; kx < 3; ++kx) {
          const std::int64_t sx = xx + kx - 1;
          if (sx < 0 || sx >= w) continue;
          const float* in = x.ptr() + (sy * w + sx) * ci;
          const float* kk = kernel.ptr() + ((ky * 3 + kx) * ci) * co;
          for (std::int64_t ic = 0; ic < ci; ++ic) {
            const float v = in[ic];
            const float* kr = kk + ic * co;
            for (std::int64_t oc = 0; oc < co; ++oc) o[oc] += v * kr[oc];
          }
        }
      }
    }
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {x, kernel, bias}, [x, kernel, bias, og, h, w, ci, co]() {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const float* go = og->data() + (y * w + xx) * co;
          if (bias.grad) {
            for (std::int64_t oc = 0; oc < co; ++oc) (*bias.grad)[oc] += go[oc];
          }
          for (std::int64_t ky = 0; ky < 3; ++ky) {
            const std::int64_t sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (std::int64_t kx = 0; kx < 3; ++kx) {
              const std::int64_t sx = xx + kx - 1;
              if (sx < 0 || sx >= w) continue;
              const float* in = x.ptr() + (sy * w + sx) * ci;
              const float* kk = kernel.ptr() + ((ky * 3 + kx) * ci) * co;
              for (std::int64_t ic = 0; ic < ci; ++ic) {
                if (kernel.grad) {
                  float* gk = kernel.grad->data() + ((ky * 3 + kx) * ci + ic) * co;
                  for (std::int64_t oc = 0; oc < co; ++oc) gk[oc] += in[ic] * go[oc];
                }
                if (x.grad) {
                  const float* kr = kk + ic * co;
                  double s = 0.0;
                  for (std::int64_t oc = 0; oc < co; ++oc) s += static_cast<double>(kr[oc]) * go[oc];
                  x.grad->data()[(sy * w + sx) * ci + ic] += static_cast<float>(s);
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace weaktr
