#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "weaktr/encoder.hpp"
#include "weaktr/ops.hpp"
#include "weaktr/tensor.hpp"

namespace weaktr {

/// Label value marking pixels excluded from supervision and statistics.
constexpr float kIgnoreLabel = 255.0f;

/// Whether the clipping gate compares τ against the batch mean of the
/// per-image λ_global (Batch) or each image's own λ_global (Image).
enum class GateMode { Batch, Image };

struct DecoderConfig {
  std::int64_t decoder_layers = 2;
  std::int64_t output_size = 64;  // O
  std::int64_t grad_patch = 16;   // S
  float tau = 1.2f;
  GateMode gate_mode = GateMode::Batch;

  std::int64_t tiles_per_side() const { return output_size / grad_patch; }  // L
  std::int64_t num_tiles() const { return tiles_per_side() * tiles_per_side(); }

  void validate() const {
    if (output_size <= 0 || grad_patch <= 0 || output_size % grad_patch != 0) {
      throw std::invalid_argument("DecoderConfig: output_size must be a positive multiple of grad_patch");
    }
    if (tau <= 0.0f) throw std::invalid_argument("DecoderConfig: tau must be positive");
    if (decoder_layers < 0) throw std::invalid_argument("DecoderConfig: decoder_layers must be >= 0");
  }
};

/// Dense per-pixel class scores, [O×O×C_seg] with background as channel 0.
struct Prediction {
  Tensor logits;
};

/// Per-image clipping state for one retraining step.
struct ClipReport {
  Tensor grad_patches;              // [L²×S×S]
  std::vector<float> lambda_i;      // per-tile mean CE; 0 for excluded tiles
  std::vector<uint8_t> tile_valid;  // 0 when a tile has no supervised pixel
  float lambda_global = 0.0f;       // mean of the included λᵢ
  Tensor masks;                     // [L²×S×S], entries in {0,1}
  bool gated = false;
};

/// Mask-transformer style decoder: joint transformer layers over the fresh
/// class tokens and the encoder patch tokens, then an L2-normalized token
/// product, LN over the class scores, and bilinear upsampling.
class SegDecoder {
 public:
  SegDecoder(std::int64_t embed_dim, std::int64_t heads, std::int64_t num_seg_classes, const DecoderConfig& cfg,
             std::uint64_t seed)
      : cfg_(cfg), dim_(embed_dim), num_seg_classes_(num_seg_classes) {
    cfg_.validate();
    if (num_seg_classes < 2) throw std::invalid_argument("SegDecoder: need at least background + one class");
    CounterRng rng(mix_key(seed, 0x5365674465630000ull));  // "SegDec\0\0"
    class_tokens_ = Parameter("decoder.class_tokens", detail::init_trunc_normal({num_seg_classes, embed_dim}, rng));
    const std::int64_t mlp = 4 * embed_dim;
    blocks_.reserve(static_cast<std::size_t>(cfg_.decoder_layers));
    for (std::int64_t l = 0; l < cfg_.decoder_layers; ++l) {
      blocks_.emplace_back("decoder.layer" + std::to_string(l), embed_dim, heads, mlp, rng);
    }
    ln_gamma_ = Parameter("decoder.ln.gamma", Tensor::full({num_seg_classes}, 1.0f));
    ln_beta_ = Parameter("decoder.ln.beta", Tensor::zeros({num_seg_classes}));
  }

  const DecoderConfig& config() const { return cfg_; }
  std::int64_t num_seg_classes() const { return num_seg_classes_; }
  Parameter& class_tokens() { return class_tokens_; }

  /// decode with explicit class tokens; `q` must be [C_seg×D].
  Prediction decode(const Tensor& q, const Tensor& patch_tokens) const {
    if (q.rank() != 2 || q.shape[1] != dim_ || patch_tokens.rank() != 2 || patch_tokens.shape[1] != dim_) {
      throw std::invalid_argument("decode: token dims disagree, q=" + shape_str(q.shape) +
                                  " patches=" + shape_str(patch_tokens.shape));
    }
    const std::int64_t cs = q.shape[0];
    const std::int64_t n2 = patch_tokens.shape[0];
    const auto n = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n2))));
    if (n * n != n2) throw std::invalid_argument("decode: patch token count is not a square");
    Tensor x = concat_rows(q, patch_tokens);
    for (const TransformerBlock& b : blocks_) x = b.apply(x, nullptr);
    Tensor q_hat = l2_normalize_rows(slice_rows(x, 0, cs));
    Tensor t_hat = l2_normalize_rows(slice_rows(x, cs, cs + n2));
    Tensor scores = scale(matmul_nt(t_hat, q_hat), 1.0f / std::sqrt(static_cast<float>(dim_)));
    Tensor low = reshape(layer_norm(scores, ln_gamma_.value, ln_beta_.value), {n, n, cs});
    return Prediction{upsample_bilinear(low, cfg_.output_size, cfg_.output_size)};
  }

  Prediction decode(const Tensor& patch_tokens) const { return decode(class_tokens_.value, patch_tokens); }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out{&class_tokens_};
    for (TransformerBlock& b : blocks_) b.collect(out);
    out.push_back(&ln_gamma_);
    out.push_back(&ln_beta_);
    return out;
  }

 private:
  DecoderConfig cfg_;
  std::int64_t dim_;
  std::int64_t num_seg_classes_;
  Parameter class_tokens_;
  std::vector<TransformerBlock> blocks_;
  Parameter ln_gamma_, ln_beta_;
};

/// Softmax cross-entropy per pixel against an [O×O] label map. Pixels whose
/// label is kIgnoreLabel get value 0 and propagate no gradient.
inline Tensor per_pixel_ce(const Prediction& pred, const Tensor& labels) {
  const Tensor& logits = pred.logits;
  detail::require_rank(logits, 3, "per_pixel_ce");
  const std::int64_t h = logits.shape[0], w = logits.shape[1], c = logits.shape[2];
  if (labels.rank() != 2 || labels.shape[0] != h || labels.shape[1] != w) {
    throw std::invalid_argument("per_pixel_ce: labels " + shape_str(labels.shape) + " vs logits " +
                                shape_str(logits.shape));
  }
  std::vector<std::int32_t> idx(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    const float v = (*labels.data)[i];
    if (v == kIgnoreLabel) {
      idx[static_cast<std::size_t>(i)] = -1;
      continue;
    }
    const auto k = static_cast<std::int32_t>(std::llround(v));
    if (k < 0 || k >= c) {
      throw std::out_of_range("per_pixel_ce: label " + std::to_string(v) + " outside [0, " + std::to_string(c) + ")");
    }
    idx[static_cast<std::size_t>(i)] = k;
  }
  Tensor out = detail::make_out({h, w}, detail::any_requires({&logits}));
  for (std::int64_t i = 0; i < h * w; ++i) {
    const std::int32_t k = idx[static_cast<std::size_t>(i)];
    if (k < 0) continue;
    const float* row = logits.ptr() + i * c;
    float mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    (*out.data)[i] = static_cast<float>(std::log(sum) + mx - row[k]);
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    auto labels_idx = std::make_shared<std::vector<std::int32_t>>(std::move(idx));
    detail::attach(out, {logits}, [logits, og, labels_idx, h, w, c]() {
      for (std::int64_t i = 0; i < h * w; ++i) {
        const std::int32_t k = (*labels_idx)[static_cast<std::size_t>(i)];
        if (k < 0) continue;
        const float go = (*og)[i];
        if (go == 0.0f) continue;
        const float* row = logits.ptr() + i * c;
        float* grow = logits.grad->data() + i * c;
        float mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        for (std::int64_t j = 0; j < c; ++j) {
          const float p = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / sum);
          grow[j] += go * (p - (j == k ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

/// Splits an [O×O] CE map into L² row-major S×S tiles and computes each
/// tile's mean over supervised pixels. `valid` marks supervised pixels;
/// tiles with none are flagged invalid and excluded from λ_global.
inline std::pair<Tensor, std::vector<float>> gradient_patches(const Tensor& ce_map, const Tensor& valid,
                                                              const DecoderConfig& cfg,
                                                              std::vector<uint8_t>* tile_valid_out = nullptr) {
  detail::require_rank(ce_map, 2, "gradient_patches");
  const std::int64_t o = cfg.output_size, s = cfg.grad_patch, l = cfg.tiles_per_side();
  if (ce_map.shape[0] != o || ce_map.shape[1] != o) {
    throw std::invalid_argument("gradient_patches: map " + shape_str(ce_map.shape) + " vs output size " +
                                std::to_string(o));
  }
  if (valid.shape != ce_map.shape) throw std::invalid_argument("gradient_patches: valid mask shape mismatch");
  Tensor tiles = Tensor::zeros({l * l, s, s});
  std::vector<float> lambda(static_cast<std::size_t>(l * l), 0.0f);
  if (tile_valid_out) tile_valid_out->assign(static_cast<std::size_t>(l * l), 0);
  for (std::int64_t ty = 0; ty < l; ++ty) {
    for (std::int64_t tx = 0; tx < l; ++tx) {
      const std::int64_t ti = ty * l + tx;
      double sum = 0.0;
      std::int64_t cnt = 0;
      for (std::int64_t y = 0; y < s; ++y) {
        for (std::int64_t x = 0; x < s; ++x) {
          const std::int64_t px = (ty * s + y) * o + tx * s + x;
          const float v = (*ce_map.data)[px];
          tiles.ptr()[(ti * s + y) * s + x] = v;
          if ((*valid.data)[px] != 0.0f) {
            sum += v;
            ++cnt;
          }
        }
      }
      if (cnt > 0) {
        lambda[static_cast<std::size_t>(ti)] = static_cast<float>(sum / cnt);
        if (tile_valid_out) (*tile_valid_out)[static_cast<std::size_t>(ti)] = 1;
      }
    }
  }
  return {tiles, lambda};
}

inline std::pair<Tensor, std::vector<float>> gradient_patches(const Tensor& ce_map, const DecoderConfig& cfg) {
  return gradient_patches(ce_map, Tensor::full(ce_map.shape, 1.0f), cfg);
}

/// Mean of the included per-tile λᵢ.
inline float global_lambda(const std::vector<float>& lambda_i, const std::vector<uint8_t>* tile_valid = nullptr) {
  double sum = 0.0;
  std::int64_t cnt = 0;
  for (std::size_t i = 0; i < lambda_i.size(); ++i) {
    if (tile_valid && !(*tile_valid)[i]) continue;
    sum += lambda_i[i];
    ++cnt;
  }
  if (cnt == 0) return 0.0f;
  return static_cast<float>(sum / cnt);
}

/// M̂ᵢ(j,k) = 1 iff Ĝᵢ(j,k) ≤ max(λᵢ, λ_global). Tiles without supervised
/// pixels get all-ones masks.
inline Tensor clipping_mask(const Tensor& grad_patches, const std::vector<float>& lambda_i, float lambda_global,
                            const std::vector<uint8_t>* tile_valid = nullptr) {
  detail::require_rank(grad_patches, 3, "clipping_mask");
  const std::int64_t tiles = grad_patches.shape[0];
  const std::int64_t tile_sz = grad_patches.shape[1] * grad_patches.shape[2];
  if (static_cast<std::int64_t>(lambda_i.size()) != tiles) {
    throw std::invalid_argument("clipping_mask: lambda count mismatch");
  }
  Tensor masks = Tensor::zeros(grad_patches.shape);
  for (std::int64_t t = 0; t < tiles; ++t) {
    const bool included = !tile_valid || (*tile_valid)[static_cast<std::size_t>(t)];
    const float thr = std::max(lambda_i[static_cast<std::size_t>(t)], lambda_global);
    const float* g = grad_patches.ptr() + t * tile_sz;
    float* m = masks.ptr() + t * tile_sz;
    for (std::int64_t j = 0; j < tile_sz; ++j) m[j] = (!included || g[j] <= thr) ? 1.0f : 0.0f;
  }
  return masks;
}

/// Reassembles tile masks into a full-resolution [O×O] mask.
inline Tensor assemble_mask(const Tensor& masks, const DecoderConfig& cfg) {
  const std::int64_t o = cfg.output_size, s = cfg.grad_patch, l = cfg.tiles_per_side();
  Tensor full = Tensor::zeros({o, o});
  for (std::int64_t ty = 0; ty < l; ++ty)
    for (std::int64_t tx = 0; tx < l; ++tx)
      for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x)
          full.ptr()[(ty * s + y) * o + tx * s + x] = masks.ptr()[((ty * l + tx) * s + y) * s + x];
  return full;
}

/// τ-gated clipping: if λ_global ≤ τ the CE map is multiplied by the mask
/// (gradients flow only through retained pixels); otherwise it passes
/// through unchanged.
inline std::pair<Tensor, bool> gated_clip(const Tensor& ce_map, const Tensor& masks, float lambda_global, float tau,
                                          const DecoderConfig& cfg) {
  if (tau <= 0.0f) throw std::invalid_argument("gated_clip: tau must be positive");
  if (lambda_global > tau) return {ce_map, false};
  Tensor full = assemble_mask(masks, cfg);
  return {mul(ce_map, full), true};
}

/// Computes the full per-image clipping state from a CE map.
inline ClipReport make_clip_report(const Tensor& ce_map, const Tensor& valid, const DecoderConfig& cfg) {
  ClipReport r;
  auto [tiles, lambda] = gradient_patches(ce_map, valid, cfg, &r.tile_valid);
  r.grad_patches = tiles;
  r.lambda_i = std::move(lambda);
  r.lambda_global = global_lambda(r.lambda_i, &r.tile_valid);
  r.masks = clipping_mask(r.grad_patches, r.lambda_i, r.lambda_global, &r.tile_valid);
  return r;
}

}  // namespace weaktr
