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

struct AafConfig {
  std::int64_t hidden_dim = 18;
  std::int64_t input_dim = 0;  // K·H, filled from the encoder config

  void validate() const {
    if (hidden_dim < 1) throw std::invalid_argument("AafConfig: hidden_dim must be >= 1");
    if (input_dim < 1) throw std::invalid_argument("AafConfig: input_dim must be >= 1");
  }
};

/// How head weights W' are produced.
///   Learned:     W' = sigmoid(FFN(pool(A))), trained end to end.
///   Uniform:     W' = 1 for every head — the mean-sum fusion baseline.
///   FixedRandom: W' frozen at random values in (0,1), never trained.
enum class FuseMode { Learned, Uniform, FixedRandom };

inline const char* fuse_mode_name(FuseMode m) {
  switch (m) {
    case FuseMode::Learned: return "learned";
    case FuseMode::Uniform: return "uniform";
    case FuseMode::FixedRandom: return "fixed_random";
  }
  return "?";
}

inline FuseMode fuse_mode_from_name(const std::string& s) {
  if (s == "learned") return FuseMode::Learned;
  if (s == "uniform") return FuseMode::Uniform;
  if (s == "fixed_random") return FuseMode::FixedRandom;
  throw std::invalid_argument("unknown fuse mode: " + s);
}

/// Everything the CAM pipeline produces for one image.
struct CamBundle {
  Tensor cam_coarse;      // [N×N×C]
  Tensor weights_w;       // [(K·H)×1] pooled dynamic weights
  Tensor weights_wprime;  // [(K·H)×1] interacted weights in (0,1)
  Tensor ca_hat;          // [N×N×C]
  Tensor pa_hat;          // [N²×N²]
  Tensor cam_fine;        // [N×N×C]
};

struct ClassLogits {
  Tensor cls;     // [C] from the class tokens
  Tensor coarse;  // [C] pooled coarse CAM
  Tensor fine;    // [C] pooled fine CAM
};

struct LossBreakdown {
  float l_cls_token = 0.0f;
  float l_coarse_cam = 0.0f;
  float l_fine_cam = 0.0f;
  float total = 0.0f;
};

/// ĈA = (1/(K·H))·Σᵢ W'ᵢ·CAᵢ and P̂A = (1/(K·H))·Σᵢ W'ᵢ·PAᵢ.
inline std::pair<Tensor, Tensor> weighted_attention(const Tensor& ca, const Tensor& pa, const Tensor& wprime) {
  if (ca.shape.at(0) != pa.shape.at(0) || ca.shape[0] != wprime.numel()) {
    throw std::invalid_argument("weighted_attention: leading dimensions disagree");
  }
  return {weighted_head_sum(ca, wprime), weighted_head_sum(pa, wprime)};
}

/// CAM_fine = reshape( P̂A · reshape(CAM_coarse ⊙ ĈA) ).
inline Tensor fine_cam(const Tensor& cam_coarse, const Tensor& ca_hat, const Tensor& pa_hat) {
  if (cam_coarse.rank() != 3 || cam_coarse.shape != ca_hat.shape) {
    throw std::invalid_argument("fine_cam: coarse CAM " + shape_str(cam_coarse.shape) + " vs weighted CA " +
                                shape_str(ca_hat.shape));
  }
  const std::int64_t n = cam_coarse.shape[0], c = cam_coarse.shape[2];
  if (pa_hat.rank() != 2 || pa_hat.shape[0] != n * n || pa_hat.shape[1] != n * n) {
    throw std::invalid_argument("fine_cam: weighted PA " + shape_str(pa_hat.shape) + " must be [N²×N²]");
  }
  Tensor flat = reshape(mul(cam_coarse, ca_hat), {n * n, c});
  return reshape(matmul(pa_hat, flat), {n, n, c});
}

/// −(1/C)·Σᵢ yᵢ·log σ(ŷᵢ) + (1−yᵢ)·log(1−σ(ŷᵢ)), log arguments clamped
/// below at 1e-12.
inline Tensor multilabel_soft_margin(const Tensor& logits, const std::vector<float>& y) {
  const std::int64_t c = logits.numel();
  if (c != static_cast<std::int64_t>(y.size())) {
    throw std::invalid_argument("multilabel_soft_margin: logits " + shape_str(logits.shape) + " vs " +
                                std::to_string(y.size()) + " labels");
  }
  constexpr float kClamp = 1e-12f;
  auto sig = [](float x) {
    return x >= 0.0f ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
  };
  Tensor out = detail::make_out({1}, detail::any_requires({&logits}));
  double acc = 0.0;
  for (std::int64_t i = 0; i < c; ++i) {
    const float s = sig((*logits.data)[i]);
    acc += y[static_cast<std::size_t>(i)] * std::log(std::max(s, kClamp)) +
           (1.0f - y[static_cast<std::size_t>(i)]) * std::log(std::max(1.0f - s, kClamp));
  }
  (*out.data)[0] = static_cast<float>(-acc / c);
  if (out.requires_grad()) {
    auto og = out.grad;
    auto labels = y;
    detail::attach(out, {logits}, [logits, og, labels, c, sig]() {
      constexpr float kClamp = 1e-12f;
      const float g = (*og)[0] / static_cast<float>(c);
      for (std::int64_t i = 0; i < c; ++i) {
        const float s = sig((*logits.data)[i]);
        const float yi = labels[static_cast<std::size_t>(i)];
        float d = 0.0f;
        if (s > kClamp) d += yi * (1.0f - s);
        if (1.0f - s > kClamp) d -= (1.0f - yi) * s;
        (*logits.grad)[i] += -g * d;
      }
    });
  }
  return out;
}

/// Sum of the three classification losses against the same multi-hot label.
inline std::pair<Tensor, LossBreakdown> total_loss(const ClassLogits& logits, const std::vector<float>& y) {
  Tensor l_cls = multilabel_soft_margin(logits.cls, y);
  Tensor l_coarse = multilabel_soft_margin(logits.coarse, y);
  Tensor l_fine = multilabel_soft_margin(logits.fine, y);
  Tensor total = add(add(l_cls, l_coarse), l_fine);
  LossBreakdown bd;
  bd.l_cls_token = l_cls.item();
  bd.l_coarse_cam = l_coarse.item();
  bd.l_fine_cam = l_fine.item();
  bd.total = total.item();
  return {total, bd};
}

/// End-to-end CAM model: ViT encoder, 3x3 convolution head for the coarse
/// CAM, adaptive attention fusion, and a shared D→1 class-token head.
class CamModel {
 public:
  CamModel(const EncoderConfig& enc_cfg, AafConfig aaf_cfg, FuseMode mode = FuseMode::Learned,
           std::uint64_t fixed_w_seed = 0)
      : encoder_(enc_cfg), aaf_(aaf_cfg), mode_(mode) {
    aaf_.input_dim = enc_cfg.total_heads();
    aaf_.validate();
    CounterRng rng(mix_key(enc_cfg.seed, 0x43616d4865616400ull));  // "CamHead\0"
    const std::int64_t d = enc_cfg.embed_dim, c = enc_cfg.num_classes, kh = aaf_.input_dim;
    conv_w_ = Parameter("cam.conv.weight", detail::init_trunc_normal({3, 3, d, c}, rng));
    conv_b_ = Parameter("cam.conv.bias", Tensor::zeros({c}));
    aaf_fc1_w_ = Parameter("aaf.fc1.weight", detail::init_trunc_normal({kh, aaf_.hidden_dim}, rng));
    aaf_fc1_b_ = Parameter("aaf.fc1.bias", Tensor::zeros({aaf_.hidden_dim}));
    aaf_fc2_w_ = Parameter("aaf.fc2.weight", detail::init_trunc_normal({aaf_.hidden_dim, kh}, rng));
    aaf_fc2_b_ = Parameter("aaf.fc2.bias", Tensor::zeros({kh}));
    cls_head_w_ = Parameter("cls_head.weight", detail::init_trunc_normal({d, 1}, rng));
    cls_head_b_ = Parameter("cls_head.bias", Tensor::zeros({1}));
    if (mode_ == FuseMode::FixedRandom) {
      CounterRng wrng(mix_key(fixed_w_seed, 0x4669786564570000ull));  // "FixedW\0\0"
      fixed_wprime_ = Tensor::zeros({kh, 1});
      for (float& v : *fixed_wprime_.data) v = static_cast<float>(wrng.uniform(0.05, 0.95));
    }
  }

  ViTEncoder& encoder() { return encoder_; }
  const ViTEncoder& encoder() const { return encoder_; }
  const EncoderConfig& config() const { return encoder_.config(); }
  const AafConfig& aaf_config() const { return aaf_; }
  FuseMode fuse_mode() const { return mode_; }

  /// Arranges the last N² token rows spatially and applies the learned 3x3
  /// convolution with C output channels.
  Tensor coarse_cam(const TokenSequence& t_final) const {
    const EncoderConfig& cfg = encoder_.config();
    if (t_final.tokens.shape.at(0) != cfg.tokens()) {
      throw std::invalid_argument("coarse_cam: expected " + std::to_string(cfg.tokens()) + " token rows");
    }
    const std::int64_t n = cfg.grid();
    Tensor patches = slice_rows(t_final.tokens, cfg.num_classes, cfg.tokens());
    Tensor arranged = reshape(patches, {n, n, cfg.embed_dim});
    return conv3x3(arranged, conv_w_.value, conv_b_.value);
  }

  /// Pools every attention map to one dynamic weight and, in Learned mode,
  /// sends the weight vector through FFN + sigmoid so heads interact.
  /// Returns (W, W'), each [(K·H)×1].
  std::pair<Tensor, Tensor> adaptive_fuse(const AttentionStack& stack) const {
    const std::int64_t kh = aaf_.input_dim;
    if (stack.maps.shape.at(0) != kh) {
      throw std::invalid_argument("adaptive_fuse: stack has " + std::to_string(stack.maps.shape[0]) +
                                  " maps, expected " + std::to_string(kh));
    }
    Tensor w = reshape(global_avg_pool(stack.maps), {kh, 1});
    switch (mode_) {
      case FuseMode::Uniform:
        return {w, Tensor::full({kh, 1}, 1.0f)};
      case FuseMode::FixedRandom:
        return {w, fixed_wprime_};
      case FuseMode::Learned:
        break;
    }
    Tensor row = reshape(w, {1, kh});
    Tensor hidden = gelu(linear(row, aaf_fc1_w_.value, aaf_fc1_b_.value));
    Tensor wprime = sigmoid(linear(hidden, aaf_fc2_w_.value, aaf_fc2_b_.value));
    return {w, reshape(wprime, {kh, 1})};
  }

  /// y_cls from the shared class-token head; y_coarse / y_fine by pooling
  /// the CAMs per class channel.
  ClassLogits class_logits(const CamBundle& bundle, const TokenSequence& t_final) const {
    const EncoderConfig& cfg = encoder_.config();
    Tensor cls_rows = slice_rows(t_final.tokens, 0, cfg.num_classes);
    Tensor y_cls = reshape(linear(cls_rows, cls_head_w_.value, cls_head_b_.value), {cfg.num_classes});
    return ClassLogits{y_cls, spatial_mean(bundle.cam_coarse), spatial_mean(bundle.cam_fine)};
  }

  /// Full pipeline for one image.
  std::pair<CamBundle, TokenSequence> forward(const Tensor& image) const {
    auto [t_final, stack] = encoder_.forward(image);
    const EncoderConfig& cfg = encoder_.config();
    CamBundle b;
    b.cam_coarse = coarse_cam(t_final);
    auto [w, wprime] = adaptive_fuse(stack);
    b.weights_w = w;
    b.weights_wprime = wprime;
    Tensor ca = extract_cross_attention(stack, cfg);
    Tensor pa = extract_patch_attention(stack, cfg);
    auto [ca_hat, pa_hat] = weighted_attention(ca, pa, wprime);
    b.ca_hat = ca_hat;
    b.pa_hat = pa_hat;
    b.cam_fine = fine_cam(b.cam_coarse, b.ca_hat, b.pa_hat);
    return {b, t_final};
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out = encoder_.params();
    out.push_back(&conv_w_);
    out.push_back(&conv_b_);
    if (mode_ == FuseMode::Learned) {
      for (Parameter* p : {&aaf_fc1_w_, &aaf_fc1_b_, &aaf_fc2_w_, &aaf_fc2_b_}) out.push_back(p);
    }
    out.push_back(&cls_head_w_);
    out.push_back(&cls_head_b_);
    return out;
  }

  /// All parameters regardless of mode, for checkpoint round-trips.
  std::vector<Parameter*> all_params() {
    std::vector<Parameter*> out = encoder_.params();
    for (Parameter* p : {&conv_w_, &conv_b_, &aaf_fc1_w_, &aaf_fc1_b_, &aaf_fc2_w_, &aaf_fc2_b_, &cls_head_w_,
                         &cls_head_b_}) {
      out.push_back(p);
    }
    return out;
  }

 private:
  ViTEncoder encoder_;
  AafConfig aaf_;
  FuseMode mode_;
  Parameter conv_w_, conv_b_;
  Parameter aaf_fc1_w_, aaf_fc1_b_, aaf_fc2_w_, aaf_fc2_b_;
  Parameter cls_head_w_, cls_head_b_;
  Tensor fixed_wprime_;
};

}  // namespace weaktr
