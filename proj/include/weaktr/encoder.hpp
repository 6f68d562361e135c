#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "weaktr/ops.hpp"
#include "weaktr/rng.hpp"
#include "weaktr/tensor.hpp"

namespace weaktr {

struct EncoderConfig {
  std::int64_t image_size = 64;   // O
  std::int64_t patch_size = 8;
  std::int64_t in_channels = 3;
  std::int64_t num_classes = 4;   // C class tokens
  std::int64_t embed_dim = 32;    // D
  std::int64_t layers = 2;        // K
  std::int64_t heads = 2;         // H
  float mlp_ratio = 4.0f;
  std::uint64_t seed = 0;

  std::int64_t grid() const { return image_size / patch_size; }                  // N
  std::int64_t num_patches() const { return grid() * grid(); }                   // N²
  std::int64_t tokens() const { return num_classes + num_patches(); }            // C+N²
  std::int64_t head_dim() const { return embed_dim / heads; }
  std::int64_t total_heads() const { return layers * heads; }                    // K·H
  std::int64_t mlp_dim() const { return static_cast<std::int64_t>(embed_dim * mlp_ratio); }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
      throw std::invalid_argument("EncoderConfig: image_size must be a positive multiple of patch_size");
    }
    if (num_classes < 1) throw std::invalid_argument("EncoderConfig: num_classes must be >= 1");
    if (embed_dim < 4 || embed_dim % heads != 0) {
      throw std::invalid_argument("EncoderConfig: embed_dim must be >= 4 and divisible by heads");
    }
    if (layers < 1 || heads < 1) throw std::invalid_argument("EncoderConfig: layers and heads must be >= 1");
    if (mlp_dim() < 1) throw std::invalid_argument("EncoderConfig: mlp_ratio too small");
  }
};

/// Token matrix [(C+N²)×D]; the first C rows are class tokens, the rest are
/// patch tokens in row-major spatial order.
struct TokenSequence {
  Tensor tokens;
  std::int64_t num_class_tokens = 0;
};

/// All K·H post-softmax self-attention maps of one forward pass, layer-major
/// then head order, as a single [(K·H)×(C+N²)×(C+N²)] tensor.
struct AttentionStack {
  Tensor maps;
  std::int64_t layers = 0;
  std::int64_t heads = 0;
};

namespace detail {

inline Tensor init_trunc_normal(Shape shape, CounterRng& rng, double sigma = 0.02) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : *t.data) v = static_cast<float>(rng.trunc_normal(sigma));
  return t;
}

}  // namespace detail

/// Pre-norm transformer block (LN → MSA → residual, LN → MLP → residual)
/// with GELU in the MLP. Used by both the encoder and the decoder.
struct TransformerBlock {
  Parameter ln1_gamma, ln1_beta, qkv_w, qkv_b, proj_w, proj_b;
  Parameter ln2_gamma, ln2_beta, fc1_w, fc1_b, fc2_w, fc2_b;
  std::int64_t heads = 0;
  std::int64_t head_dim = 0;

  TransformerBlock() = default;

  TransformerBlock(const std::string& prefix, std::int64_t dim, std::int64_t num_heads, std::int64_t mlp_dim,
                   CounterRng& rng)
      : ln1_gamma(prefix + ".ln1.gamma", Tensor::full({dim}, 1.0f)),
        ln1_beta(prefix + ".ln1.beta", Tensor::zeros({dim})),
        qkv_w(prefix + ".qkv.weight", detail::init_trunc_normal({dim, 3 * dim}, rng)),
        qkv_b(prefix + ".qkv.bias", Tensor::zeros({3 * dim})),
        proj_w(prefix + ".proj.weight", detail::init_trunc_normal({dim, dim}, rng)),
        proj_b(prefix + ".proj.bias", Tensor::zeros({dim})),
        ln2_gamma(prefix + ".ln2.gamma", Tensor::full({dim}, 1.0f)),
        ln2_beta(prefix + ".ln2.beta", Tensor::zeros({dim})),
        fc1_w(prefix + ".mlp.fc1.weight", detail::init_trunc_normal({dim, mlp_dim}, rng)),
        fc1_b(prefix + ".mlp.fc1.bias", Tensor::zeros({mlp_dim})),
        fc2_w(prefix + ".mlp.fc2.weight", detail::init_trunc_normal({mlp_dim, dim}, rng)),
        fc2_b(prefix + ".mlp.fc2.bias", Tensor::zeros({dim})),
        heads(num_heads),
        head_dim(dim / num_heads) {}

  /// Applies the block. When `capture` is non-null the per-head post-softmax
  /// attention maps (taken before the value product) are appended to it.
  Tensor apply(const Tensor& x, std::vector<Tensor>* capture) const {
    const std::int64_t dim = heads * head_dim;
    Tensor h = layer_norm(x, ln1_gamma.value, ln1_beta.value);
    Tensor qkv = linear(h, qkv_w.value, qkv_b.value);
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t hd = 0; hd < heads; ++hd) {
      Tensor q = slice_cols(qkv, hd * head_dim, (hd + 1) * head_dim);
      Tensor k = slice_cols(qkv, dim + hd * head_dim, dim + (hd + 1) * head_dim);
      Tensor v = slice_cols(qkv, 2 * dim + hd * head_dim, 2 * dim + (hd + 1) * head_dim);
      Tensor att = softmax_last(scale(matmul_nt(q, k), att_scale));
      if (capture) capture->push_back(att);
      head_outs.push_back(matmul(att, v));
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    Tensor y = add(x, linear(merged, proj_w.value, proj_b.value));
    Tensor h2 = layer_norm(y, ln2_gamma.value, ln2_beta.value);
    return add(y, linear(gelu(linear(h2, fc1_w.value, fc1_b.value)), fc2_w.value, fc2_b.value));
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&ln1_gamma, &ln1_beta, &qkv_w, &qkv_b, &proj_w, &proj_b, &ln2_gamma, &ln2_beta, &fc1_w,
                         &fc1_b, &fc2_w, &fc2_b}) {
      out.push_back(p);
    }
  }
};

/// Plain ViT over N² patch tokens plus C learnable class tokens; every
/// self-attention map of the forward pass is exposed for fusion downstream.
class ViTEncoder {
 public:
  explicit ViTEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    CounterRng rng(mix_key(cfg_.seed, 0x456e636f64657200ull));  // "Encoder\0"
    const std::int64_t patch_dim = cfg_.patch_size * cfg_.patch_size * cfg_.in_channels;
    patch_w_ = Parameter("patch.weight", detail::init_trunc_normal({patch_dim, cfg_.embed_dim}, rng));
    patch_b_ = Parameter("patch.bias", Tensor::zeros({cfg_.embed_dim}));
    class_tokens_ = Parameter("class_tokens", detail::init_trunc_normal({cfg_.num_classes, cfg_.embed_dim}, rng));
    pos_embed_ = Parameter("pos_embed", detail::init_trunc_normal({cfg_.tokens(), cfg_.embed_dim}, rng));
    blocks_.reserve(static_cast<std::size_t>(cfg_.layers));
    for (std::int64_t l = 0; l < cfg_.layers; ++l) {
      blocks_.emplace_back("encoder.layer" + std::to_string(l), cfg_.embed_dim, cfg_.heads, cfg_.mlp_dim(), rng);
    }
    norm_gamma_ = Parameter("encoder.norm.gamma", Tensor::full({cfg_.embed_dim}, 1.0f));
    norm_beta_ = Parameter("encoder.norm.beta", Tensor::zeros({cfg_.embed_dim}));
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Splits the image into N² patches, projects them, prepends the class
  /// tokens, and adds the positional embeddings.
  TokenSequence patch_embed(const Tensor& image) const {
    if (image.rank() != 3 || image.shape[0] != cfg_.image_size || image.shape[1] != cfg_.image_size ||
        image.shape[2] != cfg_.in_channels) {
      throw std::invalid_argument("patch_embed: image " + shape_str(image.shape) + " does not match config");
    }
    const std::int64_t n = cfg_.grid(), p = cfg_.patch_size, ch = cfg_.in_channels;
    const std::int64_t patch_dim = p * p * ch;
    Tensor flat = Tensor::zeros({n * n, patch_dim});
    for (std::int64_t py = 0; py < n; ++py) {
      for (std::int64_t px = 0; px < n; ++px) {
        float* dst = flat.ptr() + (py * n + px) * patch_dim;
        for (std::int64_t y = 0; y < p; ++y) {
          const float* src = image.ptr() + ((py * p + y) * cfg_.image_size + px * p) * ch;
          std::copy(src, src + p * ch, dst + y * p * ch);
        }
      }
    }
    Tensor patches = linear(flat, patch_w_.value, patch_b_.value);
    Tensor tokens = add(concat_rows(class_tokens_.value, patches), pos_embed_.value);
    return TokenSequence{tokens, cfg_.num_classes};
  }

  /// Runs the K pre-norm layers and a final LN; returns the output tokens
  /// and the stack of all K·H attention maps.
  std::pair<TokenSequence, AttentionStack> encode(const TokenSequence& seq) const {
    if (seq.tokens.rank() != 2 || seq.tokens.shape[0] != cfg_.tokens() || seq.tokens.shape[1] != cfg_.embed_dim) {
      throw std::invalid_argument("encode: token sequence " + shape_str(seq.tokens.shape) + " does not match config");
    }
    std::vector<Tensor> captured;
    captured.reserve(static_cast<std::size_t>(cfg_.total_heads()));
    Tensor x = seq.tokens;
    for (const TransformerBlock& b : blocks_) x = b.apply(x, &captured);
    Tensor t_final = layer_norm(x, norm_gamma_.value, norm_beta_.value);
    return {TokenSequence{t_final, cfg_.num_classes}, AttentionStack{stack0(captured), cfg_.layers, cfg_.heads}};
  }

  std::pair<TokenSequence, AttentionStack> forward(const Tensor& image) const { return encode(patch_embed(image)); }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out{&patch_w_, &patch_b_, &class_tokens_, &pos_embed_};
    for (TransformerBlock& b : blocks_) b.collect(out);
    out.push_back(&norm_gamma_);
    out.push_back(&norm_beta_);
    return out;
  }

 private:
  EncoderConfig cfg_;
  Parameter patch_w_, patch_b_, class_tokens_, pos_embed_;
  std::vector<TransformerBlock> blocks_;
  Parameter norm_gamma_, norm_beta_;
};

/// Class-token rows attending to patch-token columns, arranged spatially:
/// out[i][y][x][c] = maps[i][c][C + y·N + x], giving [(K·H)×N×N×C].
inline Tensor extract_cross_attention(const AttentionStack& stack, const EncoderConfig& cfg) {
  const std::int64_t kh = cfg.total_heads(), C = cfg.num_classes, n = cfg.grid(), T = cfg.tokens();
  if (stack.maps.rank() != 3 || stack.maps.shape[0] != kh || stack.maps.shape[1] != T) {
    throw std::invalid_argument("extract_cross_attention: stack " + shape_str(stack.maps.shape) +
                                " does not match config");
  }
  const Tensor& m = stack.maps;
  Tensor out = detail::make_out({kh, n, n, C}, detail::any_requires({&m}));
  for (std::int64_t i = 0; i < kh; ++i) {
    const float* map = m.ptr() + i * T * T;
    float* o = out.ptr() + i * n * n * C;
    for (std::int64_t pidx = 0; pidx < n * n; ++pidx)
      for (std::int64_t c = 0; c < C; ++c) o[pidx * C + c] = map[c * T + C + pidx];
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {m}, [m, og, kh, C, n, T]() {
      for (std::int64_t i = 0; i < kh; ++i) {
        float* g = m.grad->data() + i * T * T;
        const float* o = og->data() + i * n * n * C;
        for (std::int64_t pidx = 0; pidx < n * n; ++pidx)
          for (std::int64_t c = 0; c < C; ++c) g[c * T + C + pidx] += o[pidx * C + c];
      }
    });
  }
  return out;
}

/// Patch-to-patch block of each map, without renormalization:
/// out[i][p][q] = maps[i][C+p][C+q], giving [(K·H)×N²×N²].
inline Tensor extract_patch_attention(const AttentionStack& stack, const EncoderConfig& cfg) {
  const std::int64_t kh = cfg.total_heads(), C = cfg.num_classes, n2 = cfg.num_patches(), T = cfg.tokens();
  if (stack.maps.rank() != 3 || stack.maps.shape[0] != kh || stack.maps.shape[1] != T) {
    throw std::invalid_argument("extract_patch_attention: stack " + shape_str(stack.maps.shape) +
                                " does not match config");
  }
  const Tensor& m = stack.maps;
  Tensor out = detail::make_out({kh, n2, n2}, detail::any_requires({&m}));
  for (std::int64_t i = 0; i < kh; ++i) {
    const float* map = m.ptr() + i * T * T;
    float* o = out.ptr() + i * n2 * n2;
    for (std::int64_t p = 0; p < n2; ++p)
      for (std::int64_t q = 0; q < n2; ++q) o[p * n2 + q] = map[(C + p) * T + C + q];
  }
  if (out.requires_grad()) {
    auto og = out.grad;
    detail::attach(out, {m}, [m, og, kh, C, n2, T]() {
      for (std::int64_t i = 0; i < kh; ++i) {
        float* g = m.grad->data() + i * T * T;
        const float* o = og->data() + i * n2 * n2;
        for (std::int64_t p = 0; p < n2; ++p)
          for (std::int64_t q = 0; q < n2; ++q) g[(C + p) * T + C + q] += o[p * n2 + q];
      }
    });
  }
  return out;
}

}  // namespace weaktr
