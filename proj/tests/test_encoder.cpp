#include <gtest/gtest.h>

#include <cmath>

#include "weaktr/encoder.hpp"
#include "weaktr/gradcheck.hpp"
#include "weaktr/ops.hpp"
#include "weaktr/rng.hpp"

using namespace weaktr;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;  // N = 2
  cfg.in_channels = 3;
  cfg.num_classes = 3;
  cfg.embed_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.seed = 42;
  return cfg;
}

Tensor random_image(const EncoderConfig& cfg, std::uint64_t seed) {
  CounterRng rng(seed);
  Tensor img = Tensor::zeros({cfg.image_size, cfg.image_size, cfg.in_channels});
  for (float& v : *img.data) v = static_cast<float>(rng.uniform());
  return img;
}

Parameter* find_param(std::vector<Parameter*> params, const std::string& name) {
  for (Parameter* p : params) {
    if (p->name == name) return p;
  }
  ADD_FAILURE() << "parameter not found: " << name;
  return nullptr;
}

}  // namespace

TEST(PatchEmbed, TokenCountArithmetic) {
  EncoderConfig cfg = tiny_config();  // O=8, patch=4, C=3 -> 3 + 4 = 7 tokens
  ViTEncoder enc(cfg);
  TokenSequence seq = enc.patch_embed(random_image(cfg, 1));
  EXPECT_EQ(seq.tokens.shape, (Shape{7, 8}));
  EXPECT_EQ(seq.num_class_tokens, 3);
}

TEST(PatchEmbed, ZeroImageGivesPositionalEmbeddings) {
  EncoderConfig cfg = tiny_config();
  ViTEncoder enc(cfg);
  Tensor zero_img = Tensor::zeros({cfg.image_size, cfg.image_size, cfg.in_channels});
  TokenSequence seq = enc.patch_embed(zero_img);
  Parameter* pos = find_param(enc.params(), "pos_embed");
  // Patch rows: 0·W + 0 bias + positional embedding.
  for (std::int64_t r = cfg.num_classes; r < cfg.tokens(); ++r) {
    for (std::int64_t c = 0; c < cfg.embed_dim; ++c) {
      EXPECT_FLOAT_EQ(seq.tokens.at({r, c}), pos->value.at({r, c}));
    }
  }
}

TEST(PatchEmbed, DeterministicAcrossInstances) {
  EncoderConfig cfg = tiny_config();
  ViTEncoder a(cfg), b(cfg);
  Tensor img = random_image(cfg, 2);
  TokenSequence sa = a.patch_embed(img);
  TokenSequence sb = b.patch_embed(img);
  for (std::int64_t i = 0; i < sa.tokens.numel(); ++i) {
    EXPECT_EQ((*sa.tokens.data)[i], (*sb.tokens.data)[i]);
  }
}

TEST(Encode, AttentionRowsSumToOne) {
  EncoderConfig cfg = tiny_config();
  ViTEncoder enc(cfg);
  auto [t_final, stack] = enc.forward(random_image(cfg, 3));
  const std::int64_t T = cfg.tokens();
  ASSERT_EQ(stack.maps.shape, (Shape{cfg.total_heads(), T, T}));
  for (std::int64_t m = 0; m < cfg.total_heads(); ++m) {
    for (std::int64_t r = 0; r < T; ++r) {
      double sum = 0.0;
      for (std::int64_t c = 0; c < T; ++c) sum += stack.maps.at({m, r, c});
      EXPECT_NEAR(sum, 1.0, 1e-5);
    }
  }
}

TEST(Encode, MinimalConfigStackShape) {
  EncoderConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 4;  // N = 1
  cfg.num_classes = 1;
  cfg.embed_dim = 4;
  cfg.layers = 1;
  cfg.heads = 1;
  ViTEncoder enc(cfg);
  auto [t_final, stack] = enc.forward(random_image(cfg, 4));
  EXPECT_EQ(stack.maps.shape, (Shape{1, 2, 2}));
}

TEST(Encode, DeterministicForward) {
  EncoderConfig cfg = tiny_config();
  ViTEncoder enc(cfg);
  Tensor img = random_image(cfg, 5);
  auto [t1, s1] = enc.forward(img);
  auto [t2, s2] = enc.forward(img);
  for (std::int64_t i = 0; i < t1.tokens.numel(); ++i) EXPECT_EQ((*t1.tokens.data)[i], (*t2.tokens.data)[i]);
  for (std::int64_t i = 0; i < s1.maps.numel(); ++i) EXPECT_EQ((*s1.maps.data)[i], (*s2.maps.data)[i]);
}

TEST(Encode, GradientIntegrity) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.num_classes = 2;
  cfg.embed_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.seed = 11;
  ViTEncoder enc(cfg);
  Tensor img = random_image(cfg, 6);
  // Fixed random projections keep every parameter's gradient well away from
  // the float32 finite-difference noise floor (a plain mean of squares of
  // the normalized tokens is nearly constant by construction).
  CounterRng rng(77);
  Tensor r_tokens = Tensor::zeros({cfg.tokens(), cfg.embed_dim});
  for (float& v : *r_tokens.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor r_maps = Tensor::zeros({cfg.total_heads(), cfg.tokens(), cfg.tokens()});
  for (float& v : *r_maps.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto loss = [&]() {
    auto [t_final, stack] = enc.forward(img);
    return add(mean_all(mul(t_final.tokens, r_tokens)), mean_all(mul(stack.maps, r_maps)));
  };
  GradCheckReport report = check_gradient(loss, enc.params(), 2e-3f, 1e-2f);
  EXPECT_TRUE(report.pass) << "worst relative error " << report.worst();
}

TEST(Encode, ZeroedProjectionsGiveUniformAttention) {
  EncoderConfig cfg = tiny_config();
  ViTEncoder enc(cfg);
  for (Parameter* p : enc.params()) {
    if (p->name.find("qkv") != std::string::npos) {
      std::fill(p->values().begin(), p->values().end(), 0.0f);
    }
  }
  auto [t_final, stack] = enc.forward(random_image(cfg, 7));
  const float uniform = 1.0f / static_cast<float>(cfg.tokens());
  for (std::int64_t i = 0; i < stack.maps.numel(); ++i) {
    EXPECT_NEAR((*stack.maps.data)[i], uniform, 1e-6f);
  }
  Tensor ca = extract_cross_attention(stack, cfg);
  Tensor pa = extract_patch_attention(stack, cfg);
  for (std::int64_t i = 0; i < ca.numel(); ++i) EXPECT_NEAR((*ca.data)[i], uniform, 1e-6f);
  for (std::int64_t i = 0; i < pa.numel(); ++i) EXPECT_NEAR((*pa.data)[i], uniform, 1e-6f);
}

namespace {

AttentionStack random_stack(const EncoderConfig& cfg, std::uint64_t seed) {
  CounterRng rng(seed);
  const std::int64_t T = cfg.tokens();
  Tensor maps = Tensor::zeros({cfg.total_heads(), T, T});
  for (float& v : *maps.data) v = static_cast<float>(rng.uniform());
  // Normalize rows so the stack honors the softmax contract.
  for (std::int64_t m = 0; m < cfg.total_heads(); ++m) {
    for (std::int64_t r = 0; r < T; ++r) {
      double sum = 0.0;
      for (std::int64_t c = 0; c < T; ++c) sum += maps.at({m, r, c});
      for (std::int64_t c = 0; c < T; ++c) maps.at({m, r, c}) = static_cast<float>(maps.at({m, r, c}) / sum);
    }
  }
  return AttentionStack{maps, cfg.layers, cfg.heads};
}

}  // namespace

TEST(ExtractCrossAttention, DegenerateSingleTokenCase) {
  EncoderConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 4;
  cfg.num_classes = 1;
  cfg.embed_dim = 4;
  cfg.layers = 1;
  cfg.heads = 1;
  AttentionStack stack = random_stack(cfg, 8);
  Tensor ca = extract_cross_attention(stack, cfg);
  ASSERT_EQ(ca.shape, (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(ca.at({0, 0, 0, 0}), stack.maps.at({0, 0, 1}));
}

TEST(ExtractCrossAttention, EntriesAreProbabilities) {
  EncoderConfig cfg = tiny_config();
  ViTEncoder enc(cfg);
  auto [t_final, stack] = enc.forward(random_image(cfg, 9));
  Tensor ca = extract_cross_attention(stack, cfg);
  for (float v : *ca.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(ExtractCrossAttention, MatchesBruteForceIndexing) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;  // N=2
  cfg.num_classes = 2;
  cfg.embed_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  AttentionStack stack = random_stack(cfg, 10);
  Tensor ca = extract_cross_attention(stack, cfg);
  const std::int64_t n = cfg.grid(), C = cfg.num_classes;
  ASSERT_EQ(ca.shape, (Shape{2, n, n, C}));
  for (std::int64_t m = 0; m < 2; ++m)
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x)
        for (std::int64_t c = 0; c < C; ++c) {
          EXPECT_FLOAT_EQ(ca.at({m, y, x, c}), stack.maps.at({m, c, C + y * n + x}));
        }
}

TEST(ExtractPatchAttention, RowSumsBoundedByOne) {
  EncoderConfig cfg = tiny_config();
  ViTEncoder enc(cfg);
  auto [t_final, stack] = enc.forward(random_image(cfg, 12));
  Tensor pa = extract_patch_attention(stack, cfg);
  const std::int64_t n2 = cfg.num_patches();
  for (std::int64_t m = 0; m < cfg.total_heads(); ++m) {
    for (std::int64_t p = 0; p < n2; ++p) {
      double sum = 0.0;
      for (std::int64_t q = 0; q < n2; ++q) sum += pa.at({m, p, q});
      EXPECT_LE(sum, 1.0 + 1e-5);
    }
  }
}

TEST(ExtractPatchAttention, MatchesBruteForceSlice) {
  EncoderConfig cfg = tiny_config();
  AttentionStack stack = random_stack(cfg, 13);
  Tensor pa = extract_patch_attention(stack, cfg);
  const std::int64_t n2 = cfg.num_patches(), C = cfg.num_classes;
  for (std::int64_t m = 0; m < cfg.total_heads(); ++m)
    for (std::int64_t p = 0; p < n2; ++p)
      for (std::int64_t q = 0; q < n2; ++q) {
        EXPECT_FLOAT_EQ(pa.at({m, p, q}), stack.maps.at({m, C + p, C + q}));
      }
}

TEST(Extraction, HeadPermutationBookkeeping) {
  EncoderConfig cfg = tiny_config();
  AttentionStack stack = random_stack(cfg, 14);
  const std::int64_t kh = cfg.total_heads();
  const std::int64_t T = cfg.tokens();
  std::vector<std::int64_t> perm = {2, 0, 3, 1};
  Tensor permuted = Tensor::zeros(stack.maps.shape);
  for (std::int64_t m = 0; m < kh; ++m) {
    std::copy(stack.maps.ptr() + perm[static_cast<std::size_t>(m)] * T * T,
              stack.maps.ptr() + (perm[static_cast<std::size_t>(m)] + 1) * T * T, permuted.ptr() + m * T * T);
  }
  AttentionStack pstack{permuted, cfg.layers, cfg.heads};
  Tensor ca = extract_cross_attention(stack, cfg);
  Tensor pca = extract_cross_attention(pstack, cfg);
  Tensor pa = extract_patch_attention(stack, cfg);
  Tensor ppa = extract_patch_attention(pstack, cfg);
  const std::int64_t ca_step = ca.numel() / kh;
  const std::int64_t pa_step = pa.numel() / kh;
  for (std::int64_t m = 0; m < kh; ++m) {
    for (std::int64_t i = 0; i < ca_step; ++i) {
      EXPECT_EQ((*pca.data)[m * ca_step + i], (*ca.data)[perm[static_cast<std::size_t>(m)] * ca_step + i]);
    }
    for (std::int64_t i = 0; i < pa_step; ++i) {
      EXPECT_EQ((*ppa.data)[m * pa_step + i], (*pa.data)[perm[static_cast<std::size_t>(m)] * pa_step + i]);
    }
  }
}

TEST(Extraction, GradientsFlowThroughGather) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.num_classes = 2;
  cfg.embed_dim = 8;
  cfg.layers = 1;
  cfg.heads = 1;
  Parameter maps("maps", Tensor::zeros({1, cfg.tokens(), cfg.tokens()}));
  CounterRng rng(15);
  for (float& v : maps.values()) v = static_cast<float>(rng.uniform());
  auto loss = [&]() {
    AttentionStack st{maps.value, cfg.layers, cfg.heads};
    Tensor ca = extract_cross_attention(st, cfg);
    Tensor pa = extract_patch_attention(st, cfg);
    return add(mean_all(mul(ca, ca)), mean_all(mul(pa, pa)));
  };
  EXPECT_TRUE(check_gradient(loss, {&maps}).pass);
}
