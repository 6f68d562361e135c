#include <gtest/gtest.h>

#include <cmath>

#include "weaktr/cam.hpp"
#include "weaktr/gradcheck.hpp"
#include "weaktr/rng.hpp"

using namespace weaktr;

namespace {

EncoderConfig small_config() {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;  // N = 2
  cfg.in_channels = 3;
  cfg.num_classes = 2;
  cfg.embed_dim = 4;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.seed = 5;
  return cfg;
}

Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : *t.data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

Parameter* find_param(std::vector<Parameter*> params, const std::string& name) {
  for (Parameter* p : params)
    if (p->name == name) return p;
  ADD_FAILURE() << "parameter not found: " << name;
  return nullptr;
}

/// Test-side convolution, written index by index.
Tensor conv3x3_oracle(const Tensor& x, const Tensor& k, const Tensor& b) {
  const std::int64_t h = x.shape[0], w = x.shape[1], ci = x.shape[2], co = k.shape[3];
  Tensor out = Tensor::zeros({h, w, co});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < w; ++xx)
      for (std::int64_t oc = 0; oc < co; ++oc) {
        double acc = b.ptr()[oc];
        for (std::int64_t ky = 0; ky < 3; ++ky)
          for (std::int64_t kx = 0; kx < 3; ++kx) {
            const std::int64_t sy = y + ky - 1, sx = xx + kx - 1;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            for (std::int64_t ic = 0; ic < ci; ++ic) {
              acc += x.at({sy, sx, ic}) * k.at({ky, kx, ic, oc});
            }
          }
        out.at({y, xx, oc}) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace

TEST(CoarseCam, IdentityKernelCenter) {
  // D == C, kernel center set to identity: CAM equals the arranged patch rows.
  EncoderConfig cfg = small_config();
  cfg.embed_dim = 4;
  cfg.num_classes = 4;
  CamModel model(cfg, AafConfig{});
  Parameter* kw = find_param(model.all_params(), "cam.conv.weight");
  std::fill(kw->values().begin(), kw->values().end(), 0.0f);
  for (std::int64_t c = 0; c < 4; ++c) kw->value.at({1, 1, c, c}) = 1.0f;
  Parameter* kb = find_param(model.all_params(), "cam.conv.bias");
  std::fill(kb->values().begin(), kb->values().end(), 0.0f);

  CounterRng rng(1);
  Tensor tokens = random_tensor({cfg.tokens(), cfg.embed_dim}, rng);
  Tensor cam = model.coarse_cam(TokenSequence{tokens, cfg.num_classes});
  const std::int64_t n = cfg.grid();
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x)
      for (std::int64_t c = 0; c < 4; ++c) {
        EXPECT_FLOAT_EQ(cam.at({y, x, c}), tokens.at({cfg.num_classes + y * n + x, c}));
      }
}

TEST(CoarseCam, ZeroTokensGiveBias) {
  EncoderConfig cfg = small_config();
  CamModel model(cfg, AafConfig{});
  Parameter* kb = find_param(model.all_params(), "cam.conv.bias");
  kb->values() = {0.25f, -1.5f};
  Tensor tokens = Tensor::zeros({cfg.tokens(), cfg.embed_dim});
  Tensor cam = model.coarse_cam(TokenSequence{tokens, cfg.num_classes});
  const std::int64_t n = cfg.grid();
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x) {
      EXPECT_FLOAT_EQ(cam.at({y, x, 0}), 0.25f);
      EXPECT_FLOAT_EQ(cam.at({y, x, 1}), -1.5f);
    }
}

TEST(CoarseCam, MatchesBruteForceConvolution) {
  EncoderConfig cfg = small_config();  // N=2, D=3, C=2
  CamModel model(cfg, AafConfig{});
  CounterRng rng(2);
  Tensor tokens = random_tensor({cfg.tokens(), cfg.embed_dim}, rng);
  Tensor cam = model.coarse_cam(TokenSequence{tokens, cfg.num_classes});

  Parameter* kw = find_param(model.all_params(), "cam.conv.weight");
  Parameter* kb = find_param(model.all_params(), "cam.conv.bias");
  const std::int64_t n = cfg.grid();
  Tensor arranged = Tensor::zeros({n, n, cfg.embed_dim});
  for (std::int64_t i = 0; i < n * n; ++i)
    for (std::int64_t d = 0; d < cfg.embed_dim; ++d)
      arranged.ptr()[i * cfg.embed_dim + d] = tokens.at({cfg.num_classes + i, d});
  Tensor expect = conv3x3_oracle(arranged, kw->value, kb->value);
  for (std::int64_t i = 0; i < cam.numel(); ++i) EXPECT_NEAR((*cam.data)[i], (*expect.data)[i], 1e-5f);
}

TEST(CoarseCam, RawConvolutionOracleWithThreeChannels) {
  // N=2, D=3, C=2 on the convolution itself.
  CounterRng rng(29);
  Tensor arranged = random_tensor({2, 2, 3}, rng);
  Tensor kernel = random_tensor({3, 3, 3, 2}, rng);
  Tensor bias = random_tensor({2}, rng);
  Tensor out = conv3x3(arranged, kernel, bias);
  Tensor expect = conv3x3_oracle(arranged, kernel, bias);
  for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_NEAR((*out.data)[i], (*expect.data)[i], 1e-5f);
}

namespace {

AttentionStack synthetic_stack(const EncoderConfig& cfg, std::uint64_t seed) {
  CounterRng rng(seed);
  const std::int64_t T = cfg.tokens();
  Tensor maps = Tensor::zeros({cfg.total_heads(), T, T});
  for (float& v : *maps.data) v = static_cast<float>(rng.uniform());
  for (std::int64_t m = 0; m < cfg.total_heads(); ++m)
    for (std::int64_t r = 0; r < T; ++r) {
      double s = 0.0;
      for (std::int64_t c = 0; c < T; ++c) s += maps.at({m, r, c});
      for (std::int64_t c = 0; c < T; ++c) maps.at({m, r, c}) = static_cast<float>(maps.at({m, r, c}) / s);
    }
  return AttentionStack{maps, cfg.layers, cfg.heads};
}

}  // namespace

TEST(AdaptiveFuse, ZeroFfnGivesHalf) {
  EncoderConfig cfg = small_config();
  cfg.layers = 2;
  cfg.heads = 2;
  CamModel model(cfg, AafConfig{});
  for (const char* name : {"aaf.fc1.weight", "aaf.fc1.bias", "aaf.fc2.weight", "aaf.fc2.bias"}) {
    Parameter* p = find_param(model.all_params(), name);
    std::fill(p->values().begin(), p->values().end(), 0.0f);
  }
  auto [w, wprime] = model.adaptive_fuse(synthetic_stack(cfg, 3));
  ASSERT_EQ(wprime.shape, (Shape{4, 1}));
  for (float v : *wprime.data) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(AdaptiveFuse, IdenticalHeadsSymmetricFfn) {
  EncoderConfig cfg = small_config();
  cfg.layers = 1;
  cfg.heads = 2;
  CamModel model(cfg, AafConfig{.hidden_dim = 3});
  // Head-symmetric FFN: identical rows/columns for both head positions.
  Parameter* fc1 = find_param(model.all_params(), "aaf.fc1.weight");
  Parameter* fc2 = find_param(model.all_params(), "aaf.fc2.weight");
  for (std::int64_t hcol = 0; hcol < 3; ++hcol) {
    fc1->value.at({0, hcol}) = 0.3f + 0.1f * static_cast<float>(hcol);
    fc1->value.at({1, hcol}) = 0.3f + 0.1f * static_cast<float>(hcol);
    fc2->value.at({hcol, 0}) = 0.7f - 0.2f * static_cast<float>(hcol);
    fc2->value.at({hcol, 1}) = 0.7f - 0.2f * static_cast<float>(hcol);
  }
  // Two identical attention maps.
  const std::int64_t T = cfg.tokens();
  CounterRng rng(4);
  Tensor one = random_tensor({T, T}, rng, 0.0, 1.0);
  Tensor maps = Tensor::zeros({2, T, T});
  std::copy(one.ptr(), one.ptr() + T * T, maps.ptr());
  std::copy(one.ptr(), one.ptr() + T * T, maps.ptr() + T * T);
  auto [w, wprime] = model.adaptive_fuse(AttentionStack{maps, 1, 2});
  EXPECT_FLOAT_EQ((*wprime.data)[0], (*wprime.data)[1]);
}

TEST(AdaptiveFuse, MatchesPoolAffineSigmoidOracle) {
  EncoderConfig cfg = small_config();
  cfg.layers = 2;
  cfg.heads = 2;
  CamModel model(cfg, AafConfig{});
  AttentionStack stack = synthetic_stack(cfg, 6);
  auto [w, wprime] = model.adaptive_fuse(stack);

  const std::int64_t kh = cfg.total_heads(), T = cfg.tokens(), hidden = 18;
  Parameter* fc1w = find_param(model.all_params(), "aaf.fc1.weight");
  Parameter* fc1b = find_param(model.all_params(), "aaf.fc1.bias");
  Parameter* fc2w = find_param(model.all_params(), "aaf.fc2.weight");
  Parameter* fc2b = find_param(model.all_params(), "aaf.fc2.bias");

  std::vector<double> pooled(static_cast<std::size_t>(kh), 0.0);
  for (std::int64_t m = 0; m < kh; ++m) {
    double s = 0.0;
    for (std::int64_t i = 0; i < T * T; ++i) s += stack.maps.ptr()[m * T * T + i];
    pooled[static_cast<std::size_t>(m)] = s / (T * T);
  }
  for (std::int64_t m = 0; m < kh; ++m) EXPECT_NEAR(w.ptr()[m], pooled[static_cast<std::size_t>(m)], 1e-5);

  std::vector<double> hid(static_cast<std::size_t>(hidden), 0.0);
  for (std::int64_t j = 0; j < hidden; ++j) {
    double s = fc1b->values()[static_cast<std::size_t>(j)];
    for (std::int64_t i = 0; i < kh; ++i) s += pooled[static_cast<std::size_t>(i)] * fc1w->value.at({i, j});
    // erf-based GELU
    hid[static_cast<std::size_t>(j)] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
  }
  for (std::int64_t o = 0; o < kh; ++o) {
    double s = fc2b->values()[static_cast<std::size_t>(o)];
    for (std::int64_t j = 0; j < hidden; ++j) s += hid[static_cast<std::size_t>(j)] * fc2w->value.at({j, o});
    const double sig = 1.0 / (1.0 + std::exp(-s));
    EXPECT_NEAR(wprime.ptr()[o], sig, 1e-5);
    EXPECT_GT(wprime.ptr()[o], 0.0f);
    EXPECT_LT(wprime.ptr()[o], 1.0f);
  }
}

TEST(WeightedAttention, UniformWeightsGiveMean) {
  CounterRng rng(7);
  Tensor ca = random_tensor({2, 2, 2, 3}, rng);
  Tensor pa = random_tensor({2, 4, 4}, rng);
  Tensor ones = Tensor::full({2, 1}, 1.0f);
  auto [ca_hat, pa_hat] = weighted_attention(ca, pa, ones);
  for (std::int64_t i = 0; i < ca_hat.numel(); ++i) {
    const float mean = 0.5f * ((*ca.data)[i] + (*ca.data)[ca_hat.numel() + i]);
    EXPECT_NEAR((*ca_hat.data)[i], mean, 1e-6f);
  }
  for (std::int64_t i = 0; i < pa_hat.numel(); ++i) {
    const float mean = 0.5f * ((*pa.data)[i] + (*pa.data)[pa_hat.numel() + i]);
    EXPECT_NEAR((*pa_hat.data)[i], mean, 1e-6f);
  }
}

TEST(WeightedAttention, ZeroWeightsAnnihilate) {
  CounterRng rng(8);
  Tensor ca = random_tensor({3, 2, 2, 1}, rng);
  Tensor pa = random_tensor({3, 4, 4}, rng);
  Tensor zeros = Tensor::zeros({3, 1});
  auto [ca_hat, pa_hat] = weighted_attention(ca, pa, zeros);
  for (float v : *ca_hat.data) EXPECT_EQ(v, 0.0f);
  for (float v : *pa_hat.data) EXPECT_EQ(v, 0.0f);
}

TEST(WeightedAttention, MatchesWeightedSumOracle) {
  CounterRng rng(9);
  Tensor ca = random_tensor({2, 2, 2, 2}, rng);
  Tensor pa = random_tensor({2, 4, 4}, rng);
  Tensor w = Tensor::from_vector({2, 1}, {0.25f, 0.75f});
  auto [ca_hat, pa_hat] = weighted_attention(ca, pa, w);
  const std::int64_t step = ca_hat.numel();
  for (std::int64_t i = 0; i < step; ++i) {
    const double expect = (0.25 * (*ca.data)[i] + 0.75 * (*ca.data)[step + i]) / 2.0;
    EXPECT_NEAR((*ca_hat.data)[i], expect, 1e-6);
  }
  const std::int64_t pstep = pa_hat.numel();
  for (std::int64_t i = 0; i < pstep; ++i) {
    const double expect = (0.25 * (*pa.data)[i] + 0.75 * (*pa.data)[pstep + i]) / 2.0;
    EXPECT_NEAR((*pa_hat.data)[i], expect, 1e-6);
  }
}

TEST(FineCam, ScalarComposition) {
  Tensor coarse = Tensor::from_vector({1, 1, 1}, {2.0f});
  Tensor ca_hat = Tensor::from_vector({1, 1, 1}, {0.5f});
  Tensor pa_hat = Tensor::from_vector({1, 1}, {3.0f});
  Tensor fine = fine_cam(coarse, ca_hat, pa_hat);
  EXPECT_FLOAT_EQ(fine.item(), 3.0f * 2.0f * 0.5f);
}

TEST(FineCam, IdentityPropagation) {
  CounterRng rng(10);
  Tensor coarse = random_tensor({2, 2, 3}, rng);
  Tensor ca_hat = random_tensor({2, 2, 3}, rng);
  Tensor eye = Tensor::zeros({4, 4});
  for (std::int64_t i = 0; i < 4; ++i) eye.at({i, i}) = 1.0f;
  Tensor fine = fine_cam(coarse, ca_hat, eye);
  for (std::int64_t i = 0; i < fine.numel(); ++i) {
    EXPECT_NEAR((*fine.data)[i], (*coarse.data)[i] * (*ca_hat.data)[i], 1e-6f);
  }
}

TEST(FineCam, MatchesMatrixProductOracle) {
  CounterRng rng(11);
  const std::int64_t n = 2, c = 2;
  Tensor coarse = random_tensor({n, n, c}, rng);
  Tensor ca_hat = random_tensor({n, n, c}, rng);
  Tensor pa_hat = random_tensor({n * n, n * n}, rng);
  Tensor fine = fine_cam(coarse, ca_hat, pa_hat);
  for (std::int64_t p = 0; p < n * n; ++p)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::int64_t q = 0; q < n * n; ++q) {
        const double had = (*coarse.data)[q * c + ch] * (*ca_hat.data)[q * c + ch];
        acc += pa_hat.at({p, q}) * had;
      }
      EXPECT_NEAR((*fine.data)[p * c + ch], acc, 1e-5);
    }
}

TEST(FineCam, WeightScalingIsQuadratic) {
  CounterRng rng(12);
  Tensor ca = random_tensor({2, 2, 2, 2}, rng);
  Tensor pa = random_tensor({2, 4, 4}, rng);
  Tensor coarse = random_tensor({2, 2, 2}, rng);
  Tensor w = random_tensor({2, 1}, rng, 0.1, 0.9);
  auto [ca1, pa1] = weighted_attention(ca, pa, w);
  Tensor fine1 = fine_cam(coarse, ca1, pa1);
  // k = 2 is exact in binary floating point.
  Tensor w2 = scale(w, 2.0f);
  auto [ca2, pa2] = weighted_attention(ca, pa, w2);
  Tensor fine2 = fine_cam(coarse, ca2, pa2);
  for (std::int64_t i = 0; i < fine1.numel(); ++i) {
    EXPECT_FLOAT_EQ((*fine2.data)[i], 4.0f * (*fine1.data)[i]);
  }
}

TEST(FineCam, ClassPermutationEquivariance) {
  CounterRng rng(13);
  const std::int64_t n = 2, c = 3;
  Tensor coarse = random_tensor({n, n, c}, rng);
  Tensor ca_hat = random_tensor({n, n, c}, rng);
  Tensor pa_hat = random_tensor({n * n, n * n}, rng);
  Tensor fine = fine_cam(coarse, ca_hat, pa_hat);
  const std::vector<std::int64_t> perm = {2, 0, 1};
  Tensor coarse_p = Tensor::zeros({n, n, c});
  Tensor ca_p = Tensor::zeros({n, n, c});
  for (std::int64_t i = 0; i < n * n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      coarse_p.ptr()[i * c + ch] = (*coarse.data)[i * c + perm[static_cast<std::size_t>(ch)]];
      ca_p.ptr()[i * c + ch] = (*ca_hat.data)[i * c + perm[static_cast<std::size_t>(ch)]];
    }
  Tensor fine_p = fine_cam(coarse_p, ca_p, pa_hat);
  for (std::int64_t i = 0; i < n * n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      EXPECT_FLOAT_EQ(fine_p.ptr()[i * c + ch], (*fine.data)[i * c + perm[static_cast<std::size_t>(ch)]]);
    }
}

TEST(ClassLogits, ConstantCamPoolsToConstant) {
  EncoderConfig cfg = small_config();
  CamModel model(cfg, AafConfig{});
  CamBundle b;
  b.cam_coarse = Tensor::full({2, 2, 2}, 1.25f);
  b.cam_fine = Tensor::full({2, 2, 2}, -0.5f);
  CounterRng rng(14);
  Tensor tokens = random_tensor({cfg.tokens(), cfg.embed_dim}, rng);
  ClassLogits logits = model.class_logits(b, TokenSequence{tokens, cfg.num_classes});
  for (std::int64_t c = 0; c < 2; ++c) {
    EXPECT_FLOAT_EQ(logits.coarse.ptr()[c], 1.25f);
    EXPECT_FLOAT_EQ(logits.fine.ptr()[c], -0.5f);
  }
}

TEST(ClassLogits, ZeroTokensGiveHeadBias) {
  EncoderConfig cfg = small_config();
  CamModel model(cfg, AafConfig{});
  Parameter* hb = find_param(model.all_params(), "cls_head.bias");
  hb->values() = {0.75f};
  CamBundle b;
  b.cam_coarse = Tensor::zeros({2, 2, 2});
  b.cam_fine = Tensor::zeros({2, 2, 2});
  Tensor tokens = Tensor::zeros({cfg.tokens(), cfg.embed_dim});
  ClassLogits logits = model.class_logits(b, TokenSequence{tokens, cfg.num_classes});
  for (std::int64_t c = 0; c < cfg.num_classes; ++c) EXPECT_FLOAT_EQ(logits.cls.ptr()[c], 0.75f);
}

TEST(ClassLogits, MatchesPerChannelMeanOracle) {
  EncoderConfig cfg = small_config();
  CamModel model(cfg, AafConfig{});
  CounterRng rng(15);
  CamBundle b;
  b.cam_coarse = random_tensor({2, 2, 2}, rng);
  b.cam_fine = random_tensor({2, 2, 2}, rng);
  Tensor tokens = random_tensor({cfg.tokens(), cfg.embed_dim}, rng);
  ClassLogits logits = model.class_logits(b, TokenSequence{tokens, cfg.num_classes});
  for (std::int64_t c = 0; c < 2; ++c) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < 4; ++i) acc += (*b.cam_fine.data)[i * 2 + c];
    EXPECT_NEAR(logits.fine.ptr()[c], acc / 4.0, 1e-6);
  }
}

TEST(MultilabelSoftMargin, ZeroLogitsGiveLn2) {
  Tensor logits = Tensor::zeros({3});
  const float l1 = multilabel_soft_margin(logits, {1, 0, 1}).item();
  const float l2 = multilabel_soft_margin(logits, {0, 0, 0}).item();
  EXPECT_NEAR(l1, std::log(2.0f), 1e-6f);
  EXPECT_NEAR(l2, std::log(2.0f), 1e-6f);
}

TEST(MultilabelSoftMargin, SaturationLimit) {
  Tensor logits = Tensor::from_vector({2}, {100.0f, -100.0f});
  EXPECT_NEAR(multilabel_soft_margin(logits, {1, 0}).item(), 0.0f, 1e-5f);
}

TEST(MultilabelSoftMargin, ClosedFormTwoClasses) {
  Tensor logits = Tensor::from_vector({2}, {std::log(3.0f), 0.0f});
  const double expect = -0.5 * (std::log(0.75) + std::log(0.5));
  EXPECT_NEAR(multilabel_soft_margin(logits, {1, 0}).item(), expect, 1e-5);
  EXPECT_NEAR(expect, 0.4904, 2e-4);
}

TEST(MultilabelSoftMargin, NonnegativityProperty) {
  CounterRng rng(16);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::int64_t c = rng.uniform_int(1, 6);
    Tensor logits = random_tensor({c}, rng, -10.0, 10.0);
    std::vector<float> y(static_cast<std::size_t>(c));
    for (float& v : y) v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    EXPECT_GE(multilabel_soft_margin(logits, y).item(), 0.0f);
  }
}

TEST(MultilabelSoftMargin, GradientMatchesFiniteDifferences) {
  CounterRng rng(17);
  Parameter logits("logits", random_tensor({4}, rng, -2.0, 2.0));
  const std::vector<float> y = {1, 0, 1, 0};
  auto loss = [&]() { return multilabel_soft_margin(logits.value, y); };
  EXPECT_TRUE(check_gradient(loss, {&logits}, 1e-3f).pass);
}

TEST(TotalLoss, CompositionOfSymmetryCase) {
  ClassLogits logits{Tensor::zeros({3}), Tensor::zeros({3}), Tensor::zeros({3})};
  auto [total, bd] = total_loss(logits, {1, 0, 0});
  EXPECT_NEAR(bd.total, 3.0 * std::log(2.0), 1e-5);
  EXPECT_NEAR(bd.total, 2.0794, 2e-4);
}

TEST(TotalLoss, SaturatedLimit) {
  Tensor sat = Tensor::from_vector({2}, {100.0f, -100.0f});
  ClassLogits logits{sat, sat, sat};
  auto [total, bd] = total_loss(logits, {1, 0});
  EXPECT_NEAR(bd.total, 0.0, 1e-5);
}

TEST(TotalLoss, SumsComponentOracles) {
  CounterRng rng(18);
  Tensor a = random_tensor({3}, rng, -3.0, 3.0);
  Tensor b = random_tensor({3}, rng, -3.0, 3.0);
  Tensor c = random_tensor({3}, rng, -3.0, 3.0);
  const std::vector<float> y = {0, 1, 1};
  auto [total, bd] = total_loss(ClassLogits{a, b, c}, y);
  const float ea = multilabel_soft_margin(a, y).item();
  const float eb = multilabel_soft_margin(b, y).item();
  const float ec = multilabel_soft_margin(c, y).item();
  EXPECT_NEAR(bd.total, ea + eb + ec, 1e-6);
  EXPECT_NEAR(bd.l_cls_token + bd.l_coarse_cam + bd.l_fine_cam, bd.total, 1e-6);
}

// Bypassing the AAF with W' = 1 must reproduce an independently coded
// mean-sum fusion path.
TEST(MeanSum, EquivalenceWithUniformWeights) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.num_classes = 3;
  cfg.embed_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.seed = 19;
  CamModel model(cfg, AafConfig{}, FuseMode::Uniform);
  CounterRng rng(20);
  Tensor img = Tensor::zeros({8, 8, 3});
  for (float& v : *img.data) v = static_cast<float>(rng.uniform());
  auto [bundle, t_final] = model.forward(img);

  // Independent mean-sum path, plain loops over the raw stack.
  auto [t2, stack] = model.encoder().forward(img);
  const std::int64_t kh = cfg.total_heads(), n = cfg.grid(), C = cfg.num_classes, T = cfg.tokens();
  std::vector<double> ca_mean(static_cast<std::size_t>(n * n * C), 0.0);
  std::vector<double> pa_mean(static_cast<std::size_t>(n * n * n * n), 0.0);
  for (std::int64_t m = 0; m < kh; ++m) {
    for (std::int64_t p = 0; p < n * n; ++p) {
      for (std::int64_t c = 0; c < C; ++c) {
        ca_mean[static_cast<std::size_t>(p * C + c)] += stack.maps.at({m, c, C + p}) / kh;
      }
      for (std::int64_t q = 0; q < n * n; ++q) {
        pa_mean[static_cast<std::size_t>(p * n * n + q)] += stack.maps.at({m, C + p, C + q}) / kh;
      }
    }
  }
  std::vector<double> fine(static_cast<std::size_t>(n * n * C), 0.0);
  for (std::int64_t p = 0; p < n * n; ++p)
    for (std::int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::int64_t q = 0; q < n * n; ++q) {
        acc += pa_mean[static_cast<std::size_t>(p * n * n + q)] * (*bundle.cam_coarse.data)[q * C + c] *
               ca_mean[static_cast<std::size_t>(q * C + c)];
      }
      fine[static_cast<std::size_t>(p * C + c)] = acc;
    }
  for (std::int64_t i = 0; i < bundle.cam_fine.numel(); ++i) {
    EXPECT_NEAR((*bundle.cam_fine.data)[i], fine[static_cast<std::size_t>(i)], 1e-6);
  }
}

TEST(EndToEnd, AafGradientsExistAndPassFiniteDifferences) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.num_classes = 2;
  cfg.embed_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.seed = 21;
  CamModel model(cfg, AafConfig{});
  CounterRng rng(22);
  Tensor img = Tensor::zeros({8, 8, 3});
  for (float& v : *img.data) v = static_cast<float>(rng.uniform());
  const std::vector<float> y = {1, 0};
  auto loss = [&]() {
    auto [bundle, t_final] = model.forward(img);
    ClassLogits logits = model.class_logits(bundle, t_final);
    return total_loss(logits, y).first;
  };
  std::vector<Parameter*> aaf_params;
  for (Parameter* p : model.params()) {
    if (p->name.rfind("aaf.", 0) == 0) aaf_params.push_back(p);
  }
  ASSERT_EQ(aaf_params.size(), 4u);
  for (Parameter* p : aaf_params) p->zero_grad();
  Tensor l = loss();
  backward(l);
  double grad_norm = 0.0;
  for (Parameter* p : aaf_params)
    for (float g : p->gradient()) grad_norm += static_cast<double>(g) * g;
  EXPECT_GT(grad_norm, 0.0);
  EXPECT_TRUE(check_gradient(loss, aaf_params, 2e-3f).pass);
}

TEST(FixedRandom, WeightsFrozenInUnitInterval) {
  EncoderConfig cfg = small_config();
  cfg.layers = 2;
  cfg.heads = 2;
  CamModel model(cfg, AafConfig{}, FuseMode::FixedRandom, 77);
  auto [w1, wp1] = model.adaptive_fuse(synthetic_stack(cfg, 23));
  auto [w2, wp2] = model.adaptive_fuse(synthetic_stack(cfg, 24));
  for (std::int64_t i = 0; i < wp1.numel(); ++i) {
    EXPECT_GT(wp1.ptr()[i], 0.0f);
    EXPECT_LT(wp1.ptr()[i], 1.0f);
    EXPECT_EQ(wp1.ptr()[i], wp2.ptr()[i]);  // independent of the input stack
  }
  // No AAF parameters are trainable in this mode.
  for (Parameter* p : model.params()) EXPECT_EQ(p->name.rfind("aaf.", 0), std::string::npos);
}
