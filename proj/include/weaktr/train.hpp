#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "weaktr/cam.hpp"
#include "weaktr/data.hpp"
#include "weaktr/decoder.hpp"
#include "weaktr/encoder.hpp"
#include "weaktr/optim.hpp"
#include "weaktr/tensor.hpp"

namespace weaktr {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct OptimizerSpec {
  std::string kind = "adamw";  // "adamw" | "sgd"
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.05f;
  float momentum = 0.9f;
};

struct SeedConfig {
  float background_threshold = 0.40f;  // β
  bool has_ignore_band = false;
  float ignore_lo = 0.0f;
  float ignore_hi = 0.0f;

  void validate() const {
    if (!(background_threshold > 0.0f && background_threshold < 1.0f)) {
      throw std::invalid_argument("SeedConfig: background_threshold must be in (0,1)");
    }
    if (has_ignore_band && !(ignore_lo <= ignore_hi)) {
      throw std::invalid_argument("SeedConfig: ignore band must satisfy lo <= hi");
    }
  }
};

struct TrainConfig {
  std::string phase = "cam";  // "cam" | "retrain"
  std::int64_t epochs = 30;
  std::int64_t batch_size = 8;
  OptimizerSpec optimizer;
  float base_lr = 1e-3f;
  std::int64_t warmup_epochs = 2;
  std::string schedule = "cosine";  // "cosine" | "polynomial"
  float encoder_lr_scale = 0.1f;
  std::uint64_t seed = 0;
  std::string init_checkpoint;
  FuseMode fuse_mode = FuseMode::Learned;
  EncoderConfig encoder;
  AafConfig aaf;
  DecoderConfig decoder;
  SeedConfig seeds;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs and batch_size must be >= 1");
    if (!(base_lr > 0.0f)) throw std::invalid_argument("TrainConfig: base_lr must be positive");
  }

  float lr_at(std::int64_t step, std::int64_t total_steps) const {
    const std::int64_t spe = std::max<std::int64_t>(1, total_steps / std::max<std::int64_t>(1, epochs));
    if (schedule == "polynomial") return lr_polynomial(base_lr, step, total_steps);
    return lr_warmup_cosine(base_lr, step, warmup_epochs * spe, total_steps);
  }
};

inline void from_json(const nlohmann::json& j, OptimizerSpec& o) {
  o.kind = j.value("kind", o.kind);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.eps = j.value("eps", o.eps);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.momentum = j.value("momentum", o.momentum);
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"in_channels", c.in_channels},
                     {"num_classes", c.num_classes}, {"embed_dim", c.embed_dim}, {"layers", c.layers},
                     {"heads", c.heads},             {"mlp_ratio", c.mlp_ratio}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AafConfig& c) {
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.output_size = j.value("output_size", c.output_size);
  c.grad_patch = j.value("grad_patch", c.grad_patch);
  c.tau = j.value("tau", c.tau);
  const std::string gate = j.value("gate_mode", std::string("batch"));
  if (gate == "batch") {
    c.gate_mode = GateMode::Batch;
  } else if (gate == "image") {
    c.gate_mode = GateMode::Image;
  } else {
    throw std::invalid_argument("DecoderConfig: unknown gate_mode '" + gate + "'");
  }
}

inline void from_json(const nlohmann::json& j, SeedConfig& c) {
  c.background_threshold = j.value("background_threshold", c.background_threshold);
  if (j.contains("ignore_band")) {
    const auto& band = j.at("ignore_band");
    c.has_ignore_band = true;
    c.ignore_lo = band.at(0).get<float>();
    c.ignore_hi = band.at(1).get<float>();
  }
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.phase = j.value("phase", c.phase);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) j.at("optimizer").get_to(c.optimizer);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.schedule = j.value("schedule", c.schedule);
  c.encoder_lr_scale = j.value("encoder_lr_scale", c.encoder_lr_scale);
  c.seed = j.value("seed", c.seed);
  c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
  if (j.contains("fuse_mode")) c.fuse_mode = fuse_mode_from_name(j.at("fuse_mode").get<std::string>());
  if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
  if (j.contains("aaf")) j.at("aaf").get_to(c.aaf);
  if (j.contains("decoder")) j.at("decoder").get_to(c.decoder);
  if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
  c.encoder.seed = j.value("seed", c.seed);
  c.decoder.output_size = c.encoder.image_size;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  std::vector<double> per_class_iou;      // indexed by class id, 0 = background
  std::vector<std::uint8_t> class_present;  // class appears in prediction or GT
  double miou = 0.0;
  double pixel_precision = 0.0;  // aggregated over foreground classes
  double pixel_recall = 0.0;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    if (r.class_present[c]) per_class[std::to_string(c)] = r.per_class_iou[c];
  }
  return nlohmann::json{{"per_class_iou", per_class},
                        {"miou", r.miou},
                        {"pixel_precision", r.pixel_precision},
                        {"pixel_recall", r.pixel_recall}};
}

/// Aggregate per-class TP/FP/FN over a whole split; IoU = TP/(TP+FP+FN).
/// mIoU averages classes present in the union of prediction and GT.
/// Precision/recall are pixel-level over the foreground classes. Pixels
/// labeled kIgnoreLabel on either side are excluded.
inline EvalReport evaluate(const std::vector<Tensor>& pred_masks, const std::vector<Tensor>& gt_masks,
                           std::int64_t c_seg) {
  if (pred_masks.size() != gt_masks.size()) throw std::invalid_argument("evaluate: count mismatch");
  std::vector<std::int64_t> tp(static_cast<std::size_t>(c_seg), 0), fp(tp), fn(tp);
  for (std::size_t i = 0; i < pred_masks.size(); ++i) {
    const Tensor& p = pred_masks[i];
    const Tensor& g = gt_masks[i];
    if (p.shape != g.shape) throw std::invalid_argument("evaluate: mask shape mismatch at sample " + std::to_string(i));
    const std::int64_t n = p.numel();
    for (std::int64_t k = 0; k < n; ++k) {
      const float pv = (*p.data)[k];
      const float gv = (*g.data)[k];
      if (pv == kIgnoreLabel || gv == kIgnoreLabel) continue;
      const auto pc = static_cast<std::int64_t>(pv);
      const auto gc = static_cast<std::int64_t>(gv);
      if (pc < 0 || pc >= c_seg || gc < 0 || gc >= c_seg) {
        throw std::out_of_range("evaluate: label outside [0, " + std::to_string(c_seg) + ")");
      }
      if (pc == gc) {
        ++tp[static_cast<std::size_t>(pc)];
      } else {
        ++fp[static_cast<std::size_t>(pc)];
        ++fn[static_cast<std::size_t>(gc)];
      }
    }
  }
  EvalReport r;
  r.per_class_iou.assign(static_cast<std::size_t>(c_seg), 0.0);
  r.class_present.assign(static_cast<std::size_t>(c_seg), 0);
  double iou_sum = 0.0;
  std::int64_t present = 0;
  std::int64_t tp_fg = 0, fp_fg = 0, fn_fg = 0;
  for (std::int64_t c = 0; c < c_seg; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const std::int64_t uni = tp[ci] + fp[ci] + fn[ci];
    if (uni > 0) {
      r.class_present[ci] = 1;
      r.per_class_iou[ci] = static_cast<double>(tp[ci]) / static_cast<double>(uni);
      iou_sum += r.per_class_iou[ci];
      ++present;
    }
    if (c > 0) {
      tp_fg += tp[ci];
      fp_fg += fp[ci];
      fn_fg += fn[ci];
    }
  }
  r.miou = present > 0 ? iou_sum / static_cast<double>(present) : 0.0;
  r.pixel_precision = tp_fg + fp_fg > 0 ? static_cast<double>(tp_fg) / static_cast<double>(tp_fg + fp_fg) : 0.0;
  r.pixel_recall = tp_fg + fn_fg > 0 ? static_cast<double>(tp_fg) / static_cast<double>(tp_fg + fn_fg) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// CAM seeds
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor values_only(const Tensor& t) {
  Tensor d;
  d.shape = t.shape;
  d.data = t.data;
  return d;
}

inline std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t key) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  CounterRng rng(key);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  }
  return idx;
}

}  // namespace detail

/// Thresholds a fine CAM into an [O×O] pseudo-label map: inactive channels
/// are dropped, the CAM is upsampled, each active channel is min-max
/// normalized, and each pixel takes the argmax class when its best score
/// clears the background threshold β (scores inside the optional ignore
/// band become kIgnoreLabel).
inline Tensor cam_to_seeds(const Tensor& cam_fine, const std::vector<float>& label, const SeedConfig& scfg,
                           std::int64_t out_size) {
  scfg.validate();
  if (cam_fine.rank() != 3) throw std::invalid_argument("cam_to_seeds: CAM must be [N×N×C]");
  const std::int64_t c = cam_fine.shape[2];
  if (c != static_cast<std::int64_t>(label.size())) throw std::invalid_argument("cam_to_seeds: label size mismatch");
  Tensor seeds = Tensor::zeros({out_size, out_size});
  std::vector<std::int64_t> active;
  for (std::int64_t k = 0; k < c; ++k) {
    if (label[static_cast<std::size_t>(k)] > 0.5f) active.push_back(k);
  }
  if (active.empty()) return seeds;

  NoGradGuard ng;
  Tensor up = upsample_bilinear(detail::values_only(cam_fine), out_size, out_size);
  const std::int64_t hw = out_size * out_size;
  std::vector<std::vector<float>> norm(active.size(), std::vector<float>(static_cast<std::size_t>(hw)));
  for (std::size_t ai = 0; ai < active.size(); ++ai) {
    const std::int64_t k = active[ai];
    float lo = up.ptr()[k], hi = up.ptr()[k];
    for (std::int64_t i = 0; i < hw; ++i) {
      const float v = up.ptr()[i * c + k];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const float span = hi - lo;
    for (std::int64_t i = 0; i < hw; ++i) {
      // A constant channel sits at its own maximum everywhere.
      norm[ai][static_cast<std::size_t>(i)] = span > 0.0f ? (up.ptr()[i * c + k] - lo) / span : 1.0f;
    }
  }
  for (std::int64_t i = 0; i < hw; ++i) {
    float best = -1.0f;
    std::int64_t best_class = -1;
    for (std::size_t ai = 0; ai < active.size(); ++ai) {
      const float v = norm[ai][static_cast<std::size_t>(i)];
      if (v > best) {
        best = v;
        best_class = active[ai];
      }
    }
    float out;
    if (scfg.has_ignore_band && best >= scfg.ignore_lo && best < scfg.ignore_hi) {
      out = kIgnoreLabel;
    } else if (best >= scfg.background_threshold) {
      out = static_cast<float>(best_class + 1);
    } else {
      out = 0.0f;
    }
    seeds.ptr()[i] = out;
  }
  return seeds;
}

/// Replaces `fraction` of the supervised seed pixels with a uniformly random
/// wrong label, deterministically per (seed, pixel).
inline Tensor corrupt_seeds(const Tensor& seeds, double fraction, std::int64_t c_seg, std::uint64_t seed) {
  Tensor out = Tensor::from_vector(seeds.shape, *seeds.data);
  CounterRng rng(mix_key(seed, 0x436f727275707400ull));  // "Corrupt\0"
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    float& v = out.ptr()[i];
    if (v == kIgnoreLabel) continue;
    if (rng.uniform() >= fraction) continue;
    const auto orig = static_cast<std::int64_t>(v);
    std::int64_t wrong = rng.uniform_int(0, c_seg - 2);
    if (wrong >= orig) ++wrong;
    v = static_cast<float>(wrong);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phase 1: CAM training
// ---------------------------------------------------------------------------

struct LossCurvePoint {
  std::int64_t epoch = 0;
  double mean_loss = 0.0;
  double l_cls = 0.0, l_coarse = 0.0, l_fine = 0.0;
};

struct CamTrainResult {
  std::vector<LossCurvePoint> curve;
  double train_accuracy = 0.0;  // multi-label accuracy of the fine-CAM logits
};

/// Multi-label accuracy of σ(fine logits) >= 0.5 against the labels.
inline double cam_multilabel_accuracy(const CamModel& model, const std::vector<Sample>& data) {
  NoGradGuard ng;
  std::int64_t hits = 0, total = 0;
  for (const Sample& s : data) {
    auto [bundle, t_final] = model.forward(s.image);
    Tensor y_fine = spatial_mean(bundle.cam_fine);
    for (std::size_t c = 0; c < s.label.size(); ++c) {
      const bool pred = y_fine.ptr()[c] >= 0.0f;  // σ(x) >= 0.5 iff x >= 0
      const bool truth = s.label[c] > 0.5f;
      hits += pred == truth ? 1 : 0;
      ++total;
    }
  }
  return total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

/// Optimizes encoder + convolution head + AAF + class head on the summed
/// classification losses. Deterministic given (config, data).
inline CamTrainResult train_cam(CamModel& model, const std::vector<Sample>& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_cam: empty dataset");
  AdamW opt(single_group(model.params()), cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps,
            cfg.optimizer.weight_decay);
  const auto count = static_cast<std::int64_t>(train.size());
  const std::int64_t spe = (count + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = spe * cfg.epochs;
  CamTrainResult result;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled_indices(count, derive_key(cfg.seed, "cam_shuffle", static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0, epoch_cls = 0.0, epoch_coarse = 0.0, epoch_fine = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t b0 = 0; b0 < count; b0 += cfg.batch_size) {
      const std::int64_t b1 = std::min(count, b0 + cfg.batch_size);
      opt.zero_grad();
      Tensor batch_loss;
      double bd_cls = 0.0, bd_coarse = 0.0, bd_fine = 0.0;
      for (std::int64_t i = b0; i < b1; ++i) {
        const Sample& s = train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        auto [bundle, t_final] = model.forward(s.image);
        ClassLogits logits = model.class_logits(bundle, t_final);
        auto [loss, bd] = total_loss(logits, s.label);
        bd_cls += bd.l_cls_token;
        bd_coarse += bd.l_coarse_cam;
        bd_fine += bd.l_fine_cam;
        batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
      }
      const auto bs = static_cast<float>(b1 - b0);
      batch_loss = scale(batch_loss, 1.0f / bs);
      const float lv = batch_loss.item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train_cam: diverged (non-finite loss) at step " + std::to_string(step));
      }
      backward(batch_loss);
      opt.step(cfg.lr_at(step, total_steps));
      ++step;
      ++batches;
      epoch_loss += lv;
      epoch_cls += bd_cls / bs;
      epoch_coarse += bd_coarse / bs;
      epoch_fine += bd_fine / bs;
    }
    LossCurvePoint pt;
    pt.epoch = epoch;
    pt.mean_loss = epoch_loss / batches;
    pt.l_cls = epoch_cls / batches;
    pt.l_coarse = epoch_coarse / batches;
    pt.l_fine = epoch_fine / batches;
    result.curve.push_back(pt);
  }
  result.train_accuracy = cam_multilabel_accuracy(model, train);
  return result;
}

// ---------------------------------------------------------------------------
// Phase 2: online retraining with the gradient clipping decoder
// ---------------------------------------------------------------------------

enum class ClipMode { Clip, None, GtGuided };

struct StepDiag {
  std::int64_t step = 0;
  float lambda_global = 0.0f;  // batch mean of per-image λ_global
  bool gated = false;
  double retained_fraction = 1.0;
  double agree_retained = 0.0;  // seed/GT agreement over retained pixels
  double agree_all = 0.0;       // seed/GT agreement over all supervised pixels
};

struct RetrainResult {
  EvalReport val_report;
  std::vector<StepDiag> diags;
  double gated_fraction = 0.0;
  std::vector<LossCurvePoint> curve;
};

/// Dense prediction for one image: encoder patch tokens → decoder → argmax.
inline Tensor predict_mask(const ViTEncoder& enc, const SegDecoder& dec, const Tensor& image) {
  NoGradGuard ng;
  auto [t_final, stack] = enc.forward(image);
  (void)stack;
  const EncoderConfig& cfg = enc.config();
  Tensor patches = slice_rows(t_final.tokens, cfg.num_classes, cfg.tokens());
  Prediction pred = dec.decode(patches);
  const std::int64_t o = pred.logits.shape[0], cs = pred.logits.shape[2];
  Tensor mask = Tensor::zeros({o, o});
  for (std::int64_t i = 0; i < o * o; ++i) {
    const float* row = pred.logits.ptr() + i * cs;
    std::int64_t best = 0;
    for (std::int64_t cidx = 1; cidx < cs; ++cidx) {
      if (row[cidx] > row[best]) best = cidx;
    }
    mask.ptr()[i] = static_cast<float>(best);
  }
  return mask;
}

/// Online retraining: per step decode → per-pixel CE → gradient patches →
/// λ statistics → clipping mask → τ-gated clip → backprop through the
/// retained pixels only. The encoder trains at encoder_lr_scale times the
/// decoder learning rate.
inline RetrainResult retrain(ViTEncoder& enc, SegDecoder& dec, const std::vector<Sample>& train,
                             const std::vector<Tensor>& seeds, const std::vector<Sample>& val,
                             const TrainConfig& cfg, ClipMode mode) {
  cfg.validate();
  if (train.size() != seeds.size()) throw std::invalid_argument("retrain: seed count != sample count");
  if (train.empty()) throw std::invalid_argument("retrain: empty dataset");
  const DecoderConfig& dcfg = dec.config();
  dcfg.validate();

  std::vector<ParamGroup> groups;
  groups.push_back(ParamGroup{enc.params(), cfg.encoder_lr_scale});
  groups.push_back(ParamGroup{dec.params(), 1.0f});
  SgdMomentum opt(groups, cfg.optimizer.momentum, 0.0f);

  const auto count = static_cast<std::int64_t>(train.size());
  const std::int64_t spe = (count + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = spe * cfg.epochs;
  const EncoderConfig& ecfg = enc.config();

  RetrainResult result;
  std::int64_t step = 0;
  std::int64_t gated_steps = 0, counted_steps = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled_indices(count, derive_key(cfg.seed, "retrain_shuffle", static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t b0 = 0; b0 < count; b0 += cfg.batch_size) {
      const std::int64_t b1 = std::min(count, b0 + cfg.batch_size);
      opt.zero_grad();

      struct ImageState {
        Tensor ce;
        Tensor valid;
        ClipReport report;
        const Sample* sample = nullptr;
        const Tensor* seed = nullptr;
      };
      std::vector<ImageState> states;
      for (std::int64_t i = b0; i < b1; ++i) {
        const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
        const Sample& s = train[idx];
        const Tensor& seed_map = seeds[idx];
        Tensor valid = Tensor::zeros(seed_map.shape);
        std::int64_t n_valid = 0;
        for (std::int64_t k = 0; k < seed_map.numel(); ++k) {
          if ((*seed_map.data)[k] != kIgnoreLabel) {
            valid.ptr()[k] = 1.0f;
            ++n_valid;
          }
        }
        if (n_valid == 0) continue;  // nothing supervises this image
        auto [t_final, stack] = enc.forward(s.image);
        (void)stack;
        Tensor patches = slice_rows(t_final.tokens, ecfg.num_classes, ecfg.tokens());
        Prediction pred = dec.decode(patches);
        ImageState st;
        st.ce = per_pixel_ce(pred, seed_map);
        st.valid = std::move(valid);
        st.report = make_clip_report(st.ce, st.valid, dcfg);
        st.sample = &s;
        st.seed = &seed_map;
        states.push_back(std::move(st));
      }
      if (states.empty()) continue;

      // Gate decision: batch mode compares τ with the batch mean λ_global.
      double lam_sum = 0.0;
      for (const ImageState& st : states) lam_sum += st.report.lambda_global;
      const float lam_batch = static_cast<float>(lam_sum / states.size());
      const bool batch_gate = lam_batch <= dcfg.tau;

      Tensor batch_loss;
      double retained_px = 0.0, valid_px = 0.0;
      std::int64_t agree_ret = 0, total_ret = 0, agree_val = 0, total_val = 0;
      bool any_gated = false;
      for (ImageState& st : states) {
        const bool gate = mode == ClipMode::Clip &&
                          (dcfg.gate_mode == GateMode::Batch ? batch_gate : st.report.lambda_global <= dcfg.tau);
        Tensor final_mask;
        if (mode == ClipMode::GtGuided) {
          // Upper-bound mode: retain exactly the pixels whose pseudo label
          // agrees with ground truth.
          final_mask = Tensor::zeros(st.valid.shape);
          for (std::int64_t k = 0; k < st.valid.numel(); ++k) {
            final_mask.ptr()[k] =
                (st.valid.ptr()[k] != 0.0f && (*st.seed->data)[k] == (*st.sample->gt_mask.data)[k]) ? 1.0f : 0.0f;
          }
          st.report.gated = true;
          any_gated = true;
        } else if (gate) {
          final_mask = mul(assemble_mask(st.report.masks, dcfg), st.valid);
          st.report.gated = true;
          any_gated = true;
        } else {
          final_mask = st.valid;
          st.report.gated = false;
        }
        std::int64_t n_retained = 0;
        for (std::int64_t k = 0; k < final_mask.numel(); ++k) {
          if (final_mask.ptr()[k] == 0.0f) continue;
          ++n_retained;
          if ((*st.seed->data)[k] == (*st.sample->gt_mask.data)[k]) ++agree_ret;
        }
        total_ret += n_retained;
        for (std::int64_t k = 0; k < st.valid.numel(); ++k) {
          if (st.valid.ptr()[k] == 0.0f) continue;
          ++total_val;
          valid_px += 1.0;
          if ((*st.seed->data)[k] == (*st.sample->gt_mask.data)[k]) ++agree_val;
        }
        retained_px += static_cast<double>(n_retained);
        if (n_retained == 0) continue;
        Tensor img_loss = masked_mean(st.ce, final_mask);
        batch_loss = batch_loss.defined() ? add(batch_loss, img_loss) : img_loss;
      }
      if (!batch_loss.defined()) continue;
      batch_loss = scale(batch_loss, 1.0f / static_cast<float>(states.size()));
      const float lv = batch_loss.item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("retrain: diverged (non-finite loss) at step " + std::to_string(step));
      }
      backward(batch_loss);
      opt.step(cfg.lr_at(step, total_steps));

      StepDiag diag;
      diag.step = step;
      diag.lambda_global = lam_batch;
      diag.gated = any_gated;
      diag.retained_fraction = valid_px > 0.0 ? retained_px / valid_px : 1.0;
      diag.agree_retained = total_ret > 0 ? static_cast<double>(agree_ret) / total_ret : 0.0;
      diag.agree_all = total_val > 0 ? static_cast<double>(agree_val) / total_val : 0.0;
      result.diags.push_back(diag);
      ++counted_steps;
      if (any_gated) ++gated_steps;
      ++step;
      epoch_loss += lv;
      ++batches;
    }
    if (batches > 0) {
      LossCurvePoint pt;
      pt.epoch = epoch;
      pt.mean_loss = epoch_loss / batches;
      result.curve.push_back(pt);
    }
  }
  result.gated_fraction = counted_steps > 0 ? static_cast<double>(gated_steps) / counted_steps : 0.0;

  std::vector<Tensor> preds, gts;
  preds.reserve(val.size());
  gts.reserve(val.size());
  for (const Sample& s : val) {
    preds.push_back(predict_mask(enc, dec, s.image));
    gts.push_back(s.gt_mask);
  }
  result.val_report = evaluate(preds, gts, dec.num_seg_classes());
  return result;
}

}  // namespace weaktr
