#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dtnet/box.hpp"
#include "dtnet/dcl.hpp"
#include "dtnet/mab.hpp"
#include "dtnet/tvconv.hpp"

namespace dtnet {

// Ablation variants mirroring the removal rows of the architecture study.
enum class Variant { kFull, kNoTvconv, kNoMabTvconv, kNoDclMabTvconv };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoTvconv: return "no-tvconv";
    case Variant::kNoMabTvconv: return "no-mab-tvconv";
    case Variant::kNoDclMabTvconv: return "no-dcl-mab-tvconv";
  }
  return "full";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "no-tvconv") return Variant::kNoTvconv;
  if (s == "no-mab-tvconv") return Variant::kNoMabTvconv;
  if (s == "no-dcl-mab-tvconv") return Variant::kNoDclMabTvconv;
  throw ConfigError("unknown variant '" + s + "'");
}

struct ModelConfig {
  Index input_h = 256;
  Index input_w = 256;
  std::array<Index, 3> widths = {64, 128, 256};
  MabConfig mab;
  std::vector<std::array<double, 2>> anchors;  // (w, h) pixels
  Index num_classes = 4;
  Index head_stride = 32;

  // Default anchors scale with resolution: (16x16, 32x24, 64x40) at 256.
  static ModelConfig make_default(Index input = 256) {
    ModelConfig cfg;
    cfg.input_h = cfg.input_w = input;
    const double s = static_cast<double>(input) / 256.0;
    cfg.anchors = {{16 * s, 16 * s}, {32 * s, 24 * s}, {64 * s, 40 * s}};
    return cfg;
  }

  void validate() const {
    if (input_h <= 0 || input_w <= 0 || input_h % head_stride != 0 || input_w % head_stride != 0)
      throw ConfigError("input resolution must be a positive multiple of the head stride");
    if (anchors.empty()) throw ConfigError("at least one anchor is required");
    if (num_classes < 1) throw ConfigError("at least one class is required");
    for (const auto w : widths)
      if (w < 4 || w % 4 != 0) throw ConfigError("stage widths must be positive multiples of 4");
  }

  Index grid_h() const { return input_h / head_stride; }
  Index grid_w() const { return input_w / head_stride; }
  Index anchor_count() const { return static_cast<Index>(anchors.size()); }
  Index box_block() const { return 5 + num_classes; }
  Index head_channels() const { return anchor_count() * box_block(); }
};

// ---------------------------------------------------------------------------
// The full detector: DCB -> MIRB -> CB -> 1x1 detection head.

template <typename T>
struct DtNetModel {
  ModelConfig cfg;
  Variant variant = Variant::kFull;
  Dcb<T> dcb;
  Mirb<T> mirb;
  CompBlock<T> cb;
  Tensor<T> head_weight;  // (A*(5+nc), w3, 1, 1)
  Tensor<T> head_bias;

  static DtNetModel make(const ModelConfig& cfg, Variant variant, std::uint64_t seed) {
    cfg.validate();
    const bool with_dcl = variant != Variant::kNoDclMabTvconv;
    const bool with_mab = variant == Variant::kFull || variant == Variant::kNoTvconv;
    const bool with_tv = variant == Variant::kFull;

    Rng rng(seed);
    DtNetModel m;
    m.cfg = cfg;
    m.variant = variant;
    m.dcb = Dcb<T>::make(3, cfg.widths[0], with_dcl, rng);
    MabConfig mab_cfg = cfg.mab;
    if (!with_mab) mab_cfg.depth = 0;
    m.mirb = Mirb<T>::make(cfg.widths[0], cfg.widths[1], mab_cfg, rng);
    m.cb = CompBlock<T>::make(cfg.widths[1], cfg.widths[2], cfg.input_h / cfg.head_stride,
                              cfg.input_w / cfg.head_stride, with_tv, rng);
    m.head_weight = init::fan_in_uniform<T>(Shape4{cfg.head_channels(), cfg.widths[2], 1, 1}, rng);
    m.head_bias = Tensor<T>::zeros(Shape4{cfg.head_channels(), 1, 1, 1});
    // Sparse initial detections: objectness starts strongly negative.
    for (Index a = 0; a < cfg.anchor_count(); ++a) m.head_bias.data()[a * cfg.box_block() + 4] = T(-4);
    return m;
  }

  // Checkpoint manifest: every named tensor exactly once, fixed order.
  std::vector<ParamEntry<T>> params() {
    std::vector<ParamEntry<T>> out;
    dcb.collect("dcb", out);
    mirb.collect("mirb", out);
    cb.collect("cb", out);
    out.push_back({"head.weight", &head_weight, true, 4});
    out.push_back({"head.bias", &head_bias, true, 1});
    return out;
  }

  void track(GradTape<T>& tape) {
    for (auto& e : params())
      if (e.trainable) tape.track(*e.value);
  }

  void detach() {
    for (auto& e : params()) e.value->clear_tape();
  }

  Index parameter_count() {
    Index n = 0;
    for (auto& e : params())
      if (e.trainable) n += e.value->numel();
    return n;
  }
};

template <typename T>
Tensor<T> dtnet_forward(const Tensor<T>& i, const DtNetModel<T>& m, Mode mode) {
  const Shape4 d = i.dims();
  check_shape(d.c == 3, "dtnet: expected 3 input channels, got " + d.str());
  check_shape(d.h % m.cfg.head_stride == 0 && d.w % m.cfg.head_stride == 0,
              "dtnet: input extent " + d.str() + " not divisible by stride " +
                  std::to_string(m.cfg.head_stride));
  Tensor<T> o_dcb = dcb_forward(i, m.dcb, mode);
  Tensor<T> o_mirb = mirb_forward(o_dcb, m.mirb, mode);
  Tensor<T> o_cb = cb_forward(o_mirb, m.cb, mode);
  ops::ConvDesc d1;
  return ops::conv2d(o_cb, m.head_weight, &m.head_bias, d1);
}

// ---------------------------------------------------------------------------
// Head map decode. Per anchor a and cell (gy, gx):
//   cx = (2*sigmoid(tx) - 0.5 + gx) * stride     w = anchor_w * (2*sigmoid(tw))^2
//   score = sigmoid(obj) * max_c sigmoid(cls_c)
// followed by greedy per-class NMS (suppress IoU > nms_iou).

namespace detail {

inline double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit_d(double p) { return std::log(p / (1.0 - p)); }

inline std::vector<Detection> nms_per_class(std::vector<Detection> dets, double nms_iou) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (const std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id != dets[i].class_id) continue;
      if (iou(k.box, dets[i].box) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

}  // namespace detail

template <typename T>
std::vector<std::vector<Detection>> decode_batch(const Tensor<T>& raw, double conf_thresh, double nms_iou,
                                                 const ModelConfig& cfg) {
  if (conf_thresh < 0 || conf_thresh > 1 || nms_iou < 0 || nms_iou > 1)
    throw ConfigError("decode: thresholds must lie in [0,1]");
  const Shape4 d = raw.dims();
  check_shape(d.c == cfg.head_channels(), "decode: raw " + d.str() + " does not match config head channels " +
                                              std::to_string(cfg.head_channels()));
  const Index block = cfg.box_block();
  const Index hw = d.h * d.w;
  const double stride = static_cast<double>(cfg.head_stride);
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(d.n));
  for (Index n = 0; n < d.n; ++n) {
    std::vector<Detection> dets;
    const T* base = raw.data() + n * d.c * hw;
    for (Index a = 0; a < cfg.anchor_count(); ++a)
      for (Index gy = 0; gy < d.h; ++gy)
        for (Index gx = 0; gx < d.w; ++gx) {
          auto ch = [&](Index j) {
            return static_cast<double>(base[(a * block + j) * hw + gy * d.w + gx]);
          };
          const double obj = detail::sigmoid_d(ch(4));
          double best_cls = 0;
          int best_id = 0;
          for (Index c = 0; c < cfg.num_classes; ++c) {
            const double p = detail::sigmoid_d(ch(5 + c));
            if (p > best_cls) {
              best_cls = p;
              best_id = static_cast<int>(c);
            }
          }
          const double score = obj * best_cls;
          if (score < conf_thresh) continue;
          Detection det;
          det.box.cx = (2 * detail::sigmoid_d(ch(0)) - 0.5 + static_cast<double>(gx)) * stride;
          det.box.cy = (2 * detail::sigmoid_d(ch(1)) - 0.5 + static_cast<double>(gy)) * stride;
          const double sw = 2 * detail::sigmoid_d(ch(2));
          const double sh = 2 * detail::sigmoid_d(ch(3));
          det.box.w = cfg.anchors[static_cast<std::size_t>(a)][0] * sw * sw;
          det.box.h = cfg.anchors[static_cast<std::size_t>(a)][1] * sh * sh;
          det.class_id = best_id;
          det.score = score;
          dets.push_back(det);
        }
    dets = detail::nms_per_class(std::move(dets), nms_iou);
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
      return a.score > b.score;
    });
    out[static_cast<std::size_t>(n)] = std::move(dets);
  }
  return out;
}

template <typename T>
std::vector<Detection> decode_detections(const Tensor<T>& raw, double conf_thresh, double nms_iou,
                                         const ModelConfig& cfg) {
  check_shape(raw.dims().n == 1, "decode_detections expects a single-image map; use decode_batch");
  return decode_batch(raw, conf_thresh, nms_iou, cfg)[0];
}

// ---------------------------------------------------------------------------
// Target assignment: a ground-truth box belongs to its center cell and the
// anchor with the best shape IoU.

struct CellAssignment {
  Index anchor = 0;
  Index gy = 0;
  Index gx = 0;
};

inline double anchor_shape_iou(double w, double h, double aw, double ah) {
  const double inter = std::min(w, aw) * std::min(h, ah);
  return inter / (w * h + aw * ah - inter);
}

inline CellAssignment assign_cell(const GtBox& gt, const ModelConfig& cfg) {
  CellAssignment a;
  a.gx = std::clamp<Index>(static_cast<Index>(gt.box.cx / cfg.head_stride), 0, cfg.grid_w() - 1);
  a.gy = std::clamp<Index>(static_cast<Index>(gt.box.cy / cfg.head_stride), 0, cfg.grid_h() - 1);
  double best = -1;
  for (std::size_t i = 0; i < cfg.anchors.size(); ++i) {
    const double s = anchor_shape_iou(gt.box.w, gt.box.h, cfg.anchors[i][0], cfg.anchors[i][1]);
    if (s > best) {
      best = s;
      a.anchor = static_cast<Index>(i);
    }
  }
  return a;
}

// Inverse of the decode rule at the assigned cell: the logits that decode a
// box exactly. Requires the box to be representable (center within the cell's
// reach, extent below 4x anchor); clamps the sigmoid arguments away from 0/1.
struct EncodedTarget {
  double tx, ty, tw, th;
};

inline EncodedTarget encode_box(const Box& box, const CellAssignment& at, const ModelConfig& cfg) {
  const double stride = static_cast<double>(cfg.head_stride);
  auto safe_logit = [](double p) { return detail::logit_d(std::clamp(p, 1e-9, 1.0 - 1e-9)); };
  EncodedTarget t;
  t.tx = safe_logit((box.cx / stride - static_cast<double>(at.gx) + 0.5) / 2.0);
  t.ty = safe_logit((box.cy / stride - static_cast<double>(at.gy) + 0.5) / 2.0);
  const auto& anc = cfg.anchors[static_cast<std::size_t>(at.anchor)];
  t.tw = safe_logit(std::sqrt(box.w / anc[0]) / 2.0);
  t.th = safe_logit(std::sqrt(box.h / anc[1]) / 2.0);
  return t;
}

}  // namespace dtnet
