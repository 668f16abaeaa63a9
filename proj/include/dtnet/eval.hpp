#pragma once

#include <string>
#include <vector>

#include "dtnet/box.hpp"
#include "dtnet/data.hpp"
#include "dtnet/model.hpp"

namespace dtnet {

struct PrPoint {
  double recall = 0;
  double precision = 0;  // monotone envelope
  double score = 0;
};

struct EvalReport {
  double precision = 0;  // at the operating threshold, IoU 0.5, micro-averaged
  double recall = 0;
  double map50 = 0;
  double map5095 = 0;
  std::vector<double> ap50_per_class;            // -1 marks classes without ground truth
  std::vector<std::vector<PrPoint>> pr_curves;   // per class at IoU 0.5, ascending recall
  Index num_classes = 0;
};

// Average precision of one pooled detection set against one ground-truth set
// (greedy best-IoU matching in descending score order; area under the
// monotone-envelope PR curve over all score cutoffs).
double compute_ap(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, double iou_thresh);

// The metric suite over per-image detections. Matching is per image and per
// class; AP averages over classes present in the ground truth; map5095
// averages AP over IoU thresholds 0.50:0.05:0.95.
EvalReport compute_report(const std::vector<std::vector<Detection>>& dets,
                          const std::vector<std::vector<GtBox>>& gts, Index num_classes,
                          double operating_conf);

// CSV: header "class,recall,precision,score"; per class an origin row (cutoff
// above every score) followed by one row per cutoff, ascending recall.
void export_pr_curve(const EvalReport& report, const std::string& path);

// Decode threshold used when evaluating a model; low so the PR curve covers
// the full score range. The operating threshold only affects the reported
// precision/recall pair.
inline constexpr double kEvalDecodeConf = 1e-3;

template <typename T>
EvalReport evaluate(DtNetModel<T>& model, const std::vector<Sample>& data, double operating_conf = 0.25,
                    double nms_iou = 0.45, Index batch_size = 8) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GtBox>> gts;
  dets.reserve(data.size());
  gts.reserve(data.size());
  for (std::size_t off = 0; off < data.size(); off += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min(static_cast<std::size_t>(batch_size), data.size() - off);
    const Shape4 d0 = data[off].image.dims();
    Tensor<T> batch(Shape4{static_cast<Index>(count), 3, d0.h, d0.w});
    for (std::size_t i = 0; i < count; ++i) {
      const auto& img = data[off + i].image;
      check_shape(img.dims() == d0, "evaluate: mixed image dims in dataset");
      T* dst = batch.data() + static_cast<Index>(i) * 3 * d0.h * d0.w;
      for (Index j = 0; j < img.numel(); ++j) dst[j] = static_cast<T>(img.data()[j]);
    }
    Tensor<T> raw = dtnet_forward(batch, model, Mode::kInfer);
    auto decoded = decode_batch(raw, kEvalDecodeConf, nms_iou, model.cfg);
    for (std::size_t i = 0; i < count; ++i) {
      dets.push_back(std::move(decoded[i]));
      gts.push_back(data[off + i].boxes);
    }
  }
  return compute_report(dets, gts, model.cfg.num_classes, operating_conf);
}

}  // namespace dtnet
