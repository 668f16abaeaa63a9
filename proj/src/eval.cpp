#include "dtnet/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "dtnet/common.hpp"

namespace dtnet {

namespace {

struct PooledDet {
  double score;
  std::size_t img;
  std::size_t order;  // insertion order within its image
  Box box;
};

// Descending score; ties broken by image then insertion order so results do
// not depend on comparison instability.
void sort_pooled(std::vector<PooledDet>& v) {
  std::sort(v.begin(), v.end(), [](const PooledDet& a, const PooledDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.order < b.order;
  });
}

std::vector<PooledDet> pool_class(const std::vector<std::vector<Detection>>& dets, int cls) {
  std::vector<PooledDet> out;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < dets[i].size(); ++j)
      if (dets[i][j].class_id == cls) out.push_back({dets[i][j].score, i, j, dets[i][j].box});
  sort_pooled(out);
  return out;
}

// Greedy matching of sorted detections: each detection takes the unmatched
// same-image ground truth with the highest IoU >= thresh (lowest index on
// ties). Returns a TP flag per detection.
std::vector<char> match_greedy(const std::vector<PooledDet>& sorted,
                               const std::vector<std::vector<const GtBox*>>& gts_by_img, double thresh) {
  std::vector<std::vector<char>> used(gts_by_img.size());
  for (std::size_t i = 0; i < gts_by_img.size(); ++i) used[i].assign(gts_by_img[i].size(), 0);
  std::vector<char> tp(sorted.size(), 0);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& det = sorted[i];
    const auto& gts = gts_by_img[det.img];
    double best = 0;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[det.img][j]) continue;
      const double v = iou(det.box, gts[j]->box);
      if (v >= thresh && v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best_j < gts.size()) {
      used[det.img][best_j] = 1;
      tp[i] = 1;
    }
  }
  return tp;
}

// Area under the monotone-envelope PR curve of a sorted TP/FP sequence.
double ap_from_flags(const std::vector<char>& tp, std::size_t npos) {
  if (npos == 0) return -1;
  if (tp.empty()) return 0;
  const std::size_t n = tp.size();
  std::vector<double> recall(n), precision(n);
  std::size_t ctp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ctp += static_cast<std::size_t>(tp[i]);
    recall[i] = static_cast<double>(ctp) / static_cast<double>(npos);
    precision[i] = static_cast<double>(ctp) / static_cast<double>(i + 1);
  }
  // envelope from the right
  for (std::size_t i = n - 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_r) {
      ap += (recall[i] - prev_r) * precision[i];
      prev_r = recall[i];
    }
  }
  return ap;
}

struct ClassEval {
  std::vector<PooledDet> sorted;
  std::vector<std::vector<const GtBox*>> gts_by_img;
  std::size_t npos = 0;
};

ClassEval build_class(const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<GtBox>>& gts, int cls) {
  ClassEval ce;
  ce.sorted = pool_class(dets, cls);
  ce.gts_by_img.resize(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (const auto& g : gts[i])
      if (g.class_id == cls) {
        ce.gts_by_img[i].push_back(&g);
        ++ce.npos;
      }
  return ce;
}

}  // namespace

double compute_ap(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, double iou_thresh) {
  const std::vector<std::vector<Detection>> d{dets};
  const std::vector<std::vector<GtBox>> g{gts};
  std::vector<int> seen;
  for (const auto& gt : gts)
    if (std::find(seen.begin(), seen.end(), gt.class_id) == seen.end()) seen.push_back(gt.class_id);
  std::sort(seen.begin(), seen.end());
  if (seen.empty()) return 0;
  double ap_sum = 0;
  int classes = 0;
  for (const int cls : seen) {
    ClassEval ce = build_class(d, g, cls);
    const auto tp = match_greedy(ce.sorted, ce.gts_by_img, iou_thresh);
    const double ap = ap_from_flags(tp, ce.npos);
    if (ap >= 0) {
      ap_sum += ap;
      ++classes;
    }
  }
  return classes > 0 ? ap_sum / classes : 0;
}

EvalReport compute_report(const std::vector<std::vector<Detection>>& dets,
                          const std::vector<std::vector<GtBox>>& gts, Index num_classes,
                          double operating_conf) {
  check_shape(dets.size() == gts.size(), "compute_report: detection/ground-truth length mismatch");
  EvalReport rep;
  rep.num_classes = num_classes;
  rep.ap50_per_class.assign(static_cast<std::size_t>(num_classes), -1);
  rep.pr_curves.resize(static_cast<std::size_t>(num_classes));

  double map50_sum = 0;
  double map5095_sum = 0;

  std::vector<ClassEval> evals;
  for (Index c = 0; c < num_classes; ++c) evals.push_back(build_class(dets, gts, static_cast<int>(c)));

  for (int k = 0; k < 10; ++k) {
    const double thresh = (50 + 5 * k) / 100.0;
    double sum = 0;
    int classes = 0;
    for (Index c = 0; c < num_classes; ++c) {
      auto& ce = evals[static_cast<std::size_t>(c)];
      const auto tp = match_greedy(ce.sorted, ce.gts_by_img, thresh);
      const double ap = ap_from_flags(tp, ce.npos);
      if (ap < 0) continue;
      sum += ap;
      ++classes;
      if (k == 0) {
        rep.ap50_per_class[static_cast<std::size_t>(c)] = ap;
        // PR curve points at IoU 0.5 with envelope precision.
        std::vector<PrPoint> curve;
        std::size_t ctp = 0;
        std::vector<double> prec(ce.sorted.size());
        for (std::size_t i = 0; i < ce.sorted.size(); ++i) {
          ctp += static_cast<std::size_t>(tp[i]);
          prec[i] = static_cast<double>(ctp) / static_cast<double>(i + 1);
        }
        for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
        ctp = 0;
        for (std::size_t i = 0; i < ce.sorted.size(); ++i) {
          ctp += static_cast<std::size_t>(tp[i]);
          curve.push_back({static_cast<double>(ctp) / static_cast<double>(ce.npos), prec[i],
                           ce.sorted[i].score});
        }
        rep.pr_curves[static_cast<std::size_t>(c)] = std::move(curve);
      }
    }
    const double mean = classes > 0 ? sum / classes : 0;
    if (k == 0) map50_sum = mean;
    map5095_sum += mean;
  }
  rep.map50 = map50_sum;
  rep.map5095 = map5095_sum / 10.0;

  // Operating point: detections at score >= conf, matched at IoU 0.5.
  std::size_t tp_total = 0, det_total = 0, npos_total = 0;
  for (Index c = 0; c < num_classes; ++c) {
    auto& ce = evals[static_cast<std::size_t>(c)];
    std::vector<PooledDet> kept;
    for (const auto& p : ce.sorted)
      if (p.score >= operating_conf) kept.push_back(p);
    const auto tp = match_greedy(kept, ce.gts_by_img, 0.5);
    for (const char f : tp) tp_total += static_cast<std::size_t>(f);
    det_total += kept.size();
    npos_total += ce.npos;
  }
  rep.precision = det_total > 0 ? static_cast<double>(tp_total) / static_cast<double>(det_total) : 0;
  rep.recall = npos_total > 0 ? static_cast<double>(tp_total) / static_cast<double>(npos_total) : 0;
  return rep;
}

void export_pr_curve(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open PR curve file for writing: " + path);
  out << "class,recall,precision,score\n";
  char buf[128];
  for (Index c = 0; c < report.num_classes; ++c) {
    const auto& curve = report.pr_curves[static_cast<std::size_t>(c)];
    // Origin row: the cutoff above every score.
    const double p0 = curve.empty() ? 0.0 : curve.front().precision;
    std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f,%.6f\n", static_cast<long long>(c), 0.0, p0, 1.0);
    out << buf;
    for (const auto& pt : curve) {
      std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f,%.6f\n", static_cast<long long>(c), pt.recall,
                    pt.precision, pt.score);
      out << buf;
    }
  }
  if (!out) throw IoError("failed writing PR curve: " + path);
}

}  // namespace dtnet
