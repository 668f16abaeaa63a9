#pragma once

#include <cmath>
#include <set>
#include <tuple>
#include <vector>

#include "dtnet/model.hpp"

namespace dtnet {

struct LossWeights {
  double box = 0.05;
  double obj = 1.0;
  double cls = 0.5;
};

template <typename T>
struct LossBreakdown {
  double box = 0;
  double obj = 0;
  double cls = 0;
  double total = 0;
  Tensor<T> total_node;  // differentiable scalar, tracked when raw is
};

namespace detail {

template <typename T>
Tensor<T> const_rows(const std::vector<double>& v) {
  std::vector<T> data(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) data[i] = static_cast<T>(v[i]);
  return Tensor<T>::from_data(Shape4{static_cast<Index>(v.size()), 1, 1, 1}, std::move(data));
}

}  // namespace detail

// Composite detection loss over a raw head map. Each ground-truth box is
// assigned to its center cell and best shape-IoU anchor (first one wins on
// collisions). Box term: mean (1 - CIoU) over assignments; objectness: BCE
// against 1 at assigned slots, 0 elsewhere; class: BCE over assigned cells.
template <typename T>
LossBreakdown<T> detection_loss(const Tensor<T>& raw, const std::vector<std::vector<GtBox>>& targets,
                                const ModelConfig& cfg, const LossWeights& w = {}) {
  const Shape4 d = raw.dims();
  const Index block = cfg.box_block();
  check_shape(d.c == cfg.head_channels(), "loss: raw " + d.str() + " does not match config");
  check_shape(d.h == cfg.grid_h() && d.w == cfg.grid_w(), "loss: raw grid " + d.str() + " does not match config");
  check_shape(d.n == static_cast<Index>(targets.size()), "loss: batch size vs target list length");
  const double stride = static_cast<double>(cfg.head_stride);
  const double img_w = static_cast<double>(cfg.input_w);
  const double img_h = static_cast<double>(cfg.input_h);

  // Assignments, first-wins per (image, anchor, cell).
  std::vector<ops::CellRef> refs;
  std::vector<const GtBox*> assigned;
  std::set<std::tuple<Index, Index, Index, Index>> taken;
  for (Index n = 0; n < d.n; ++n) {
    for (const auto& gt : targets[static_cast<std::size_t>(n)]) {
      if (!(gt.box.w > 0 && gt.box.h > 0) || gt.box.cx - gt.box.w / 2 < -1e-6 ||
          gt.box.cx + gt.box.w / 2 > img_w + 1e-6 || gt.box.cy - gt.box.h / 2 < -1e-6 ||
          gt.box.cy + gt.box.h / 2 > img_h + 1e-6)
        throw DataError("ground-truth box outside image bounds");
      if (gt.class_id < 0 || gt.class_id >= cfg.num_classes)
        throw DataError("ground-truth class id out of range");
      const CellAssignment at = assign_cell(gt, cfg);
      if (!taken.insert({n, at.anchor, at.gy, at.gx}).second) continue;
      refs.push_back(ops::CellRef{n, at.anchor * block, at.gy, at.gx});
      assigned.push_back(&gt);
    }
  }
  const Index m = static_cast<Index>(refs.size());

  // Objectness over every anchor slot.
  std::vector<Index> obj_idx;
  for (Index a = 0; a < cfg.anchor_count(); ++a) obj_idx.push_back(a * block + 4);
  Tensor<T> obj_logits = ops::select_channels(raw, obj_idx);
  Tensor<T> obj_target(obj_logits.dims());
  for (Index i = 0; i < m; ++i) {
    const auto& r = refs[static_cast<std::size_t>(i)];
    const Index a = r.c0 / block;
    obj_target.data()[((r.n * cfg.anchor_count() + a) * d.h + r.h) * d.w + r.w] = T(1);
  }
  Tensor<T> obj_loss = ops::bce_with_logits_mean(obj_logits, obj_target, Tensor<T>::ones(obj_logits.dims()));

  Tensor<T> box_loss = Tensor<T>::scalar(T(0));
  Tensor<T> cls_loss = Tensor<T>::scalar(T(0));
  if (m > 0) {
    Tensor<T> cells = ops::gather_cells(raw, refs, block);

    Tensor<T> sx = ops::sigmoid(ops::select_channels(cells, {0}));
    Tensor<T> sy = ops::sigmoid(ops::select_channels(cells, {1}));
    Tensor<T> sw = ops::sigmoid(ops::select_channels(cells, {2}));
    Tensor<T> sh = ops::sigmoid(ops::select_channels(cells, {3}));

    std::vector<double> cell_x(m), cell_y(m), aw4(m), ah4(m);
    std::vector<double> gx1(m), gx2(m), gy1(m), gy2(m), gcx(m), gcy(m), garea(m), gatan(m);
    for (Index i = 0; i < m; ++i) {
      const auto& r = refs[static_cast<std::size_t>(i)];
      const auto& gt = *assigned[static_cast<std::size_t>(i)];
      const auto& anc = cfg.anchors[static_cast<std::size_t>(r.c0 / block)];
      cell_x[static_cast<std::size_t>(i)] = static_cast<double>(r.w) * stride;
      cell_y[static_cast<std::size_t>(i)] = static_cast<double>(r.h) * stride;
      aw4[static_cast<std::size_t>(i)] = 4.0 * anc[0];
      ah4[static_cast<std::size_t>(i)] = 4.0 * anc[1];
      gx1[static_cast<std::size_t>(i)] = gt.box.cx - gt.box.w / 2;
      gx2[static_cast<std::size_t>(i)] = gt.box.cx + gt.box.w / 2;
      gy1[static_cast<std::size_t>(i)] = gt.box.cy - gt.box.h / 2;
      gy2[static_cast<std::size_t>(i)] = gt.box.cy + gt.box.h / 2;
      gcx[static_cast<std::size_t>(i)] = gt.box.cx;
      gcy[static_cast<std::size_t>(i)] = gt.box.cy;
      garea[static_cast<std::size_t>(i)] = gt.box.w * gt.box.h;
      gatan[static_cast<std::size_t>(i)] = std::atan(gt.box.w / gt.box.h);
    }
    const T eps = static_cast<T>(1e-9);

    Tensor<T> px = ops::add(ops::scalar_affine(sx, T(2 * stride), T(-0.5 * stride)), detail::const_rows<T>(cell_x));
    Tensor<T> py = ops::add(ops::scalar_affine(sy, T(2 * stride), T(-0.5 * stride)), detail::const_rows<T>(cell_y));
    Tensor<T> pw = ops::mul(ops::mul(sw, sw), detail::const_rows<T>(aw4));
    Tensor<T> ph = ops::mul(ops::mul(sh, sh), detail::const_rows<T>(ah4));

    Tensor<T> pw_half = ops::scalar_affine(pw, T(0.5), T(0));
    Tensor<T> ph_half = ops::scalar_affine(ph, T(0.5), T(0));
    Tensor<T> px1 = ops::sub(px, pw_half);
    Tensor<T> px2 = ops::add(px, pw_half);
    Tensor<T> py1 = ops::sub(py, ph_half);
    Tensor<T> py2 = ops::add(py, ph_half);

    Tensor<T> gx1c = detail::const_rows<T>(gx1), gx2c = detail::const_rows<T>(gx2);
    Tensor<T> gy1c = detail::const_rows<T>(gy1), gy2c = detail::const_rows<T>(gy2);

    Tensor<T> iw = ops::relu(ops::sub(ops::minimum(px2, gx2c), ops::maximum(px1, gx1c)));
    Tensor<T> ih = ops::relu(ops::sub(ops::minimum(py2, gy2c), ops::maximum(py1, gy1c)));
    Tensor<T> inter = ops::mul(iw, ih);
    Tensor<T> uni = ops::sub(ops::add(ops::mul(pw, ph), detail::const_rows<T>(garea)), inter);
    Tensor<T> iou_t = ops::div(inter, ops::scalar_affine(uni, T(1), eps));

    Tensor<T> dx = ops::sub(px, detail::const_rows<T>(gcx));
    Tensor<T> dy = ops::sub(py, detail::const_rows<T>(gcy));
    Tensor<T> rho2 = ops::add(ops::mul(dx, dx), ops::mul(dy, dy));

    Tensor<T> cw = ops::sub(ops::maximum(px2, gx2c), ops::minimum(px1, gx1c));
    Tensor<T> ch = ops::sub(ops::maximum(py2, gy2c), ops::minimum(py1, gy1c));
    Tensor<T> c2 = ops::scalar_affine(ops::add(ops::mul(cw, cw), ops::mul(ch, ch)), T(1), eps);

    Tensor<T> atp = ops::atan_of(ops::div(pw, ops::scalar_affine(ph, T(1), eps)));
    Tensor<T> dv = ops::sub(detail::const_rows<T>(gatan), atp);
    const T four_over_pi2 = static_cast<T>(4.0 / (3.14159265358979323846 * 3.14159265358979323846));
    Tensor<T> v = ops::scalar_affine(ops::mul(dv, dv), four_over_pi2, T(0));

    // alpha is treated as a constant (standard CIoU practice).
    std::vector<double> alpha(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) {
      const double vi = static_cast<double>(v.data()[i]);
      const double ii = static_cast<double>(iou_t.data()[i]);
      alpha[static_cast<std::size_t>(i)] = vi / (1.0 - ii + vi + 1e-9);
    }
    Tensor<T> ciou =
        ops::sub(iou_t, ops::add(ops::div(rho2, c2), ops::mul(detail::const_rows<T>(alpha), v)));
    box_loss = ops::scalar_affine(ops::mean_all(ciou), T(-1), T(1));

    std::vector<Index> cls_idx;
    for (Index c = 0; c < cfg.num_classes; ++c) cls_idx.push_back(5 + c);
    Tensor<T> cls_logits = ops::select_channels(cells, cls_idx);
    Tensor<T> onehot(cls_logits.dims());
    for (Index i = 0; i < m; ++i)
      onehot.data()[i * cfg.num_classes + assigned[static_cast<std::size_t>(i)]->class_id] = T(1);
    cls_loss = ops::bce_with_logits_mean(cls_logits, onehot, Tensor<T>::ones(cls_logits.dims()));
  }

  Tensor<T> total = ops::add(ops::add(ops::scalar_affine(box_loss, static_cast<T>(w.box), T(0)),
                                      ops::scalar_affine(obj_loss, static_cast<T>(w.obj), T(0))),
                             ops::scalar_affine(cls_loss, static_cast<T>(w.cls), T(0)));

  LossBreakdown<T> out;
  out.box = static_cast<double>(box_loss.item());
  out.obj = static_cast<double>(obj_loss.item());
  out.cls = static_cast<double>(cls_loss.item());
  out.total = static_cast<double>(total.item());
  out.total_node = total;
  return out;
}

}  // namespace dtnet
