#pragma once

#include <cmath>
#include <vector>

#include "dtnet/ops.hpp"
#include "dtnet/tensor.hpp"

namespace dtnet::ops {

enum class NormKind { kBatch, kLayer };

template <typename T>
struct RunningStats {
  Tensor<T> mean;  // (C,1,1,1)
  Tensor<T> var;   // (C,1,1,1)

  static RunningStats unit(Index c) {
    return RunningStats{Tensor<T>::zeros(Shape4{c, 1, 1, 1}), Tensor<T>::ones(Shape4{c, 1, 1, 1})};
  }
};

// Batch normalization over (N, H, W) per channel. Train mode standardizes
// with batch statistics (biased variance) and folds them into the running
// stats in place: r <- (1 - momentum) * r + momentum * batch.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                     RunningStats<T>& running, T eps, T momentum, Mode mode) {
  const Shape4 d = x.dims();
  if (eps <= T(0)) throw ConfigError("batch_norm: eps must be > 0");
  check_shape(scale.dims() == Shape4{d.c, 1, 1, 1} && shift.dims() == Shape4{d.c, 1, 1, 1},
              "batch_norm: scale/shift dims for C=" + std::to_string(d.c));
  check_shape(running.mean.dims() == Shape4{d.c, 1, 1, 1} && running.var.dims() == Shape4{d.c, 1, 1, 1},
              "batch_norm: running stats dims for C=" + std::to_string(d.c));
  const Index hw = d.h * d.w;
  const Index m = d.n * hw;
  check_shape(m >= 1, "batch_norm: empty reduction");

  std::vector<T> mean(static_cast<std::size_t>(d.c)), invstd(static_cast<std::size_t>(d.c));
  if (mode == Mode::kTrain) {
    for (Index c = 0; c < d.c; ++c) {
      T acc = T(0);
      for (Index n = 0; n < d.n; ++n) {
        const T* xp = x.data() + (n * d.c + c) * hw;
        for (Index i = 0; i < hw; ++i) acc += xp[i];
      }
      mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
    }
    for (Index c = 0; c < d.c; ++c) {
      T acc = T(0);
      const T mu = mean[static_cast<std::size_t>(c)];
      for (Index n = 0; n < d.n; ++n) {
        const T* xp = x.data() + (n * d.c + c) * hw;
        for (Index i = 0; i < hw; ++i) {
          const T v = xp[i] - mu;
          acc += v * v;
        }
      }
      const T var = acc / static_cast<T>(m);
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + eps);
      running.mean.data()[c] = (T(1) - momentum) * running.mean.data()[c] + momentum * mu;
      running.var.data()[c] = (T(1) - momentum) * running.var.data()[c] + momentum * var;
    }
  } else {
    for (Index c = 0; c < d.c; ++c) {
      mean[static_cast<std::size_t>(c)] = running.mean.data()[c];
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(running.var.data()[c] + eps);
    }
  }

  Tensor<T> y(d);
  for (Index n = 0; n < d.n; ++n)
    for (Index c = 0; c < d.c; ++c) {
      const T mu = mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      const T sc = scale.data()[c];
      const T sh = shift.data()[c];
      const T* xp = x.data() + (n * d.c + c) * hw;
      T* yp = y.data() + (n * d.c + c) * hw;
      for (Index i = 0; i < hw; ++i) yp[i] = (xp[i] - mu) * is * sc + sh;
    }

  if (auto* tape = common_tape<T>({&x, &scale, &shift})) {
    detail::bind_if(
        tape, y, "batch_norm", {x.node(), scale.node(), shift.node()},
        [x, scale, shift, mean, invstd, m, hw, mode](GradTape<T>& t, const Tensor<T>& g) {
          const Shape4 d = x.dims();
          std::vector<T> sum_g(static_cast<std::size_t>(d.c), T(0));
          std::vector<T> sum_gx(static_cast<std::size_t>(d.c), T(0));  // sum g * xhat
          for (Index n = 0; n < d.n; ++n)
            for (Index c = 0; c < d.c; ++c) {
              const T mu = mean[static_cast<std::size_t>(c)];
              const T is = invstd[static_cast<std::size_t>(c)];
              const T* xp = x.data() + (n * d.c + c) * hw;
              const T* gp = g.data() + (n * d.c + c) * hw;
              T s1 = T(0), s2 = T(0);
              for (Index i = 0; i < hw; ++i) {
                s1 += gp[i];
                s2 += gp[i] * (xp[i] - mu) * is;
              }
              sum_g[static_cast<std::size_t>(c)] += s1;
              sum_gx[static_cast<std::size_t>(c)] += s2;
            }
          if (shift.node() >= 0) {
            Tensor<T> gs(shift.dims());
            for (Index c = 0; c < d.c; ++c) gs.data()[c] = sum_g[static_cast<std::size_t>(c)];
            t.accumulate(shift.node(), gs);
          }
          if (scale.node() >= 0) {
            Tensor<T> gs(scale.dims());
            for (Index c = 0; c < d.c; ++c) gs.data()[c] = sum_gx[static_cast<std::size_t>(c)];
            t.accumulate(scale.node(), gs);
          }
          if (x.node() >= 0) {
            Tensor<T> gx(d);
            for (Index n = 0; n < d.n; ++n)
              for (Index c = 0; c < d.c; ++c) {
                const T mu = mean[static_cast<std::size_t>(c)];
                const T is = invstd[static_cast<std::size_t>(c)];
                const T sc = scale.data()[c];
                const T* xp = x.data() + (n * d.c + c) * hw;
                const T* gp = g.data() + (n * d.c + c) * hw;
                T* op = gx.data() + (n * d.c + c) * hw;
                if (mode == Mode::kTrain) {
                  const T mf = static_cast<T>(m);
                  const T sg = sum_g[static_cast<std::size_t>(c)];
                  const T sgx = sum_gx[static_cast<std::size_t>(c)];
                  for (Index i = 0; i < hw; ++i) {
                    const T xh = (xp[i] - mu) * is;
                    op[i] = sc * is / mf * (mf * gp[i] - sg - xh * sgx);
                  }
                } else {
                  for (Index i = 0; i < hw; ++i) op[i] = gp[i] * sc * is;
                }
              }
            t.accumulate(x.node(), gx);
          }
        });
  }
  return y;
}

// Layer normalization of each spatial position's channel vector, with
// per-channel affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, T eps) {
  const Shape4 d = x.dims();
  if (eps <= T(0)) throw ConfigError("layer_norm: eps must be > 0");
  check_shape(scale.dims() == Shape4{d.c, 1, 1, 1} && shift.dims() == Shape4{d.c, 1, 1, 1},
              "layer_norm: scale/shift dims for C=" + std::to_string(d.c));
  check_shape(d.c >= 1, "layer_norm: empty channel axis");
  const Index hw = d.h * d.w;
  Tensor<T> y(d);
  auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(2 * d.n * hw));  // mu, invstd pairs
  for (Index n = 0; n < d.n; ++n)
    for (Index i = 0; i < hw; ++i) {
      const T* base = x.data() + n * d.c * hw + i;
      T mu = T(0);
      for (Index c = 0; c < d.c; ++c) mu += base[c * hw];
      mu /= static_cast<T>(d.c);
      T var = T(0);
      for (Index c = 0; c < d.c; ++c) {
        const T v = base[c * hw] - mu;
        var += v * v;
      }
      var /= static_cast<T>(d.c);
      const T is = T(1) / std::sqrt(var + eps);
      (*stats)[static_cast<std::size_t>(2 * (n * hw + i))] = mu;
      (*stats)[static_cast<std::size_t>(2 * (n * hw + i) + 1)] = is;
      T* out = y.data() + n * d.c * hw + i;
      for (Index c = 0; c < d.c; ++c) out[c * hw] = (base[c * hw] - mu) * is * scale.data()[c] + shift.data()[c];
    }
  if (auto* tape = common_tape<T>({&x, &scale, &shift})) {
    detail::bind_if(
        tape, y, "layer_norm", {x.node(), scale.node(), shift.node()},
        [x, scale, shift, stats, hw](GradTape<T>& t, const Tensor<T>& g) {
          const Shape4 d = x.dims();
          Tensor<T> gx;
          if (x.node() >= 0) gx = Tensor<T>(d);
          Tensor<T> gscale(scale.dims());
          Tensor<T> gshift(shift.dims());
          const T cf = static_cast<T>(d.c);
          for (Index n = 0; n < d.n; ++n)
            for (Index i = 0; i < hw; ++i) {
              const T mu = (*stats)[static_cast<std::size_t>(2 * (n * hw + i))];
              const T is = (*stats)[static_cast<std::size_t>(2 * (n * hw + i) + 1)];
              const T* xb = x.data() + n * d.c * hw + i;
              const T* gb = g.data() + n * d.c * hw + i;
              T sum_dxh = T(0), sum_dxh_xh = T(0);
              for (Index c = 0; c < d.c; ++c) {
                const T xh = (xb[c * hw] - mu) * is;
                const T dxh = gb[c * hw] * scale.data()[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                gscale.data()[c] += gb[c * hw] * xh;
                gshift.data()[c] += gb[c * hw];
              }
              if (!gx.empty()) {
                T* ob = gx.data() + n * d.c * hw + i;
                for (Index c = 0; c < d.c; ++c) {
                  const T xh = (xb[c * hw] - mu) * is;
                  const T dxh = gb[c * hw] * scale.data()[c];
                  ob[c * hw] = is / cf * (cf * dxh - sum_dxh - xh * sum_dxh_xh);
                }
              }
            }
          if (!gx.empty()) t.accumulate(x.node(), gx);
          t.accumulate(scale.node(), gscale);
          t.accumulate(shift.node(), gshift);
        });
  }
  return y;
}

// Unified entry point: batch kind consults mode and running stats, layer kind
// ignores both.
template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormKind kind, const Tensor<T>& scale, const Tensor<T>& shift,
                    T eps, Mode mode, RunningStats<T>* running = nullptr) {
  if (kind == NormKind::kLayer) return layer_norm(x, scale, shift, eps);
  if (!running) throw ConfigError("normalize: batch kind requires running stats");
  return batch_norm(x, scale, shift, *running, eps, T(0.03), mode);
}

}  // namespace dtnet::ops
