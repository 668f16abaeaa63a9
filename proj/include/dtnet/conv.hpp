#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <vector>

#include "dtnet/ops.hpp"
#include "dtnet/tensor.hpp"

namespace dtnet::ops {

struct ConvDesc {
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_h = 0;
  Index pad_w = 0;
  Index groups = 1;
};

// Forward algorithm. Both must agree; kDirect is the plain-loop reference,
// kIm2col the patch-matrix GEMM path used in production. The VJP is shared.
enum class ConvAlgo { kIm2col, kDirect };

namespace detail {

struct ConvPlan {
  Index n, cin, h, w;
  Index cout, cin_g, kh, kw;
  Index sh, sw, ph, pw, groups;
  Index cout_g, ho, wo;
};

template <typename T>
ConvPlan conv_plan(const Tensor<T>& x, const Tensor<T>& w, const ConvDesc& d) {
  ConvPlan p{};
  p.n = x.dims().n;
  p.cin = x.dims().c;
  p.h = x.dims().h;
  p.w = x.dims().w;
  p.cout = w.dims().n;
  p.cin_g = w.dims().c;
  p.kh = w.dims().h;
  p.kw = w.dims().w;
  p.sh = d.stride_h;
  p.sw = d.stride_w;
  p.ph = d.pad_h;
  p.pw = d.pad_w;
  p.groups = d.groups;
  check_shape(p.sh >= 1 && p.sw >= 1, "conv2d: stride must be >= 1");
  check_shape(p.ph >= 0 && p.pw >= 0, "conv2d: negative padding");
  check_shape(p.groups >= 1 && p.cin % p.groups == 0 && p.cout % p.groups == 0,
              "conv2d: channels not divisible by groups");
  check_shape(p.cin_g == p.cin / p.groups,
              "conv2d: weight " + w.dims().str() + " does not match input " + x.dims().str());
  p.cout_g = p.cout / p.groups;
  p.ho = (p.h + 2 * p.ph - p.kh) / p.sh + 1;
  p.wo = (p.w + 2 * p.pw - p.kw) / p.sw + 1;
  check_shape(p.h + 2 * p.ph >= p.kh && p.w + 2 * p.pw >= p.kw && p.ho > 0 && p.wo > 0,
              "conv2d: non-positive output extent");
  return p;
}

// Patch matrix for one image and group: rows = cin_g*kh*kw, cols = ho*wo.
template <typename T>
void im2col(const T* xn, const ConvPlan& p, Index group, std::vector<T>& cols) {
  const Index rows = p.cin_g * p.kh * p.kw;
  cols.assign(static_cast<std::size_t>(rows * p.ho * p.wo), T(0));
  for (Index ci = 0; ci < p.cin_g; ++ci) {
    const T* xc = xn + (group * p.cin_g + ci) * p.h * p.w;
    for (Index kh = 0; kh < p.kh; ++kh)
      for (Index kw = 0; kw < p.kw; ++kw) {
        T* row = cols.data() + ((ci * p.kh + kh) * p.kw + kw) * p.ho * p.wo;
        for (Index ho = 0; ho < p.ho; ++ho) {
          const Index hi = ho * p.sh + kh - p.ph;
          if (hi < 0 || hi >= p.h) continue;
          const T* src = xc + hi * p.w;
          T* dst = row + ho * p.wo;
          if (p.sw == 1) {
            const Index lo = std::max<Index>(0, p.pw - kw);
            const Index hi_w = std::min<Index>(p.wo - 1, p.w - 1 - kw + p.pw);
            if (lo <= hi_w) std::copy(src + lo + kw - p.pw, src + hi_w + 1 + kw - p.pw, dst + lo);
          } else {
            for (Index wo = 0; wo < p.wo; ++wo) {
              const Index wi = wo * p.sw + kw - p.pw;
              if (wi >= 0 && wi < p.w) dst[wo] = src[wi];
            }
          }
        }
      }
  }
}

// Transpose of im2col: scatter-adds patch-matrix rows back into the image.
template <typename T>
void col2im_add(const std::vector<T>& cols, const ConvPlan& p, Index group, T* xn) {
  for (Index ci = 0; ci < p.cin_g; ++ci) {
    T* xc = xn + (group * p.cin_g + ci) * p.h * p.w;
    for (Index kh = 0; kh < p.kh; ++kh)
      for (Index kw = 0; kw < p.kw; ++kw) {
        const T* row = cols.data() + ((ci * p.kh + kh) * p.kw + kw) * p.ho * p.wo;
        for (Index ho = 0; ho < p.ho; ++ho) {
          const Index hi = ho * p.sh + kh - p.ph;
          if (hi < 0 || hi >= p.h) continue;
          T* dst = xc + hi * p.w;
          const T* src = row + ho * p.wo;
          for (Index wo = 0; wo < p.wo; ++wo) {
            const Index wi = wo * p.sw + kw - p.pw;
            if (wi >= 0 && wi < p.w) dst[wi] += src[wo];
          }
        }
      }
  }
}

template <typename T>
void conv_forward_im2col(const Tensor<T>& x, const Tensor<T>& w, const ConvPlan& p, Tensor<T>& y) {
  const Index rows = p.cin_g * p.kh * p.kw;
  std::vector<T> cols;
  for (Index n = 0; n < p.n; ++n) {
    const T* xn = x.data() + n * p.cin * p.h * p.w;
    for (Index g = 0; g < p.groups; ++g) {
      im2col(xn, p, g, cols);
      ConstMatMap<T> wm(w.data() + g * p.cout_g * rows, p.cout_g, rows);
      ConstMatMap<T> cm(cols.data(), rows, p.ho * p.wo);
      MatMap<T> ym(y.data() + (n * p.cout + g * p.cout_g) * p.ho * p.wo, p.cout_g, p.ho * p.wo);
      ym.noalias() = wm * cm;
    }
  }
}

template <typename T>
void conv_forward_direct(const Tensor<T>& x, const Tensor<T>& w, const ConvPlan& p, Tensor<T>& y) {
  for (Index n = 0; n < p.n; ++n)
    for (Index g = 0; g < p.groups; ++g)
      for (Index co = 0; co < p.cout_g; ++co) {
        const Index oc = g * p.cout_g + co;
        for (Index ho = 0; ho < p.ho; ++ho)
          for (Index wo = 0; wo < p.wo; ++wo) {
            T acc = T(0);
            for (Index ci = 0; ci < p.cin_g; ++ci)
              for (Index kh = 0; kh < p.kh; ++kh)
                for (Index kw = 0; kw < p.kw; ++kw) {
                  const Index hi = ho * p.sh + kh - p.ph;
                  const Index wi = wo * p.sw + kw - p.pw;
                  if (hi < 0 || hi >= p.h || wi < 0 || wi >= p.w) continue;
                  acc += x.data()[((n * p.cin + g * p.cin_g + ci) * p.h + hi) * p.w + wi] *
                         w.data()[((oc * p.cin_g + ci) * p.kh + kh) * p.kw + kw];
                }
            y.data()[((n * p.cout + oc) * p.ho + ho) * p.wo + wo] = acc;
          }
      }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const ConvDesc& desc,
                 ConvAlgo algo = ConvAlgo::kIm2col) {
  const auto p = detail::conv_plan(x, w, desc);
  if (bias)
    check_shape(bias->dims() == Shape4{p.cout, 1, 1, 1},
                "conv2d: bias dims " + bias->dims().str() + " for cout " + std::to_string(p.cout));
  Tensor<T> y(Shape4{p.n, p.cout, p.ho, p.wo});
  if (algo == ConvAlgo::kIm2col)
    detail::conv_forward_im2col(x, w, p, y);
  else
    detail::conv_forward_direct(x, w, p, y);
  if (bias) {
    const Index howo = p.ho * p.wo;
    for (Index n = 0; n < p.n; ++n)
      for (Index co = 0; co < p.cout; ++co) {
        const T b = bias->data()[co];
        T* yp = y.data() + (n * p.cout + co) * howo;
        for (Index i = 0; i < howo; ++i) yp[i] += b;
      }
  }
  const Tensor<T> b = bias ? *bias : Tensor<T>{};
  if (auto* tape = common_tape<T>({&x, &w, bias})) {
    const Index bnode = bias ? bias->node() : -1;
    detail::bind_if(tape, y, "conv2d", {x.node(), w.node(), bnode},
                    [x, w, b, bnode, p](GradTape<T>& t, const Tensor<T>& g) {
                      const Index rows = p.cin_g * p.kh * p.kw;
                      const Index howo = p.ho * p.wo;
                      std::vector<T> cols;
                      if (bnode >= 0) {
                        Tensor<T> gb(Shape4{p.cout, 1, 1, 1});
                        for (Index n = 0; n < p.n; ++n)
                          for (Index co = 0; co < p.cout; ++co) {
                            const T* gp = g.data() + (n * p.cout + co) * howo;
                            T acc = T(0);
                            for (Index i = 0; i < howo; ++i) acc += gp[i];
                            gb.data()[co] += acc;
                          }
                        t.accumulate(bnode, gb);
                      }
                      if (w.node() >= 0) {
                        Tensor<T> gw(w.dims());
                        for (Index n = 0; n < p.n; ++n) {
                          const T* xn = x.data() + n * p.cin * p.h * p.w;
                          for (Index gi = 0; gi < p.groups; ++gi) {
                            detail::im2col(xn, p, gi, cols);
                            detail::ConstMatMap<T> cm(cols.data(), rows, howo);
                            detail::ConstMatMap<T> gm(g.data() + (n * p.cout + gi * p.cout_g) * howo,
                                                      p.cout_g, howo);
                            detail::MatMap<T> gwm(gw.data() + gi * p.cout_g * rows, p.cout_g, rows);
                            gwm.noalias() += gm * cm.transpose();
                          }
                        }
                        t.accumulate(w.node(), gw);
                      }
                      if (x.node() >= 0) {
                        Tensor<T> gx(x.dims());
                        std::vector<T> dcols(static_cast<std::size_t>(rows * howo));
                        for (Index n = 0; n < p.n; ++n) {
                          T* gxn = gx.data() + n * p.cin * p.h * p.w;
                          for (Index gi = 0; gi < p.groups; ++gi) {
                            detail::ConstMatMap<T> wm(w.data() + gi * p.cout_g * rows, p.cout_g, rows);
                            detail::ConstMatMap<T> gm(g.data() + (n * p.cout + gi * p.cout_g) * howo,
                                                      p.cout_g, howo);
                            detail::MatMap<T> dm(dcols.data(), rows, howo);
                            dm.noalias() = wm.transpose() * gm;
                            detail::col2im_add(dcols, p, gi, gxn);
                          }
                        }
                        t.accumulate(x.node(), gx);
                      }
                    });
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const ConvDesc& desc,
                 ConvAlgo algo = ConvAlgo::kIm2col) {
  return conv2d(x, w, &bias, desc, algo);
}

// ---------------------------------------------------------------------------
// Max pooling, no padding. Ties route the gradient to the first maximal
// element in (kh, kw) scan order.

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, Index kh, Index kw, Index sh, Index sw) {
  const Shape4 d = x.dims();
  check_shape(kh >= 1 && kw >= 1 && sh >= 1 && sw >= 1, "max_pool2d: bad window/stride");
  check_shape(kh <= d.h && kw <= d.w, "max_pool2d: window larger than input " + d.str());
  const Index ho = (d.h - kh) / sh + 1;
  const Index wo = (d.w - kw) / sw + 1;
  Tensor<T> y(Shape4{d.n, d.c, ho, wo});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(y.numel()));
  for (Index nc = 0; nc < d.n * d.c; ++nc) {
    const T* xp = x.data() + nc * d.h * d.w;
    T* yp = y.data() + nc * ho * wo;
    Index* ap = argmax->data() + nc * ho * wo;
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        T best = xp[i * sh * d.w + j * sw];
        Index bidx = i * sh * d.w + j * sw;
        for (Index a = 0; a < kh; ++a)
          for (Index b = 0; b < kw; ++b) {
            const Index idx = (i * sh + a) * d.w + j * sw + b;
            if (xp[idx] > best) {
              best = xp[idx];
              bidx = idx;
            }
          }
        yp[i * wo + j] = best;
        ap[i * wo + j] = bidx;
      }
  }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "max_pool2d", {x.node()},
                    [x, argmax, ho, wo](GradTape<T>& t, const Tensor<T>& g) {
                      const Shape4 d = x.dims();
                      Tensor<T> gx(d);
                      for (Index nc = 0; nc < d.n * d.c; ++nc) {
                        const T* gp = g.data() + nc * ho * wo;
                        const Index* ap = argmax->data() + nc * ho * wo;
                        T* xp = gx.data() + nc * d.h * d.w;
                        for (Index i = 0; i < ho * wo; ++i) xp[ap[i]] += gp[i];
                      }
                      t.accumulate(x.node(), gx);
                    });
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape4 d = x.dims();
  check_shape(d.h * d.w >= 1, "global_avg_pool: empty spatial extent");
  const Index hw = d.h * d.w;
  Tensor<T> y(Shape4{d.n, d.c, 1, 1});
  for (Index nc = 0; nc < d.n * d.c; ++nc) {
    T acc = T(0);
    const T* xp = x.data() + nc * hw;
    for (Index i = 0; i < hw; ++i) acc += xp[i];
    y.data()[nc] = acc / static_cast<T>(hw);
  }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "global_avg_pool", {x.node()}, [x, hw](GradTape<T>& t, const Tensor<T>& g) {
      const Shape4 d = x.dims();
      Tensor<T> gx(d);
      for (Index nc = 0; nc < d.n * d.c; ++nc) {
        const T gv = g.data()[nc] / static_cast<T>(hw);
        T* xp = gx.data() + nc * hw;
        for (Index i = 0; i < hw; ++i) xp[i] = gv;
      }
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Depthwise convolution whose kernel differs per spatial position. kernels is
// (1, C*K*K, H, W): position (h, w) owns a C x K x K slice. Zero padding,
// stride 1, K odd, dims preserved.

template <typename T>
Tensor<T> position_varying_depthwise(const Tensor<T>& x, const Tensor<T>& kernels, Index k) {
  const Shape4 d = x.dims();
  check_shape(k >= 1 && k % 2 == 1, "position_varying_depthwise: kernel size must be odd");
  check_shape(kernels.dims() == Shape4{1, d.c * k * k, d.h, d.w},
              "position_varying_depthwise: kernels " + kernels.dims().str() + " for input " + d.str());
  const Index off = k / 2;
  const Index hw = d.h * d.w;
  Tensor<T> y(d);
  for (Index n = 0; n < d.n; ++n)
    for (Index c = 0; c < d.c; ++c) {
      const T* xp = x.data() + (n * d.c + c) * hw;
      T* yp = y.data() + (n * d.c + c) * hw;
      for (Index h = 0; h < d.h; ++h)
        for (Index w = 0; w < d.w; ++w) {
          T acc = T(0);
          for (Index kh = 0; kh < k; ++kh) {
            const Index hi = h + kh - off;
            if (hi < 0 || hi >= d.h) continue;
            for (Index kw = 0; kw < k; ++kw) {
              const Index wi = w + kw - off;
              if (wi < 0 || wi >= d.w) continue;
              acc += xp[hi * d.w + wi] * kernels.data()[((c * k + kh) * k + kw) * hw + h * d.w + w];
            }
          }
          yp[h * d.w + w] = acc;
        }
    }
  if (auto* tape = common_tape<T>({&x, &kernels})) {
    detail::bind_if(
        tape, y, "pv_depthwise", {x.node(), kernels.node()},
        [x, kernels, k, off, hw](GradTape<T>& t, const Tensor<T>& g) {
          const Shape4 d = x.dims();
          Tensor<T> gx;
          Tensor<T> gk;
          if (x.node() >= 0) gx = Tensor<T>(d);
          if (kernels.node() >= 0) gk = Tensor<T>(kernels.dims());
          for (Index n = 0; n < d.n; ++n)
            for (Index c = 0; c < d.c; ++c) {
              const T* xp = x.data() + (n * d.c + c) * hw;
              const T* gp = g.data() + (n * d.c + c) * hw;
              for (Index h = 0; h < d.h; ++h)
                for (Index w = 0; w < d.w; ++w) {
                  const T gv = gp[h * d.w + w];
                  for (Index kh = 0; kh < k; ++kh) {
                    const Index hi = h + kh - off;
                    if (hi < 0 || hi >= d.h) continue;
                    for (Index kw = 0; kw < k; ++kw) {
                      const Index wi = w + kw - off;
                      if (wi < 0 || wi >= d.w) continue;
                      const Index kidx = ((c * k + kh) * k + kw) * hw + h * d.w + w;
                      if (!gx.empty()) gx.data()[(n * d.c + c) * hw + hi * d.w + wi] += kernels.data()[kidx] * gv;
                      if (!gk.empty()) gk.data()[kidx] += xp[hi * d.w + wi] * gv;
                    }
                  }
                }
            }
          if (!gx.empty()) t.accumulate(x.node(), gx);
          if (!gk.empty()) t.accumulate(kernels.node(), gk);
        });
  }
  return y;
}

}  // namespace dtnet::ops
