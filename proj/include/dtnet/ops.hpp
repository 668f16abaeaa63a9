#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "dtnet/tensor.hpp"

// Differentiable free functions over Tensor<T>. Every op computes its value
// eagerly; when an input is tracked, it also registers a VJP closure on the
// shared tape. Saved activations are captured by value (storage is shared,
// so this is cheap).
namespace dtnet::ops {

namespace testing {

// Verification hook: when set, the SiLU backward rule is perturbed so that
// gradient checking must detect the planted bug.
inline bool corrupt_silu_vjp = false;

}  // namespace testing

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
void bind_if(GradTape<T>* tape, Tensor<T>& out, const char* kind, std::vector<Index> parents,
             typename GradTape<T>::Vjp vjp) {
  if (!tape) return;
  const Index id = tape->push(out.dims(), kind, std::move(parents), std::move(vjp));
  tape->bind(out, id);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
  Tensor<T> y(x.dims());
  const T* xd = x.data();
  T* yd = y.data();
  const Index n = x.numel();
  switch (kind) {
    case Act::kSilu:
      for (Index i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-xd[i]));
        yd[i] = xd[i] * s;
      }
      break;
    case Act::kRelu:
      for (Index i = 0; i < n; ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
      break;
    case Act::kSigmoid:
      for (Index i = 0; i < n; ++i) yd[i] = T(1) / (T(1) + std::exp(-xd[i]));
      break;
  }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "activation", {x.node()},
                    [x, y, kind](GradTape<T>& t, const Tensor<T>& g) {
                      Tensor<T> gx(x.dims());
                      const T* xd = x.data();
                      const T* yd = y.data();
                      const T* gd = g.data();
                      T* o = gx.data();
                      const Index n = x.numel();
                      const T tweak = testing::corrupt_silu_vjp ? T(0.01) : T(0);
                      switch (kind) {
                        case Act::kSilu:
                          for (Index i = 0; i < n; ++i) {
                            const T s = T(1) / (T(1) + std::exp(-xd[i]));
                            o[i] = gd[i] * (s + xd[i] * s * (T(1) - s) + tweak);
                          }
                          break;
                        case Act::kRelu:
                          for (Index i = 0; i < n; ++i) o[i] = xd[i] > T(0) ? gd[i] : T(0);
                          break;
                        case Act::kSigmoid:
                          for (Index i = 0; i < n; ++i) o[i] = gd[i] * yd[i] * (T(1) - yd[i]);
                          break;
                      }
                      t.accumulate(x.node(), gx);
                    });
  }
  return y;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return activation(x, Act::kSilu);
}
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(x, Act::kRelu);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Act::kSigmoid);
}

template <typename T>
Tensor<T> atan_of(const Tensor<T>& x) {
  Tensor<T> y(x.dims());
  for (Index i = 0; i < x.numel(); ++i) y.data()[i] = std::atan(x.data()[i]);
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "atan", {x.node()}, [x](GradTape<T>& t, const Tensor<T>& g) {
      Tensor<T> gx(x.dims());
      for (Index i = 0; i < x.numel(); ++i)
        gx.data()[i] = g.data()[i] / (T(1) + x.data()[i] * x.data()[i]);
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

// y = mul * x + add
template <typename T>
Tensor<T> scalar_affine(const Tensor<T>& x, T mul, T add) {
  Tensor<T> y(x.dims());
  for (Index i = 0; i < x.numel(); ++i) y.data()[i] = mul * x.data()[i] + add;
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "scalar_affine", {x.node()}, [x, mul](GradTape<T>& t, const Tensor<T>& g) {
      Tensor<T> gx(x.dims());
      for (Index i = 0; i < x.numel(); ++i) gx.data()[i] = mul * g.data()[i];
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

namespace detail {

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* kind, F f, DA da, DB db) {
  check_shape(a.dims() == b.dims(), std::string(kind) + ": dims " + a.dims().str() + " vs " + b.dims().str());
  Tensor<T> y(a.dims());
  for (Index i = 0; i < a.numel(); ++i) y.data()[i] = f(a.data()[i], b.data()[i]);
  if (auto* tape = common_tape<T>({&a, &b})) {
    detail::bind_if(tape, y, kind, {a.node(), b.node()},
                    [a, b, da, db](GradTape<T>& t, const Tensor<T>& g) {
                      if (a.node() >= 0) {
                        Tensor<T> ga(a.dims());
                        for (Index i = 0; i < a.numel(); ++i)
                          ga.data()[i] = da(a.data()[i], b.data()[i]) * g.data()[i];
                        t.accumulate(a.node(), ga);
                      }
                      if (b.node() >= 0) {
                        Tensor<T> gb(b.dims());
                        for (Index i = 0; i < b.numel(); ++i)
                          gb.data()[i] = db(a.data()[i], b.data()[i]) * g.data()[i];
                        t.accumulate(b.node(), gb);
                      }
                    });
  }
  return y;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// Ties route the gradient to the first argument.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "min", [](T x, T y) { return x <= y ? x : y; }, [](T x, T y) { return x <= y ? T(1) : T(0); },
      [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "max", [](T x, T y) { return x >= y ? x : y; }, [](T x, T y) { return x >= y ? T(1) : T(0); },
      [](T x, T y) { return x >= y ? T(0) : T(1); });
}

// ---------------------------------------------------------------------------
// Broadcast ops between an (N,C,H,W) map and per-channel (N,C,1,1) values.

namespace detail {

template <typename T>
void check_nc(const Tensor<T>& x, const Tensor<T>& s, const char* kind) {
  check_shape(s.dims().n == x.dims().n && s.dims().c == x.dims().c && s.dims().h == 1 && s.dims().w == 1,
              std::string(kind) + ": expected (N,C,1,1) operand, got " + s.dims().str());
}

}  // namespace detail

template <typename T>
Tensor<T> add_nc(const Tensor<T>& x, const Tensor<T>& s) {
  detail::check_nc(x, s, "add_nc");
  const Index hw = x.dims().h * x.dims().w;
  Tensor<T> y(x.dims());
  for (Index nc = 0; nc < x.dims().n * x.dims().c; ++nc) {
    const T sv = s.data()[nc];
    for (Index i = 0; i < hw; ++i) y.data()[nc * hw + i] = x.data()[nc * hw + i] + sv;
  }
  if (auto* tape = common_tape<T>({&x, &s})) {
    detail::bind_if(tape, y, "add_nc", {x.node(), s.node()},
                    [x, s, hw](GradTape<T>& t, const Tensor<T>& g) {
                      t.accumulate(x.node(), g);
                      if (s.node() >= 0) {
                        Tensor<T> gs(s.dims());
                        for (Index nc = 0; nc < s.numel(); ++nc) {
                          T acc = T(0);
                          for (Index i = 0; i < hw; ++i) acc += g.data()[nc * hw + i];
                          gs.data()[nc] = acc;
                        }
                        t.accumulate(s.node(), gs);
                      }
                    });
  }
  return y;
}

template <typename T>
Tensor<T> mul_nc(const Tensor<T>& x, const Tensor<T>& s) {
  detail::check_nc(x, s, "mul_nc");
  const Index hw = x.dims().h * x.dims().w;
  Tensor<T> y(x.dims());
  for (Index nc = 0; nc < x.dims().n * x.dims().c; ++nc) {
    const T sv = s.data()[nc];
    for (Index i = 0; i < hw; ++i) y.data()[nc * hw + i] = x.data()[nc * hw + i] * sv;
  }
  if (auto* tape = common_tape<T>({&x, &s})) {
    detail::bind_if(tape, y, "mul_nc", {x.node(), s.node()},
                    [x, s, hw](GradTape<T>& t, const Tensor<T>& g) {
                      if (x.node() >= 0) {
                        Tensor<T> gx(x.dims());
                        for (Index nc = 0; nc < s.numel(); ++nc) {
                          const T sv = s.data()[nc];
                          for (Index i = 0; i < hw; ++i) gx.data()[nc * hw + i] = g.data()[nc * hw + i] * sv;
                        }
                        t.accumulate(x.node(), gx);
                      }
                      if (s.node() >= 0) {
                        Tensor<T> gs(s.dims());
                        for (Index nc = 0; nc < s.numel(); ++nc) {
                          T acc = T(0);
                          for (Index i = 0; i < hw; ++i) acc += g.data()[nc * hw + i] * x.data()[nc * hw + i];
                          gs.data()[nc] = acc;
                        }
                        t.accumulate(s.node(), gs);
                      }
                    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (Index i = 0; i < x.numel(); ++i) acc += x.data()[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "sum_all", {x.node()}, [x](GradTape<T>& t, const Tensor<T>& g) {
      t.accumulate(x.node(), Tensor<T>::full(x.dims(), g.item()));
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  check_shape(x.numel() > 0, "mean_all on empty tensor");
  return scalar_affine(sum_all(x), T(1) / static_cast<T>(x.numel()), T(0));
}

// ---------------------------------------------------------------------------
// Structure: reshape / permute / concat / pad / crop / select

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape4 nd) {
  Tensor<T> y = x.reshaped(nd);
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "reshape", {x.node()}, [x](GradTape<T>& t, const Tensor<T>& g) {
      t.accumulate(x.node(), g.reshaped(x.dims()));
    });
  }
  return y;
}

namespace detail {

// out axis k takes input axis perm[k].
template <typename T>
Tensor<T> permute_raw(const Tensor<T>& x, const std::array<int, 4>& perm) {
  const std::array<Index, 4> xd = {x.dims().n, x.dims().c, x.dims().h, x.dims().w};
  Shape4 od{xd[perm[0]], xd[perm[1]], xd[perm[2]], xd[perm[3]]};
  Tensor<T> y(od);
  std::array<Index, 4> xstride = {x.dims().c * x.dims().h * x.dims().w, x.dims().h * x.dims().w, x.dims().w, 1};
  const std::array<Index, 4> ostr = {od.c * od.h * od.w, od.h * od.w, od.w, 1};
  std::array<Index, 4> src_stride{};
  for (int k = 0; k < 4; ++k) src_stride[k] = xstride[perm[k]];
  const T* xp = x.data();
  T* yp = y.data();
  for (Index i0 = 0; i0 < od.n; ++i0)
    for (Index i1 = 0; i1 < od.c; ++i1)
      for (Index i2 = 0; i2 < od.h; ++i2) {
        const Index obase = i0 * ostr[0] + i1 * ostr[1] + i2 * ostr[2];
        const Index sbase = i0 * src_stride[0] + i1 * src_stride[1] + i2 * src_stride[2];
        for (Index i3 = 0; i3 < od.w; ++i3) yp[obase + i3] = xp[sbase + i3 * src_stride[3]];
      }
  return y;
}

inline std::array<int, 4> inverse_perm(const std::array<int, 4>& perm) {
  std::array<int, 4> inv{};
  for (int k = 0; k < 4; ++k) inv[perm[k]] = k;
  return inv;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::array<int, 4> perm) {
  Tensor<T> y = detail::permute_raw(x, perm);
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "permute", {x.node()}, [x, perm](GradTape<T>& t, const Tensor<T>& g) {
      t.accumulate(x.node(), detail::permute_raw(g, detail::inverse_perm(perm)));
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  check_shape(!xs.empty(), "concat_channels: no inputs");
  const Shape4 d0 = xs[0].dims();
  Index ctot = 0;
  for (const auto& x : xs) {
    check_shape(x.dims().n == d0.n && x.dims().h == d0.h && x.dims().w == d0.w,
                "concat_channels: mismatched dims " + x.dims().str());
    ctot += x.dims().c;
  }
  Tensor<T> y(Shape4{d0.n, ctot, d0.h, d0.w});
  const Index hw = d0.h * d0.w;
  Index coff = 0;
  for (const auto& x : xs) {
    for (Index n = 0; n < d0.n; ++n) {
      const T* src = x.data() + n * x.dims().c * hw;
      T* dst = y.data() + (n * ctot + coff) * hw;
      std::copy(src, src + x.dims().c * hw, dst);
    }
    coff += x.dims().c;
  }
  GradTape<T>* tape = nullptr;
  for (const auto& x : xs) {
    if (!x.tracked()) continue;
    if (tape && tape != x.tape()) throw UsageError("concat inputs tracked by different tapes");
    tape = x.tape();
  }
  if (tape) {
    std::vector<Index> parents;
    for (const auto& x : xs) parents.push_back(x.node());
    detail::bind_if(tape, y, "concat_c", parents, [xs, ctot, hw](GradTape<T>& t, const Tensor<T>& g) {
      Index coff = 0;
      for (const auto& x : xs) {
        if (x.node() >= 0) {
          Tensor<T> gx(x.dims());
          for (Index n = 0; n < x.dims().n; ++n) {
            const T* src = g.data() + (n * ctot + coff) * hw;
            T* dst = gx.data() + n * x.dims().c * hw;
            std::copy(src, src + x.dims().c * hw, dst);
          }
          t.accumulate(x.node(), gx);
        }
        coff += x.dims().c;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, Index top, Index bottom, Index left, Index right) {
  check_shape(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, "pad2d: negative padding");
  const Shape4 d = x.dims();
  Tensor<T> y(Shape4{d.n, d.c, d.h + top + bottom, d.w + left + right});
  for (Index nc = 0; nc < d.n * d.c; ++nc)
    for (Index h = 0; h < d.h; ++h) {
      const T* src = x.data() + (nc * d.h + h) * d.w;
      T* dst = y.data() + (nc * y.dims().h + h + top) * y.dims().w + left;
      std::copy(src, src + d.w, dst);
    }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "pad2d", {x.node()}, [x, top, left](GradTape<T>& t, const Tensor<T>& g) {
      const Shape4 d = x.dims();
      Tensor<T> gx(d);
      for (Index nc = 0; nc < d.n * d.c; ++nc)
        for (Index h = 0; h < d.h; ++h) {
          const T* src = g.data() + (nc * g.dims().h + h + top) * g.dims().w + left;
          T* dst = gx.data() + (nc * d.h + h) * d.w;
          std::copy(src, src + d.w, dst);
        }
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, Index top, Index left, Index oh, Index ow) {
  const Shape4 d = x.dims();
  check_shape(top >= 0 && left >= 0 && top + oh <= d.h && left + ow <= d.w, "crop2d out of range");
  Tensor<T> y(Shape4{d.n, d.c, oh, ow});
  for (Index nc = 0; nc < d.n * d.c; ++nc)
    for (Index h = 0; h < oh; ++h) {
      const T* src = x.data() + (nc * d.h + h + top) * d.w + left;
      T* dst = y.data() + (nc * oh + h) * ow;
      std::copy(src, src + ow, dst);
    }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "crop2d", {x.node()}, [x, top, left, oh, ow](GradTape<T>& t, const Tensor<T>& g) {
      const Shape4 d = x.dims();
      Tensor<T> gx(d);
      for (Index nc = 0; nc < d.n * d.c; ++nc)
        for (Index h = 0; h < oh; ++h) {
          const T* src = g.data() + (nc * oh + h) * ow;
          T* dst = gx.data() + (nc * d.h + h + top) * d.w + left;
          std::copy(src, src + ow, dst);
        }
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

template <typename T>
Tensor<T> select_channels(const Tensor<T>& x, const std::vector<Index>& idx) {
  const Shape4 d = x.dims();
  for (const Index c : idx) check_shape(c >= 0 && c < d.c, "select_channels index out of range");
  Tensor<T> y(Shape4{d.n, static_cast<Index>(idx.size()), d.h, d.w});
  const Index hw = d.h * d.w;
  for (Index n = 0; n < d.n; ++n)
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const T* src = x.data() + (n * d.c + idx[j]) * hw;
      T* dst = y.data() + (n * static_cast<Index>(idx.size()) + static_cast<Index>(j)) * hw;
      std::copy(src, src + hw, dst);
    }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "select_c", {x.node()}, [x, idx, hw](GradTape<T>& t, const Tensor<T>& g) {
      const Shape4 d = x.dims();
      Tensor<T> gx(d);
      for (Index n = 0; n < d.n; ++n)
        for (std::size_t j = 0; j < idx.size(); ++j) {
          const T* src = g.data() + (n * static_cast<Index>(idx.size()) + static_cast<Index>(j)) * hw;
          T* dst = gx.data() + (n * d.c + idx[j]) * hw;
          for (Index i = 0; i < hw; ++i) dst[i] += src[i];
        }
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

// Extracts, for each reference, the channel block [c0, c0+block) at one
// spatial cell. Output is (M, block, 1, 1). Backward scatter-adds.
struct CellRef {
  Index n;
  Index c0;
  Index h;
  Index w;
};

template <typename T>
Tensor<T> gather_cells(const Tensor<T>& x, const std::vector<CellRef>& refs, Index block) {
  const Shape4 d = x.dims();
  const Index m = static_cast<Index>(refs.size());
  check_shape(m > 0, "gather_cells: empty reference list");
  for (const auto& r : refs)
    check_shape(r.n >= 0 && r.n < d.n && r.c0 >= 0 && r.c0 + block <= d.c && r.h >= 0 && r.h < d.h &&
                    r.w >= 0 && r.w < d.w,
                "gather_cells: reference out of range");
  Tensor<T> y(Shape4{m, block, 1, 1});
  const Index hw = d.h * d.w;
  for (Index i = 0; i < m; ++i) {
    const auto& r = refs[static_cast<std::size_t>(i)];
    for (Index j = 0; j < block; ++j)
      y.data()[i * block + j] = x.data()[(r.n * d.c + r.c0 + j) * hw + r.h * d.w + r.w];
  }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "gather_cells", {x.node()},
                    [x, refs, block](GradTape<T>& t, const Tensor<T>& g) {
                      const Shape4 d = x.dims();
                      const Index hw = d.h * d.w;
                      Tensor<T> gx(d);
                      for (std::size_t i = 0; i < refs.size(); ++i) {
                        const auto& r = refs[i];
                        for (Index j = 0; j < block; ++j)
                          gx.data()[(r.n * d.c + r.c0 + j) * hw + r.h * d.w + r.w] +=
                              g.data()[static_cast<Index>(i) * block + j];
                      }
                      t.accumulate(x.node(), gx);
                    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Matrix product over the trailing two axes. a is (B1,B2,M,K); b is either
// (B1,B2,K,N) or (1,1,K,N), which broadcasts over the batch. Backed by Eigen.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4 da = a.dims(), db = b.dims();
  const bool bcast = (db.n == 1 && db.c == 1);
  check_shape(da.w == db.h, "matmul: inner extents " + da.str() + " x " + db.str());
  check_shape(bcast || (db.n == da.n && db.c == da.c), "matmul: batch extents " + da.str() + " x " + db.str());
  const Index batches = da.n * da.c, m = da.h, k = da.w, n = db.w;
  Tensor<T> y(Shape4{da.n, da.c, m, n});
  for (Index i = 0; i < batches; ++i) {
    detail::ConstMatMap<T> ma(a.data() + i * m * k, m, k);
    detail::ConstMatMap<T> mb(b.data() + (bcast ? 0 : i * k * n), k, n);
    detail::MatMap<T> my(y.data() + i * m * n, m, n);
    my.noalias() = ma * mb;
  }
  if (auto* tape = common_tape<T>({&a, &b})) {
    detail::bind_if(tape, y, "matmul", {a.node(), b.node()},
                    [a, b, bcast, batches, m, k, n](GradTape<T>& t, const Tensor<T>& g) {
                      if (a.node() >= 0) {
                        Tensor<T> ga(a.dims());
                        for (Index i = 0; i < batches; ++i) {
                          detail::ConstMatMap<T> mg(g.data() + i * m * n, m, n);
                          detail::ConstMatMap<T> mb(b.data() + (bcast ? 0 : i * k * n), k, n);
                          detail::MatMap<T> mga(ga.data() + i * m * k, m, k);
                          mga.noalias() = mg * mb.transpose();
                        }
                        t.accumulate(a.node(), ga);
                      }
                      if (b.node() >= 0) {
                        Tensor<T> gb(b.dims());
                        for (Index i = 0; i < batches; ++i) {
                          detail::ConstMatMap<T> mg(g.data() + i * m * n, m, n);
                          detail::ConstMatMap<T> ma(a.data() + i * m * k, m, k);
                          detail::MatMap<T> mgb(gb.data() + (bcast ? 0 : i * k * n), k, n);
                          if (bcast && i > 0)
                            mgb.noalias() += ma.transpose() * mg;
                          else
                            mgb.noalias() = ma.transpose() * mg;
                        }
                        t.accumulate(b.node(), gb);
                      }
                    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis.

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const Index w = x.dims().w;
  check_shape(w >= 1, "softmax over empty axis");
  const Index rows = x.numel() / w;
  Tensor<T> y(x.dims());
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * w;
    T* yr = y.data() + r * w;
    T mx = xr[0];
    for (Index i = 1; i < w; ++i) mx = std::max(mx, xr[i]);
    T sum = T(0);
    for (Index i = 0; i < w; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      sum += yr[i];
    }
    for (Index i = 0; i < w; ++i) yr[i] /= sum;
  }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "softmax", {x.node()}, [x, y, rows, w](GradTape<T>& t, const Tensor<T>& g) {
      Tensor<T> gx(x.dims());
      for (Index r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * w;
        const T* gr = g.data() + r * w;
        T dot = T(0);
        for (Index i = 0; i < w; ++i) dot += yr[i] * gr[i];
        T* o = gx.data() + r * w;
        for (Index i = 0; i < w; ++i) o[i] = yr[i] * (gr[i] - dot);
      }
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Binary cross entropy with logits, masked mean. target and mask are plain
// data (never differentiated). The mean is over sum(mask), floored at 1.

template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& z, const Tensor<T>& target, const Tensor<T>& mask) {
  check_shape(z.dims() == target.dims() && z.dims() == mask.dims(), "bce: dims mismatch");
  T msum = T(0);
  for (Index i = 0; i < mask.numel(); ++i) msum += mask.data()[i];
  const T norm = std::max(T(1), msum);
  T acc = T(0);
  for (Index i = 0; i < z.numel(); ++i) {
    const T zi = z.data()[i];
    const T yi = target.data()[i];
    const T loss = std::max(zi, T(0)) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
    acc += mask.data()[i] * loss;
  }
  Tensor<T> y = Tensor<T>::scalar(acc / norm);
  if (auto* tape = common_tape<T>({&z})) {
    detail::bind_if(tape, y, "bce", {z.node()}, [z, target, mask, norm](GradTape<T>& t, const Tensor<T>& g) {
      Tensor<T> gz(z.dims());
      const T go = g.item();
      for (Index i = 0; i < z.numel(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-z.data()[i]));
        gz.data()[i] = mask.data()[i] * (s - target.data()[i]) / norm * go;
      }
      t.accumulate(z.node(), gz);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Bilinear resize (align-corners). Linear in x, so the VJP is the transposed
// interpolation.

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, Index oh, Index ow) {
  const Shape4 d = x.dims();
  check_shape(oh >= 1 && ow >= 1 && d.h >= 1 && d.w >= 1, "bilinear_resize: empty extent");
  if (oh == d.h && ow == d.w) return reshape(x, d);
  const double sh = oh > 1 ? static_cast<double>(d.h - 1) / static_cast<double>(oh - 1) : 0.0;
  const double sw = ow > 1 ? static_cast<double>(d.w - 1) / static_cast<double>(ow - 1) : 0.0;
  Tensor<T> y(Shape4{d.n, d.c, oh, ow});
  for (Index nc = 0; nc < d.n * d.c; ++nc) {
    const T* xp = x.data() + nc * d.h * d.w;
    T* yp = y.data() + nc * oh * ow;
    for (Index i = 0; i < oh; ++i) {
      const double fy = i * sh;
      const Index y0 = std::min<Index>(static_cast<Index>(fy), d.h - 1);
      const Index y1 = std::min<Index>(y0 + 1, d.h - 1);
      const double wy = fy - static_cast<double>(y0);
      for (Index j = 0; j < ow; ++j) {
        const double fx = j * sw;
        const Index x0 = std::min<Index>(static_cast<Index>(fx), d.w - 1);
        const Index x1 = std::min<Index>(x0 + 1, d.w - 1);
        const double wx = fx - static_cast<double>(x0);
        const double v = (1 - wy) * ((1 - wx) * xp[y0 * d.w + x0] + wx * xp[y0 * d.w + x1]) +
                         wy * ((1 - wx) * xp[y1 * d.w + x0] + wx * xp[y1 * d.w + x1]);
        yp[i * ow + j] = static_cast<T>(v);
      }
    }
  }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "resize", {x.node()}, [x, oh, ow, sh, sw](GradTape<T>& t, const Tensor<T>& g) {
      const Shape4 d = x.dims();
      Tensor<T> gx(d);
      for (Index nc = 0; nc < d.n * d.c; ++nc) {
        T* xp = gx.data() + nc * d.h * d.w;
        const T* gp = g.data() + nc * oh * ow;
        for (Index i = 0; i < oh; ++i) {
          const double fy = i * sh;
          const Index y0 = std::min<Index>(static_cast<Index>(fy), d.h - 1);
          const Index y1 = std::min<Index>(y0 + 1, d.h - 1);
          const double wy = fy - static_cast<double>(y0);
          for (Index j = 0; j < ow; ++j) {
            const double fx = j * sw;
            const Index x0 = std::min<Index>(static_cast<Index>(fx), d.w - 1);
            const Index x1 = std::min<Index>(x0 + 1, d.w - 1);
            const double wx = fx - static_cast<double>(x0);
            const T gv = gp[i * ow + j];
            xp[y0 * d.w + x0] += static_cast<T>((1 - wy) * (1 - wx)) * gv;
            xp[y0 * d.w + x1] += static_cast<T>((1 - wy) * wx) * gv;
            xp[y1 * d.w + x0] += static_cast<T>(wy * (1 - wx)) * gv;
            xp[y1 * d.w + x1] += static_cast<T>(wy * wx) * gv;
          }
        }
      }
      t.accumulate(x.node(), gx);
    });
  }
  return y;
}

}  // namespace dtnet::ops
