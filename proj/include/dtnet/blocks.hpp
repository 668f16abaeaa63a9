#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dtnet/conv.hpp"
#include "dtnet/norm.hpp"
#include "dtnet/ops.hpp"
#include "dtnet/rng.hpp"
#include "dtnet/tensor.hpp"

namespace dtnet {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBnMomentum = 0.03;

// One (de)serializable tensor of a model. rank is the logical rank used by
// the checkpoint (vectors 1, matrices 2, the affine map 3, conv weights 4).
template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T>* value;
  bool trainable;
  int rank;
};

namespace init {

// PyTorch-style conv default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_uniform(Shape4 wdims, Rng& rng) {
  const Index fan_in = wdims.c * wdims.h * wdims.w;
  const T bound = T(1) / static_cast<T>(std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1))));
  return Tensor<T>::uniform(wdims, rng, -bound, bound);
}

}  // namespace init

// ---------------------------------------------------------------------------
// CBS: Conv + BatchNorm + SiLU. Kernel is odd with pad = k/2, so spatial
// extent changes only through the stride.

template <typename T>
struct Cbs {
  Tensor<T> weight;    // (cout, cin, k, k)
  Tensor<T> bias;      // (cout,1,1,1)
  Tensor<T> bn_scale;  // (cout,1,1,1)
  Tensor<T> bn_shift;
  mutable ops::RunningStats<T> bn_running;  // statistics, not parameters
  Index stride = 1;
  Index kernel = 3;

  static Cbs make(Index cin, Index cout, Index kernel, Index stride, Rng& rng) {
    if (kernel % 2 == 0) throw ConfigError("cbs: kernel must be odd, got " + std::to_string(kernel));
    Cbs p;
    p.weight = init::fan_in_uniform<T>(Shape4{cout, cin, kernel, kernel}, rng);
    p.bias = Tensor<T>::zeros(Shape4{cout, 1, 1, 1});
    p.bn_scale = Tensor<T>::ones(Shape4{cout, 1, 1, 1});
    p.bn_shift = Tensor<T>::zeros(Shape4{cout, 1, 1, 1});
    p.bn_running = ops::RunningStats<T>::unit(cout);
    p.stride = stride;
    p.kernel = kernel;
    return p;
  }

  Index out_channels() const { return weight.dims().n; }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    out.push_back({prefix + ".conv.weight", &weight, true, 4});
    out.push_back({prefix + ".conv.bias", &bias, true, 1});
    out.push_back({prefix + ".bn.scale", &bn_scale, true, 1});
    out.push_back({prefix + ".bn.shift", &bn_shift, true, 1});
    out.push_back({prefix + ".bn.running_mean", &bn_running.mean, false, 1});
    out.push_back({prefix + ".bn.running_var", &bn_running.var, false, 1});
  }
};

template <typename T>
Tensor<T> cbs_forward(const Tensor<T>& x, const Cbs<T>& p, Mode mode) {
  check_shape(x.dims().c == p.weight.dims().c, "cbs: input channels " + x.dims().str());
  ops::ConvDesc desc;
  desc.stride_h = desc.stride_w = p.stride;
  desc.pad_h = desc.pad_w = p.kernel / 2;
  Tensor<T> y = ops::conv2d(x, p.weight, &p.bias, desc);
  y = ops::batch_norm(y, p.bn_scale, p.bn_shift, p.bn_running, static_cast<T>(kNormEps),
                      static_cast<T>(kBnMomentum), mode);
  return ops::silu(y);
}

// ---------------------------------------------------------------------------
// ELAN: two 1x1 entry branches, a chain of 3x3 pairs tapped after each pair,
// concatenation, 1x1 fusion. Defaults follow the YOLOv7 backbone block:
// hidden = cin/2, two pairs (four concatenated maps), cout = 2*cin.

template <typename T>
struct Elan {
  Cbs<T> entry_a;
  Cbs<T> entry_b;
  std::vector<Cbs<T>> chain;  // 2*pairs convs, hidden -> hidden
  Cbs<T> fuse;
  Index pairs = 2;

  static Elan make(Index cin, Index hidden, Index cout, Index pairs, Rng& rng) {
    if (pairs < 1) throw ConfigError("elan: needs at least one chained pair");
    Elan p;
    p.pairs = pairs;
    p.entry_a = Cbs<T>::make(cin, hidden, 1, 1, rng);
    p.entry_b = Cbs<T>::make(cin, hidden, 1, 1, rng);
    for (Index i = 0; i < 2 * pairs; ++i) p.chain.push_back(Cbs<T>::make(hidden, hidden, 3, 1, rng));
    p.fuse = Cbs<T>::make((2 + pairs) * hidden, cout, 1, 1, rng);
    return p;
  }

  static Elan make_default(Index cin, Rng& rng) { return make(cin, cin / 2, 2 * cin, 2, rng); }

  Index out_channels() const { return fuse.out_channels(); }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    entry_a.collect(prefix + ".entry_a", out);
    entry_b.collect(prefix + ".entry_b", out);
    for (std::size_t i = 0; i < chain.size(); ++i) chain[i].collect(prefix + ".chain" + std::to_string(i), out);
    fuse.collect(prefix + ".fuse", out);
  }
};

template <typename T>
Tensor<T> elan_forward(const Tensor<T>& x, const Elan<T>& p, Mode mode) {
  std::vector<Tensor<T>> taps;
  taps.push_back(cbs_forward(x, p.entry_a, mode));
  Tensor<T> cur = cbs_forward(x, p.entry_b, mode);
  taps.push_back(cur);
  for (Index i = 0; i < p.pairs; ++i) {
    cur = cbs_forward(cur, p.chain[static_cast<std::size_t>(2 * i)], mode);
    cur = cbs_forward(cur, p.chain[static_cast<std::size_t>(2 * i + 1)], mode);
    taps.push_back(cur);
  }
  return cbs_forward(ops::concat_channels(taps), p.fuse, mode);
}

// ---------------------------------------------------------------------------
// MPCM: stride-2 downsampling by two branches, max-pool + 1x1 beside
// 1x1 + 3x3 stride-2, concatenated. Branch width defaults to cin/2 so the
// output keeps cin channels.

template <typename T>
struct Mpcm {
  Cbs<T> pool_proj;  // 1x1 after the max pool
  Cbs<T> conv_a;     // 1x1
  Cbs<T> conv_b;     // 3x3 stride 2

  static Mpcm make(Index cin, Index branch, Rng& rng) {
    Mpcm p;
    p.pool_proj = Cbs<T>::make(cin, branch, 1, 1, rng);
    p.conv_a = Cbs<T>::make(cin, branch, 1, 1, rng);
    p.conv_b = Cbs<T>::make(branch, branch, 3, 2, rng);
    return p;
  }

  static Mpcm make_default(Index cin, Rng& rng) { return make(cin, cin / 2, rng); }

  Index out_channels() const { return pool_proj.out_channels() + conv_b.out_channels(); }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    pool_proj.collect(prefix + ".pool_proj", out);
    conv_a.collect(prefix + ".conv_a", out);
    conv_b.collect(prefix + ".conv_b", out);
  }
};

template <typename T>
Tensor<T> mpcm_forward(const Tensor<T>& x, const Mpcm<T>& p, Mode mode) {
  check_shape(x.dims().h % 2 == 0 && x.dims().w % 2 == 0, "mpcm: H and W must be even, got " + x.dims().str());
  Tensor<T> pooled = cbs_forward(ops::max_pool2d(x, 2, 2, 2, 2), p.pool_proj, mode);
  Tensor<T> conved = cbs_forward(cbs_forward(x, p.conv_a, mode), p.conv_b, mode);
  return ops::concat_channels<T>({pooled, conved});
}

}  // namespace dtnet
