#pragma once

#include <string>
#include <vector>

#include "dtnet/blocks.hpp"

namespace dtnet {

// Translation-variant convolution: a depthwise 3x3 whose kernel differs per
// spatial position. The kernels are generated from a learnable affine map A
// by four Conv+LN+ReLU stages and a final conv (all 3x3, pad 1), so they
// depend on parameters only, never on the feature map.
template <typename T>
struct TvConv {
  struct Clr {
    Tensor<T> weight;
    Tensor<T> bias;
    Tensor<T> ln_scale;
    Tensor<T> ln_shift;
  };

  Tensor<T> affine;  // (1, C_A, H_f, W_f)
  std::vector<Clr> stages;
  Tensor<T> final_weight;  // (C*K*K, hidden, 3, 3)
  Tensor<T> final_bias;    // (C*K*K,1,1,1)
  Index channels = 0;
  Index k = 3;

  static TvConv make(Index channels, Index map_h, Index map_w, Rng& rng, Index map_channels = 8,
                     Index hidden = 32) {
    TvConv p;
    p.channels = channels;
    p.affine = Tensor<T>::normal(Shape4{1, map_channels, map_h, map_w}, rng, T(0), T(0.1));
    Index cin = map_channels;
    for (int i = 0; i < 4; ++i) {
      Clr s;
      s.weight = init::fan_in_uniform<T>(Shape4{hidden, cin, 3, 3}, rng);
      s.bias = Tensor<T>::zeros(Shape4{hidden, 1, 1, 1});
      s.ln_scale = Tensor<T>::ones(Shape4{hidden, 1, 1, 1});
      s.ln_shift = Tensor<T>::zeros(Shape4{hidden, 1, 1, 1});
      p.stages.push_back(std::move(s));
      cin = hidden;
    }
    const Index kk = p.k * p.k;
    p.final_weight = init::fan_in_uniform<T>(Shape4{channels * kk, hidden, 3, 3}, rng);
    // Identity-delta kernels at initialization: position kernels start close
    // to a pass-through so the block does not mute its input.
    p.final_bias = Tensor<T>::zeros(Shape4{channels * kk, 1, 1, 1});
    for (Index c = 0; c < channels; ++c) p.final_bias.data()[c * kk + kk / 2] = T(1);
    return p;
  }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    out.push_back({prefix + ".affine", &affine, true, 3});
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string s = prefix + ".gen" + std::to_string(i);
      out.push_back({s + ".weight", &stages[i].weight, true, 4});
      out.push_back({s + ".bias", &stages[i].bias, true, 1});
      out.push_back({s + ".ln.scale", &stages[i].ln_scale, true, 1});
      out.push_back({s + ".ln.shift", &stages[i].ln_shift, true, 1});
    }
    out.push_back({prefix + ".final.weight", &final_weight, true, 4});
    out.push_back({prefix + ".final.bias", &final_bias, true, 1});
  }
};

namespace detail {

template <typename T>
Tensor<T> tv_generate(const TvConv<T>& p, const Tensor<T>& affine) {
  ops::ConvDesc d;
  d.pad_h = d.pad_w = 1;
  Tensor<T> x = affine;
  for (const auto& s : p.stages) {
    x = ops::conv2d(x, s.weight, &s.bias, d);
    x = ops::layer_norm(x, s.ln_scale, s.ln_shift, static_cast<T>(kNormEps));
    x = ops::relu(x);
  }
  return ops::conv2d(x, p.final_weight, &p.final_bias, d);
}

}  // namespace detail

// Per-position kernel tensor, (1, C*K*K, H_f, W_f).
template <typename T>
Tensor<T> generate_weights(const TvConv<T>& p) {
  return detail::tv_generate(p, p.affine);
}

template <typename T>
Tensor<T> tvconv_forward(const Tensor<T>& o_t1, const TvConv<T>& p) {
  const Shape4 d = o_t1.dims();
  check_shape(d.c == p.channels, "tvconv: channels " + d.str() + " vs " + std::to_string(p.channels));
  Tensor<T> affine = p.affine;
  if (d.h != p.affine.dims().h || d.w != p.affine.dims().w)
    affine = ops::bilinear_resize(p.affine, d.h, d.w);  // off-resolution inference
  Tensor<T> kernels = detail::tv_generate(p, affine);
  return ops::position_varying_depthwise(o_t1, kernels, p.k);
}

// ---------------------------------------------------------------------------
// CB: three MPCM + ELAN stages (spatial /8) followed by TVConv.

template <typename T>
struct CompBlock {
  Mpcm<T> mpcm1;
  Elan<T> elan1;
  Mpcm<T> mpcm2;
  Elan<T> elan2;
  Mpcm<T> mpcm3;
  Elan<T> elan3;
  TvConv<T> tv;
  // Ablation replacement: a standard depthwise conv of matching dims.
  bool use_tvconv = true;
  Tensor<T> dw_weight;  // (C, 1, 3, 3)
  Tensor<T> dw_bias;

  static CompBlock make(Index cin, Index cout, Index feat_h, Index feat_w, bool use_tvconv, Rng& rng) {
    CompBlock p;
    p.mpcm1 = Mpcm<T>::make_default(cin, rng);
    p.elan1 = Elan<T>::make(cin, cin / 4, cin, 2, rng);
    p.mpcm2 = Mpcm<T>::make_default(cin, rng);
    p.elan2 = Elan<T>::make(cin, cin / 2, cout, 2, rng);
    p.mpcm3 = Mpcm<T>::make_default(cout, rng);
    p.elan3 = Elan<T>::make(cout, cout / 4, cout, 2, rng);
    p.use_tvconv = use_tvconv;
    if (use_tvconv) {
      p.tv = TvConv<T>::make(cout, feat_h, feat_w, rng);
    } else {
      p.dw_weight = init::fan_in_uniform<T>(Shape4{cout, 1, 3, 3}, rng);
      p.dw_bias = Tensor<T>::zeros(Shape4{cout, 1, 1, 1});
    }
    return p;
  }

  Index out_channels() const { return elan3.out_channels(); }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    mpcm1.collect(prefix + ".mpcm1", out);
    elan1.collect(prefix + ".elan1", out);
    mpcm2.collect(prefix + ".mpcm2", out);
    elan2.collect(prefix + ".elan2", out);
    mpcm3.collect(prefix + ".mpcm3", out);
    elan3.collect(prefix + ".elan3", out);
    if (use_tvconv) {
      tv.collect(prefix + ".tv", out);
    } else {
      out.push_back({prefix + ".dw.weight", &dw_weight, true, 4});
      out.push_back({prefix + ".dw.bias", &dw_bias, true, 1});
    }
  }
};

template <typename T>
Tensor<T> cb_forward(const Tensor<T>& o_mirb, const CompBlock<T>& p, Mode mode) {
  check_shape(o_mirb.dims().h % 8 == 0 && o_mirb.dims().w % 8 == 0,
              "cb: H and W must be divisible by 8, got " + o_mirb.dims().str());
  Tensor<T> y = elan_forward(mpcm_forward(o_mirb, p.mpcm1, mode), p.elan1, mode);
  y = elan_forward(mpcm_forward(y, p.mpcm2, mode), p.elan2, mode);
  y = elan_forward(mpcm_forward(y, p.mpcm3, mode), p.elan3, mode);
  if (p.use_tvconv) return tvconv_forward(y, p.tv);
  ops::ConvDesc d;
  d.pad_h = d.pad_w = 1;
  d.groups = p.dw_weight.dims().n;
  return ops::conv2d(y, p.dw_weight, &p.dw_bias, d);
}

}  // namespace dtnet
