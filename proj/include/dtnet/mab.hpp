#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dtnet/blocks.hpp"

namespace dtnet {

namespace ops {

// (N,C,H,W) -> (N*nh*nw, 1, win*win, C): one row of per-pixel channel
// vectors per non-overlapping window. H and W must be multiples of win.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, Index win) {
  const Shape4 d = x.dims();
  check_shape(win >= 1 && d.h % win == 0 && d.w % win == 0,
              "window_partition: " + d.str() + " not divisible by window " + std::to_string(win));
  const Index nh = d.h / win, nw = d.w / win;
  const Index tokens = win * win;
  Tensor<T> y(Shape4{d.n * nh * nw, 1, tokens, d.c});
  const Index hw = d.h * d.w;
  for (Index n = 0; n < d.n; ++n)
    for (Index wh = 0; wh < nh; ++wh)
      for (Index ww = 0; ww < nw; ++ww) {
        const Index b = (n * nh + wh) * nw + ww;
        for (Index ih = 0; ih < win; ++ih)
          for (Index iw = 0; iw < win; ++iw) {
            const Index t = ih * win + iw;
            const Index spatial = (wh * win + ih) * d.w + (ww * win + iw);
            T* dst = y.data() + (b * tokens + t) * d.c;
            const T* src = x.data() + n * d.c * hw + spatial;
            for (Index c = 0; c < d.c; ++c) dst[c] = src[c * hw];
          }
      }
  if (auto* tape = common_tape<T>({&x})) {
    detail::bind_if(tape, y, "window_partition", {x.node()},
                    [x, win](GradTape<T>& t_, const Tensor<T>& g) {
                      const Shape4 d = x.dims();
                      const Index nh = d.h / win, nw = d.w / win, tokens = win * win, hw = d.h * d.w;
                      Tensor<T> gx(d);
                      for (Index n = 0; n < d.n; ++n)
                        for (Index wh = 0; wh < nh; ++wh)
                          for (Index ww = 0; ww < nw; ++ww) {
                            const Index b = (n * nh + wh) * nw + ww;
                            for (Index ih = 0; ih < win; ++ih)
                              for (Index iw = 0; iw < win; ++iw) {
                                const Index t = ih * win + iw;
                                const Index spatial = (wh * win + ih) * d.w + (ww * win + iw);
                                const T* src = g.data() + (b * tokens + t) * d.c;
                                T* dst = gx.data() + n * d.c * hw + spatial;
                                for (Index c = 0; c < d.c; ++c) dst[c * hw] = src[c];
                              }
                          }
                      t_.accumulate(x.node(), gx);
                    });
  }
  return y;
}

// Inverse of window_partition.
template <typename T>
Tensor<T> window_merge(const Tensor<T>& t, Shape4 image, Index win) {
  const Index nh = image.h / win, nw = image.w / win;
  const Index tokens = win * win;
  check_shape(t.dims() == Shape4{image.n * nh * nw, 1, tokens, image.c},
              "window_merge: tokens " + t.dims().str() + " for image " + image.str());
  Tensor<T> y(image);
  const Index hw = image.h * image.w;
  for (Index n = 0; n < image.n; ++n)
    for (Index wh = 0; wh < nh; ++wh)
      for (Index ww = 0; ww < nw; ++ww) {
        const Index b = (n * nh + wh) * nw + ww;
        for (Index ih = 0; ih < win; ++ih)
          for (Index iw = 0; iw < win; ++iw) {
            const Index tk = ih * win + iw;
            const Index spatial = (wh * win + ih) * image.w + (ww * win + iw);
            const T* src = t.data() + (b * tokens + tk) * image.c;
            T* dst = y.data() + n * image.c * hw + spatial;
            for (Index c = 0; c < image.c; ++c) dst[c * hw] = src[c];
          }
      }
  if (auto* tape = common_tape<T>({&t})) {
    detail::bind_if(tape, y, "window_merge", {t.node()},
                    [t, image, win](GradTape<T>& t_, const Tensor<T>& g) {
                      t_.accumulate(t.node(), window_partition(g, win).detached());
                    });
  }
  return y;
}

}  // namespace ops

// ---------------------------------------------------------------------------

struct MabConfig {
  Index window = 8;
  Index heads = 4;
  Index mlp_ratio = 2;
  Index reduction = 16;
  double alpha = 0.01;
  Index depth = 1;
};

// Squeeze-gate-scale channel attention with reduction ratio r.
template <typename T>
struct ChannelAttention {
  Tensor<T> squeeze_weight;  // (C/r, C, 1, 1)
  Tensor<T> squeeze_bias;
  Tensor<T> excite_weight;  // (C, C/r, 1, 1)
  Tensor<T> excite_bias;

  static ChannelAttention make(Index channels, Index reduction, Rng& rng) {
    const Index hidden = std::max<Index>(1, channels / reduction);
    ChannelAttention p;
    p.squeeze_weight = init::fan_in_uniform<T>(Shape4{hidden, channels, 1, 1}, rng);
    p.squeeze_bias = Tensor<T>::zeros(Shape4{hidden, 1, 1, 1});
    p.excite_weight = init::fan_in_uniform<T>(Shape4{channels, hidden, 1, 1}, rng);
    p.excite_bias = Tensor<T>::zeros(Shape4{channels, 1, 1, 1});
    return p;
  }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    out.push_back({prefix + ".squeeze.weight", &squeeze_weight, true, 4});
    out.push_back({prefix + ".squeeze.bias", &squeeze_bias, true, 1});
    out.push_back({prefix + ".excite.weight", &excite_weight, true, 4});
    out.push_back({prefix + ".excite.bias", &excite_bias, true, 1});
  }
};

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const ChannelAttention<T>& p) {
  check_shape(x.dims().c == p.squeeze_weight.dims().c, "channel_attention: channels " + x.dims().str());
  ops::ConvDesc d1;
  Tensor<T> g = ops::global_avg_pool(x);
  g = ops::relu(ops::conv2d(g, p.squeeze_weight, &p.squeeze_bias, d1));
  g = ops::sigmoid(ops::conv2d(g, p.excite_weight, &p.excite_bias, d1));
  return ops::mul_nc(x, g);
}

// ---------------------------------------------------------------------------
// Window-based multi-head self-attention over the per-pixel channel vectors.
// Inputs whose extents are not multiples of the window size are zero padded
// symmetrically and cropped back afterwards.

template <typename T>
struct WindowMsa {
  Tensor<T> wq, wk, wv, wo;  // (1,1,C,C)
  Index heads = 4;
  Index window = 8;

  static WindowMsa make(Index channels, Index window, Index heads, Rng& rng) {
    if (heads < 1 || channels % heads != 0)
      throw ConfigError("window_msa: embed dim " + std::to_string(channels) + " not divisible by heads " +
                        std::to_string(heads));
    const T bound = T(1) / static_cast<T>(std::sqrt(static_cast<double>(channels)));
    WindowMsa p;
    p.wq = Tensor<T>::uniform(Shape4{1, 1, channels, channels}, rng, -bound, bound);
    p.wk = Tensor<T>::uniform(Shape4{1, 1, channels, channels}, rng, -bound, bound);
    p.wv = Tensor<T>::uniform(Shape4{1, 1, channels, channels}, rng, -bound, bound);
    p.wo = Tensor<T>::uniform(Shape4{1, 1, channels, channels}, rng, -bound, bound);
    p.heads = heads;
    p.window = window;
    return p;
  }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    out.push_back({prefix + ".wq", &wq, true, 2});
    out.push_back({prefix + ".wk", &wk, true, 2});
    out.push_back({prefix + ".wv", &wv, true, 2});
    out.push_back({prefix + ".wo", &wo, true, 2});
  }
};

template <typename T>
Tensor<T> window_msa(const Tensor<T>& x, const WindowMsa<T>& p) {
  const Shape4 d = x.dims();
  const Index c = d.c;
  check_shape(c == p.wq.dims().h, "window_msa: channels " + d.str());
  if (c % p.heads != 0) throw ConfigError("window_msa: head-dim mismatch");
  const Index dh = c / p.heads;
  const Index win = p.window;

  const Index pad_h = (win - d.h % win) % win;
  const Index pad_w = (win - d.w % win) % win;
  Tensor<T> xp = x;
  if (pad_h || pad_w) xp = ops::pad2d(x, pad_h / 2, pad_h - pad_h / 2, pad_w / 2, pad_w - pad_w / 2);
  const Shape4 dp = xp.dims();

  Tensor<T> tokens = ops::window_partition(xp, win);  // (B,1,T,C)
  const Index b = tokens.dims().n;
  const Index t = tokens.dims().h;

  auto split_heads = [&](const Tensor<T>& m) {
    return ops::permute(ops::reshape(m, Shape4{b, t, p.heads, dh}), {0, 2, 1, 3});  // (B,h,T,dh)
  };
  Tensor<T> q = split_heads(ops::matmul(tokens, p.wq));
  Tensor<T> k = split_heads(ops::matmul(tokens, p.wk));
  Tensor<T> v = split_heads(ops::matmul(tokens, p.wv));

  Tensor<T> scores = ops::matmul(q, ops::permute(k, {0, 1, 3, 2}));
  scores = ops::scalar_affine(scores, T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh))), T(0));
  Tensor<T> attn = ops::softmax_lastdim(scores);
  Tensor<T> ctx = ops::matmul(attn, v);  // (B,h,T,dh)

  Tensor<T> merged = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), Shape4{b, 1, t, c});
  Tensor<T> out = ops::matmul(merged, p.wo);
  Tensor<T> y = ops::window_merge(out, dp, win);
  if (pad_h || pad_w) y = ops::crop2d(y, pad_h / 2, pad_w / 2, d.h, d.w);
  return y;
}

// ---------------------------------------------------------------------------
// MAB: pre-norm hybrid block. y = x + alpha * CAB(ln1(x)) + WMSA(ln1(x));
// out = y + MLP(ln2(y)).

template <typename T>
struct Mab {
  Tensor<T> ln1_scale, ln1_shift;
  Tensor<T> ln2_scale, ln2_shift;
  ChannelAttention<T> cab;
  WindowMsa<T> wmsa;
  Tensor<T> mlp_w1, mlp_b1;  // (C*ratio, C, 1, 1)
  Tensor<T> mlp_w2, mlp_b2;  // (C, C*ratio, 1, 1)
  T alpha = T(0.01);

  static Mab make(Index channels, const MabConfig& cfg, Rng& rng) {
    Mab p;
    p.ln1_scale = Tensor<T>::ones(Shape4{channels, 1, 1, 1});
    p.ln1_shift = Tensor<T>::zeros(Shape4{channels, 1, 1, 1});
    p.ln2_scale = Tensor<T>::ones(Shape4{channels, 1, 1, 1});
    p.ln2_shift = Tensor<T>::zeros(Shape4{channels, 1, 1, 1});
    p.cab = ChannelAttention<T>::make(channels, cfg.reduction, rng);
    p.wmsa = WindowMsa<T>::make(channels, cfg.window, cfg.heads, rng);
    const Index hidden = channels * cfg.mlp_ratio;
    p.mlp_w1 = init::fan_in_uniform<T>(Shape4{hidden, channels, 1, 1}, rng);
    p.mlp_b1 = Tensor<T>::zeros(Shape4{hidden, 1, 1, 1});
    p.mlp_w2 = init::fan_in_uniform<T>(Shape4{channels, hidden, 1, 1}, rng);
    p.mlp_b2 = Tensor<T>::zeros(Shape4{channels, 1, 1, 1});
    p.alpha = static_cast<T>(cfg.alpha);
    return p;
  }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    out.push_back({prefix + ".ln1.scale", &ln1_scale, true, 1});
    out.push_back({prefix + ".ln1.shift", &ln1_shift, true, 1});
    out.push_back({prefix + ".ln2.scale", &ln2_scale, true, 1});
    out.push_back({prefix + ".ln2.shift", &ln2_shift, true, 1});
    cab.collect(prefix + ".cab", out);
    wmsa.collect(prefix + ".wmsa", out);
    out.push_back({prefix + ".mlp.w1", &mlp_w1, true, 4});
    out.push_back({prefix + ".mlp.b1", &mlp_b1, true, 1});
    out.push_back({prefix + ".mlp.w2", &mlp_w2, true, 4});
    out.push_back({prefix + ".mlp.b2", &mlp_b2, true, 1});
  }
};

template <typename T>
Tensor<T> mab_forward(const Tensor<T>& x, const Mab<T>& p) {
  Tensor<T> n1 = ops::layer_norm(x, p.ln1_scale, p.ln1_shift, static_cast<T>(kNormEps));
  Tensor<T> y = ops::add(x, ops::scalar_affine(channel_attention(n1, p.cab), p.alpha, T(0)));
  y = ops::add(y, window_msa(n1, p.wmsa));
  Tensor<T> n2 = ops::layer_norm(y, p.ln2_scale, p.ln2_shift, static_cast<T>(kNormEps));
  ops::ConvDesc d1;
  Tensor<T> h = ops::silu(ops::conv2d(n2, p.mlp_w1, &p.mlp_b1, d1));
  Tensor<T> m = ops::conv2d(h, p.mlp_w2, &p.mlp_b2, d1);
  return ops::add(y, m);
}

// ---------------------------------------------------------------------------
// MIRB: stride-2 CBS, ELAN (doubling), then a stack of MABs.

template <typename T>
struct Mirb {
  Cbs<T> cbs;
  Elan<T> elan;
  std::vector<Mab<T>> mabs;

  static Mirb make(Index cin, Index cout, const MabConfig& cfg, Rng& rng) {
    Mirb p;
    p.cbs = Cbs<T>::make(cin, cin, 3, 2, rng);
    p.elan = Elan<T>::make(cin, cin / 2, cout, 2, rng);
    for (Index i = 0; i < cfg.depth; ++i) p.mabs.push_back(Mab<T>::make(cout, cfg, rng));
    return p;
  }

  Index out_channels() const { return elan.out_channels(); }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    cbs.collect(prefix + ".cbs", out);
    elan.collect(prefix + ".elan", out);
    for (std::size_t i = 0; i < mabs.size(); ++i) mabs[i].collect(prefix + ".mab" + std::to_string(i), out);
  }
};

template <typename T>
Tensor<T> mirb_forward(const Tensor<T>& o_dcb, const Mirb<T>& p, Mode mode) {
  Tensor<T> y = elan_forward(cbs_forward(o_dcb, p.cbs, mode), p.elan, mode);
  for (const auto& mab : p.mabs) y = mab_forward(y, mab);
  return y;
}

}  // namespace dtnet
