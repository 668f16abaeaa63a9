#pragma once

#include <string>
#include <vector>

#include "dtnet/blocks.hpp"

namespace dtnet {

// Dynamic convolutional layer: multiplicative weights generated from the
// input itself. A 3x3 spatial context extractor and a width-3 channel
// context extractor (global average pool + conv across the channel axis)
// are summed, refined by a 1x1 conv and multiplied back onto the input.
template <typename T>
struct Dcl {
  Tensor<T> sce_weight;   // (C, C, 3, 3)
  Tensor<T> sce_bias;     // (C,1,1,1)
  Tensor<T> cce_weight;   // (1, 1, 3, 1): slides across the channel axis
  Tensor<T> cce_bias;     // (1,1,1,1)
  Tensor<T> fuse_weight;  // (C, C, 1, 1)
  Tensor<T> fuse_bias;    // (C,1,1,1)
  bool sigmoid_gate = false;  // optional bounding of the dynamic weights

  static Dcl make(Index channels, Rng& rng) {
    Dcl p;
    p.sce_weight = init::fan_in_uniform<T>(Shape4{channels, channels, 3, 3}, rng);
    p.sce_bias = Tensor<T>::zeros(Shape4{channels, 1, 1, 1});
    p.cce_weight = init::fan_in_uniform<T>(Shape4{1, 1, 3, 1}, rng);
    p.cce_bias = Tensor<T>::zeros(Shape4{1, 1, 1, 1});
    p.fuse_weight = init::fan_in_uniform<T>(Shape4{channels, channels, 1, 1}, rng);
    // Unit bias keeps the dynamic weights near identity at initialization.
    p.fuse_bias = Tensor<T>::ones(Shape4{channels, 1, 1, 1});
    return p;
  }

  Index channels() const { return sce_weight.dims().n; }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    out.push_back({prefix + ".sce.weight", &sce_weight, true, 4});
    out.push_back({prefix + ".sce.bias", &sce_bias, true, 1});
    out.push_back({prefix + ".cce.weight", &cce_weight, true, 1});
    out.push_back({prefix + ".cce.bias", &cce_bias, true, 1});
    out.push_back({prefix + ".fuse.weight", &fuse_weight, true, 4});
    out.push_back({prefix + ".fuse.bias", &fuse_bias, true, 1});
  }
};

// Spatial context: 3x3 conv, pad 1, dims preserved.
template <typename T>
Tensor<T> sce(const Tensor<T>& o_t, const Dcl<T>& p) {
  check_shape(o_t.dims().c == p.channels(), "sce: channel mismatch " + o_t.dims().str());
  ops::ConvDesc d;
  d.pad_h = d.pad_w = 1;
  return ops::conv2d(o_t, p.sce_weight, &p.sce_bias, d);
}

// Channel context: global average pool, then a width-3 conv sliding across
// the channel axis (zero padded). Output is (N, C, 1, 1).
template <typename T>
Tensor<T> cce(const Tensor<T>& o_t, const Dcl<T>& p) {
  const Index n = o_t.dims().n;
  const Index c = o_t.dims().c;
  check_shape(c >= 1 && c == p.channels(), "cce: channel mismatch " + o_t.dims().str());
  Tensor<T> pooled = ops::global_avg_pool(o_t);
  Tensor<T> as_row = ops::reshape(pooled, Shape4{n, 1, c, 1});
  ops::ConvDesc d;
  d.pad_h = 1;
  Tensor<T> mixed = ops::conv2d(as_row, p.cce_weight, &p.cce_bias, d);
  return ops::reshape(mixed, Shape4{n, c, 1, 1});
}

// The fused dynamic weight map W_dyn = fuse(sce(x) + cce(x)), with the
// channel context broadcast over H x W before fusion.
template <typename T>
Tensor<T> dcl_dynamic_weights(const Tensor<T>& o_t, const Dcl<T>& p) {
  Tensor<T> mixed = ops::add_nc(sce(o_t, p), cce(o_t, p));
  ops::ConvDesc d;
  Tensor<T> w = ops::conv2d(mixed, p.fuse_weight, &p.fuse_bias, d);
  if (p.sigmoid_gate) w = ops::sigmoid(w);
  return w;
}

template <typename T>
Tensor<T> dcl_forward(const Tensor<T>& o_t, const Dcl<T>& p) {
  return ops::mul(dcl_dynamic_weights(o_t, p), o_t);
}

// ---------------------------------------------------------------------------
// DCB: CBS, CBS (stride 2), then DCL wrapped in BN + SiLU.

template <typename T>
struct Dcb {
  Cbs<T> cbs1;
  Cbs<T> cbs2;
  Dcl<T> dcl;
  Tensor<T> dbs_bn_scale;
  Tensor<T> dbs_bn_shift;
  mutable ops::RunningStats<T> dbs_running;
  // Ablation replacement: a static 3x3 conv of matching dims instead of DCL.
  bool use_dcl = true;
  Tensor<T> static_weight;  // (C, C, 3, 3)
  Tensor<T> static_bias;

  static Dcb make(Index cin, Index width, bool use_dcl, Rng& rng) {
    Dcb p;
    p.cbs1 = Cbs<T>::make(cin, width / 2, 3, 1, rng);
    p.cbs2 = Cbs<T>::make(width / 2, width, 3, 2, rng);
    p.use_dcl = use_dcl;
    if (use_dcl) {
      p.dcl = Dcl<T>::make(width, rng);
    } else {
      p.static_weight = init::fan_in_uniform<T>(Shape4{width, width, 3, 3}, rng);
      p.static_bias = Tensor<T>::zeros(Shape4{width, 1, 1, 1});
    }
    p.dbs_bn_scale = Tensor<T>::ones(Shape4{width, 1, 1, 1});
    p.dbs_bn_shift = Tensor<T>::zeros(Shape4{width, 1, 1, 1});
    p.dbs_running = ops::RunningStats<T>::unit(width);
    return p;
  }

  Index out_channels() const { return cbs2.out_channels(); }

  void collect(const std::string& prefix, std::vector<ParamEntry<T>>& out) {
    cbs1.collect(prefix + ".cbs1", out);
    cbs2.collect(prefix + ".cbs2", out);
    if (use_dcl) {
      dcl.collect(prefix + ".dcl", out);
    } else {
      out.push_back({prefix + ".static.weight", &static_weight, true, 4});
      out.push_back({prefix + ".static.bias", &static_bias, true, 1});
    }
    out.push_back({prefix + ".dbs.bn.scale", &dbs_bn_scale, true, 1});
    out.push_back({prefix + ".dbs.bn.shift", &dbs_bn_shift, true, 1});
    out.push_back({prefix + ".dbs.bn.running_mean", &dbs_running.mean, false, 1});
    out.push_back({prefix + ".dbs.bn.running_var", &dbs_running.var, false, 1});
  }
};

template <typename T>
Tensor<T> dcb_forward(const Tensor<T>& i, const Dcb<T>& p, Mode mode) {
  check_shape(i.dims().c == p.cbs1.weight.dims().c, "dcb: input channels " + i.dims().str());
  Tensor<T> o_t = cbs_forward(cbs_forward(i, p.cbs1, mode), p.cbs2, mode);
  Tensor<T> o;
  if (p.use_dcl) {
    o = dcl_forward(o_t, p.dcl);
  } else {
    ops::ConvDesc d;
    d.pad_h = d.pad_w = 1;
    o = ops::conv2d(o_t, p.static_weight, &p.static_bias, d);
  }
  o = ops::batch_norm(o, p.dbs_bn_scale, p.dbs_bn_shift, p.dbs_running, static_cast<T>(kNormEps),
                      static_cast<T>(kBnMomentum), mode);
  return ops::silu(o);
}

}  // namespace dtnet
