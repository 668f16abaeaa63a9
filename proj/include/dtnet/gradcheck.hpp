#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "dtnet/loss.hpp"
#include "dtnet/model.hpp"
#include "dtnet/trainer.hpp"

// 64-bit finite-difference verification of the backward rules. The forward
// functor is re-evaluated from the current tensor values on every probe, so
// any computation expressible as scalar(params) can be checked.
namespace dtnet {

struct GradcheckResult {
  std::string name;
  double max_rel_err = 0;
};

// Central differences with step h against the tape gradients. Samples up to
// max_samples elements per tensor (deterministically).
inline double finite_diff_max_rel_err(const std::function<Tensor<double>()>& forward,
                                      const std::vector<Tensor<double>*>& inputs, Index max_samples,
                                      std::uint64_t seed, double h = 1e-4) {
  GradTape<double> tape;
  for (auto* p : inputs) tape.track(*p);
  Tensor<double> loss = forward();
  if (loss.numel() != 1) throw UsageError("gradcheck forward must return a scalar");
  tape.backward(loss);
  std::vector<Tensor<double>> grads;
  grads.reserve(inputs.size());
  for (auto* p : inputs) grads.push_back(tape.grad(*p));
  for (auto* p : inputs) p->clear_tape();

  Rng rng(seed);
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double>& p = *inputs[i];
    std::vector<Index> idx;
    if (p.numel() <= max_samples) {
      for (Index j = 0; j < p.numel(); ++j) idx.push_back(j);
    } else {
      for (Index j = 0; j < max_samples; ++j) idx.push_back(rng.uniform_int(0, p.numel() - 1));
    }
    for (const Index j : idx) {
      const double orig = p.data()[j];
      p.data()[j] = orig + h;
      const double f1 = forward().item();
      p.data()[j] = orig - h;
      const double f2 = forward().item();
      p.data()[j] = orig;
      const double numeric = (f1 - f2) / (2 * h);
      const double analytic = grads[i].data()[j];
      const double denom = std::max({1.0, std::abs(numeric), std::abs(analytic)});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

namespace detail {

// Scalar probe: sum(out * r) with a fixed random r catches sign and
// permutation mistakes a plain sum would miss.
inline Tensor<double> probe(const Tensor<double>& out, const Tensor<double>& r) {
  return ops::sum_all(ops::mul(out, r));
}

}  // namespace detail

// Per-block finite-difference suite on tiny shapes. Pass threshold for the
// acceptance gate is 1e-3; individual primitives typically land near 1e-8.
inline std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradcheckResult> results;
  Rng rng(seed);
  using D = Tensor<double>;

  auto record = [&](const std::string& name, double err) { results.push_back({name, err}); };

  {  // conv2d, grouped, strided, padded, with bias
    D x = D::normal(Shape4{2, 4, 6, 5}, rng);
    D w = D::normal(Shape4{6, 2, 3, 3}, rng, 0, 0.5);
    D b = D::normal(Shape4{6, 1, 1, 1}, rng, 0, 0.5);
    ops::ConvDesc desc;
    desc.stride_h = 2;
    desc.stride_w = 1;
    desc.pad_h = desc.pad_w = 1;
    desc.groups = 2;
    D r = D::normal(Shape4{2, 6, 3, 5}, rng);
    record("conv2d", finite_diff_max_rel_err(
                         [&] { return detail::probe(ops::conv2d(x, w, &b, desc), r); }, {&x, &w, &b}, 24, seed));
  }
  {  // batch norm, train mode
    D x = D::normal(Shape4{3, 4, 5, 5}, rng);
    D sc = D::normal(Shape4{4, 1, 1, 1}, rng, 1, 0.2);
    D sh = D::normal(Shape4{4, 1, 1, 1}, rng, 0, 0.2);
    auto run_st = ops::RunningStats<double>::unit(4);
    D r = D::normal(Shape4{3, 4, 5, 5}, rng);
    record("normalize-batch",
           finite_diff_max_rel_err(
               [&] {
                 return detail::probe(
                     ops::batch_norm(x, sc, sh, run_st, kNormEps, kBnMomentum, Mode::kTrain), r);
               },
               {&x, &sc, &sh}, 24, seed));
  }
  {  // layer norm
    D x = D::normal(Shape4{2, 6, 3, 3}, rng);
    D sc = D::normal(Shape4{6, 1, 1, 1}, rng, 1, 0.2);
    D sh = D::normal(Shape4{6, 1, 1, 1}, rng, 0, 0.2);
    D r = D::normal(Shape4{2, 6, 3, 3}, rng);
    record("normalize-layer",
           finite_diff_max_rel_err(
               [&] { return detail::probe(ops::layer_norm(x, sc, sh, kNormEps), r); }, {&x, &sc, &sh}, 24,
               seed));
  }
  {  // activations
    D x = D::normal(Shape4{2, 3, 4, 4}, rng);
    D r = D::normal(Shape4{2, 3, 4, 4}, rng);
    double err = finite_diff_max_rel_err([&] { return detail::probe(ops::silu(x), r); }, {&x}, 48, seed);
    err = std::max(err, finite_diff_max_rel_err([&] { return detail::probe(ops::sigmoid(x), r); }, {&x},
                                                48, seed));
    record("activation", err);
  }
  {  // dcl
    Rng prng = rng.fork(1);
    auto p = Dcl<double>::make(6, prng);
    D x = D::normal(Shape4{2, 6, 5, 5}, rng);
    D r = D::normal(Shape4{2, 6, 5, 5}, rng);
    record("dcl", finite_diff_max_rel_err(
                      [&] { return detail::probe(dcl_forward(x, p), r); },
                      {&x, &p.sce_weight, &p.sce_bias, &p.cce_weight, &p.cce_bias, &p.fuse_weight,
                       &p.fuse_bias},
                      12, seed));
  }
  {  // channel attention
    Rng prng = rng.fork(2);
    auto p = ChannelAttention<double>::make(8, 4, prng);
    D x = D::normal(Shape4{2, 8, 5, 5}, rng);
    D r = D::normal(Shape4{2, 8, 5, 5}, rng);
    record("channel-attention",
           finite_diff_max_rel_err(
               [&] { return detail::probe(channel_attention(x, p), r); },
               {&x, &p.squeeze_weight, &p.squeeze_bias, &p.excite_weight, &p.excite_bias}, 12, seed));
  }
  {  // window MSA, including a padded (non-divisible) extent
    Rng prng = rng.fork(3);
    auto p = WindowMsa<double>::make(8, 2, 2, prng);
    D x = D::normal(Shape4{2, 8, 4, 4}, rng);
    D r = D::normal(Shape4{2, 8, 4, 4}, rng);
    double err = finite_diff_max_rel_err([&] { return detail::probe(window_msa(x, p), r); },
                                         {&x, &p.wq, &p.wk, &p.wv, &p.wo}, 12, seed);
    D x2 = D::normal(Shape4{1, 8, 3, 5}, rng);
    D r2 = D::normal(Shape4{1, 8, 3, 5}, rng);
    err = std::max(err, finite_diff_max_rel_err([&] { return detail::probe(window_msa(x2, p), r2); },
                                                {&x2, &p.wq}, 12, seed));
    record("window-msa", err);
  }
  {  // mab
    Rng prng = rng.fork(4);
    MabConfig cfg;
    cfg.window = 2;
    cfg.heads = 2;
    cfg.reduction = 4;
    auto p = Mab<double>::make(8, cfg, prng);
    D x = D::normal(Shape4{1, 8, 4, 4}, rng);
    D r = D::normal(Shape4{1, 8, 4, 4}, rng);
    std::vector<Tensor<double>*> params = {&x,         &p.ln1_scale, &p.ln1_shift, &p.ln2_scale,
                                           &p.ln2_shift, &p.mlp_w1,   &p.mlp_b1,    &p.mlp_w2,
                                           &p.mlp_b2,  &p.wmsa.wq,  &p.wmsa.wv,   &p.cab.squeeze_weight,
                                           &p.cab.excite_weight};
    record("mab", finite_diff_max_rel_err([&] { return detail::probe(mab_forward(x, p), r); }, params, 8,
                                          seed));
  }
  {  // tvconv
    Rng prng = rng.fork(5);
    auto p = TvConv<double>::make(5, 4, 4, prng, 4, 8);
    D x = D::normal(Shape4{2, 5, 4, 4}, rng);
    D r = D::normal(Shape4{2, 5, 4, 4}, rng);
    std::vector<Tensor<double>*> params = {&x, &p.affine, &p.final_weight, &p.final_bias};
    for (auto& s : p.stages) {
      params.push_back(&s.weight);
      params.push_back(&s.bias);
      params.push_back(&s.ln_scale);
      params.push_back(&s.ln_shift);
    }
    record("tvconv", finite_diff_max_rel_err([&] { return detail::probe(tvconv_forward(x, p), r); },
                                             params, 8, seed));
  }
  {  // head (1x1 conv)
    D x = D::normal(Shape4{1, 8, 2, 2}, rng);
    D w = D::normal(Shape4{18, 8, 1, 1}, rng, 0, 0.5);
    D b = D::normal(Shape4{18, 1, 1, 1}, rng, 0, 0.5);
    ops::ConvDesc desc;
    D r = D::normal(Shape4{1, 18, 2, 2}, rng);
    record("head", finite_diff_max_rel_err(
                       [&] { return detail::probe(ops::conv2d(x, w, &b, desc), r); }, {&x, &w, &b}, 24, seed));
  }
  {  // detection loss wrt the raw head map
    ModelConfig cfg = ModelConfig::make_default(64);
    cfg.num_classes = 3;
    cfg.anchors = {{12, 10}, {28, 20}};
    D raw = D::normal(Shape4{2, cfg.head_channels(), 2, 2}, rng);
    std::vector<std::vector<GtBox>> targets(2);
    targets[0].push_back(GtBox{{20.0, 24.0, 14.0, 11.0}, 1});
    targets[0].push_back(GtBox{{44.0, 40.0, 24.0, 18.0}, 0});
    targets[1].push_back(GtBox{{33.0, 18.0, 16.0, 12.0}, 2});
    record("loss", finite_diff_max_rel_err(
                       [&] { return detection_loss(raw, targets, cfg).total_node; }, {&raw}, 64, seed));
  }
  return results;
}

// Whole-model check: every parameter tensor of a tiny model probed at a few
// sampled elements through forward + loss.
inline GradcheckResult run_full_model_gradcheck(std::uint64_t seed, Index samples_per_tensor = 3) {
  ModelConfig cfg = ModelConfig::make_default(64);
  cfg.widths = {8, 16, 32};
  cfg.num_classes = 3;
  cfg.anchors = {{12, 10}, {28, 22}};
  cfg.mab.window = 4;
  cfg.mab.heads = 2;
  cfg.mab.reduction = 4;
  auto model = DtNetModel<double>::make(cfg, Variant::kFull, seed);

  Rng rng(seed + 17);
  Tensor<double> x = Tensor<double>::uniform(Shape4{2, 3, 64, 64}, rng, 0.0, 1.0);
  std::vector<std::vector<GtBox>> targets(2);
  targets[0].push_back(GtBox{{20.0, 24.0, 15.0, 12.0}, 0});
  targets[0].push_back(GtBox{{44.0, 46.0, 26.0, 20.0}, 2});
  targets[1].push_back(GtBox{{30.0, 20.0, 18.0, 14.0}, 1});

  std::vector<Tensor<double>*> params;
  for (auto& e : model.params())
    if (e.trainable) params.push_back(e.value);
  const double err = finite_diff_max_rel_err(
      [&] { return detection_loss(dtnet_forward(x, model, Mode::kTrain), targets, cfg).total_node; },
      params, samples_per_tensor, seed);
  return {"full-model", err};
}

}  // namespace dtnet
