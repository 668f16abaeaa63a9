#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtnet/blocks.hpp"

namespace dtnet {

// SGD with momentum and decoupled-from-nothing weight decay:
//   v <- mu * v + g + lambda * w;  w <- w - lr * v
template <typename T>
struct OptimState {
  double momentum = 0.937;
  double weight_decay = 5e-4;
  Index step = 0;
  std::unordered_map<std::string, Tensor<T>> velocity;
};

template <typename T>
void sgd_step(std::vector<ParamEntry<T>>& params, const std::vector<Tensor<T>>& grads, OptimState<T>& st,
              double lr) {
  check_shape(params.size() == grads.size(), "sgd_step: params/grads length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& e = params[i];
    if (!e.trainable) continue;
    const auto& g = grads[i];
    check_shape(g.dims() == e.value->dims(), "sgd_step: gradient dims for " + e.name);
    auto [it, fresh] = st.velocity.try_emplace(e.name, Tensor<T>::zeros(e.value->dims()));
    Tensor<T>& v = it->second;
    check_shape(v.dims() == e.value->dims(), "sgd_step: velocity dims for " + e.name);
    const T mu = static_cast<T>(st.momentum);
    const T wd = static_cast<T>(st.weight_decay);
    const T step = static_cast<T>(lr);
    T* vp = v.data();
    T* wp = e.value->data();
    const T* gp = g.data();
    for (Index j = 0; j < g.numel(); ++j) {
      vp[j] = mu * vp[j] + gp[j] + wd * wp[j];
      wp[j] -= step * vp[j];
    }
  }
  ++st.step;
}

// One-cycle policy: cosine ramp from max_lr/div_factor up to max_lr over the
// warm fraction, then cosine decay to max_lr/final_div.
struct LrSchedule {
  double max_lr = 0.01;
  double warm_frac = 0.3;
  double div_factor = 25.0;
  double final_div = 1e4;
  Index total_steps = 0;
};

inline double one_cycle_lr(Index step, const LrSchedule& s) {
  const double lo = s.max_lr / s.div_factor;
  const double fin = s.max_lr / s.final_div;
  if (s.total_steps <= 0) return fin;
  const Index warm = static_cast<Index>(std::llround(s.warm_frac * static_cast<double>(s.total_steps)));
  if (step < 0) step = 0;
  if (step >= s.total_steps) return fin;
  constexpr double pi = 3.14159265358979323846;
  if (step <= warm) {
    if (warm == 0) return s.max_lr;
    const double t = static_cast<double>(step) / static_cast<double>(warm);
    return lo + (s.max_lr - lo) * (1 - std::cos(pi * t)) / 2;
  }
  const double t = static_cast<double>(step - warm) / static_cast<double>(s.total_steps - warm);
  return fin + (s.max_lr - fin) * (1 + std::cos(pi * t)) / 2;
}

}  // namespace dtnet
