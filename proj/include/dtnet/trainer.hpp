#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dtnet/data.hpp"
#include "dtnet/eval.hpp"
#include "dtnet/loss.hpp"
#include "dtnet/model.hpp"
#include "dtnet/optim.hpp"

namespace dtnet {

// Non-finite loss during training.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(Index step, const std::string& what)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  Index step() const { return step_; }

 private:
  Index step_;
};

struct TrainOptions {
  Index epochs = 1;
  Index batch_size = 8;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  double max_lr = 0.01;
  double momentum = 0.937;
  double weight_decay = 5e-4;
  Index max_steps = 0;   // 0: epochs decide; otherwise a hard cap (and the schedule length)
  Index eval_limit = 0;  // cap on images scored per epoch (0: all)
  bool verbose = false;
};

struct EpochRecord {
  Index epoch = 0;
  double lr = 0;
  double box = 0;
  double obj = 0;
  double cls = 0;
  double total = 0;
  double map50 = 0;
  double map5095 = 0;
};

// Deterministic SGD loop with the one-cycle schedule. Shuffling, batching and
// parameter updates all derive from opt.seed, so identical inputs reproduce
// identical models bit for bit.
template <typename T>
std::vector<EpochRecord> train_loop(DtNetModel<T>& model, const std::vector<Sample>& train,
                                    const std::vector<Sample>* val, const TrainOptions& opt) {
  if (train.empty()) throw DataError("train_loop: empty dataset");
  if (opt.batch_size < 1) throw ConfigError("train_loop: batch size must be >= 1");
  std::vector<EpochRecord> log;
  if (opt.epochs <= 0) return log;

  const Index n = static_cast<Index>(train.size());
  const Index steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  Index total_steps = opt.epochs * steps_per_epoch;
  if (opt.max_steps > 0) total_steps = std::min(total_steps, opt.max_steps);

  LrSchedule sched;
  sched.max_lr = opt.max_lr;
  sched.total_steps = total_steps;

  OptimState<T> optim;
  optim.momentum = opt.momentum;
  optim.weight_decay = opt.weight_decay;

  const Shape4 img = train[0].image.dims();
  Rng shuffle_rng = Rng(opt.seed).fork(0x5u);

  Index step = 0;
  for (Index epoch = 0; epoch < opt.epochs && step < total_steps; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (Index i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

    double sum_box = 0, sum_obj = 0, sum_cls = 0, sum_total = 0, last_lr = 0;
    Index epoch_steps = 0;
    for (Index off = 0; off < n && step < total_steps; off += opt.batch_size) {
      const Index count = std::min(opt.batch_size, n - off);
      Tensor<T> batch(Shape4{count, 3, img.h, img.w});
      std::vector<std::vector<GtBox>> targets(static_cast<std::size_t>(count));
      for (Index i = 0; i < count; ++i) {
        const Sample& s = train[static_cast<std::size_t>(order[static_cast<std::size_t>(off + i)])];
        check_shape(s.image.dims() == img, "train_loop: mixed image dims in dataset");
        T* dst = batch.data() + i * 3 * img.h * img.w;
        for (Index j = 0; j < s.image.numel(); ++j) dst[j] = static_cast<T>(s.image.data()[j]);
        targets[static_cast<std::size_t>(i)] = s.boxes;
      }

      const double lr = one_cycle_lr(step, sched);
      GradTape<T> tape;
      model.track(tape);
      Tensor<T> raw = dtnet_forward(batch, model, Mode::kTrain);
      LossBreakdown<T> loss = detection_loss(raw, targets, model.cfg, opt.loss_weights);
      if (!std::isfinite(loss.total)) throw DivergenceError(step, "non-finite training loss");
      tape.backward(loss.total_node);

      auto entries = model.params();
      std::vector<Tensor<T>> grads;
      grads.reserve(entries.size());
      for (auto& e : entries)
        grads.push_back(e.trainable ? tape.grad(*e.value) : Tensor<T>{});
      model.detach();
      sgd_step(entries, grads, optim, lr);

      sum_box += loss.box;
      sum_obj += loss.obj;
      sum_cls += loss.cls;
      sum_total += loss.total;
      last_lr = lr;
      ++epoch_steps;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = last_lr;
    rec.box = sum_box / std::max<Index>(1, epoch_steps);
    rec.obj = sum_obj / std::max<Index>(1, epoch_steps);
    rec.cls = sum_cls / std::max<Index>(1, epoch_steps);
    rec.total = sum_total / std::max<Index>(1, epoch_steps);

    const std::vector<Sample>& eval_set = val ? *val : train;
    std::vector<Sample> subset;
    const std::vector<Sample>* scored = &eval_set;
    if (opt.eval_limit > 0 && static_cast<Index>(eval_set.size()) > opt.eval_limit) {
      subset.assign(eval_set.begin(), eval_set.begin() + opt.eval_limit);
      scored = &subset;
    }
    EvalReport rep = evaluate(model, *scored);
    rec.map50 = rep.map50;
    rec.map5095 = rep.map5095;
    log.push_back(rec);
    if (opt.verbose)
      std::printf("epoch %lld  lr %.5f  loss %.4f (box %.4f obj %.4f cls %.4f)  map50 %.4f  map50:95 %.4f\n",
                  static_cast<long long>(rec.epoch), rec.lr, rec.total, rec.box, rec.obj, rec.cls,
                  rec.map50, rec.map5095);
  }
  return log;
}

}  // namespace dtnet
