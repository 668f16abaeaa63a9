#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dtnet/common.hpp"
#include "dtnet/rng.hpp"

namespace dtnet {

template <typename T>
class GradTape;

// Dense (N, C, H, W) tensor, row-major, contiguous. Copies share storage;
// values are treated as immutable once an op has consumed them. The mutable
// data() overload exists for initialization, the optimizer and checkpoint
// loading, which own their tensors exclusively.
//
// A tensor is "tracked" when a GradTape registered it (leaf) or produced it
// (op output); tracked tensors carry the tape pointer and their node handle.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape4 dims)
      : dims_(dims), store_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(dims.numel()), T(0))) {
    check_shape(dims.n >= 0 && dims.c >= 0 && dims.h >= 0 && dims.w >= 0, "negative tensor extent " + dims.str());
  }

  static Tensor zeros(Shape4 dims) { return Tensor(dims); }

  static Tensor full(Shape4 dims, T value) {
    Tensor t(dims);
    std::fill(t.store_->begin(), t.store_->end(), value);
    return t;
  }

  static Tensor ones(Shape4 dims) { return full(dims, T(1)); }

  static Tensor scalar(T value) { return full(Shape4{1, 1, 1, 1}, value); }

  static Tensor from_data(Shape4 dims, std::vector<T> data) {
    check_shape(static_cast<Index>(data.size()) == dims.numel(),
                "data length does not match dims " + dims.str());
    Tensor t;
    t.dims_ = dims;
    t.store_ = std::make_shared<std::vector<T>>(std::move(data));
    return t;
  }

  static Tensor uniform(Shape4 dims, Rng& rng, T lo, T hi) {
    Tensor t(dims);
    for (auto& v : *t.store_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape4 dims, Rng& rng, T mean = T(0), T stddev = T(1)) {
    Tensor t(dims);
    for (auto& v : *t.store_) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  const Shape4& dims() const { return dims_; }
  Index numel() const { return dims_.numel(); }
  bool empty() const { return !store_; }

  const T* data() const { return store_->data(); }
  T* data() { return store_->data(); }
  const std::vector<T>& vec() const { return *store_; }

  T at(Index n, Index c, Index h, Index w) const {
    return (*store_)[static_cast<std::size_t>(((n * dims_.c + c) * dims_.h + h) * dims_.w + w)];
  }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of " + std::to_string(numel()) + " elements");
    return (*store_)[0];
  }

  // Deep copy of the payload (detached).
  Tensor clone() const {
    Tensor t;
    t.dims_ = dims_;
    t.store_ = std::make_shared<std::vector<T>>(*store_);
    return t;
  }

  // Same storage, no tape association.
  Tensor detached() const {
    Tensor t;
    t.dims_ = dims_;
    t.store_ = store_;
    return t;
  }

  // Same storage reinterpreted with new dims (row-major order unchanged).
  // Detached; ops::reshape is the tape-aware variant.
  Tensor reshaped(Shape4 nd) const {
    check_shape(nd.numel() == numel(), "reshape " + dims_.str() + " -> " + nd.str());
    Tensor t;
    t.dims_ = nd;
    t.store_ = store_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(store_->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*store_)[i]);
    return Tensor<U>::from_data(dims_, std::move(out));
  }

  bool all_finite() const {
    for (const T v : *store_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool tracked() const { return tape_ != nullptr; }
  GradTape<T>* tape() const { return tape_; }
  Index node() const { return node_; }
  void clear_tape() {
    tape_ = nullptr;
    node_ = -1;
  }

 private:
  Shape4 dims_{};
  std::shared_ptr<std::vector<T>> store_;
  GradTape<T>* tape_ = nullptr;
  Index node_ = -1;

  friend class GradTape<T>;
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward replays them in reverse.
// One tape per training thread; not thread safe.
template <typename T>
class GradTape {
 public:
  using Vjp = std::function<void(GradTape&, const Tensor<T>& upstream)>;

  // Registers a differentiable leaf (parameter or input) on this tape.
  void track(Tensor<T>& t) {
    t.tape_ = this;
    t.node_ = push(t.dims(), "leaf", {}, nullptr);
  }

  // Called by ops to register an output node. Parents may contain -1 entries
  // for untracked inputs; real parents must precede the new node.
  Index push(Shape4 dims, const char* kind, std::vector<Index> parents, Vjp vjp) {
    const Index id = static_cast<Index>(nodes_.size());
    for (const Index p : parents) {
      if (p >= id) throw InternalError("tape node references a later node (cycle)");
    }
    nodes_.push_back(Node{kind, std::move(parents), dims, std::move(vjp)});
    return id;
  }

  // Marks t as the output of node id on this tape.
  void bind(Tensor<T>& t, Index id) {
    t.tape_ = this;
    t.node_ = id;
  }

  Index size() const { return static_cast<Index>(nodes_.size()); }

  // Seeds d(root)/d(root) = 1 and accumulates vector-Jacobian products down
  // the tape. Root must be a scalar tracked by this tape.
  void backward(const Tensor<T>& root) {
    if (!root.tracked() || root.tape() != this) throw UsageError("backward: root is not tracked by this tape");
    if (root.numel() != 1) throw UsageError("backward: root must be a scalar");
    grads_.assign(nodes_.size(), Tensor<T>{});
    grads_[static_cast<std::size_t>(root.node())] = Tensor<T>::ones(root.dims());
    for (Index i = root.node(); i >= 0; --i) {
      const auto& node = nodes_[static_cast<std::size_t>(i)];
      const auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty() || !node.vjp) continue;
      node.vjp(*this, g);
    }
    ran_backward_ = true;
  }

  // Gradient of a tracked tensor. Leaves never touched by backward get zeros
  // of matching dims.
  Tensor<T> grad(const Tensor<T>& t) const {
    if (!t.tracked() || t.tape() != this) throw UsageError("grad: tensor is not tracked by this tape");
    if (!ran_backward_) throw UsageError("grad: backward has not run");
    const auto& g = grads_[static_cast<std::size_t>(t.node())];
    if (g.empty()) return Tensor<T>::zeros(t.dims());
    return g;
  }

  // Adds a contribution into a parent's gradient buffer. node < 0 (untracked
  // parent) is ignored.
  void accumulate(Index node, const Tensor<T>& delta) {
    if (node < 0) return;
    auto& slot = grads_[static_cast<std::size_t>(node)];
    if (slot.empty()) {
      slot = delta.clone();
      return;
    }
    check_shape(slot.dims() == delta.dims(), "gradient dims mismatch at tape node");
    T* dst = slot.data();
    const T* src = delta.data();
    const Index n = delta.numel();
    for (Index i = 0; i < n; ++i) dst[i] += src[i];
  }

 private:
  struct Node {
    const char* kind;
    std::vector<Index> parents;
    Shape4 dims;
    Vjp vjp;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool ran_backward_ = false;
};

// The tape shared by a set of op inputs, or nullptr when none is tracked.
// Mixing tensors from two live tapes in one op is a usage error.
template <typename T>
inline GradTape<T>* common_tape(std::initializer_list<const Tensor<T>*> inputs) {
  GradTape<T>* tape = nullptr;
  for (const Tensor<T>* t : inputs) {
    if (!t || !t->tracked()) continue;
    if (tape && tape != t->tape()) throw UsageError("op inputs tracked by different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace dtnet
