#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

/// Gradient buffers handed to a backward rule: one per node input, null when
/// that input does not require a gradient.
using GradSlots = std::span<std::vector<float>* const>;
using BackwardFn = std::function<void(std::span<const float> out_grad, GradSlots in_grads)>;

/// Ordered record of the operations of one forward pass.
///
/// Ops append to the tape installed on the current thread by a TapeScope.
/// Nodes are recorded in execution order, which is a topological order.
class Tape {
 public:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
              BackwardFn backward);
  std::span<const Node> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

/// Installs a tape as the active one for this thread until destruction.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for this thread until destruction.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Reverse pass from a scalar loss. Accumulates d(loss)/d(leaf) into the grad
/// buffer of every reachable leaf that requires a gradient. Intermediate
/// gradients live only for the duration of the call, so calling this twice
/// accumulates exactly twice the leaf gradients.
void backward(const Tensor& loss, const Tape& tape);

}  // namespace mft
