#include "mft/tape.hpp"

#include <unordered_map>

#include "mft/error.hpp"

namespace mft {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
                  BackwardFn backward) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss, const Tape& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  const auto nodes = tape.nodes();
  bool found = false;
  for (const auto& n : nodes)
    if (n.output.get() == loss.id()) {
      found = true;
      break;
    }
  if (!found) throw ContractError("backward(): loss was not produced on this tape");

  std::unordered_map<const TensorImpl*, std::vector<float>> grads;
  grads[loss.id()] = {1.0f};

  std::vector<std::vector<float>*> slots;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto found_grad = grads.find(it->output.get());
    if (found_grad == grads.end()) continue;
    // Move out so that rehashing during slot creation cannot invalidate it.
    std::vector<float> out_grad = std::move(found_grad->second);
    grads.erase(found_grad);

    slots.assign(it->inputs.size(), nullptr);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const auto& in = it->inputs[i];
      if (!in->requires_grad) continue;
      auto& buf = grads[in.get()];
      if (buf.empty()) buf.assign(in->data.size(), 0.0f);
    }
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const auto& in = it->inputs[i];
      if (in->requires_grad) slots[i] = &grads[in.get()];
    }
    it->backward(out_grad, slots);
  }

  // Whatever remains keyed by a leaf is that leaf's gradient.
  for (const auto& n : nodes)
    for (const auto& in : n.inputs) {
      if (!in->is_leaf || !in->requires_grad) continue;
      auto g = grads.find(in.get());
      if (g == grads.end()) continue;
      if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0f);
      for (std::size_t i = 0; i < g->second.size(); ++i) in->grad[i] += g->second[i];
      grads.erase(g);
    }
}

}  // namespace mft
