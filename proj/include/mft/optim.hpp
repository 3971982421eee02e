#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

enum class OptimizerKind { SGD, Adam };

OptimizerKind parse_optimizer_kind(const std::string& name);
const char* optimizer_kind_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  float learning_rate = 1e-3f;
  float weight_decay = 0.0f;
  float momentum = 0.0f;  // SGD only
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

/// Per-parameter auxiliary buffers of an optimizer.
///
/// Buffers are created lazily on the first step and must keep matching the
/// parameters passed to later steps, in the same order.
struct OptimizerState {
  OptimizerConfig config;
  std::vector<std::vector<float>> first;   // SGD momentum buffer or Adam m
  std::vector<std::vector<float>> second;  // Adam v
  std::int64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(OptimizerConfig cfg) : config(cfg) {}
  void reset();
};

/// p <- p - lr * (g + wd * p), with an optional heavy-ball momentum buffer.
void sgd_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimizerState& state);

/// Bias-corrected Adam with decoupled weight decay:
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.
void adam_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimizerState& state);

/// Dispatches on state.config.kind. An empty gradient span counts as zero.
void optimizer_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimizerState& state);

/// Uses each parameter's own accumulated grad buffer.
void optimizer_step(std::span<Tensor> params, OptimizerState& state);

}  // namespace mft
