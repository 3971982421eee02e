#include "mft/optim.hpp"

#include <cmath>

#include "mft/error.hpp"

namespace mft {

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd" || name == "SGD") return OptimizerKind::SGD;
  if (name == "adam" || name == "Adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

const char* optimizer_kind_name(OptimizerKind kind) { return kind == OptimizerKind::SGD ? "sgd" : "adam"; }

void OptimizerState::reset() {
  first.clear();
  second.clear();
  step = 0;
}

namespace {

void check_inputs(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimizerState& state,
                  bool two_moments) {
  if (params.size() != grads.size())
    throw DimensionError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!grads[i].empty() && grads[i].size() != params[i].numel())
      throw DimensionError("optimizer: gradient " + std::to_string(i) + " has " + std::to_string(grads[i].size()) +
                           " values for parameter of shape " + shape_str(params[i].shape()));
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.numel(), 0.0f);
      if (two_moments) state.second.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.first.size() != params.size() || (two_moments && state.second.size() != params.size()))
    throw DimensionError("optimizer: state tracks " + std::to_string(state.first.size()) + " parameters, step got " +
                         std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.first[i].size() != params[i].numel() || (two_moments && state.second[i].size() != params[i].numel()))
      throw DimensionError("optimizer: state buffer " + std::to_string(i) + " does not match parameter shape " +
                           shape_str(params[i].shape()));
}

}  // namespace

void sgd_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimizerState& state) {
  if (state.config.kind != OptimizerKind::SGD) throw ContractError("sgd_step called with a non-SGD state");
  check_inputs(params, grads, state, false);
  const double lr = state.config.learning_rate, wd = state.config.weight_decay, mu = state.config.momentum;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& buf = state.first[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = (grads[i].empty() ? 0.0 : double(grads[i][j])) + wd * p[j];
      double direction = g;
      if (mu != 0.0) {
        buf[j] = static_cast<float>(mu * buf[j] + g);
        direction = buf[j];
      }
      p[j] = static_cast<float>(p[j] - lr * direction);
    }
    check_finite(p, "sgd_step");
  }
  ++state.step;
}

void adam_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimizerState& state) {
  if (state.config.kind != OptimizerKind::Adam) throw ContractError("adam_step called with a non-Adam state");
  check_inputs(params, grads, state, true);
  ++state.step;
  const double lr = state.config.learning_rate, wd = state.config.weight_decay;
  const double b1 = state.config.beta1, b2 = state.config.beta2, eps = state.config.epsilon;
  const double c1 = 1.0 - std::pow(b1, double(state.step));
  const double c2 = 1.0 - std::pow(b2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i].empty() ? 0.0 : double(grads[i][j]);
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double m_hat = mj / c1;
      const double v_hat = vj / c2;
      const double pj = p[j];
      p[j] = static_cast<float>(pj - lr * m_hat / (std::sqrt(v_hat) + eps) - lr * wd * pj);
    }
    check_finite(p, "adam_step");
  }
}

void optimizer_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimizerState& state) {
  if (state.config.kind == OptimizerKind::SGD)
    sgd_step(params, grads, state);
  else
    adam_step(params, grads, state);
}

void optimizer_step(std::span<Tensor> params, OptimizerState& state) {
  std::vector<std::span<const float>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  optimizer_step(params, grads, state);
}

}  // namespace mft
