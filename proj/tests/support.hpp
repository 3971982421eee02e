#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mft/ops.hpp"
#include "mft/rng.hpp"
#include "mft/tape.hpp"
#include "mft/tensor.hpp"

namespace mft::test {

inline Tensor random_tensor(Shape shape, KeyedRng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Values in [lo, hi] whose magnitudes stay at least `gap` away from zero.
inline Tensor away_from_zero(Shape shape, KeyedRng& rng, double gap = 0.05, double hi = 1.0) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>((rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(gap, hi));
  return Tensor::from(std::move(shape), std::move(v), true);
}

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Norm-wise relative error between the taped gradient and central finite
/// differences of L = sum(w * fn(inputs)) for a fixed random w, taken over
/// all inputs together. L is accumulated in double; the step is the
/// float-representable difference actually applied.
inline double gradient_check(const TensorFn& fn, std::vector<Tensor> inputs, std::uint64_t seed, double h = 1e-3) {
  Tensor probe;
  {
    NoGradScope ng;
    probe = fn(inputs);
  }
  KeyedRng wr({seed, 0x77ULL});
  std::vector<double> w(probe.numel());
  for (auto& x : w) x = wr.uniform(-1.0, 1.0);
  std::vector<float> wf(w.begin(), w.end());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = wf[i];
  const Tensor wt = Tensor::from(probe.shape(), wf);

  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(mul(fn(inputs), wt));
    backward(loss, tape);
  }
  auto objective = [&]() {
    NoGradScope ng;
    const Tensor out = fn(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += w[i] * double(out[i]);
    return s;
  };
  double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
  for (auto& t : inputs) {
    std::vector<float> analytic(t.numel(), 0.0f);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const float orig = data[i];
      const float xp = orig + static_cast<float>(h), xm = orig - static_cast<float>(h);
      data[i] = xp;
      const double lp = objective();
      data[i] = xm;
      const double lm = objective();
      data[i] = orig;
      const double fd = (lp - lm) / (double(xp) - double(xm));
      diff2 += (fd - analytic[i]) * (fd - analytic[i]);
      a2 += double(analytic[i]) * analytic[i];
      f2 += fd * fd;
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(f2), 1e-12});
  return std::sqrt(diff2) / denom;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace mft::test
