#include "mft/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>

#include "mft/error.hpp"
#include "mft/tape.hpp"

namespace mft {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

using ImplPtr = std::shared_ptr<TensorImpl>;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Wraps an op result and records it on the active tape when needed.
Tensor finish(Shape shape, std::vector<float> data, std::initializer_list<const Tensor*> inputs, BackwardFn fn,
              const char* name) {
  check_finite(data, name);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (wants_grad(inputs)) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    std::vector<ImplPtr> ins;
    ins.reserve(inputs.size());
    for (const Tensor* t : inputs) ins.push_back(t->impl());
    active_tape()->record(std::move(ins), impl, std::move(fn));
  }
  return Tensor::wrap(std::move(impl));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.ndim() != rank)
    throw DimensionError(std::string(op) + ": expected a rank-" + std::to_string(rank) + " tensor, got " +
                         shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  std::vector<float> out(m * n);
  MapR(out.data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
  auto ai = a.impl(), bi = b.impl();
  return finish({m, n}, std::move(out), {&a, &b},
                [ai, bi, m, k, n](std::span<const float> g, GradSlots slots) {
                  CMapR G(g.data(), m, n);
                  if (slots[0]) MapR(slots[0]->data(), m, k).noalias() += G * CMapR(bi->data.data(), k, n).transpose();
                  if (slots[1]) MapR(slots[1]->data(), k, n).noalias() += CMapR(ai->data.data(), m, k).transpose() * G;
                },
                "matmul");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return finish(a.shape(), std::move(out), {&a, &b},
                [](std::span<const float> g, GradSlots slots) {
                  for (auto* s : slots)
                    if (s)
                      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
                },
                "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return finish(a.shape(), std::move(out), {&a, &b},
                [](std::span<const float> g, GradSlots slots) {
                  if (slots[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i];
                  if (slots[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*slots[1])[i] -= g[i];
                },
                "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto ai = a.impl(), bi = b.impl();
  return finish(a.shape(), std::move(out), {&a, &b},
                [ai, bi](std::span<const float> g, GradSlots slots) {
                  if (slots[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i] * bi->data[i];
                  if (slots[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*slots[1])[i] += g[i] * ai->data[i];
                },
                "mul");
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  return finish(x.shape(), std::move(out), {&x},
                [factor](std::span<const float> g, GradSlots slots) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i] * factor;
                },
                "scale");
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n)
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  std::vector<float> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bd[c];
  return finish({m, n}, std::move(out), {&x, &bias},
                [m, n](std::span<const float> g, GradSlots slots) {
                  if (slots[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i];
                  if (slots[1])
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t c = 0; c < n; ++c) (*slots[1])[c] += g[r * n + c];
                },
                "add_row_bias");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(matmul(x, weight), bias);
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  auto xi = x.impl();
  return finish(x.shape(), std::move(out), {&x},
                [xi](std::span<const float> g, GradSlots slots) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (xi->data[i] > 0.0f) (*slots[0])[i] += g[i];
                },
                "relu");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return finish(std::move(shape), std::move(out), {&x},
                [](std::span<const float> g, GradSlots slots) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i];
                },
                "reshape");
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  if (b.dim(0) != m)
    throw DimensionError("concat_cols: row counts differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t w = p + q;
  std::vector<float> out(m * w);
  auto ad = a.data(), bd = b.data();
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(ad.begin() + r * p, p, out.begin() + r * w);
    std::copy_n(bd.begin() + r * q, q, out.begin() + r * w + p);
  }
  return finish({m, w}, std::move(out), {&a, &b},
                [m, p, q, w](std::span<const float> g, GradSlots slots) {
                  for (std::size_t r = 0; r < m; ++r) {
                    if (slots[0])
                      for (std::size_t c = 0; c < p; ++c) (*slots[0])[r * p + c] += g[r * w + c];
                    if (slots[1])
                      for (std::size_t c = 0; c < q; ++c) (*slots[1])[r * q + c] += g[r * w + p + c];
                  }
                },
                "concat_cols");
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
  const std::size_t cols = parts[0].ndim() == 2 ? parts[0].dim(1) : 0;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols)
      throw DimensionError("concat_rows: column counts differ (" + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()) + ")");
    rows += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(rows * cols);
  std::vector<std::size_t> sizes;
  std::vector<ImplPtr> ins;
  bool grad = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
    ins.push_back(p.impl());
    grad = grad || p.requires_grad();
  }
  check_finite(out, "concat_rows");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = {rows, cols};
  impl->data = std::move(out);
  if (grad && active_tape()) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    active_tape()->record(std::move(ins), impl, [sizes](std::span<const float> g, GradSlots slots) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (slots[i])
          for (std::size_t j = 0; j < sizes[i]; ++j) (*slots[i])[j] += g[off + j];
        off += sizes[i];
      }
    });
  }
  return Tensor::wrap(std::move(impl));
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.ndim() < 1) throw DimensionError("select_rows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t stride = x.numel() / n;
  if (rows.empty()) throw ContractError("select_rows: empty row list");
  std::vector<float> out(rows.size() * stride);
  auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n)
      throw IndexError("select_rows: row " + std::to_string(rows[i]) + " out of range for " + shape_str(x.shape()));
    std::copy_n(xd.begin() + rows[i] * stride, stride, out.begin() + i * stride);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return finish(std::move(shape), std::move(out), {&x},
                [idx, stride](std::span<const float> g, GradSlots slots) {
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < stride; ++j) (*slots[0])[idx[i] * stride + j] += g[i * stride + j];
                },
                "select_rows");
}

Tensor pairwise_absdiff(const Tensor& x) {
  require_rank(x, 2, "pairwise_absdiff");
  const std::size_t v = x.dim(0), d = x.dim(1);
  std::vector<float> out(v * v * d);
  auto xd = x.data();
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < v; ++j) {
      float* o = out.data() + (i * v + j) * d;
      const float* xi = xd.data() + i * d;
      const float* xj = xd.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) o[c] = std::fabs(xi[c] - xj[c]);
    }
  auto xi = x.impl();
  return finish({v * v, d}, std::move(out), {&x},
                [xi, v, d](std::span<const float> g, GradSlots slots) {
                  auto& gx = *slots[0];
                  const float* xd = xi->data.data();
                  for (std::size_t i = 0; i < v; ++i)
                    for (std::size_t j = 0; j < v; ++j) {
                      const float* gr = g.data() + (i * v + j) * d;
                      for (std::size_t c = 0; c < d; ++c) {
                        const float diff = xd[i * d + c] - xd[j * d + c];
                        if (diff > 0.0f) {
                          gx[i * d + c] += gr[c];
                          gx[j * d + c] -= gr[c];
                        } else if (diff < 0.0f) {
                          gx[i * d + c] -= gr[c];
                          gx[j * d + c] += gr[c];
                        }
                      }
                    }
                },
                "pairwise_absdiff");
}

Tensor upper_pairs_absdiff(const Tensor& x) {
  require_rank(x, 2, "upper_pairs_absdiff");
  const std::size_t v = x.dim(0), d = x.dim(1);
  if (v < 2) throw DimensionError("upper_pairs_absdiff: need at least 2 rows, got " + shape_str(x.shape()));
  const std::size_t pairs = v * (v - 1) / 2;
  std::vector<float> out(pairs * d);
  auto xd = x.data();
  float* o = out.data();
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = i + 1; j < v; ++j, o += d) {
      const float* xi = xd.data() + i * d;
      const float* xj = xd.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) o[c] = std::fabs(xi[c] - xj[c]);
    }
  auto xi = x.impl();
  return finish({pairs, d}, std::move(out), {&x},
                [xi, v, d](std::span<const float> g, GradSlots slots) {
                  auto& gx = *slots[0];
                  const float* xd = xi->data.data();
                  const float* gr = g.data();
                  for (std::size_t i = 0; i < v; ++i)
                    for (std::size_t j = i + 1; j < v; ++j, gr += d)
                      for (std::size_t c = 0; c < d; ++c) {
                        const float diff = xd[i * d + c] - xd[j * d + c];
                        const float s = diff > 0.0f ? gr[c] : (diff < 0.0f ? -gr[c] : 0.0f);
                        gx[i * d + c] += s;
                        gx[j * d + c] -= s;
                      }
                },
                "upper_pairs_absdiff");
}

Tensor absdiff_rows(const Tensor& x, const Tensor& row) {
  require_rank(x, 2, "absdiff_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (row.numel() != d)
    throw DimensionError("absdiff_rows: row " + shape_str(row.shape()) + " does not match " + shape_str(x.shape()));
  std::vector<float> out(n * d);
  auto xd = x.data();
  auto rd = row.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = std::fabs(xd[i * d + c] - rd[c]);
  auto xi = x.impl(), ri = row.impl();
  return finish({n, d}, std::move(out), {&x, &row},
                [xi, ri, n, d](std::span<const float> g, GradSlots slots) {
                  const float* xd = xi->data.data();
                  const float* rd = ri->data.data();
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < d; ++c) {
                      const float diff = xd[i * d + c] - rd[c];
                      const float s = diff > 0.0f ? g[i * d + c] : (diff < 0.0f ? -g[i * d + c] : 0.0f);
                      if (slots[0]) (*slots[0])[i * d + c] += s;
                      if (slots[1]) (*slots[1])[c] -= s;
                    }
                },
                "absdiff_rows");
}

Tensor symmetric_from_upper(const Tensor& values, std::size_t v) {
  if (v < 2 || values.numel() != v * (v - 1) / 2)
    throw DimensionError("symmetric_from_upper: " + shape_str(values.shape()) + " is not the pair count of " +
                         std::to_string(v) + " vertices");
  std::vector<float> out(v * v, 0.0f);
  auto vd = values.data();
  std::size_t p = 0;
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = i + 1; j < v; ++j, ++p) out[i * v + j] = out[j * v + i] = vd[p];
  return finish({v, v}, std::move(out), {&values},
                [v](std::span<const float> g, GradSlots slots) {
                  auto& gv = *slots[0];
                  std::size_t p = 0;
                  for (std::size_t i = 0; i < v; ++i)
                    for (std::size_t j = i + 1; j < v; ++j, ++p) gv[p] += g[i * v + j] + g[j * v + i];
                },
                "symmetric_from_upper");
}

Tensor border_matrix(const Tensor& s, const Tensor& border) {
  require_rank(s, 2, "border_matrix");
  const std::size_t n = s.dim(0);
  if (s.dim(1) != n || border.numel() != n)
    throw DimensionError("border_matrix: block " + shape_str(s.shape()) + " and border " +
                         shape_str(border.shape()) + " do not fit");
  const std::size_t m = n + 1;
  std::vector<float> out(m * m, 0.0f);
  auto sd = s.data();
  auto bd = border.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(sd.data() + i * n, n, out.data() + i * m);
    out[i * m + n] = bd[i];
    out[n * m + i] = bd[i];
  }
  return finish({m, m}, std::move(out), {&s, &border},
                [n, m](std::span<const float> g, GradSlots slots) {
                  for (std::size_t i = 0; i < n; ++i) {
                    if (slots[0])
                      for (std::size_t j = 0; j < n; ++j) (*slots[0])[i * n + j] += g[i * m + j];
                    if (slots[1]) (*slots[1])[i] += g[i * m + n] + g[n * m + i];
                  }
                },
                "border_matrix");
}

namespace {

void softmax_rows_into(const float* in, float* out, std::size_t rows, std::size_t cols, bool skip_diag) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = in + r * cols;
    float* y = out + r * cols;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (!(skip_diag && c == r)) mx = std::max(mx, x[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (skip_diag && c == r) {
        y[c] = 0.0f;
        continue;
      }
      const double e = std::exp(static_cast<double>(x[c]) - mx);
      y[c] = static_cast<float>(e);
      total += e;
    }
    for (std::size_t c = 0; c < cols; ++c)
      if (!(skip_diag && c == r)) y[c] = static_cast<float>(static_cast<double>(y[c]) / total);
  }
}

Tensor softmax_impl(const Tensor& x, bool offdiag) {
  std::size_t rows = 1, cols = 0;
  if (x.ndim() == 1) {
    cols = x.dim(0);
  } else if (x.ndim() == 2) {
    rows = x.dim(0);
    cols = x.dim(1);
  } else {
    throw DimensionError("softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
  }
  check_finite(x.data(), "softmax input");
  std::vector<float> out(x.numel());
  softmax_rows_into(x.data().data(), out.data(), rows, cols, offdiag);
  auto yi = std::make_shared<std::vector<float>>(out);
  return finish(x.shape(), std::move(out), {&x},
                [yi, rows, cols](std::span<const float> g, GradSlots slots) {
                  const auto& y = *yi;
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += double(g[r * cols + c]) * y[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c) {
                      const std::size_t i = r * cols + c;
                      (*slots[0])[i] += static_cast<float>(y[i] * (g[i] - dot));
                    }
                  }
                },
                offdiag ? "offdiag_softmax_rows" : "softmax");
}

}  // namespace

Tensor softmax(const Tensor& x) { return softmax_impl(x, false); }

Tensor offdiag_softmax_rows(const Tensor& x) {
  require_rank(x, 2, "offdiag_softmax_rows");
  if (x.dim(0) != x.dim(1) || x.dim(0) < 2)
    throw DimensionError("offdiag_softmax_rows: needs a square matrix with at least 2 rows, got " +
                         shape_str(x.shape()));
  return softmax_impl(x, true);
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  require_rank(logits, 1, "cross_entropy");
  const std::size_t n = logits.dim(0);
  if (label >= n)
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range for " + std::to_string(n) +
                     " classes");
  Tensor as_row = reshape(logits, {1, n});
  const std::size_t labels[1] = {label};
  return cross_entropy(as_row, labels);
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                         " rows");
  check_finite(logits.data(), "cross_entropy input");
  auto probs = std::make_shared<std::vector<double>>(b * n);
  double loss = 0.0;
  auto x = logits.data();
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= n)
      throw IndexError("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " +
                       std::to_string(n) + " classes");
    double mx = x[r * n];
    for (std::size_t c = 1; c < n; ++c) mx = std::max<double>(mx, x[r * n + c]);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += std::exp(double(x[r * n + c]) - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < n; ++c) (*probs)[r * n + c] = std::exp(double(x[r * n + c]) - lse);
    loss += lse - x[r * n + labels[r]];
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return finish({1}, {static_cast<float>(loss)}, {&logits},
                [probs, lab, b, n](std::span<const float> g, GradSlots slots) {
                  const double scale = double(g[0]) / double(b);
                  for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t c = 0; c < n; ++c) {
                      const double target = c == lab[r] ? 1.0 : 0.0;
                      (*slots[0])[r * n + c] += static_cast<float>(((*probs)[r * n + c] - target) * scale);
                    }
                },
                "cross_entropy");
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return finish({1}, {static_cast<float>(total)}, {&x},
                [](std::span<const float> g, GradSlots slots) {
                  for (auto& v : *slots[0]) v += g[0];
                },
                "sum");
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double total = 0.0;
  for (float v : x.data()) total += v;
  return finish({1}, {static_cast<float>(total / n)}, {&x},
                [n](std::span<const float> g, GradSlots slots) {
                  const float share = static_cast<float>(g[0] / n);
                  for (auto& v : *slots[0]) v += share;
                },
                "mean");
}

namespace {

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

// cols is [c_in*kh*kw x batch*ho*wo]
void im2col(const float* in, float* cols, const ConvGeometry& g) {
  const std::size_t total_cols = g.batch * g.pixels();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        float* row = cols + ((c * g.kh + ki) * g.kw + kj) * total_cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const float* plane = in + (n * g.c_in + c) * g.h * g.w;
          float* dst = row + n * g.pixels();
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              const bool inside = iy >= 0 && iy < long(g.h) && ix >= 0 && ix < long(g.w);
              dst[oy * g.wo + ox] = inside ? plane[iy * g.w + ix] : 0.0f;
            }
          }
        }
      }
}

void col2im_add(const float* cols, float* in_grad, const ConvGeometry& g) {
  const std::size_t total_cols = g.batch * g.pixels();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const float* row = cols + ((c * g.kh + ki) * g.kw + kj) * total_cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          float* plane = in_grad + (n * g.c_in + c) * g.h * g.w;
          const float* src = row + n * g.pixels();
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= long(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= long(g.w)) continue;
              plane[iy * g.w + ix] += src[oy * g.wo + ox];
            }
          }
        }
      }
}

Tensor conv2d_impl(const Tensor& input, const Tensor& kernels, const Tensor* bias, std::size_t stride,
                   std::size_t padding) {
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  const bool single = input.ndim() == 3;
  if (!single && input.ndim() != 4)
    throw DimensionError("conv2d: input must be [C x H x W] or [N x C x H x W], got " + shape_str(input.shape()));
  require_rank(kernels, 4, "conv2d kernels");
  ConvGeometry g{};
  g.batch = single ? 1 : input.dim(0);
  g.c_in = input.dim(single ? 0 : 1);
  g.h = input.dim(single ? 1 : 2);
  g.w = input.dim(single ? 2 : 3);
  g.c_out = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernels.dim(1) != g.c_in)
    throw DimensionError("conv2d: kernels " + shape_str(kernels.shape()) + " expect " +
                         std::to_string(kernels.dim(1)) + " input channels, input " + shape_str(input.shape()) +
                         " has " + std::to_string(g.c_in));
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding)
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than padded input " +
                         shape_str(input.shape()));
  if (bias) {
    require_rank(*bias, 1, "conv2d bias");
    if (bias->dim(0) != g.c_out)
      throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " does not match " +
                           std::to_string(g.c_out) + " output channels");
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t total_cols = g.batch * g.pixels();
  auto cols = std::make_shared<std::vector<float>>(g.patch() * total_cols);
  im2col(input.data().data(), cols->data(), g);

  MatR prod(g.c_out, total_cols);
  prod.noalias() = CMapR(kernels.data().data(), g.c_out, g.patch()) * CMapR(cols->data(), g.patch(), total_cols);

  std::vector<float> out(g.batch * g.c_out * g.pixels());
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.c_out; ++o) {
      const float b = bias ? bias->data()[o] : 0.0f;
      const float* src = prod.data() + o * total_cols + n * g.pixels();
      float* dst = out.data() + (n * g.c_out + o) * g.pixels();
      for (std::size_t p = 0; p < g.pixels(); ++p) dst[p] = src[p] + b;
    }

  Shape shape = single ? Shape{g.c_out, g.ho, g.wo} : Shape{g.batch, g.c_out, g.ho, g.wo};
  auto ki = kernels.impl();
  auto fn = [cols, ki, g](std::span<const float> grad, GradSlots slots) {
    const std::size_t total_cols = g.batch * g.pixels();
    MatR go(g.c_out, total_cols);
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t o = 0; o < g.c_out; ++o)
        std::copy_n(grad.data() + (n * g.c_out + o) * g.pixels(), g.pixels(),
                    go.data() + o * total_cols + n * g.pixels());
    if (slots[1]) MapR(slots[1]->data(), g.c_out, g.patch()).noalias() += go * CMapR(cols->data(), g.patch(), total_cols).transpose();
    if (slots.size() > 2 && slots[2]) {
      for (std::size_t o = 0; o < g.c_out; ++o) (*slots[2])[o] += go.row(o).sum();
    }
    if (slots[0]) {
      MatR dcols(g.patch(), total_cols);
      dcols.noalias() = CMapR(ki->data.data(), g.c_out, g.patch()).transpose() * go;
      col2im_add(dcols.data(), slots[0]->data(), g);
    }
  };
  if (bias) return finish(std::move(shape), std::move(out), {&input, &kernels, bias}, fn, "conv2d");
  return finish(std::move(shape), std::move(out), {&input, &kernels}, fn, "conv2d");
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  return conv2d_impl(input, kernels, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  return conv2d_impl(input, kernels, &bias, stride, padding);
}

Tensor max_pool2(const Tensor& x) {
  if (x.ndim() < 2) throw DimensionError("max_pool2: needs at least 2 spatial axes, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw DimensionError("max_pool2: spatial extent too small in " + shape_str(x.shape()));
  const std::size_t planes = x.numel() / (h * w);
  std::vector<float> out(planes * ho * wo);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(out.size());
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (xd[i] > xd[best]) best = i;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out[o] = xd[best];
        (*arg)[o] = static_cast<std::uint32_t>(best);
      }
  Shape shape = x.shape();
  shape[shape.size() - 2] = ho;
  shape[shape.size() - 1] = wo;
  return finish(std::move(shape), std::move(out), {&x},
                [arg](std::span<const float> g, GradSlots slots) {
                  for (std::size_t o = 0; o < g.size(); ++o) (*slots[0])[(*arg)[o]] += g[o];
                },
                "max_pool2");
}

}  // namespace mft
