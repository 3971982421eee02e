#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

// Differentiable operations. Each one records itself on the active tape when
// a tape is installed and at least one input requires a gradient.

/// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);

/// x[m x n] + bias[n] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// matmul(x, weight) + bias
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// [m x p] ++ [m x q] -> [m x (p+q)]
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Stacks 2-D tensors with equal column counts.
Tensor concat_rows(std::span<const Tensor> parts);
/// Gathers rows of a 2-D tensor (or leading slices of an N-D tensor).
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);

/// x[V x d] -> [V*V x d] with row (i*V + j) = |x_i - x_j|.
Tensor pairwise_absdiff(const Tensor& x);
/// x[V x d] -> [V(V-1)/2 x d], one row |x_i - x_j| per pair i < j in row-major pair order.
Tensor upper_pairs_absdiff(const Tensor& x);
/// x[n x d], row[1 x d] -> [n x d] with row i = |x_i - row|.
Tensor absdiff_rows(const Tensor& x, const Tensor& row);
/// V(V-1)/2 pair values (as produced by upper_pairs_absdiff) -> symmetric
/// [V x V] matrix with a zero diagonal.
Tensor symmetric_from_upper(const Tensor& values, std::size_t v);
/// Square s[n x n] and border[n] -> [(n+1) x (n+1)] with s in the top-left
/// block, border as both the last row and last column, zero corner.
Tensor border_matrix(const Tensor& s, const Tensor& border);

/// Softmax over the last axis of a 1-D or 2-D tensor.
Tensor softmax(const Tensor& x);
/// Row-wise softmax of a square matrix over the off-diagonal entries; the
/// diagonal of the result is zero.
Tensor offdiag_softmax_rows(const Tensor& x);

/// -log softmax(logits)[label] for a 1-D logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t label);
/// Mean cross-entropy over the rows of a [B x n] logit matrix.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Cross-correlation with zero padding. Accepts a single image [C x H x W]
/// or a batch [N x C x H x W]; kernels are [C_out x C_in x kh x kw].
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding);
/// As above plus a per-output-channel bias [C_out].
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// Non-overlapping 2x2 spatial max over the last two axes (odd tails dropped).
/// Ties resolve to the first element in row-major order.
Tensor max_pool2(const Tensor& x);

}  // namespace mft
