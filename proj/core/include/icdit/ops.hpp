#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "icdit/tensor.hpp"

namespace icdit {

// Differentiable operations. Every function records onto the current
// thread's Tape when recording is on and an input requires a gradient.
// Shapes are never broadcast except where a function says so.

/// [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// x[n x d] + bias[d], the one broadcast the library supports.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean((a - b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

/// Softmax over the last axis, max-shifted.
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
/// Normalization without the affine part.
Tensor layer_norm(const Tensor& x, double eps = 1e-6);
/// tanh approximation of x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);

/// Stacks [n_i x d] matrices along the token (row) axis.
Tensor concat_tokens(std::span<const Tensor> streams);
/// Inverse of concat_tokens; sizes must sum to x.rows().
std::vector<Tensor> split_tokens(const Tensor& x, std::span<const std::size_t> sizes);
/// Columns [begin, begin + count) of a matrix.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
/// y[r] = x[indices[r]]; gradients scatter-add back.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);

// Row-group ops. `offsets` has G+1 entries; rows [offsets[g], offsets[g+1])
// of x belong to group g, and row g of the [G x d] parameter applies to them.

/// x * (1 + scale[g]) + shift[g].
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale,
                std::span<const std::size_t> offsets);
/// residual + gate[g] * x.
Tensor gated_residual(const Tensor& residual, const Tensor& x, const Tensor& gate,
                      std::span<const std::size_t> offsets);

/// Multi-head scaled dot-product attention within each row group.
/// q, k, v are [N x d]; rows of group g only attend to rows of group g.
/// Scale is 1/sqrt(d / n_heads).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::span<const std::size_t> offsets);

}  // namespace icdit
