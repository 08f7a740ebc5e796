#pragma once

#include <cstdint>
#include <span>

#include "qlab/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and,
// when any input is tracked, records a vector-Jacobian rule on the inputs' tape.
// Binary elementwise ops accept `b` either with the shape of `a` or with a
// shape equal to a trailing suffix of it (broadcast over the leading axes).
namespace qlab::ops {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c);
template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, T c);
/// max(a, floor) elementwise; gradient passes where a >= floor.
template <typename T>
Tensor<T> maximum_scalar(const Tensor<T>& a, T floor);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a);

/// tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
/// Softmax over the last axis; `causal` masks the upper triangle of the
/// trailing square [S, S] matrices.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, bool causal = false);
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));

/// Rows of `table` [V, D] selected by `ids`; result has shape ids_shape + [D].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& ids_shape);

/// Swaps two axes (copying).
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// a[..., M, K] x b[K, N], or batched a[..., M, K] x b[..., K, N] with equal
/// leading axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., in] * w[out, in]^T (+ bias[out]).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> squared_frobenius(const Tensor<T>& x);
/// Mean next-token cross-entropy of logits[..., V] against one target per row.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

/// Round half to even; backward is the identity (straight-through).
template <typename T>
Tensor<T> round_ste(const Tensor<T>& x);
/// Clamp to [lo, hi]; backward passes the gradient only where lo <= x <= hi.
template <typename T>
Tensor<T> clip_ste(const Tensor<T>& x, T lo, T hi);

/// x[R, G] expanded to [R, cols] by repeating entry (r, g) over columns
/// [g * group_size, min((g + 1) * group_size, cols)).
template <typename T>
Tensor<T> repeat_groups(const Tensor<T>& x, std::size_t group_size, std::size_t cols);

}  // namespace qlab::ops
