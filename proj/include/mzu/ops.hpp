#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mzu/param_store.hpp"
#include "mzu/tape.hpp"

// Differentiable primitives. Rank-2 ops treat a tensor as rows x cols with
// every leading axis folded into rows; batched ops take rank-3 [G, m, n].
namespace mzu::ops {

// Zero-norm guard shared by cosine, normalize and squash: a vector whose
// norm is at or below this threshold is treated as the zero vector and
// passes no gradient.
inline constexpr double kNormGuard = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// Batched product over leading axis G: op(a)[G,m,k] * op(b)[G,k,n].
template <typename T> Var<T> bmm(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
// a[rows, n] + bias broadcast over rows; bias has n elements.
template <typename T> Var<T> add_bias(Var<T> a, Var<T> bias);
template <typename T> Var<T> scale(Var<T> a, double s);
template <typename T> Var<T> add_scalar(Var<T> a, double s);

template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);

template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <typename T> Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
// Swaps axis `axis` with axis `axis + 1`.
template <typename T> Var<T> swap_axes(Var<T> a, std::size_t axis);

template <typename T> Var<T> softmax_rows(Var<T> a);
template <typename T> Var<T> layer_norm_rows(Var<T> x, Var<T> gain, Var<T> bias, double eps = kLayerNormEps);
// Row-wise x / ||x||, zero rows stay zero.
template <typename T> Var<T> normalize_rows(Var<T> a);
// Row-wise ||x||, shape [rows, 1].
template <typename T> Var<T> l2_norm_rows(Var<T> a);
// Row-wise cosine similarity, shape [rows, 1]; 0 when either row is zero.
template <typename T> Var<T> cosine_rows(Var<T> a, Var<T> b);
// Row-wise capsule squash s * ||s|| / (1 + ||s||^2).
template <typename T> Var<T> squash_rows(Var<T> a);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
// Average over rows: [rows, n] -> [1, n].
template <typename T> Var<T> mean_over_rows(Var<T> a);

template <typename T> Var<T> embedding(Var<T> table, std::span<const int> ids);
// Multiplies by a fixed mask (inverted-dropout scaling already folded in).
template <typename T> Var<T> dropout(Var<T> a, Tensor<T> mask);
// Summed negative log-likelihood (nats) of integer targets under row logits.
template <typename T> Var<T> cross_entropy_sum(Var<T> logits, std::span<const int> targets);

// [G, N, N]: overwrite the diagonal with a constant (no gradient through it).
template <typename T> Var<T> set_diagonal(Var<T> a, double value);
// [G, N, N]: D^-1/2 A D^-1/2 with D_ii = max(sum_j A_ij, min_degree).
template <typename T> Var<T> sym_normalize(Var<T> a, double min_degree);

/// Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate).
/// In evaluation mode (training == false) every entry is 1.
template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double rate, Rng& rng, bool training = true);

/// Plain (non-recorded) layer normalization of one vector.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = kLayerNormEps);

}  // namespace mzu::ops
