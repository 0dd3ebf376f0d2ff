// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "gtca/numerics/graph.hpp"

namespace gtca::num {

/// Inclusive row interval [lo, hi].
struct RowSpan {
    std::size_t lo = 0;
    std::size_t hi = 0;
};

/// Multiply-accumulate counter for the dense kernels on this thread. Tests use
/// it to assert the asymptotic cost of a computation.
std::uint64_t& mac_counter();

// ---------------------------------------------------------------------------
// Graph ops. Every op records one node with its own backward rule.
// ---------------------------------------------------------------------------

/// [n x k] * [k x m]. Zero entries of `a` are skipped, so rows of `b` that are
/// only ever multiplied by zero cannot influence the result.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// x [n x c] + bias [c] broadcast over rows.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias);

template <typename T>
Var<T> scale(Var<T> x, std::type_identity_t<T> factor);

/// Elementwise product of equal shapes.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

/// Sum of all elements as a scalar.
template <typename T>
Var<T> sum(Var<T> x);

/// tanh-approximation GELU.
template <typename T>
Var<T> gelu(Var<T> x);

template <typename T>
Var<T> sigmoid(Var<T> x);

/// Row softmax with an optional additive mask of the same shape. -inf mask
/// entries get exactly zero probability; a row with every entry masked
/// returns all zeros. NaN input throws NumericError.
template <typename T>
Var<T> softmax_rows(Var<T> x, const std::type_identity_t<Tensor<T>>* additive_mask = nullptr);

/// Row-wise LayerNorm with elementwise gain and bias of length d.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, std::type_identity_t<T> eps);

/// Gathers rows of `table` [V x d] for each id.
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids);

/// Mean next-token cross entropy. Targets equal to -1 are ignored. At least
/// one target must be active.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets);

/// Row u of the output is the mean of x rows spans[u].lo ..= spans[u].hi.
template <typename T>
Var<T> span_mean_pool(Var<T> x, std::span<const RowSpan> spans);

/// Row u of the output is x[u] * weights[selector[u]].
template <typename T>
Var<T> rowwise_project(Var<T> x, std::span<const std::size_t> selector, const std::vector<Var<T>>& weights);

template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows);

/// Multi-head scaled dot-product attention. q [n x H*dh], k/v [m x H*dh];
/// mask is an additive [n x m] matrix or null. Output [n x H*dh] with heads
/// merged in order.
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, const std::type_identity_t<Tensor<T>>* additive_mask,
                            std::size_t heads);

/// Scales column block h of x [n x H*dh] by gates(i, h) for every row i.
template <typename T>
Var<T> scale_heads(Var<T> x, Var<T> gates);

/// h + alpha * (mask[:, None] * delta). Rows with mask 0, or every row when
/// alpha == 0, are copied from h untouched.
template <typename T>
Var<T> structural_residual(Var<T> h, Var<T> delta, std::span<const std::uint8_t> mask,
                           std::type_identity_t<T> alpha);

// ---------------------------------------------------------------------------
// Eager helpers on plain tensors (forward only).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Tensor<T>* additive_mask = nullptr);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

/// Row-wise log-softmax accumulated in double.
template <typename T>
Tensor<double> log_softmax_rows(const Tensor<T>& logits);

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace gtca::num
