// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Gated tree cross-attention: token states attend over chunk memory, each
// head is scaled by a sigmoid gate, heads are merged and projected, and the
// result is added to masked-in rows with coefficient alpha.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "gtca/memory/chunk_memory.hpp"
#include "gtca/numerics/graph.hpp"

namespace gtca::branch {

template <typename T>
struct GtcaLayerParams {
    num::Parameter<T> wq;  // d x d
    num::Parameter<T> wk;  // d x d
    num::Parameter<T> wv;  // d x d
    num::Parameter<T> wg;  // d x heads, no bias
    num::Parameter<T> wo;  // d x d
};

struct StructuralUpdateConfig {
    double alpha = 0.0;
    bool gate_enabled = true;
    bool mask_enabled = true;
};

struct BranchConfig {
    std::size_t d_model = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::uint32_t max_height = memory::kDefaultMaxHeight;
    std::size_t max_chunks = memory::kDefaultMaxChunks;
};

/// All structural parameters: height projections, chunk LayerNorm and the
/// per-layer cross-attention weights.
template <typename T>
struct StructuralBranch {
    BranchConfig config;
    memory::HeightProjections<T> heights;
    std::vector<GtcaLayerParams<T>> layers;

    StructuralBranch() = default;
    /// W_h = identity, W_G = 0 (gates start at 0.5), others N(0, 0.02).
    StructuralBranch(const BranchConfig& config, std::uint64_t seed);

    std::vector<num::Parameter<T>*> parameters();
    std::vector<const num::Parameter<T>*> parameters() const;
};

/// Additive n x m mask: 0 where right_bounds[u] <= i, -inf otherwise.
template <typename T>
num::Tensor<T> chunk_causal_mask(std::size_t n, std::span<const std::size_t> right_bounds);

template <typename T>
struct CrossAttentionOutput {
    num::Var<T> delta;  // n x d
    num::Var<T> gates;  // n x heads, sigmoid values (ones when gating is off)
};

/// Computes delta H for one layer from the pre-normalization stream h_pre.
/// An empty memory gives delta H = 0.
template <typename T>
CrossAttentionOutput<T> gated_cross_attention(num::Graph<T>& graph, num::Var<T> h_pre,
                                              const memory::LayerMemory<T>& memory, const GtcaLayerParams<T>& params,
                                              std::size_t heads, bool gate_enabled, bool trainable);

/// h + alpha * (mask[:, None] * delta); masked-out rows are copied bitwise.
template <typename T>
num::Var<T> apply_structural_update(num::Var<T> h, num::Var<T> delta, std::span<const std::uint8_t> mask, T alpha);

struct GateRecord {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    std::size_t position = 0;
    double gate = 0.0;
    /// Position has mask 0, so the gate has no effect on the output.
    bool inert = false;
};

/// JSON-lines: {"layer":..,"head":..,"position":..,"gate":..,"inert":..}
void write_gate_dump(std::ostream& out, std::span<const GateRecord> records);

extern template struct StructuralBranch<float>;
extern template struct StructuralBranch<double>;

}  // namespace gtca::branch
