// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/branch/gtca.hpp"

#include <limits>
#include <ostream>
#include <string>

#include "gtca/numerics/ops.hpp"
#include "gtca/util/rng.hpp"
#include "json.hpp"

namespace gtca::branch {

namespace {

template <typename T>
num::Tensor<T> normal_init(num::Shape shape, Rng& rng, double stddev) {
    num::Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

}  // namespace

template <typename T>
StructuralBranch<T>::StructuralBranch(const BranchConfig& cfg, std::uint64_t seed)
    : config(cfg), heights(cfg.d_model, cfg.max_height) {
    if (cfg.heads == 0 || cfg.d_model % cfg.heads != 0) {
        throw std::invalid_argument("structural branch: d_model must be divisible by heads");
    }
    Rng rng(derive_seed(seed, "struct.init"));
    const std::size_t d = cfg.d_model;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "struct.layers." + std::to_string(l) + ".";
        GtcaLayerParams<T> lp;
        lp.wq = {p + "wq", normal_init<T>({d, d}, rng, 0.02)};
        lp.wk = {p + "wk", normal_init<T>({d, d}, rng, 0.02)};
        lp.wv = {p + "wv", normal_init<T>({d, d}, rng, 0.02)};
        lp.wg = {p + "wg", num::Tensor<T>({d, cfg.heads})};
        lp.wo = {p + "wo", normal_init<T>({d, d}, rng, 0.02)};
        layers.push_back(std::move(lp));
    }
}

template <typename T>
std::vector<num::Parameter<T>*> StructuralBranch<T>::parameters() {
    std::vector<num::Parameter<T>*> out = heights.parameters();
    for (auto& lp : layers) {
        for (auto* p : {&lp.wq, &lp.wk, &lp.wv, &lp.wg, &lp.wo}) out.push_back(p);
    }
    return out;
}

template <typename T>
std::vector<const num::Parameter<T>*> StructuralBranch<T>::parameters() const {
    auto mut = const_cast<StructuralBranch<T>*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

template <typename T>
num::Tensor<T> chunk_causal_mask(std::size_t n, std::span<const std::size_t> right_bounds) {
    const std::size_t m = right_bounds.size();
    num::Tensor<T> mask({n, m});
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t u = 0; u < m; ++u) mask(i, u) = right_bounds[u] <= i ? T{0} : neg_inf;
    }
    return mask;
}

template <typename T>
CrossAttentionOutput<T> gated_cross_attention(num::Graph<T>& graph, num::Var<T> h_pre,
                                              const memory::LayerMemory<T>& memory, const GtcaLayerParams<T>& params,
                                              std::size_t heads, bool gate_enabled, bool trainable) {
    const num::Tensor<T>& hv = h_pre.value();
    if (hv.has_nan()) throw num::NumericError("gated_cross_attention: NaN in token states");
    if (memory.size() > 0 && memory.rows.value().has_nan()) {
        throw num::NumericError("gated_cross_attention: NaN in chunk memory");
    }
    const std::size_t n = hv.rows();
    const std::size_t d = hv.cols();
    CrossAttentionOutput<T> out;
    if (gate_enabled) {
        out.gates = num::sigmoid(num::matmul(h_pre, graph.parameter(params.wg, trainable)));
    } else {
        out.gates = graph.constant(num::Tensor<T>({n, heads}, T{1}));
    }
    if (memory.size() == 0) {
        out.delta = graph.constant(num::Tensor<T>({n, d}));
        return out;
    }
    const num::Tensor<T> mask = chunk_causal_mask<T>(n, memory.right_bounds);
    num::Var<T> q = num::matmul(h_pre, graph.parameter(params.wq, trainable));
    num::Var<T> k = num::matmul(memory.rows, graph.parameter(params.wk, trainable));
    num::Var<T> v = num::matmul(memory.rows, graph.parameter(params.wv, trainable));
    num::Var<T> att = num::multi_head_attention(q, k, v, &mask, heads);
    num::Var<T> gated = num::scale_heads(att, out.gates);
    out.delta = num::matmul(gated, graph.parameter(params.wo, trainable));
    return out;
}

template <typename T>
num::Var<T> apply_structural_update(num::Var<T> h, num::Var<T> delta, std::span<const std::uint8_t> mask, T alpha) {
    return num::structural_residual(h, delta, mask, alpha);
}

void write_gate_dump(std::ostream& out, std::span<const GateRecord> records) {
    for (const GateRecord& r : records) {
        nlohmann::json j{{"layer", r.layer}, {"head", r.head}, {"position", r.position}, {"gate", r.gate},
                         {"inert", r.inert}};
        out << j.dump() << '\n';
    }
}

template struct StructuralBranch<float>;
template struct StructuralBranch<double>;

#define GTCA_INSTANTIATE_BRANCH(T)                                                                                \
    template num::Tensor<T> chunk_causal_mask<T>(std::size_t, std::span<const std::size_t>);                      \
    template CrossAttentionOutput<T> gated_cross_attention<T>(num::Graph<T>&, num::Var<T>,                         \
                                                              const memory::LayerMemory<T>&, const GtcaLayerParams<T>&,  \
                                                              std::size_t, bool, bool);                            \
    template num::Var<T> apply_structural_update<T>(num::Var<T>, num::Var<T>, std::span<const std::uint8_t>, T);

GTCA_INSTANTIATE_BRANCH(float)
GTCA_INSTANTIATE_BRANCH(double)

#undef GTCA_INSTANTIATE_BRANCH

}  // namespace gtca::branch
