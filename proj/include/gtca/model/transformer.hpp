// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Toy pre-norm decoder-only transformer with optional LoRA adapters on the
// attention projections and an optional structural branch.

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gtca/branch/gtca.hpp"
#include "gtca/numerics/graph.hpp"

namespace gtca::model {

struct ModelConfig {
    std::size_t vocab = 512;
    std::size_t d_model = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t max_len = 1024;
    std::size_t mlp_ratio = 4;
    /// Only learned absolute positions are implemented.
    std::string position = "learned";

    std::size_t mlp_dim() const noexcept { return d_model * mlp_ratio; }
    /// Throws InputError on inconsistent values.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct BlockParams {
    num::Parameter<T> ln1_gain, ln1_bias;
    num::Parameter<T> wq, wk, wv, wo;  // d x d, no biases
    num::Parameter<T> ln2_gain, ln2_bias;
    num::Parameter<T> w_up, b_up;      // d x 4d, 4d
    num::Parameter<T> w_down, b_down;  // 4d x d, d
};

/// Low-rank update of one projection W (d x d): W + (alpha / r) * B * A with
/// B (d x r) zero-initialised and A (r x d) ~ N(0, 0.02).
template <typename T>
struct LoraAdapter {
    std::string target;
    std::size_t rank = 0;
    double alpha = 0.0;
    num::Parameter<T> a;
    num::Parameter<T> b;

    double scale() const { return alpha / static_cast<double>(rank); }
    /// W + scale * B * A.
    num::Tensor<T> effective_weight(const num::Tensor<T>& w) const;
};

/// Which parameter groups receive gradients in a forward pass.
struct Trainable {
    bool backbone = false;
    bool lora = false;
    bool structural = false;
};

/// Per-example structure for the branch. `mask` is the token update mask;
/// it is ignored (all ones) when update.mask_enabled is false.
struct StructureInput {
    std::span<const tree::FieldTree> fields;
    std::span<const std::uint8_t> mask;
    branch::StructuralUpdateConfig update;
};

template <typename T>
struct ForwardResult {
    num::Var<T> logits;            // n x V
    num::Var<T> token_embeddings;  // n x d, the chunk pooling source
    /// Layer outputs before / after the structural update. Identical handles
    /// when no structure is supplied.
    std::vector<num::Var<T>> pre_update;
    std::vector<num::Var<T>> hidden;
    /// n x heads per layer; empty without structure.
    std::vector<num::Var<T>> gates;
    std::vector<memory::LayerMemory<T>> memories;
};

template <typename T>
class Transformer {
public:
    Transformer() = default;
    Transformer(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }

    ForwardResult<T> forward(num::Graph<T>& graph, std::span<const std::int32_t> ids,
                             const StructureInput* structure = nullptr, Trainable trainable = {}) const;
    /// Forward without gradients; returns the logits.
    num::Tensor<T> logits(std::span<const std::int32_t> ids, const StructureInput* structure = nullptr) const;

    /// Adds adapters to the named projections, e.g. "layers.0.wq".
    void lora_wrap(const std::vector<std::string>& targets, std::size_t rank, double alpha, std::uint64_t seed);
    /// Every q, k, v, o projection of every layer.
    std::vector<std::string> attention_targets() const;
    const std::map<std::string, LoraAdapter<T>>& adapters() const noexcept { return adapters_; }
    std::map<std::string, LoraAdapter<T>>& adapters() noexcept { return adapters_; }

    void attach_structural_branch(branch::StructuralBranch<T> branch);
    std::optional<branch::StructuralBranch<T>> detach_structural_branch();
    bool has_structural_branch() const noexcept { return branch_ != nullptr; }
    branch::StructuralBranch<T>& structural_branch();
    const branch::StructuralBranch<T>& structural_branch() const;

    std::vector<num::Parameter<T>*> backbone_parameters();
    std::vector<num::Parameter<T>*> lora_parameters();
    std::vector<num::Parameter<T>*> structural_parameters();
    std::vector<const num::Parameter<T>*> backbone_parameters() const;
    std::vector<const num::Parameter<T>*> lora_parameters() const;
    std::vector<const num::Parameter<T>*> structural_parameters() const;

    num::Parameter<T> token_embedding;     // V x d
    num::Parameter<T> position_embedding;  // max_len x d
    std::vector<BlockParams<T>> blocks;
    num::Parameter<T> final_gain, final_bias;
    num::Parameter<T> head;  // d x V

    Transformer(const Transformer& other);
    Transformer& operator=(const Transformer& other);
    Transformer(Transformer&&) noexcept = default;
    Transformer& operator=(Transformer&&) noexcept = default;

private:
    num::Var<T> project(num::Graph<T>& graph, num::Var<T> x, const num::Parameter<T>& w, bool train_base,
                        bool train_lora) const;

    ModelConfig config_;
    std::map<std::string, LoraAdapter<T>> adapters_;
    std::unique_ptr<branch::StructuralBranch<T>> branch_;
};

/// SHA-256 over (name, shape, raw bytes) of each parameter in order.
template <typename T>
std::string parameter_hash(const std::vector<const num::Parameter<T>*>& params);

/// One record per (layer, head, position); requires an attached branch.
template <typename T>
std::vector<branch::GateRecord> inspect_gates(const Transformer<T>& model, std::span<const std::int32_t> ids,
                                              const StructureInput& structure);

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace gtca::model
