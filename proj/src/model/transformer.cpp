// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/model/transformer.hpp"

#include <limits>

#include "gtca/numerics/ops.hpp"
#include "gtca/util/bytes.hpp"
#include "gtca/util/hash.hpp"
#include "gtca/util/rng.hpp"

namespace gtca::model {

void ModelConfig::validate() const {
    if (vocab == 0 || d_model == 0 || layers == 0 || heads == 0 || max_len == 0 || mlp_ratio == 0) {
        throw InputError("model config: sizes must be positive");
    }
    if (heads * head_dim != d_model) {
        throw InputError("model config: d_model " + std::to_string(d_model) + " != heads " + std::to_string(heads) +
                         " x head_dim " + std::to_string(head_dim));
    }
    if (position != "learned") throw InputError("model config: unsupported position scheme '" + position + "'");
}

namespace {

template <typename T>
num::Tensor<T> normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    num::Tensor<T> t({rows, cols});
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * 0.02);
    return t;
}

template <typename T>
num::Tensor<T> causal_mask(std::size_t n) {
    num::Tensor<T> mask({n, n});
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) mask(i, j) = neg_inf;
    return mask;
}

}  // namespace

template <typename T>
num::Tensor<T> LoraAdapter<T>::effective_weight(const num::Tensor<T>& w) const {
    num::Tensor<T> ba = num::matmul(b.value, a.value);
    num::Tensor<T> out = w;
    const T s = static_cast<T>(scale());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * ba[i];
    return out;
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(seed, "backbone.init"));
    const std::size_t d = config_.d_model;
    const std::size_t f = config_.mlp_dim();
    token_embedding = {"tok_emb", normal_matrix<T>(config_.vocab, d, rng)};
    position_embedding = {"pos_emb", normal_matrix<T>(config_.max_len, d, rng)};
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        BlockParams<T> b;
        b.ln1_gain = {p + "ln1.gain", num::Tensor<T>({d}, T{1})};
        b.ln1_bias = {p + "ln1.bias", num::Tensor<T>({d})};
        b.wq = {p + "wq", normal_matrix<T>(d, d, rng)};
        b.wk = {p + "wk", normal_matrix<T>(d, d, rng)};
        b.wv = {p + "wv", normal_matrix<T>(d, d, rng)};
        b.wo = {p + "wo", normal_matrix<T>(d, d, rng)};
        b.ln2_gain = {p + "ln2.gain", num::Tensor<T>({d}, T{1})};
        b.ln2_bias = {p + "ln2.bias", num::Tensor<T>({d})};
        b.w_up = {p + "mlp.w_up", normal_matrix<T>(d, f, rng)};
        b.b_up = {p + "mlp.b_up", num::Tensor<T>({f})};
        b.w_down = {p + "mlp.w_down", normal_matrix<T>(f, d, rng)};
        b.b_down = {p + "mlp.b_down", num::Tensor<T>({d})};
        blocks.push_back(std::move(b));
    }
    final_gain = {"final_ln.gain", num::Tensor<T>({d}, T{1})};
    final_bias = {"final_ln.bias", num::Tensor<T>({d})};
    head = {"head", normal_matrix<T>(d, config_.vocab, rng)};
}

template <typename T>
Transformer<T>::Transformer(const Transformer& other)
    : token_embedding(other.token_embedding),
      position_embedding(other.position_embedding),
      blocks(other.blocks),
      final_gain(other.final_gain),
      final_bias(other.final_bias),
      head(other.head),
      config_(other.config_),
      adapters_(other.adapters_),
      branch_(other.branch_ ? std::make_unique<branch::StructuralBranch<T>>(*other.branch_) : nullptr) {}

template <typename T>
Transformer<T>& Transformer<T>::operator=(const Transformer& other) {
    if (this != &other) *this = Transformer(other);
    return *this;
}

template <typename T>
num::Var<T> Transformer<T>::project(num::Graph<T>& graph, num::Var<T> x, const num::Parameter<T>& w, bool train_base,
                                    bool train_lora) const {
    num::Var<T> y = num::matmul(x, graph.parameter(w, train_base));
    const auto it = adapters_.find(w.name);
    if (it == adapters_.end()) return y;
    const LoraAdapter<T>& ad = it->second;
    num::Var<T> low = num::matmul(num::matmul(x, graph.parameter(ad.b, train_lora)), graph.parameter(ad.a, train_lora));
    return num::add(y, num::scale(low, static_cast<T>(ad.scale())));
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(num::Graph<T>& graph, std::span<const std::int32_t> ids,
                                         const StructureInput* structure, Trainable trainable) const {
    const std::size_t n = ids.size();
    if (n == 0) throw InputError("forward: empty token sequence");
    if (n > config_.max_len) {
        throw InputError("forward: sequence length " + std::to_string(n) + " exceeds max_len " +
                         std::to_string(config_.max_len));
    }
    for (const auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
            throw InputError("forward: unknown token id " + std::to_string(id));
        }
    }
    if (structure != nullptr && branch_ == nullptr) throw InputError("forward: structural branch is detached");

    ForwardResult<T> out;
    const bool tb = trainable.backbone;
    out.token_embeddings = num::embedding(graph.parameter(token_embedding, tb), ids);
    std::vector<std::int32_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int32_t>(i);
    num::Var<T> x = num::add(out.token_embeddings,
                             num::embedding(graph.parameter(position_embedding, tb),
                                            std::span<const std::int32_t>(positions)));

    std::vector<std::uint8_t> mask;
    if (structure != nullptr) {
        if (structure->update.alpha < 0.0) throw InputError("forward: alpha_struct must be >= 0");
        if (structure->update.mask_enabled) {
            if (structure->mask.size() != n) {
                throw InputError("forward: update mask has " + std::to_string(structure->mask.size()) +
                                 " entries for " + std::to_string(n) + " tokens");
            }
            mask.assign(structure->mask.begin(), structure->mask.end());
        } else {
            mask.assign(n, 1);
        }
        out.memories = memory::build_memories(graph, out.token_embeddings, structure->fields, branch_->heights,
                                              trainable.structural, config_.layers, branch_->config.max_chunks);
    }

    const num::Tensor<T> self_mask = causal_mask<T>(n);
    const T eps = T(1e-5);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const BlockParams<T>& b = blocks[l];
        const num::Var<T> h_in = x;
        num::Var<T> a = num::layer_norm(x, graph.parameter(b.ln1_gain, tb), graph.parameter(b.ln1_bias, tb), eps);
        num::Var<T> q = project(graph, a, b.wq, tb, trainable.lora);
        num::Var<T> k = project(graph, a, b.wk, tb, trainable.lora);
        num::Var<T> v = project(graph, a, b.wv, tb, trainable.lora);
        num::Var<T> att = num::multi_head_attention(q, k, v, &self_mask, config_.heads);
        x = num::add(x, project(graph, att, b.wo, tb, trainable.lora));
        num::Var<T> m = num::layer_norm(x, graph.parameter(b.ln2_gain, tb), graph.parameter(b.ln2_bias, tb), eps);
        num::Var<T> up = num::gelu(num::add_bias(num::matmul(m, graph.parameter(b.w_up, tb)), graph.parameter(b.b_up, tb)));
        x = num::add(x, num::add_bias(num::matmul(up, graph.parameter(b.w_down, tb)), graph.parameter(b.b_down, tb)));
        out.pre_update.push_back(x);
        if (structure != nullptr) {
            // delta H reads the layer's input stream and updates its output.
            auto ca = branch::gated_cross_attention(graph, h_in, out.memories[l], branch_->layers[l], config_.heads,
                                                    structure->update.gate_enabled, trainable.structural);
            out.gates.push_back(ca.gates);
            x = branch::apply_structural_update(x, ca.delta, std::span<const std::uint8_t>(mask),
                                                static_cast<T>(structure->update.alpha));
        }
        out.hidden.push_back(x);
    }
    x = num::layer_norm(x, graph.parameter(final_gain, tb), graph.parameter(final_bias, tb), eps);
    out.logits = num::matmul(x, graph.parameter(head, tb));
    return out;
}

template <typename T>
num::Tensor<T> Transformer<T>::logits(std::span<const std::int32_t> ids, const StructureInput* structure) const {
    num::Graph<T> graph;
    return forward(graph, ids, structure).logits.value();
}

template <typename T>
std::vector<std::string> Transformer<T>::attention_targets() const {
    std::vector<std::string> out;
    for (const auto& b : blocks) {
        for (const auto* p : {&b.wq, &b.wk, &b.wv, &b.wo}) out.push_back(p->name);
    }
    return out;
}

template <typename T>
void Transformer<T>::lora_wrap(const std::vector<std::string>& targets, std::size_t rank, double alpha,
                               std::uint64_t seed) {
    if (rank == 0) throw InputError("lora_wrap: rank must be positive");
    std::map<std::string, const num::Parameter<T>*> known;
    for (const auto& b : blocks) {
        for (const auto* p : {&b.wq, &b.wk, &b.wv, &b.wo}) known[p->name] = p;
    }
    for (const auto& t : targets) {
        if (!known.contains(t)) throw InputError("lora_wrap: no projection named '" + t + "'");
        if (adapters_.contains(t)) throw InputError("lora_wrap: '" + t + "' is already wrapped");
    }
    Rng rng(derive_seed(seed, "lora.init"));
    for (const auto& t : targets) {
        const auto& w = known[t]->value;
        LoraAdapter<T> ad;
        ad.target = t;
        ad.rank = rank;
        ad.alpha = alpha;
        ad.a = {"lora." + t + ".A", normal_matrix<T>(rank, w.cols(), rng)};
        ad.b = {"lora." + t + ".B", num::Tensor<T>({w.rows(), rank})};
        adapters_.emplace(t, std::move(ad));
    }
}

template <typename T>
void Transformer<T>::attach_structural_branch(branch::StructuralBranch<T> br) {
    const auto& c = br.config;
    if (c.d_model != config_.d_model || c.layers != config_.layers || c.heads != config_.heads ||
        br.layers.size() != config_.layers || br.heights.dim() != config_.d_model) {
        throw InputError("attach_structural_branch: branch (d=" + std::to_string(c.d_model) +
                         ", L=" + std::to_string(c.layers) + ", heads=" + std::to_string(c.heads) +
                         ") does not match the model (d=" + std::to_string(config_.d_model) +
                         ", L=" + std::to_string(config_.layers) + ", heads=" + std::to_string(config_.heads) + ")");
    }
    branch_ = std::make_unique<branch::StructuralBranch<T>>(std::move(br));
}

template <typename T>
std::optional<branch::StructuralBranch<T>> Transformer<T>::detach_structural_branch() {
    if (!branch_) return std::nullopt;
    std::optional<branch::StructuralBranch<T>> out(std::move(*branch_));
    branch_.reset();
    return out;
}

template <typename T>
branch::StructuralBranch<T>& Transformer<T>::structural_branch() {
    if (!branch_) throw InputError("structural branch is detached");
    return *branch_;
}

template <typename T>
const branch::StructuralBranch<T>& Transformer<T>::structural_branch() const {
    if (!branch_) throw InputError("structural branch is detached");
    return *branch_;
}

template <typename T>
std::vector<num::Parameter<T>*> Transformer<T>::backbone_parameters() {
    std::vector<num::Parameter<T>*> out{&token_embedding, &position_embedding};
    for (auto& b : blocks) {
        for (auto* p : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w_up,
                        &b.b_up, &b.w_down, &b.b_down}) {
            out.push_back(p);
        }
    }
    out.push_back(&final_gain);
    out.push_back(&final_bias);
    out.push_back(&head);
    return out;
}

template <typename T>
std::vector<num::Parameter<T>*> Transformer<T>::lora_parameters() {
    std::vector<num::Parameter<T>*> out;
    for (auto& [name, ad] : adapters_) {
        out.push_back(&ad.a);
        out.push_back(&ad.b);
    }
    return out;
}

template <typename T>
std::vector<num::Parameter<T>*> Transformer<T>::structural_parameters() {
    if (!branch_) return {};
    return branch_->parameters();
}

namespace {

template <typename T>
std::vector<const num::Parameter<T>*> as_const(std::vector<num::Parameter<T>*> v) {
    return {v.begin(), v.end()};
}

}  // namespace

template <typename T>
std::vector<const num::Parameter<T>*> Transformer<T>::backbone_parameters() const {
    return as_const(const_cast<Transformer*>(this)->backbone_parameters());
}

template <typename T>
std::vector<const num::Parameter<T>*> Transformer<T>::lora_parameters() const {
    return as_const(const_cast<Transformer*>(this)->lora_parameters());
}

template <typename T>
std::vector<const num::Parameter<T>*> Transformer<T>::structural_parameters() const {
    return as_const(const_cast<Transformer*>(this)->structural_parameters());
}

template <typename T>
std::string parameter_hash(const std::vector<const num::Parameter<T>*>& params) {
    ByteWriter w;
    for (const auto* p : params) {
        w.put_string(p->name);
        w.put(static_cast<std::uint32_t>(p->value.rank()));
        for (const auto s : p->value.shape()) w.put(static_cast<std::uint64_t>(s));
        const auto* raw = reinterpret_cast<const std::uint8_t*>(p->value.data().data());
        w.put_bytes({raw, p->value.size() * sizeof(T)});
    }
    return sha256_hex(std::span<const std::uint8_t>(w.bytes()));
}

template <typename T>
std::vector<branch::GateRecord> inspect_gates(const Transformer<T>& model, std::span<const std::int32_t> ids,
                                              const StructureInput& structure) {
    if (!model.has_structural_branch()) throw InputError("inspect_gates: structural branch is detached");
    num::Graph<T> graph;
    const ForwardResult<T> fwd = model.forward(graph, ids, &structure);
    std::vector<branch::GateRecord> out;
    const std::size_t n = ids.size();
    for (std::size_t l = 0; l < fwd.gates.size(); ++l) {
        const num::Tensor<T>& g = fwd.gates[l].value();
        for (std::size_t h = 0; h < g.cols(); ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                const bool masked_in = !structure.update.mask_enabled || structure.mask[i] != 0;
                out.push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h), i,
                               static_cast<double>(g(i, h)), !masked_in});
            }
        }
    }
    return out;
}

template struct LoraAdapter<float>;
template struct LoraAdapter<double>;
template class Transformer<float>;
template class Transformer<double>;
template std::string parameter_hash<float>(const std::vector<const num::Parameter<float>*>&);
template std::string parameter_hash<double>(const std::vector<const num::Parameter<double>*>&);
template std::vector<branch::GateRecord> inspect_gates<float>(const Transformer<float>&, std::span<const std::int32_t>,
                                                              const StructureInput&);
template std::vector<branch::GateRecord> inspect_gates<double>(const Transformer<double>&,
                                                               std::span<const std::int32_t>, const StructureInput&);

}  // namespace gtca::model
