// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gtca/numerics/tensor.hpp"

namespace gtca::num {

/// A named trainable (or frozen) tensor owned by a model.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
};

template <typename T>
class Graph;

/// Handle to a node recorded on a Graph.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, std::uint32_t id) : graph_(graph), id_(id) {}

    bool valid() const noexcept { return graph_ != nullptr; }
    Graph<T>& graph() const noexcept { return *graph_; }
    std::uint32_t id() const noexcept { return id_; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    Graph<T>* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

/// Saved-activation tape. Nodes are appended in evaluation order, so reverse
/// creation order is a reverse topological order and backward() visits each
/// node exactly once.
template <typename T>
class Graph {
public:
    /// Receives the graph and the gradient flowing into the node's output.
    using BackwardFn = std::function<void(Graph&, const Tensor<T>& grad_out)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> constant(Tensor<T> value);

    /// Leaf bound to a parameter's storage (no copy). Repeated calls for the same
    /// parameter return the same node. The parameter must outlive the graph.
    Var<T> parameter(const Parameter<T>& p, bool requires_grad);

    /// Appends an op node. Rejects NaN outputs.
    Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward);

    void backward(Var<T> loss);

    /// Drops all nodes and the backward-done flag.
    void reset();

    const Tensor<T>& value(std::uint32_t id) const { return node(id).value(); }
    bool requires_grad(std::uint32_t id) const { return node(id).requires_grad; }

    /// Gradient buffer for a node, zero-initialised on first access.
    Tensor<T>& grad(std::uint32_t id);
    bool has_grad(std::uint32_t id) const { return node(id).grad_ready; }

    /// Gradient accumulated for a parameter leaf, or nullptr if the parameter
    /// did not take part in the graph or received no gradient.
    const Tensor<T>* gradient(const Parameter<T>& p) const;

    std::size_t node_count() const noexcept { return nodes_.size(); }
    const char* op_name(std::uint32_t id) const { return node(id).op; }
    bool backward_done() const noexcept { return backward_done_; }

private:
    struct Node {
        const char* op = "";
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        bool grad_ready = false;
        bool requires_grad = false;
        BackwardFn backward;

        const Tensor<T>& value() const { return external != nullptr ? *external : owned; }
    };

    const Node& node(std::uint32_t id) const;
    Node& node(std::uint32_t id);

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter<T>*, std::uint32_t> param_nodes_;
    bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return graph_->requires_grad(id_);
}

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace gtca::num
