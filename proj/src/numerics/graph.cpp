// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/numerics/graph.hpp"

#include <cstring>
#include <sstream>

namespace gtca::num {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
bool rows_bitwise_equal(const Tensor<T>& a, const Tensor<T>& b, std::size_t r) {
    if (a.cols() != b.cols()) return false;
    return std::memcmp(a.row(r).data(), b.row(r).data(), a.cols() * sizeof(T)) == 0;
}

template bool bitwise_equal<float>(const Tensor<float>&, const Tensor<float>&);
template bool bitwise_equal<double>(const Tensor<double>&, const Tensor<double>&);
template bool rows_bitwise_equal<float>(const Tensor<float>&, const Tensor<float>&, std::size_t);
template bool rows_bitwise_equal<double>(const Tensor<double>&, const Tensor<double>&, std::size_t);

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(std::uint32_t id) const {
    if (id >= nodes_.size()) throw std::out_of_range("graph node id out of range");
    return nodes_[id];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(std::uint32_t id) {
    if (id >= nodes_.size()) throw std::out_of_range("graph node id out of range");
    return nodes_[id];
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    Node n;
    n.op = "constant";
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::parameter(const Parameter<T>& p, bool requires_grad) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
        nodes_[it->second].requires_grad = nodes_[it->second].requires_grad || requires_grad;
        return {this, it->second};
    }
    Node n;
    n.op = "parameter";
    n.external = &p.value;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
    param_nodes_.emplace(&p, id);
    return {this, id};
}

template <typename T>
Var<T> Graph<T>::record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    if (value.has_nan()) throw NumericError(std::string("NaN produced by op '") + op + "'");
    Node n;
    n.op = op;
    n.owned = std::move(value);
    for (const auto& in : inputs) {
        if (&in.graph() != this) throw std::invalid_argument("op input belongs to a different graph");
        n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Graph<T>::grad(std::uint32_t id) {
    Node& n = node(id);
    if (!n.grad_ready) {
        n.grad = Tensor<T>(n.value().shape());
        n.grad_ready = true;
    }
    return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
    if (backward_done_) throw std::logic_error("backward() called twice on the same graph without reset()");
    if (&loss.graph() != this) throw std::invalid_argument("loss belongs to a different graph");
    if (loss.value().size() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_to_string(loss.value().shape()));
    }
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss.id()).fill(T{1});
    for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || !n.grad_ready || !n.backward) continue;
        n.backward(*this, n.grad);
    }
}

template <typename T>
void Graph<T>::reset() {
    nodes_.clear();
    param_nodes_.clear();
    backward_done_ = false;
}

template <typename T>
const Tensor<T>* Graph<T>::gradient(const Parameter<T>& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return nullptr;
    const Node& n = nodes_[it->second];
    return n.grad_ready ? &n.grad : nullptr;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace gtca::num
