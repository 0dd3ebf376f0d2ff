// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/numerics/adamw.hpp"

#include <cmath>
#include <stdexcept>

namespace gtca::num {

template <typename T>
GradientBuffer<T>::GradientBuffer(std::vector<Parameter<T>*> params) : params_(std::move(params)) {}

template <typename T>
void GradientBuffer<T>::accumulate(const Graph<T>& graph, T weight) {
    for (Parameter<T>* p : params_) {
        const Tensor<T>* g = graph.gradient(*p);
        if (g == nullptr) continue;
        auto [it, inserted] = grads_.try_emplace(p, Tensor<T>(p->value.shape()));
        Tensor<T>& acc = it->second;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weight * (*g)[i];
    }
}

template <typename T>
void GradientBuffer<T>::clear() {
    grads_.clear();
}

template <typename T>
const Tensor<T>* GradientBuffer<T>::get(const Parameter<T>* p) const {
    auto it = grads_.find(p);
    return it == grads_.end() ? nullptr : &it->second;
}

template <typename T>
double GradientBuffer<T>::global_norm() const {
    double total = 0.0;
    for (const auto& [p, g] : grads_) {
        for (const T v : g.data()) total += static_cast<double>(v) * v;
    }
    return std::sqrt(total);
}

template <typename T>
void GradientBuffer<T>::scale_all(T factor) {
    for (auto& [p, g] : grads_) {
        for (auto& v : g.data()) v *= factor;
    }
}

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter<T>* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

template <typename T>
void AdamW<T>::step(GradientBuffer<T>& grads, double lr) {
    for (const Parameter<T>* p : params_) {
        const Tensor<T>* g = grads.get(p);
        if (g != nullptr && !g->all_finite()) throw NumericError("non-finite gradient for parameter '" + p->name + "'");
    }
    if (config_.clip_norm > 0.0) {
        const double norm = grads.global_norm();
        if (norm > config_.clip_norm) grads.scale_all(static_cast<T>(config_.clip_norm / norm));
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter<T>* p = params_[k];
        const Tensor<T>* g = grads.get(p);
        const bool decay = p->value.rank() == 2;
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double gi = g != nullptr ? static_cast<double>((*g)[i]) : 0.0;
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double update = mhat / (std::sqrt(vhat) + config_.eps);
            if (decay) update += config_.weight_decay * static_cast<double>(p->value[i]);
            p->value[i] = static_cast<T>(p->value[i] - lr * update);
        }
    }
}

template class GradientBuffer<float>;
template class GradientBuffer<double>;
template class AdamW<float>;
template class AdamW<double>;

}  // namespace gtca::num
