// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "gtca/numerics/graph.hpp"

namespace gtca::num {

/// Sums parameter gradients over several graphs (one per example in a batch).
template <typename T>
class GradientBuffer {
public:
    explicit GradientBuffer(std::vector<Parameter<T>*> params);

    /// Adds `weight * grad` for every tracked parameter that received a gradient
    /// in `graph`.
    void accumulate(const Graph<T>& graph, T weight = T{1});
    void clear();

    /// Accumulated gradient, or nullptr if none arrived.
    const Tensor<T>* get(const Parameter<T>* p) const;
    const std::vector<Parameter<T>*>& params() const noexcept { return params_; }

    /// L2 norm over every accumulated gradient.
    double global_norm() const;
    void scale_all(T factor);

private:
    std::vector<Parameter<T>*> params_;
    std::unordered_map<const Parameter<T>*, Tensor<T>> grads_;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    /// Global gradient-norm clip; <= 0 disables clipping.
    double clip_norm = 1.0;
};

/// AdamW with decoupled weight decay. Decay applies to matrices only, not to
/// biases or norm gains. Only the parameters given at construction are ever
/// touched.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Parameter<T>*> params, AdamWConfig config);

    /// One update at learning rate `lr`. Parameters without a gradient still
    /// advance their moments with a zero gradient. A non-finite gradient throws
    /// NumericError naming the parameter before anything is modified.
    void step(GradientBuffer<T>& grads, double lr);

    std::uint64_t steps() const noexcept { return t_; }
    const std::vector<Parameter<T>*>& params() const noexcept { return params_; }

private:
    std::vector<Parameter<T>*> params_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t t_ = 0;
};

extern template class GradientBuffer<float>;
extern template class GradientBuffer<double>;
extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace gtca::num
