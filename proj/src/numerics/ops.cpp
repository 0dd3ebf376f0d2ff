// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/numerics/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace gtca::num {

std::uint64_t& mac_counter() {
    thread_local std::uint64_t counter = 0;
    return counter;
}

namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (t.rank() > 2) throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_to_string(t.shape()));
}

template <typename T>
bool is_masked(T v) {
    return std::isinf(v) && v < 0;
}

// out[n x m] += a[n x k] * b[k x m]
template <typename T>
void gemm_acc(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
    mac_counter() += static_cast<std::uint64_t>(n) * k * m;
    for (std::size_t i = 0; i < n; ++i) {
        T* out_row = out + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            if (aip == T{0}) continue;
            const T* b_row = b + p * m;
            for (std::size_t j = 0; j < m; ++j) out_row[j] += aip * b_row[j];
        }
    }
}

// out[n x k] += g[n x m] * b^T, b is [k x m]
template <typename T>
void gemm_nt_acc(const T* g, const T* b, T* out, std::size_t n, std::size_t m, std::size_t k) {
    mac_counter() += static_cast<std::uint64_t>(n) * k * m;
    for (std::size_t i = 0; i < n; ++i) {
        const T* g_row = g + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T* b_row = b + p * m;
            T acc{0};
            for (std::size_t j = 0; j < m; ++j) acc += g_row[j] * b_row[j];
            out[i * k + p] += acc;
        }
    }
}

// out[k x m] += a^T * g, a is [n x k], g is [n x m]
template <typename T>
void gemm_tn_acc(const T* a, const T* g, T* out, std::size_t n, std::size_t k, std::size_t m) {
    mac_counter() += static_cast<std::uint64_t>(n) * k * m;
    for (std::size_t i = 0; i < n; ++i) {
        const T* g_row = g + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            if (aip == T{0}) continue;
            T* out_row = out + p * m;
            for (std::size_t j = 0; j < m; ++j) out_row[j] += aip * g_row[j];
        }
    }
}

// Softmax of one row into `out`; returns false when every entry is masked.
template <typename T>
bool softmax_row(std::span<const T> x, const T* mask, std::span<T> out) {
    double max_v = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < x.size(); ++j) {
        if (mask != nullptr && is_masked(mask[j])) continue;
        const double v = static_cast<double>(x[j]) + (mask != nullptr ? static_cast<double>(mask[j]) : 0.0);
        max_v = std::max(max_v, v);
        any = true;
    }
    if (!any) {
        std::fill(out.begin(), out.end(), T{0});
        return false;
    }
    double total = 0.0;
    thread_local std::vector<double> exps;
    exps.assign(x.size(), 0.0);
    for (std::size_t j = 0; j < x.size(); ++j) {
        if (mask != nullptr && is_masked(mask[j])) continue;
        const double v = static_cast<double>(x[j]) + (mask != nullptr ? static_cast<double>(mask[j]) : 0.0);
        exps[j] = std::exp(v - max_v);
        total += exps[j];
    }
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = static_cast<T>(exps[j] / total);
    return true;
}

template <typename T>
void check_mask_shape(const Tensor<T>* mask, std::size_t rows, std::size_t cols, const char* op) {
    if (mask == nullptr) return;
    if (mask->rows() != rows || mask->cols() != cols || mask->size() != rows * cols) {
        throw ShapeError(std::string(op) + ": mask shape " + shape_to_string(mask->shape()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (mask->has_nan()) throw NumericError(std::string(op) + ": NaN in mask");
}

template <typename T>
T gelu_value(T x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    const double xd = x;
    return static_cast<T>(0.5 * xd * (1.0 + std::tanh(c * (xd + 0.044715 * xd * xd * xd))));
}

template <typename T>
T gelu_grad(T x) {
    constexpr double c = 0.7978845608028654;
    const double xd = x;
    const double t = std::tanh(c * (xd + 0.044715 * xd * xd * xd));
    return static_cast<T>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * xd * xd));
}

template <typename T>
T sigmoid_value(T x) {
    const double xd = x;
    if (xd >= 0) return static_cast<T>(1.0 / (1.0 + std::exp(-xd)));
    const double e = std::exp(xd);
    return static_cast<T>(e / (1.0 + e));
}

struct LayerNormStats {
    std::vector<double> inv_sigma;
};

template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps,
                             Tensor<T>* xhat_out, std::vector<double>* inv_sigma_out) {
    require_matrix(x, "layer_norm");
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (d == 0) throw ShapeError("layer_norm: d must be >= 1");
    if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: gain/bias length must equal d");
    Tensor<T> out(x.shape());
    if (xhat_out != nullptr) *xhat_out = Tensor<T>(x.shape());
    if (inv_sigma_out != nullptr) inv_sigma_out->assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.row(i);
        double mean = 0.0;
        for (const T v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (const T v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double denom = std::sqrt(var + static_cast<double>(eps));
        if (!(denom > 0.0)) throw NumericError("layer_norm: division by zero (zero variance with eps = 0)");
        const double inv = 1.0 / denom;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * inv;
            out(i, j) = static_cast<T>(xh * gain[j] + bias[j]);
            if (xhat_out != nullptr) (*xhat_out)(i, j) = static_cast<T>(xh);
        }
        if (inv_sigma_out != nullptr) (*inv_sigma_out)[i] = inv;
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    }
    Tensor<T> out({a.rows(), b.cols()});
    gemm_acc(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.cols());
    return out;
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Graph<T>& g = a.graph();
    Tensor<T> out = matmul(a.value(), b.value());
    const auto ia = a.id();
    const auto ib = b.id();
    return g.record("matmul", std::move(out), {a, b}, [ia, ib](Graph<T>& g, const Tensor<T>& dout) {
        const Tensor<T>& av = g.value(ia);
        const Tensor<T>& bv = g.value(ib);
        const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
        if (g.requires_grad(ia)) gemm_nt_acc(dout.data().data(), bv.data().data(), g.grad(ia).data().data(), n, m, k);
        if (g.requires_grad(ib)) gemm_tn_acc(av.data().data(), dout.data().data(), g.grad(ib).data().data(), n, k, m);
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    a.value().require_same_shape(b.value(), "add");
    Tensor<T> out = a.value();
    out += b.value();
    const auto ia = a.id();
    const auto ib = b.id();
    return a.graph().record("add", std::move(out), {a, b}, [ia, ib](Graph<T>& g, const Tensor<T>& dout) {
        if (g.requires_grad(ia)) g.grad(ia) += dout;
        if (g.requires_grad(ib)) g.grad(ib) += dout;
    });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& bv = bias.value();
    require_matrix(xv, "add_bias");
    if (bv.size() != xv.cols()) throw ShapeError("add_bias: bias length must equal column count");
    Tensor<T> out = xv;
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        auto row = out.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += bv[j];
    }
    const auto ix = x.id();
    const auto ib = bias.id();
    return x.graph().record("add_bias", std::move(out), {x, bias}, [ix, ib](Graph<T>& g, const Tensor<T>& dout) {
        if (g.requires_grad(ix)) g.grad(ix) += dout;
        if (g.requires_grad(ib)) {
            Tensor<T>& gb = g.grad(ib);
            for (std::size_t i = 0; i < dout.rows(); ++i) {
                const auto row = dout.row(i);
                for (std::size_t j = 0; j < row.size(); ++j) gb[j] += row[j];
            }
        }
    });
}

template <typename T>
Var<T> scale(Var<T> x, std::type_identity_t<T> factor) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v *= factor;
    const auto ix = x.id();
    return x.graph().record("scale", std::move(out), {x}, [ix, factor](Graph<T>& g, const Tensor<T>& dout) {
        Tensor<T>& gx = g.grad(ix);
        for (std::size_t i = 0; i < dout.size(); ++i) gx[i] += factor * dout[i];
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    a.value().require_same_shape(b.value(), "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const auto ia = a.id();
    const auto ib = b.id();
    return a.graph().record("mul", std::move(out), {a, b}, [ia, ib](Graph<T>& g, const Tensor<T>& dout) {
        const Tensor<T>& av = g.value(ia);
        const Tensor<T>& bv = g.value(ib);
        if (g.requires_grad(ia)) {
            Tensor<T>& ga = g.grad(ia);
            for (std::size_t i = 0; i < dout.size(); ++i) ga[i] += dout[i] * bv[i];
        }
        if (g.requires_grad(ib)) {
            Tensor<T>& gb = g.grad(ib);
            for (std::size_t i = 0; i < dout.size(); ++i) gb[i] += dout[i] * av[i];
        }
    });
}

template <typename T>
Var<T> sum(Var<T> x) {
    double total = 0.0;
    for (const T v : x.value().data()) total += v;
    Tensor<T> out(Shape{}, static_cast<T>(total));
    const auto ix = x.id();
    return x.graph().record("sum", std::move(out), {x}, [ix](Graph<T>& g, const Tensor<T>& dout) {
        Tensor<T>& gx = g.grad(ix);
        for (auto& v : gx.data()) v += dout[0];
    });
}

template <typename T>
Var<T> gelu(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v = gelu_value(v);
    const auto ix = x.id();
    return x.graph().record("gelu", std::move(out), {x}, [ix](Graph<T>& g, const Tensor<T>& dout) {
        const Tensor<T>& xv = g.value(ix);
        Tensor<T>& gx = g.grad(ix);
        for (std::size_t i = 0; i < dout.size(); ++i) gx[i] += dout[i] * gelu_grad(xv[i]);
    });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v = sigmoid_value(v);
    const auto ix = x.id();
    const auto self = static_cast<std::uint32_t>(x.graph().node_count());
    return x.graph().record("sigmoid", std::move(out), {x}, [ix, self](Graph<T>& g, const Tensor<T>& dout) {
        const Tensor<T>& yv = g.value(self);
        Tensor<T>& gx = g.grad(ix);
        for (std::size_t i = 0; i < dout.size(); ++i) gx[i] += dout[i] * yv[i] * (T{1} - yv[i]);
    });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Tensor<T>* additive_mask) {
    require_matrix(x, "softmax_rows");
    if (x.cols() == 0) throw ShapeError("softmax_rows: cols must be >= 1");
    if (x.has_nan()) throw NumericError("softmax_rows: NaN in input");
    check_mask_shape(additive_mask, x.rows(), x.cols(), "softmax_rows");
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        softmax_row<T>(x.row(i), additive_mask != nullptr ? additive_mask->row(i).data() : nullptr, out.row(i));
    }
    return out;
}

template <typename T>
Var<T> softmax_rows(Var<T> x, const std::type_identity_t<Tensor<T>>* additive_mask) {
    Tensor<T> out = softmax_rows(x.value(), additive_mask);
    const auto ix = x.id();
    Graph<T>& graph = x.graph();
    // The backward rule reads the op's own output; it is reached through the
    // node id recorded right after this one is created.
    const auto self = static_cast<std::uint32_t>(graph.node_count());
    return graph.record("softmax_rows", std::move(out), {x}, [ix, self](Graph<T>& g, const Tensor<T>& dout) {
        const Tensor<T>& p = g.value(self);
        Tensor<T>& gx = g.grad(ix);
        for (std::size_t i = 0; i < p.rows(); ++i) {
            const auto pr = p.row(i);
            const auto dr = dout.row(i);
            double dot = 0.0;
            for (std::size_t j = 0; j < pr.size(); ++j) dot += static_cast<double>(pr[j]) * dr[j];
            auto gr = gx.row(i);
            for (std::size_t j = 0; j < pr.size(); ++j) gr[j] += static_cast<T>(pr[j] * (dr[j] - dot));
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    return layer_norm_forward<T>(x, gain, bias, eps, nullptr, nullptr);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, std::type_identity_t<T> eps) {
    Tensor<T> xhat;
    std::vector<double> inv_sigma;
    Tensor<T> out = layer_norm_forward(x.value(), gain.value(), bias.value(), eps, &xhat, &inv_sigma);
    const auto ix = x.id();
    const auto ig = gain.id();
    const auto ib = bias.id();
    return x.graph().record(
        "layer_norm", std::move(out), {x, gain, bias},
        [ix, ig, ib, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Graph<T>& g, const Tensor<T>& dout) {
            const Tensor<T>& gv = g.value(ig);
            const std::size_t n = xhat.rows();
            const std::size_t d = xhat.cols();
            if (g.requires_grad(ig)) {
                Tensor<T>& gg = g.grad(ig);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += dout(i, j) * xhat(i, j);
            }
            if (g.requires_grad(ib)) {
                Tensor<T>& gb = g.grad(ib);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += dout(i, j);
            }
            if (g.requires_grad(ix)) {
                Tensor<T>& gx = g.grad(ix);
                for (std::size_t i = 0; i < n; ++i) {
                    double mean_dxh = 0.0;
                    double mean_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(dout(i, j)) * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat(i, j);
                    }
                    mean_dxh /= static_cast<double>(d);
                    mean_dxh_xh /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(dout(i, j)) * gv[j];
                        gx(i, j) += static_cast<T>(inv_sigma[i] * (dxh - mean_dxh - xhat(i, j) * mean_dxh_xh));
                    }
                }
            }
        });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids) {
    const Tensor<T>& tv = table.value();
    require_matrix(tv, "embedding");
    const std::size_t d = tv.cols();
    Tensor<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
            throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                                    std::to_string(tv.rows()));
        }
        const auto src = tv.row(static_cast<std::size_t>(ids[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    const auto it = table.id();
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return table.graph().record("embedding", std::move(out), {table},
                                [it, saved = std::move(saved)](Graph<T>& g, const Tensor<T>& dout) {
                                    Tensor<T>& gt = g.grad(it);
                                    for (std::size_t i = 0; i < saved.size(); ++i) {
                                        auto dst = gt.row(static_cast<std::size_t>(saved[i]));
                                        const auto src = dout.row(i);
                                        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                                    }
                                });
}

template <typename T>
Tensor<double> log_softmax_rows(const Tensor<T>& logits) {
    require_matrix(logits, "log_softmax_rows");
    Tensor<double> out({logits.rows(), logits.cols()});
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        double max_v = -std::numeric_limits<double>::infinity();
        for (const T v : row) max_v = std::max(max_v, static_cast<double>(v));
        double total = 0.0;
        for (const T v : row) total += std::exp(v - max_v);
        const double lse = max_v + std::log(total);
        for (std::size_t j = 0; j < row.size(); ++j) out(i, j) = row[j] - lse;
    }
    return out;
}

namespace {

template <typename T>
std::size_t validate_targets(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    require_matrix(logits, "cross_entropy");
    if (targets.size() != logits.rows()) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
    }
    std::size_t active = 0;
    for (const auto t : targets) {
        if (t == -1) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                                    std::to_string(logits.cols()) + ")");
        }
        ++active;
    }
    if (active == 0) throw std::invalid_argument("cross_entropy: empty target set");
    return active;
}

}  // namespace

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    const std::size_t active = validate_targets(logits, targets);
    const Tensor<double> lp = log_softmax_rows(logits);
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == -1) continue;
        total -= lp(i, static_cast<std::size_t>(targets[i]));
    }
    return static_cast<T>(total / static_cast<double>(active));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets) {
    const std::size_t active = validate_targets(logits.value(), targets);
    const Tensor<double> lp = log_softmax_rows(logits.value());
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == -1) continue;
        total -= lp(i, static_cast<std::size_t>(targets[i]));
    }
    Tensor<T> out(Shape{}, static_cast<T>(total / static_cast<double>(active)));
    const auto il = logits.id();
    std::vector<std::int32_t> saved(targets.begin(), targets.end());
    return logits.graph().record(
        "cross_entropy", std::move(out), {logits},
        [il, lp, saved = std::move(saved), active](Graph<T>& g, const Tensor<T>& dout) {
            Tensor<T>& gl = g.grad(il);
            const double s = static_cast<double>(dout[0]) / static_cast<double>(active);
            for (std::size_t i = 0; i < saved.size(); ++i) {
                if (saved[i] == -1) continue;
                auto row = gl.row(i);
                for (std::size_t j = 0; j < row.size(); ++j) {
                    const double p = std::exp(lp(i, j));
                    const double onehot = (static_cast<std::int32_t>(j) == saved[i]) ? 1.0 : 0.0;
                    row[j] += static_cast<T>(s * (p - onehot));
                }
            }
        });
}

template <typename T>
Var<T> span_mean_pool(Var<T> x, std::span<const RowSpan> spans) {
    const Tensor<T>& xv = x.value();
    require_matrix(xv, "span_mean_pool");
    const std::size_t d = xv.cols();
    Tensor<T> out({spans.size(), d});
    std::vector<double> acc(d);
    for (std::size_t u = 0; u < spans.size(); ++u) {
        const auto [lo, hi] = spans[u];
        if (lo > hi || hi >= xv.rows()) {
            throw std::out_of_range("span_mean_pool: span [" + std::to_string(lo) + "," + std::to_string(hi) +
                                    "] outside " + std::to_string(xv.rows()) + " rows");
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t r = lo; r <= hi; ++r) {
            const auto row = xv.row(r);
            for (std::size_t j = 0; j < d; ++j) acc[j] += row[j];
        }
        const double len = static_cast<double>(hi - lo + 1);
        for (std::size_t j = 0; j < d; ++j) out(u, j) = static_cast<T>(acc[j] / len);
    }
    const auto ix = x.id();
    std::vector<RowSpan> saved(spans.begin(), spans.end());
    return x.graph().record("span_mean_pool", std::move(out), {x},
                            [ix, saved = std::move(saved)](Graph<T>& g, const Tensor<T>& dout) {
                                Tensor<T>& gx = g.grad(ix);
                                for (std::size_t u = 0; u < saved.size(); ++u) {
                                    const T inv = static_cast<T>(1.0 / static_cast<double>(saved[u].hi - saved[u].lo + 1));
                                    const auto src = dout.row(u);
                                    for (std::size_t r = saved[u].lo; r <= saved[u].hi; ++r) {
                                        auto dst = gx.row(r);
                                        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j] * inv;
                                    }
                                }
                            });
}

template <typename T>
Var<T> rowwise_project(Var<T> x, std::span<const std::size_t> selector, const std::vector<Var<T>>& weights) {
    const Tensor<T>& xv = x.value();
    require_matrix(xv, "rowwise_project");
    if (selector.size() != xv.rows()) throw ShapeError("rowwise_project: selector length must equal row count");
    if (weights.empty()) throw std::invalid_argument("rowwise_project: no weight matrices");
    const std::size_t d_in = xv.cols();
    const std::size_t d_out = weights.front().value().cols();
    for (const auto& w : weights) {
        if (w.value().rows() != d_in || w.value().cols() != d_out) {
            throw ShapeError("rowwise_project: weight shape " + shape_to_string(w.value().shape()));
        }
    }
    Tensor<T> out({xv.rows(), d_out});
    for (std::size_t u = 0; u < xv.rows(); ++u) {
        if (selector[u] >= weights.size()) throw std::out_of_range("rowwise_project: selector out of range");
        gemm_acc(xv.row(u).data(), weights[selector[u]].value().data().data(), out.row(u).data(), 1, d_in, d_out);
    }
    std::vector<Var<T>> inputs{x};
    inputs.insert(inputs.end(), weights.begin(), weights.end());
    std::vector<std::uint32_t> wids;
    for (const auto& w : weights) wids.push_back(w.id());
    const auto ix = x.id();
    std::vector<std::size_t> sel(selector.begin(), selector.end());
    return x.graph().record(
        "rowwise_project", std::move(out), inputs,
        [ix, wids = std::move(wids), sel = std::move(sel), d_in, d_out](Graph<T>& g, const Tensor<T>& dout) {
            const Tensor<T>& xv = g.value(ix);
            for (std::size_t u = 0; u < sel.size(); ++u) {
                const auto wid = wids[sel[u]];
                const Tensor<T>& w = g.value(wid);
                if (g.requires_grad(ix)) {
                    gemm_nt_acc(dout.row(u).data(), w.data().data(), g.grad(ix).row(u).data(), 1, d_out, d_in);
                }
                if (g.requires_grad(wid)) {
                    gemm_tn_acc(xv.row(u).data(), dout.row(u).data(), g.grad(wid).data().data(), 1, d_in, d_out);
                }
            }
        });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
    const Tensor<T>& xv = x.value();
    require_matrix(xv, "gather_rows");
    const std::size_t d = xv.cols();
    Tensor<T> out({rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= xv.rows()) throw std::out_of_range("gather_rows: row index out of range");
        const auto src = xv.row(rows[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    const auto ix = x.id();
    std::vector<std::size_t> saved(rows.begin(), rows.end());
    return x.graph().record("gather_rows", std::move(out), {x},
                            [ix, saved = std::move(saved)](Graph<T>& g, const Tensor<T>& dout) {
                                Tensor<T>& gx = g.grad(ix);
                                for (std::size_t r = 0; r < saved.size(); ++r) {
                                    auto dst = gx.row(saved[r]);
                                    const auto src = dout.row(r);
                                    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                                }
                            });
}

template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, const std::type_identity_t<Tensor<T>>* additive_mask,
                            std::size_t heads) {
    const Tensor<T>& qv = q.value();
    const Tensor<T>& kv = k.value();
    const Tensor<T>& vv = v.value();
    require_matrix(qv, "multi_head_attention");
    const std::size_t n = qv.rows();
    const std::size_t width = qv.cols();
    const std::size_t m = kv.size() == 0 ? 0 : kv.rows();
    if (heads == 0 || width % heads != 0) throw ShapeError("multi_head_attention: width not divisible by heads");
    if (m != 0 && (kv.cols() != width || vv.cols() != width || vv.rows() != m)) {
        throw ShapeError("multi_head_attention: q " + shape_to_string(qv.shape()) + " k " + shape_to_string(kv.shape()) +
                         " v " + shape_to_string(vv.shape()));
    }
    if (qv.has_nan() || kv.has_nan() || vv.has_nan()) throw NumericError("multi_head_attention: NaN in input");
    const std::size_t dh = width / heads;
    const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor<T> out({n, width});
    std::vector<Tensor<T>> probs;
    if (m > 0) {
        check_mask_shape(additive_mask, n, m, "multi_head_attention");
        probs.reserve(heads);
        mac_counter() += 2ULL * n * m * width;
        std::vector<T> scores(m);
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor<T> p({n, m});
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < n; ++i) {
                const T* qi = qv.row(i).data() + off;
                for (std::size_t j = 0; j < m; ++j) {
                    const T* kj = kv.row(j).data() + off;
                    T acc{0};
                    for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    scores[j] = acc * scale_factor;
                }
                softmax_row<T>(scores, additive_mask != nullptr ? additive_mask->row(i).data() : nullptr, p.row(i));
                T* oi = out.row(i).data() + off;
                for (std::size_t j = 0; j < m; ++j) {
                    const T pij = p(i, j);
                    if (pij == T{0}) continue;
                    const T* vj = vv.row(j).data() + off;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
                }
            }
            probs.push_back(std::move(p));
        }
    }
    const auto iq = q.id();
    const auto ik = k.id();
    const auto iv = v.id();
    return q.graph().record(
        "multi_head_attention", std::move(out), {q, k, v},
        [iq, ik, iv, probs = std::move(probs), heads, dh, scale_factor](Graph<T>& g, const Tensor<T>& dout) {
            if (probs.empty()) return;
            const Tensor<T>& qv = g.value(iq);
            const Tensor<T>& kv = g.value(ik);
            const Tensor<T>& vv = g.value(iv);
            const std::size_t n = qv.rows();
            const std::size_t m = kv.rows();
            const bool need_q = g.requires_grad(iq);
            const bool need_k = g.requires_grad(ik);
            const bool need_v = g.requires_grad(iv);
            Tensor<T>* gq = need_q ? &g.grad(iq) : nullptr;
            Tensor<T>* gk = need_k ? &g.grad(ik) : nullptr;
            Tensor<T>* gv = need_v ? &g.grad(iv) : nullptr;
            std::vector<T> dp(m);
            std::vector<T> ds(m);
            for (std::size_t h = 0; h < heads; ++h) {
                const Tensor<T>& p = probs[h];
                const std::size_t off = h * dh;
                for (std::size_t i = 0; i < n; ++i) {
                    const T* doi = dout.row(i).data() + off;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        const T pij = p(i, j);
                        if (pij == T{0}) {
                            dp[j] = T{0};
                            continue;
                        }
                        const T* vj = vv.row(j).data() + off;
                        T acc{0};
                        for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                        dp[j] = acc;
                        dot += static_cast<double>(pij) * acc;
                        if (gv != nullptr) {
                            T* gvj = gv->row(j).data() + off;
                            for (std::size_t c = 0; c < dh; ++c) gvj[c] += pij * doi[c];
                        }
                    }
                    for (std::size_t j = 0; j < m; ++j) ds[j] = static_cast<T>(p(i, j) * (dp[j] - dot)) * scale_factor;
                    if (gq != nullptr) {
                        T* gqi = gq->row(i).data() + off;
                        for (std::size_t j = 0; j < m; ++j) {
                            if (ds[j] == T{0}) continue;
                            const T* kj = kv.row(j).data() + off;
                            for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
                        }
                    }
                    if (gk != nullptr) {
                        const T* qi = qv.row(i).data() + off;
                        for (std::size_t j = 0; j < m; ++j) {
                            if (ds[j] == T{0}) continue;
                            T* gkj = gk->row(j).data() + off;
                            for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qi[c];
                        }
                    }
                }
            }
        });
}

template <typename T>
Var<T> scale_heads(Var<T> x, Var<T> gates) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& gv = gates.value();
    const std::size_t n = xv.rows();
    const std::size_t heads = gv.cols();
    if (gv.rows() != n || heads == 0 || xv.cols() % heads != 0) {
        throw ShapeError("scale_heads: x " + shape_to_string(xv.shape()) + " gates " + shape_to_string(gv.shape()));
    }
    const std::size_t dh = xv.cols() / heads;
    Tensor<T> out = xv;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t c = 0; c < dh; ++c) out(i, h * dh + c) *= gv(i, h);
    const auto ix = x.id();
    const auto ig = gates.id();
    return x.graph().record("scale_heads", std::move(out), {x, gates},
                            [ix, ig, heads, dh](Graph<T>& g, const Tensor<T>& dout) {
                                const Tensor<T>& xv = g.value(ix);
                                const Tensor<T>& gv = g.value(ig);
                                const std::size_t n = xv.rows();
                                if (g.requires_grad(ix)) {
                                    Tensor<T>& gx = g.grad(ix);
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t h = 0; h < heads; ++h)
                                            for (std::size_t c = 0; c < dh; ++c)
                                                gx(i, h * dh + c) += dout(i, h * dh + c) * gv(i, h);
                                }
                                if (g.requires_grad(ig)) {
                                    Tensor<T>& gg = g.grad(ig);
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t h = 0; h < heads; ++h) {
                                            T acc{0};
                                            for (std::size_t c = 0; c < dh; ++c)
                                                acc += dout(i, h * dh + c) * xv(i, h * dh + c);
                                            gg(i, h) += acc;
                                        }
                                }
                            });
}

template <typename T>
Var<T> structural_residual(Var<T> h, Var<T> delta, std::span<const std::uint8_t> mask,
                           std::type_identity_t<T> alpha) {
    const Tensor<T>& hv = h.value();
    const Tensor<T>& dv = delta.value();
    hv.require_same_shape(dv, "structural_residual");
    if (mask.size() != hv.rows()) throw ShapeError("structural_residual: mask length must equal row count");
    for (const auto b : mask) {
        if (b > 1) throw std::invalid_argument("structural_residual: mask entries must be 0 or 1");
    }
    if (alpha < T{0}) throw std::invalid_argument("structural_residual: alpha must be >= 0");
    Tensor<T> out = hv;
    if (alpha != T{0}) {
        for (std::size_t i = 0; i < hv.rows(); ++i) {
            if (mask[i] == 0) continue;
            auto row = out.row(i);
            const auto drow = dv.row(i);
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += alpha * drow[j];
        }
    }
    const auto ih = h.id();
    const auto id = delta.id();
    std::vector<std::uint8_t> saved(mask.begin(), mask.end());
    return h.graph().record("structural_residual", std::move(out), {h, delta},
                            [ih, id, saved = std::move(saved), alpha](Graph<T>& g, const Tensor<T>& dout) {
                                if (g.requires_grad(ih)) g.grad(ih) += dout;
                                if (g.requires_grad(id) && alpha != T{0}) {
                                    Tensor<T>& gd = g.grad(id);
                                    for (std::size_t i = 0; i < saved.size(); ++i) {
                                        if (saved[i] == 0) continue;
                                        auto dst = gd.row(i);
                                        const auto src = dout.row(i);
                                        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += alpha * src[j];
                                    }
                                }
                            });
}

#define GTCA_INSTANTIATE_OPS(T)                                                                                  \
    template Var<T> matmul<T>(Var<T>, Var<T>);                                                                   \
    template Var<T> add<T>(Var<T>, Var<T>);                                                                      \
    template Var<T> add_bias<T>(Var<T>, Var<T>);                                                                 \
    template Var<T> scale<T>(Var<T>, T);                                                                         \
    template Var<T> mul<T>(Var<T>, Var<T>);                                                                      \
    template Var<T> sum<T>(Var<T>);                                                                              \
    template Var<T> gelu<T>(Var<T>);                                                                             \
    template Var<T> sigmoid<T>(Var<T>);                                                                          \
    template Var<T> softmax_rows<T>(Var<T>, const Tensor<T>*);                                                   \
    template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                                    \
    template Var<T> embedding<T>(Var<T>, std::span<const std::int32_t>);                                         \
    template Var<T> cross_entropy<T>(Var<T>, std::span<const std::int32_t>);                                     \
    template Var<T> span_mean_pool<T>(Var<T>, std::span<const RowSpan>);                                         \
    template Var<T> rowwise_project<T>(Var<T>, std::span<const std::size_t>, const std::vector<Var<T>>&);        \
    template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                                        \
    template Var<T> multi_head_attention<T>(Var<T>, Var<T>, Var<T>, const Tensor<T>*, std::size_t);              \
    template Var<T> scale_heads<T>(Var<T>, Var<T>);                                                              \
    template Var<T> structural_residual<T>(Var<T>, Var<T>, std::span<const std::uint8_t>, T);                    \
    template Tensor<T> softmax_rows<T>(const Tensor<T>&, const Tensor<T>*);                                      \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                   \
    template Tensor<double> log_softmax_rows<T>(const Tensor<T>&);                                               \
    template T cross_entropy<T>(const Tensor<T>&, std::span<const std::int32_t>);                                \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);

GTCA_INSTANTIATE_OPS(float)
GTCA_INSTANTIATE_OPS(double)

#undef GTCA_INSTANTIATE_OPS

}  // namespace gtca::num
