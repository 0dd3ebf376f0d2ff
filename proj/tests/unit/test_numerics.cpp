// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "gtca/numerics/adamw.hpp"
#include "gtca/numerics/ops.hpp"

using namespace gtca;
using namespace gtca::num;
using gtca::testing::fd_check;
using gtca::testing::random_normal;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Weighted sum with a fixed random tensor turns any output into a scalar
// whose gradient exercises every output element differently.
Var<double> probe_loss(Graph<double>& g, Var<double> out, std::uint64_t seed) {
    Rng rng(seed);
    Var<double> w = g.constant(random_normal(out.value().shape(), rng));
    return sum(mul(out, w));
}

void require_fd(const std::vector<Parameter<double>*>& params, const gtca::testing::LossFn& fn) {
    const auto r = fd_check(params, fn);
    INFO("worst element: " << r.worst);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-3);
}

}  // namespace

TEST_CASE("softmax rows") {
    SUBCASE("symmetric pair") {
        auto p = softmax_rows(Tensor<double>({1, 2}, std::vector<double>{0, 0}));
        CHECK(p[0] == doctest::Approx(0.5));
        CHECK(p[1] == doctest::Approx(0.5));
    }
    SUBCASE("saturation") {
        auto p = softmax_rows(Tensor<double>({1, 2}, std::vector<double>{30, 0}));
        CHECK(std::abs(p[0] - 1.0) < 1e-9);
        CHECK(p[1] < 1e-12);
    }
    SUBCASE("random 3x4 against double loop") {
        Rng rng(11);
        auto xd = random_normal({3, 4}, rng);
        auto x = xd.cast<float>();
        auto p = softmax_rows(x);
        for (std::size_t i = 0; i < 3; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < 4; ++j) total += std::exp(static_cast<double>(x(i, j)));
            double row_sum = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                CHECK(std::abs(p(i, j) - std::exp(static_cast<double>(x(i, j))) / total) < 1e-6);
                row_sum += p(i, j);
            }
            CHECK(std::abs(row_sum - 1.0) < 1e-6);
        }
    }
    SUBCASE("masked entries are exactly zero, fully masked rows are zero") {
        Tensor<double> x({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
        Tensor<double> mask({2, 3}, std::vector<double>{0, -kInf, 0, -kInf, -kInf, -kInf});
        auto p = softmax_rows(x, &mask);
        CHECK(p(0, 1) == 0.0);
        CHECK(p(0, 0) + p(0, 2) == doctest::Approx(1.0));
        for (std::size_t j = 0; j < 3; ++j) CHECK(p(1, j) == 0.0);
    }
    SUBCASE("NaN input is rejected") {
        Tensor<float> x({1, 2}, std::vector<float>{0.f, std::nanf("")});
        CHECK_THROWS_AS(softmax_rows(x), NumericError);
    }
}

TEST_CASE("layer norm") {
    Tensor<double> one({2}, 1.0), zero({2}, 0.0);
    SUBCASE("already normalized") {
        auto y = layer_norm(Tensor<double>({1, 2}, std::vector<double>{1, -1}), one, zero, 0.0);
        CHECK(y[0] == doctest::Approx(1.0));
        CHECK(y[1] == doctest::Approx(-1.0));
    }
    SUBCASE("constant row maps to bias") {
        Tensor<double> gain({3}, 1.7), bias({3}, std::vector<double>{0.25, -1.0, 3.0});
        auto y = layer_norm(Tensor<double>({1, 3}, 4.0), gain, bias, 1e-5);
        for (std::size_t j = 0; j < 3; ++j) CHECK(y[j] == doctest::Approx(bias[j]));
    }
    SUBCASE("d=1 with eps=0 divides by zero") {
        Tensor<double> g1({1}, 1.0), b1({1}, 0.0);
        CHECK_THROWS_AS(layer_norm(Tensor<double>({1, 1}, 2.0), g1, b1, 0.0), NumericError);
    }
    SUBCASE("random row against double oracle") {
        Rng rng(5);
        auto x = random_normal({2, 6}, rng).cast<float>();
        auto gain = random_normal({6}, rng).cast<float>();
        auto bias = random_normal({6}, rng).cast<float>();
        auto y = layer_norm(x, gain, bias, 1e-5f);
        for (std::size_t i = 0; i < 2; ++i) {
            double mean = 0, var = 0;
            for (std::size_t j = 0; j < 6; ++j) mean += x(i, j);
            mean /= 6;
            for (std::size_t j = 0; j < 6; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
            var /= 6;
            for (std::size_t j = 0; j < 6; ++j) {
                const double want = (x(i, j) - mean) / std::sqrt(var + 1e-5) * gain[j] + bias[j];
                CHECK(std::abs(y(i, j) - want) < 1e-6 * std::max(1.0, std::abs(want)) * 4);
            }
        }
    }
}

TEST_CASE("cross entropy") {
    SUBCASE("uniform logits") {
        std::vector<std::int32_t> t{2};
        CHECK(cross_entropy(Tensor<double>({1, 4}, 0.0), t) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("margin 30") {
        std::vector<std::int32_t> t{1};
        CHECK(cross_entropy(Tensor<double>({1, 3}, std::vector<double>{0, 30, 0}), t) < 1e-12);
    }
    SUBCASE("random 2x5 against log-sum-exp oracle") {
        Rng rng(3);
        auto logits = random_normal({2, 5}, rng).cast<float>();
        std::vector<std::int32_t> t{4, 1};
        double want = 0.0;
        for (std::size_t i = 0; i < 2; ++i) {
            double m = -kInf;
            for (std::size_t j = 0; j < 5; ++j) m = std::max(m, static_cast<double>(logits(i, j)));
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) s += std::exp(logits(i, j) - m);
            want += (m + std::log(s)) - logits(i, static_cast<std::size_t>(t[i]));
        }
        want /= 2;
        CHECK(std::abs(cross_entropy(logits, t) - want) < 1e-6);
    }
    SUBCASE("empty target set") {
        std::vector<std::int32_t> none{-1, -1};
        CHECK_THROWS_AS(cross_entropy(Tensor<double>({2, 3}, 0.0), none), std::invalid_argument);
        std::vector<std::int32_t> empty;
        CHECK_THROWS(cross_entropy(Tensor<double>({0, 3}), empty));
    }
    SUBCASE("target out of range") {
        std::vector<std::int32_t> bad{3};
        CHECK_THROWS_AS(cross_entropy(Tensor<double>({1, 3}, 0.0), bad), std::out_of_range);
    }
}

TEST_CASE("backward basics") {
    Parameter<double> x{"x", Tensor<double>({2, 3}, std::vector<double>{1, -2, 3, 0.5, 0, -1})};
    SUBCASE("sum gives ones") {
        Graph<double> g;
        auto loss = sum(g.parameter(x, true));
        g.backward(loss);
        for (const double v : g.gradient(x)->data()) CHECK(v == 1.0);
    }
    SUBCASE("half sum of squares gives x") {
        Graph<double> g;
        auto xv = g.parameter(x, true);
        auto loss = scale(sum(mul(xv, xv)), 0.5);
        g.backward(loss);
        CHECK(*g.gradient(x) == x.value);
    }
    SUBCASE("second backward without reset throws") {
        Graph<double> g;
        auto loss = sum(g.parameter(x, true));
        g.backward(loss);
        CHECK_THROWS_AS(g.backward(loss), std::logic_error);
        g.reset();
        auto again = sum(g.parameter(x, true));
        CHECK_NOTHROW(g.backward(again));
    }
    SUBCASE("non-participating parameter gets no gradient") {
        Parameter<double> other{"other", Tensor<double>({2}, 1.0)};
        Graph<double> g;
        g.parameter(other, true);
        auto loss = sum(g.parameter(x, true));
        g.backward(loss);
        const Tensor<double>* go = g.gradient(other);
        CHECK((go == nullptr || std::all_of(go->data().begin(), go->data().end(), [](double v) { return v == 0.0; })));
    }
    SUBCASE("non-scalar loss rejected") {
        Graph<double> g;
        CHECK_THROWS_AS(g.backward(g.parameter(x, true)), ShapeError);
    }
}

TEST_CASE("finite-difference checks for every op") {
    Rng rng(2026);
    auto param = [&](const char* name, Shape s) { return Parameter<double>{name, random_normal(std::move(s), rng)}; };

    SUBCASE("matmul, add, add_bias, gelu, sigmoid, scale") {
        auto a = param("a", {4, 5});
        auto b = param("b", {5, 3});
        auto c = param("c", {4, 3});
        auto bias = param("bias", {3});
        require_fd({&a, &b, &c, &bias}, [&](Graph<double>& g) {
            auto y = matmul(g.parameter(a, true), g.parameter(b, true));
            y = add(y, g.parameter(c, true));
            y = add_bias(y, g.parameter(bias, true));
            y = scale(sigmoid(gelu(y)), 1.5);
            return probe_loss(g, y, 1);
        });
    }
    SUBCASE("softmax with mask") {
        auto x = param("x", {3, 4});
        Tensor<double> mask({3, 4}, 0.0);
        mask(0, 1) = -kInf;
        mask(2, 0) = mask(2, 1) = mask(2, 2) = mask(2, 3) = -kInf;
        require_fd({&x}, [&](Graph<double>& g) { return probe_loss(g, softmax_rows(g.parameter(x, true), &mask), 2); });
    }
    SUBCASE("layer norm") {
        auto x = param("x", {3, 6});
        auto gain = param("gain", {6});
        auto bias = param("bias", {6});
        require_fd({&x, &gain, &bias}, [&](Graph<double>& g) {
            return probe_loss(g, layer_norm(g.parameter(x, true), g.parameter(gain, true), g.parameter(bias, true), 1e-5),
                              3);
        });
    }
    SUBCASE("embedding and cross entropy") {
        auto table = param("table", {6, 4});
        auto w = param("w", {4, 6});
        const std::vector<std::int32_t> ids{0, 3, 3, 5};
        const std::vector<std::int32_t> targets{3, -1, 1, 2};
        require_fd({&table, &w}, [&](Graph<double>& g) {
            auto h = embedding(g.parameter(table, true), std::span<const std::int32_t>(ids));
            return cross_entropy(matmul(h, g.parameter(w, true)), std::span<const std::int32_t>(targets));
        });
    }
    SUBCASE("span mean pool, rowwise project, gather") {
        auto x = param("x", {5, 3});
        auto w0 = param("w0", {3, 3});
        auto w1 = param("w1", {3, 3});
        const std::vector<RowSpan> spans{{0, 1}, {2, 4}, {3, 3}};
        const std::vector<std::size_t> sel{1, 0, 1};
        const std::vector<std::size_t> rows{2, 0, 2, 1};
        require_fd({&x, &w0, &w1}, [&](Graph<double>& g) {
            auto pooled = span_mean_pool(g.parameter(x, true), std::span<const RowSpan>(spans));
            auto proj = rowwise_project(pooled, std::span<const std::size_t>(sel),
                                        std::vector<Var<double>>{g.parameter(w0, true), g.parameter(w1, true)});
            return probe_loss(g, gather_rows(proj, std::span<const std::size_t>(rows)), 4);
        });
    }
    SUBCASE("multi-head attention with gates") {
        auto q = param("q", {4, 6});
        auto k = param("k", {3, 6});
        auto v = param("v", {3, 6});
        auto gl = param("gate_logits", {4, 2});
        Tensor<double> mask({4, 3}, 0.0);
        mask(0, 0) = mask(0, 1) = mask(0, 2) = -kInf;
        mask(1, 2) = -kInf;
        require_fd({&q, &k, &v, &gl}, [&](Graph<double>& g) {
            auto att = multi_head_attention(g.parameter(q, true), g.parameter(k, true), g.parameter(v, true), &mask, 2);
            return probe_loss(g, scale_heads(att, sigmoid(g.parameter(gl, true))), 5);
        });
    }
    SUBCASE("structural residual") {
        auto h = param("h", {4, 3});
        auto d = param("delta", {4, 3});
        const std::vector<std::uint8_t> mask{1, 0, 1, 0};
        require_fd({&h, &d}, [&](Graph<double>& g) {
            return probe_loss(
                g, structural_residual(g.parameter(h, true), g.parameter(d, true), std::span<const std::uint8_t>(mask), 0.3),
                6);
        });
    }
}

TEST_CASE("multi-head attention matches nested-loop oracle") {
    Rng rng(8);
    const std::size_t n = 4, m = 3, heads = 2, dh = 3;
    auto q = random_normal({n, heads * dh}, rng);
    auto k = random_normal({m, heads * dh}, rng);
    auto v = random_normal({m, heads * dh}, rng);
    Graph<double> g;
    auto out = multi_head_attention(g.constant(q), g.constant(k), g.constant(v), nullptr, heads).value();
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(m);
            double mx = -kInf;
            for (std::size_t j = 0; j < m; ++j) {
                s[j] = 0;
                for (std::size_t c = 0; c < dh; ++c) s[j] += q(i, h * dh + c) * k(j, h * dh + c);
                s[j] /= std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0;
            for (auto& e : s) z += (e = std::exp(e - mx));
            for (std::size_t c = 0; c < dh; ++c) {
                double want = 0;
                for (std::size_t j = 0; j < m; ++j) want += s[j] / z * v(j, h * dh + c);
                CHECK(std::abs(out(i, h * dh + c) - want) < 1e-12);
            }
        }
    }
}

TEST_CASE("attention over empty memory is zero") {
    Graph<double> g;
    auto q = g.constant(Tensor<double>({3, 4}, 1.0));
    auto kv = g.constant(Tensor<double>({0, 4}));
    auto out = multi_head_attention(q, kv, kv, nullptr, 2);
    for (const double x : out.value().data()) CHECK(x == 0.0);
}

TEST_CASE("structural residual copies untouched rows bitwise") {
    Rng rng(1);
    auto h = random_normal({3, 4}, rng).cast<float>();
    auto d = random_normal({3, 4}, rng).cast<float>();
    Graph<float> g;
    const std::vector<std::uint8_t> mask{0, 1, 0};
    auto out = structural_residual(g.constant(h), g.constant(d), std::span<const std::uint8_t>(mask), 0.15f).value();
    CHECK(rows_bitwise_equal(out, h, 0));
    CHECK(rows_bitwise_equal(out, h, 2));
    for (std::size_t j = 0; j < 4; ++j) CHECK(out(1, j) == h(1, j) + 0.15f * d(1, j));
    auto zero = structural_residual(g.constant(h), g.constant(d), std::span<const std::uint8_t>(mask), 0.0f).value();
    CHECK(bitwise_equal(zero, h));
}

TEST_CASE("matmul skips zero entries so masked rows cannot leak NaN-free garbage") {
    // A row of `a` that is all zero yields an exactly zero output row even when
    // the other operand holds huge values.
    Tensor<float> a({2, 2}, std::vector<float>{0, 0, 1, 1});
    Tensor<float> b({2, 2}, std::vector<float>{3e38f, 3e38f, 1, 2});
    auto y = matmul(a, b);
    CHECK(y(0, 0) == 0.0f);
    CHECK(y(0, 1) == 0.0f);
}

TEST_CASE("adamw") {
    AdamWConfig cfg;
    cfg.clip_norm = 0.0;
    SUBCASE("zero grad and zero decay leave parameters unchanged") {
        cfg.weight_decay = 0.0;
        Parameter<float> p{"w", Tensor<float>({2, 2}, std::vector<float>{1, 2, 3, 4})};
        const auto before = p.value;
        AdamW<float> opt({&p}, cfg);
        GradientBuffer<float> grads({&p});
        opt.step(grads, 1e-2);
        CHECK(bitwise_equal(p.value, before));
    }
    SUBCASE("single scalar step matches the closed form") {
        cfg.weight_decay = 0.1;
        Parameter<double> p{"w", Tensor<double>({1, 1}, 0.7)};
        Graph<double> g;
        auto w = g.parameter(p, true);
        auto loss = scale(mul(w, w), 1.5);  // grad = 3 w = 2.1
        g.backward(sum(loss));
        GradientBuffer<double> grads({&p});
        grads.accumulate(g);
        AdamW<double> opt({&p}, cfg);
        const double lr = 0.01, grad = 2.1, p0 = 0.7;
        const double m = (1 - cfg.beta1) * grad, v = (1 - cfg.beta2) * grad * grad;
        const double mhat = m / (1 - cfg.beta1), vhat = v / (1 - cfg.beta2);
        const double want = p0 - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p0);
        opt.step(grads, lr);
        CHECK(p.value[0] == doctest::Approx(want).epsilon(1e-12));
        CHECK(opt.steps() == 1);
    }
    SUBCASE("decay-only path") {
        cfg.weight_decay = 0.5;
        Parameter<double> p{"w", Tensor<double>({1, 2}, std::vector<double>{2.0, -4.0})};
        AdamW<double> opt({&p}, cfg);
        GradientBuffer<double> grads({&p});
        opt.step(grads, 0.1);
        CHECK(p.value[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
        CHECK(p.value[1] == doctest::Approx(-4.0 + 0.1 * 0.5 * 4.0));
    }
    SUBCASE("non-finite gradient names the parameter") {
        Parameter<double> p{"blocks.0.wq", Tensor<double>({1}, 1.0)};
        Graph<double> g;
        auto w = g.parameter(p, true);
        g.backward(sum(scale(w, std::numeric_limits<double>::infinity())));
        GradientBuffer<double> grads({&p});
        grads.accumulate(g);
        AdamW<double> opt({&p}, cfg);
        try {
            opt.step(grads, 0.1);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("blocks.0.wq") != std::string::npos);
        }
        CHECK(p.value[0] == 1.0);
    }
}

TEST_CASE("forward determinism") {
    Rng r1(99), r2(99);
    auto a = random_normal({5, 7}, r1).cast<float>();
    auto b = random_normal({5, 7}, r2).cast<float>();
    CHECK(bitwise_equal(softmax_rows(a), softmax_rows(b)));
}
