// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include <set>
#include <sstream>

#include "doctest.h"
#include "fd_check.hpp"
#include "gtca/branch/gtca.hpp"
#include "gtca/memory/chunk_memory.hpp"
#include "gtca/numerics/ops.hpp"
#include "gtca/treebank/chunk_tree.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "random_tree.hpp"

using namespace gtca;
using namespace gtca::num;
using namespace gtca::testing;
using gtca::memory::HeightProjections;
using gtca::tree::FieldTree;

namespace {

std::vector<FieldTree> one_field(const std::string& text) {
    return {FieldTree{"sentence", tree::parse_bracketed(text)}};
}

HeightProjections<double> random_projections(std::size_t d, std::uint32_t hmax, Rng& rng) {
    HeightProjections<double> p(d, hmax);
    for (auto& w : p.weights) w.value = random_normal({d, d}, rng, 0.5);
    p.ln_gain.value = random_normal({d}, rng, 0.5);
    p.ln_bias.value = random_normal({d}, rng, 0.5);
    return p;
}

void check_memory_against_oracle(const std::vector<FieldTree>& fields, const Tensor<double>& emb,
                                 HeightProjections<double>& proj, std::size_t layers, std::size_t k_cap) {
    Graph<double> g;
    const auto mems = memory::build_memories(g, g.constant(emb), std::span<const FieldTree>(fields), proj, false,
                                             layers, k_cap);
    REQUIRE(mems.size() == layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const auto want = oracle_layer_chunks(fields, static_cast<std::uint32_t>(l), k_cap);
        REQUIRE(mems[l].size() == want.size());
        CHECK(mems[l].size() <= k_cap);
        for (std::size_t u = 0; u < want.size(); ++u) {
            CHECK(mems[l].chunks[u].field == want[u].field);
            CHECK(mems[l].chunks[u].node == want[u].node);
            CHECK(mems[l].right_bounds[u] == want[u].hi);
            CHECK(mems[l].source_heights[u] == want[u].height);
            const auto& w = proj.weights[std::min<std::size_t>(want[u].height, proj.max_height())].value;
            const auto row = oracle_encode(emb, want[u].lo, want[u].hi, w, proj.ln_gain.value, proj.ln_bias.value,
                                           proj.ln_eps);
            for (std::size_t j = 0; j < row.size(); ++j) CHECK(std::abs(mems[l].rows.value()(u, j) - row[j]) < 1e-6);
        }
    }
}

}  // namespace

TEST_CASE("mean_pool_span") {
    Tensor<double> e({2, 2}, std::vector<double>{1, 3, 3, 5});
    CHECK(memory::mean_pool_span(e, {0, 1}) == Tensor<double>({2}, std::vector<double>{2, 4}));
    CHECK(memory::mean_pool_span(e, {1, 1}) == Tensor<double>({2}, std::vector<double>{3, 5}));

    Rng rng(3);
    auto r = random_normal({5, 3}, rng);
    auto got = memory::mean_pool_span(r, {1, 3});
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(got[j] - (r(1, j) + r(2, j) + r(3, j)) / 3.0) < 1e-6);
    CHECK_THROWS_AS(memory::mean_pool_span(r, {2, 5}), std::out_of_range);
}

TEST_CASE("encode_chunk") {
    SUBCASE("identity projection on a normalized input") {
        HeightProjections<double> p(4, 3);
        Tensor<double> pooled({4}, std::vector<double>{1, -1, 1, -1});  // mean 0, variance 1
        auto out = memory::encode_chunk(pooled, 2, p);
        for (std::size_t j = 0; j < 4; ++j) CHECK(out[j] == doctest::Approx(pooled[j]).epsilon(1e-5));
    }
    SUBCASE("weight sharing and the H_max clamp") {
        Rng rng(5);
        auto p = random_projections(4, 3, rng);
        auto pooled = random_normal({4}, rng);
        CHECK(memory::encode_chunk(pooled, 1, p) == memory::encode_chunk(pooled, 1, p));
        CHECK(memory::encode_chunk(pooled, 7, p) == memory::encode_chunk(pooled, 3, p));
        CHECK_FALSE(memory::encode_chunk(pooled, 1, p) == memory::encode_chunk(pooled, 2, p));
    }
    SUBCASE("random case against the composition oracle") {
        Rng rng(6);
        auto p = random_projections(5, 4, rng);
        auto emb = random_normal({6, 5}, rng);
        auto got = memory::encode_chunk(memory::mean_pool_span(emb, {2, 4}), 3, p);
        auto want = oracle_encode(emb, 2, 4, p.weights[3].value, p.ln_gain.value, p.ln_bias.value, p.ln_eps);
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(got[j] - want[j]) < 1e-6);
    }
}

TEST_CASE("select_layer_chunks") {
    // D = 3: S(0) > NP,VP(1) > preterminals(2) > words(3).
    const auto fields = one_field("(S (NP (DT the) (NN cat)) (VP (VBZ sat)))");
    REQUIRE(fields[0].tree.max_depth == 3);

    SUBCASE("layers past D reuse the root level") {
        const auto c5 = memory::select_layer_chunks(fields, 5);
        REQUIRE(c5.size() == 1);
        CHECK(c5[0].node == 0);
        CHECK(c5[0].height == 3);
        for (std::uint32_t l = 3; l < 10; ++l) {
            const auto c = memory::select_layer_chunks(fields, l);
            REQUIRE(c.size() == c5.size());
            CHECK(c[0].node == c5[0].node);
        }
    }
    SUBCASE("layer 0 takes the word leaves") {
        const auto c0 = memory::select_layer_chunks(fields, 0);
        REQUIRE(c0.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(fields[0].tree.nodes[c0[i].node].kind == tree::NodeKind::word);
            CHECK(c0[i].span.lo == i);
        }
    }
    SUBCASE("K cap keeps the leftmost chunks in BFS order") {
        const auto h1 = one_field("(S (A (P a)) (B (P b)) (C (P c)))");
        const auto all = memory::select_layer_chunks(h1, 2);
        REQUIRE(all.size() == 3);
        const auto capped = memory::select_layer_chunks(h1, 2, 2);
        REQUIRE(capped.size() == 2);
        CHECK(capped[0].span.lo == 0);
        CHECK(capped[1].span.lo == 1);
        const auto want = oracle_layer_chunks(h1, 2, 2);
        CHECK(capped[0].node == want[0].node);
        CHECK(capped[1].node == want[1].node);
    }
    SUBCASE("the cap applies across concatenated fields") {
        std::vector<FieldTree> two = one_field("(S (A (P a)) (B (P b)))");
        two.push_back({"option", tree::shift_spans(tree::parse_bracketed("(S (A (P c)) (B (P d)))"), 2)});
        const auto c = memory::select_layer_chunks(two, 0, 3);
        REQUIRE(c.size() == 3);
        CHECK(c[2].field == 1);
        CHECK(c[2].span.lo == 2);
    }
}

TEST_CASE("build_memories") {
    Rng rng(11);
    SUBCASE("D = 0 gives every layer the single root chunk") {
        tree::ChunkTree t;
        t.nodes.push_back({"w", tree::NodeKind::word, {0, 0}, {}, -1, 0, 0});
        tree::compute_heights(t);
        std::vector<FieldTree> fields{{"sentence", t}};
        auto proj = random_projections(3, 4, rng);
        auto emb = random_normal({2, 3}, rng);
        Graph<double> g;
        auto mems = memory::build_memories(g, g.constant(emb), std::span<const FieldTree>(fields), proj, false, 2);
        for (const auto& m : mems) {
            REQUIRE(m.size() == 1);
            CHECK(m.right_bounds[0] == 0);
        }
        CHECK(bitwise_equal(mems[0].rows.value(), mems[1].rows.value()));
    }
    SUBCASE("no structure gives empty memories") {
        HeightProjections<double> proj(3, 2);
        Graph<double> g;
        auto mems = memory::build_memories(g, g.constant(random_normal({4, 3}, rng)), std::span<const FieldTree>(),
                                           proj, false, 3);
        for (const auto& m : mems) {
            CHECK(m.size() == 0);
            CHECK_FALSE(m.rows.valid());
        }
    }
    SUBCASE("three-leaf tree end to end") {
        const auto fields = one_field("(S (NP (DT the) (NN cat)) (VP (VBZ sat)))");
        auto proj = random_projections(4, 16, rng);
        auto emb = random_normal({3, 4}, rng);
        Graph<double> g;
        auto mems = memory::build_memories(g, g.constant(emb), std::span<const FieldTree>(fields), proj, false, 4);
        for (const auto& m : mems) {
            for (std::size_t u = 0; u < m.size(); ++u) {
                auto want = memory::encode_chunk(memory::mean_pool_span(emb, m.chunks[u].span), m.chunks[u].height,
                                                 proj);
                for (std::size_t j = 0; j < 4; ++j) CHECK(m.rows.value()(u, j) == doctest::Approx(want[j]).epsilon(1e-12));
            }
        }
        CHECK(mems[1].size() == 3);
        CHECK(mems[2].size() == 2);
        CHECK(mems[3].size() == 1);
    }
    SUBCASE("span past the input is rejected") {
        const auto fields = one_field("(S (A (P a)) (B (P b)))");
        HeightProjections<double> proj(2, 2);
        Graph<double> g;
        CHECK_THROWS_AS(memory::build_memories(g, g.constant(Tensor<double>({1, 2})),
                                               std::span<const FieldTree>(fields), proj, false, 1),
                        InputError);
    }
    SUBCASE("random trees against the loop oracle") {
        for (int trial = 0; trial < 60; ++trial) {
            std::vector<FieldTree> fields;
            std::size_t offset = 0;
            const std::size_t nfields = 1 + rng.uniform_index(2);
            for (std::size_t f = 0; f < nfields; ++f) {
                auto t = random_token_tree(rng, 10, 5);
                const std::size_t w = t.span_width();
                fields.push_back({"f" + std::to_string(f), tree::shift_spans(t, offset)});
                offset += w;
            }
            const std::size_t d = 4;
            auto proj = random_projections(d, 3, rng);
            auto emb = random_normal({offset + 1, d}, rng);
            const std::size_t k_cap = trial % 3 == 0 ? 2 : memory::kDefaultMaxChunks;
            check_memory_against_oracle(fields, emb, proj, 7, k_cap);
        }
    }
    SUBCASE("rows shuffled inside a span leave the chunk unchanged") {
        const auto fields = one_field("(S (A (P a) (P b) (P c)) (B (P d)))");
        auto proj = random_projections(3, 4, rng);
        auto emb = random_normal({4, 3}, rng);
        auto shuffled = emb;
        for (std::size_t j = 0; j < 3; ++j) std::swap(shuffled(0, j), shuffled(2, j));
        Graph<double> g;
        auto a = memory::build_memories(g, g.constant(emb), std::span<const FieldTree>(fields), proj, false, 3);
        auto b = memory::build_memories(g, g.constant(shuffled), std::span<const FieldTree>(fields), proj, false, 3);
        // Layer 2 holds A (rows 0..2) and B (row 3).
        REQUIRE(a[2].size() == 2);
        CHECK(max_abs_diff(a[2].rows.value(), b[2].rows.value()) < 1e-12);
    }
    SUBCASE("memory from a cached tree equals memory from a fresh parse") {
        const auto fields = one_field("(S (NP (DT the) (NN cat)) (VP (VBZ sat) (RB down)))");
        tree::StructureEntry entry{fields, {1, 1, 1, 1}};
        const auto restored = tree::deserialize_entry(tree::serialize_entry(entry));
        auto proj = random_projections(3, 4, rng);
        auto emb = random_normal({4, 3}, rng);
        Graph<double> g;
        auto a = memory::build_memories(g, g.constant(emb), std::span<const FieldTree>(fields), proj, false, 4);
        auto b = memory::build_memories(g, g.constant(emb), std::span<const FieldTree>(restored.fields), proj, false, 4);
        for (std::size_t l = 0; l < 4; ++l) CHECK(bitwise_equal(a[l].rows.value(), b[l].rows.value()));
    }
}

TEST_CASE("chunk_causal_mask") {
    const std::vector<std::size_t> rb{1, 3};
    auto m = branch::chunk_causal_mask<double>(4, rb);
    CHECK(m(2, 0) == 0.0);
    CHECK(std::isinf(m(2, 1)));
    CHECK(m(3, 0) == 0.0);
    CHECK(m(3, 1) == 0.0);
    CHECK(std::isinf(m(0, 0)));
    CHECK(std::isinf(m(0, 1)));
}

namespace {

struct BranchFixture {
    std::size_t n = 4, d = 6, heads = 2;
    branch::GtcaLayerParams<double> params;
    Tensor<double> h, c;
    std::vector<std::size_t> rb{0, 2, 3};

    explicit BranchFixture(std::uint64_t seed) {
        Rng rng(seed);
        params.wq = {"wq", random_normal({d, d}, rng, 0.5)};
        params.wk = {"wk", random_normal({d, d}, rng, 0.5)};
        params.wv = {"wv", random_normal({d, d}, rng, 0.5)};
        params.wg = {"wg", random_normal({d, heads}, rng, 0.5)};
        params.wo = {"wo", random_normal({d, d}, rng, 0.5)};
        h = random_normal({n, d}, rng);
        c = random_normal({rb.size(), d}, rng);
    }

    memory::LayerMemory<double> memory_on(Graph<double>& g) const {
        memory::LayerMemory<double> m;
        m.rows = g.constant(c);
        m.right_bounds = rb;
        for (std::size_t u = 0; u < rb.size(); ++u) m.chunks.push_back({0, 0, {rb[u], rb[u]}, 0});
        m.source_heights.assign(rb.size(), 0);
        return m;
    }
};

}  // namespace

TEST_CASE("gated_cross_attention") {
    SUBCASE("single visible chunk with a zero gate logit halves the value row") {
        Rng rng(2);
        const std::size_t d = 4;
        branch::GtcaLayerParams<double> p{{"wq", random_normal({d, d}, rng)},
                                          {"wk", random_normal({d, d}, rng)},
                                          {"wv", random_normal({d, d}, rng)},
                                          {"wg", Tensor<double>({d, 1})},
                                          {"wo", Tensor<double>::identity(d)}};
        auto c = random_normal({1, d}, rng);
        Graph<double> g;
        memory::LayerMemory<double> m;
        m.rows = g.constant(c);
        m.right_bounds = {0};
        m.chunks.resize(1);
        auto out = branch::gated_cross_attention(g, g.constant(random_normal({1, d}, rng)), m, p, 1, true, false);
        auto v = matmul(c, p.wv.value);
        for (std::size_t j = 0; j < d; ++j) CHECK(out.delta.value()(0, j) == doctest::Approx(0.5 * v(0, j)).epsilon(1e-14));
        CHECK(out.gates.value()(0, 0) == 0.5);
    }
    SUBCASE("saturated negative gates silence the update") {
        BranchFixture fx(4);
        fx.h.fill(1.0);
        fx.params.wg.value.fill(-30.0 / static_cast<double>(fx.d));
        Graph<double> g;
        auto out = branch::gated_cross_attention(g, g.constant(fx.h), fx.memory_on(g), fx.params, fx.heads, true, false);
        for (const double x : out.delta.value().data()) CHECK(std::abs(x) < 1e-9);
    }
    SUBCASE("random case against the nested-loop oracle") {
        for (const bool gate : {true, false}) {
            BranchFixture fx(gate ? 7 : 8);
            Graph<double> g;
            auto out = branch::gated_cross_attention(g, g.constant(fx.h), fx.memory_on(g), fx.params, fx.heads, gate,
                                                     false);
            auto want = oracle_gated_attention(fx.h, fx.c, fx.rb, fx.params.wq.value, fx.params.wk.value,
                                               fx.params.wv.value, fx.params.wg.value, fx.params.wo.value, fx.heads,
                                               gate);
            CHECK(max_abs_diff(out.delta.value(), want.delta) < 1e-5);
            CHECK(max_abs_diff(out.gates.value(), want.gates) < 1e-12);

            // Float path against the same oracle.
            branch::GtcaLayerParams<float> pf{{"wq", fx.params.wq.value.cast<float>()},
                                              {"wk", fx.params.wk.value.cast<float>()},
                                              {"wv", fx.params.wv.value.cast<float>()},
                                              {"wg", fx.params.wg.value.cast<float>()},
                                              {"wo", fx.params.wo.value.cast<float>()}};
            Graph<float> gf;
            memory::LayerMemory<float> mf;
            mf.rows = gf.constant(fx.c.cast<float>());
            mf.right_bounds = fx.rb;
            mf.chunks.resize(fx.rb.size());
            auto outf = branch::gated_cross_attention(gf, gf.constant(fx.h.cast<float>()), mf, pf, fx.heads, gate,
                                                      false);
            CHECK(max_abs_diff(outf.delta.value().cast<double>(), want.delta) < 1e-5);
        }
    }
    SUBCASE("position 0 with no visible chunk gets a zero row") {
        BranchFixture fx(9);
        fx.rb = {1, 2, 3};
        Graph<double> g;
        auto out = branch::gated_cross_attention(g, g.constant(fx.h), fx.memory_on(g), fx.params, fx.heads, true, false);
        for (std::size_t j = 0; j < fx.d; ++j) CHECK(out.delta.value()(0, j) == 0.0);
    }
    SUBCASE("empty memory") {
        BranchFixture fx(10);
        Graph<double> g;
        memory::LayerMemory<double> empty;
        auto out = branch::gated_cross_attention(g, g.constant(fx.h), empty, fx.params, fx.heads, true, false);
        CHECK(out.delta.value().shape() == Shape{fx.n, fx.d});
        for (const double x : out.delta.value().data()) CHECK(x == 0.0);
        CHECK(out.gates.value().shape() == Shape{fx.n, fx.heads});
    }
    SUBCASE("NaN input") {
        BranchFixture fx(12);
        fx.h(1, 1) = std::nan("");
        Graph<double> g;
        CHECK_THROWS_AS(branch::gated_cross_attention(g, g.constant(fx.h), fx.memory_on(g), fx.params, fx.heads, true,
                                                      false),
                        NumericError);
    }
    SUBCASE("cost is linear in n * m for the attention term") {
        const std::size_t d = 8, heads = 2;
        Rng rng(13);
        branch::GtcaLayerParams<double> p{{"wq", random_normal({d, d}, rng)},
                                          {"wk", random_normal({d, d}, rng)},
                                          {"wv", random_normal({d, d}, rng)},
                                          {"wg", random_normal({d, heads}, rng)},
                                          {"wo", random_normal({d, d}, rng)}};
        for (const std::size_t n : {5u, 10u, 20u}) {
            for (const std::size_t m : {1u, 4u, 16u}) {
                Graph<double> g;
                memory::LayerMemory<double> mem;
                mem.rows = g.constant(random_normal({m, d}, rng));
                mem.right_bounds.assign(m, 0);
                mem.chunks.resize(m);
                auto hv = g.constant(random_normal({n, d}, rng));
                const std::uint64_t before = mac_counter();
                branch::gated_cross_attention(g, hv, mem, p, heads, true, false);
                const std::uint64_t used = mac_counter() - before;
                // Q, O and gate projections are per token, K and V per chunk,
                // scores and weighted values are per (token, chunk) pair.
                CHECK(used == 2 * n * d * d + n * d * heads + 2 * m * d * d + 2 * n * m * d);
            }
        }
    }
}

TEST_CASE("apply_structural_update") {
    Rng rng(21);
    auto h = random_normal({3, 4}, rng);
    auto delta = random_normal({3, 4}, rng);
    Graph<double> g;
    const std::vector<std::uint8_t> ones{1, 1, 1}, some{1, 0, 1};
    auto zero_alpha = branch::apply_structural_update(g.constant(h), g.constant(delta),
                                                      std::span<const std::uint8_t>(ones), 0.0);
    CHECK(bitwise_equal(zero_alpha.value(), h));
    auto masked = branch::apply_structural_update(g.constant(h), g.constant(delta),
                                                  std::span<const std::uint8_t>(some), 0.15);
    CHECK(rows_bitwise_equal(masked.value(), h, 1));
    auto full = branch::apply_structural_update(g.constant(h), g.constant(delta), std::span<const std::uint8_t>(ones),
                                                0.15);
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(full.value()[i] - h[i] == doctest::Approx(0.15 * delta[i]));
}

TEST_CASE("composed GTCA layer gradients match finite differences") {
    Rng rng(31);
    const std::size_t d = 4, heads = 2;
    const auto fields = one_field("(S (NP (DT the) (NN cat)) (VP (VBZ sat) (RB down)))");
    const std::size_t n = 4;
    branch::BranchConfig cfg{d, 2, heads, 2, 64};
    branch::StructuralBranch<double> br(cfg, 5);
    for (auto* p : br.parameters()) p->value = random_normal(p->value.shape(), rng, 0.5);
    Parameter<double> emb{"emb", random_normal({n, d}, rng)};
    Parameter<double> hidden{"hidden", random_normal({n, d}, rng)};
    const auto weights = random_normal({n, d}, rng);
    const std::vector<std::uint8_t> mask{1, 0, 1, 1};

    auto loss = [&](Graph<double>& g) {
        auto e = g.parameter(emb, true);
        auto mems = memory::build_memories(g, e, std::span<const FieldTree>(fields), br.heights, true, 2);
        Var<double> x = g.parameter(hidden, true);
        for (std::size_t l = 0; l < 2; ++l) {
            auto out = branch::gated_cross_attention(g, x, mems[l], br.layers[l], heads, true, true);
            x = branch::apply_structural_update(x, out.delta, std::span<const std::uint8_t>(mask), 0.15);
        }
        return sum(mul(x, g.constant(weights)));
    };
    std::vector<Parameter<double>*> params = br.parameters();
    params.push_back(&emb);
    params.push_back(&hidden);
    const auto r = fd_check(params, loss);
    INFO("worst: " << r.worst);
    CHECK(r.max_rel_error < 1e-3);
    CHECK(r.checked > 100);
}

TEST_CASE("structural branch initialization") {
    branch::StructuralBranch<float> br({8, 3, 2, 5, 64}, 1);
    CHECK(br.layers.size() == 3);
    CHECK(br.heights.weights.size() == 6);
    std::set<std::string> names;
    for (const auto* p : std::as_const(br).parameters()) CHECK(names.insert(p->name).second);
    for (const auto& lp : br.layers) {
        for (const float x : lp.wg.value.data()) CHECK(x == 0.0f);
        CHECK(lp.wg.value.shape() == Shape{8, 2});
    }
    CHECK(br.heights.weights[2].value == Tensor<float>::identity(8));
    branch::StructuralBranch<float> again({8, 3, 2, 5, 64}, 1);
    CHECK(again.layers[1].wq.value == br.layers[1].wq.value);
    CHECK_THROWS_AS(branch::StructuralBranch<float>({8, 1, 3, 5, 64}, 1), std::invalid_argument);
}

TEST_CASE("gate dump") {
    const std::vector<branch::GateRecord> recs{{0, 1, 2, 0.5, false}, {3, 0, 7, 0.25, true}};
    std::ostringstream os;
    branch::write_gate_dump(os, recs);
    std::istringstream is(os.str());
    std::string line;
    std::size_t count = 0;
    while (std::getline(is, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.at("layer").get<std::uint32_t>() == recs[count].layer);
        CHECK(j.at("head").get<std::uint32_t>() == recs[count].head);
        CHECK(j.at("position").get<std::size_t>() == recs[count].position);
        CHECK(j.at("gate").get<double>() == recs[count].gate);
        CHECK(j.at("inert").get<bool>() == recs[count].inert);
        ++count;
    }
    CHECK(count == 2);
}
