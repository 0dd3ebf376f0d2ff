// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "gtca/eval/controls.hpp"
#include "gtca/train/experiment.hpp"
#include "gtca/train/training.hpp"
#include "gtca/treebank/chunk_tree.hpp"
#include "json.hpp"

using namespace gtca;
using namespace gtca::train;

namespace {

ExperimentConfig small_experiment() {
    auto c = ExperimentConfig::defaults();
    c.model.d_model = 8;
    c.model.layers = 2;
    c.model.heads = 2;
    c.model.head_dim = 4;
    c.train_examples = 24;
    c.test_examples = 8;
    c.variant.lora_rank = 2;
    c.variant.lora_alpha = 4.0;
    c.variant.stage1 = {6, 1e-2};
    c.variant.stage2 = {10, 1e-2};
    c.variant.stage3 = {6, 1e-2};
    c.variant.batch = 4;
    return c;
}

model::Transformer<double> small_base(const ExperimentConfig& c, const AgreementData& d) {
    auto mc = c.model;
    mc.vocab = d.tokenizer.size();
    return model::Transformer<double>(mc, 3);
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "gtca_unit";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("alpha schedule") {
    CHECK(alpha_schedule(0, 100, 0.15) == 0.0);
    CHECK(alpha_schedule(100, 100, 0.15) == 0.15);
    CHECK(alpha_schedule(250, 100, 0.15) == 0.15);
    CHECK(alpha_schedule(50, 100, 0.15) == doctest::Approx(0.075).epsilon(1e-15));
    CHECK(alpha_schedule(3, 1, 0.2) == 0.2);
    CHECK_THROWS_AS(alpha_schedule(-1, 100, 0.15), InputError);
    CHECK_THROWS_AS(alpha_schedule(5, 0, 0.15), InputError);

    const auto p = stage2_plan(500, 3e-5, 8, 0.15, 0.1);
    CHECK(p.warmup_steps() == 50);
    CHECK(p.alpha_at(0) == 0.0);
    CHECK(p.alpha_at(25) == alpha_schedule(25, 50, 0.15));
    CHECK(p.alpha_at(499) == 0.15);
    CHECK(stage2_plan(5, 1e-3, 1, 0.1, 0.1).warmup_steps() == 1);
    CHECK(stage3_plan(10, 1e-3, 1, 0.1).alpha_at(0) == 0.1);
}

TEST_CASE("stage plan invariants") {
    CHECK_NOTHROW(validate_plan(stage1_plan(10, 1e-3, 2)));
    CHECK_NOTHROW(validate_plan(stage2_plan(10, 1e-3, 2, 0.15, 0.1)));
    CHECK_NOTHROW(validate_plan(stage3_plan(10, 1e-3, 2, 0.15)));
    CHECK_NOTHROW(validate_plan(pretrain_plan(10, 1e-3, 2)));
    auto bad = stage1_plan(10, 1e-3, 2);
    bad.alpha_target = 0.1;
    CHECK_THROWS_AS(validate_plan(bad), InputError);
    bad = stage2_plan(10, 1e-3, 2, 0.15, 0.1);
    bad.groups.lora = true;
    CHECK_THROWS_AS(validate_plan(bad), InputError);
    bad = stage3_plan(10, 1e-3, 2, 0.15);
    bad.groups.backbone = true;
    CHECK_THROWS_AS(validate_plan(bad), InputError);
    bad = stage1_plan(10, 1e-3, 0);
    CHECK_THROWS_AS(validate_plan(bad), InputError);
    bad = stage1_plan(10, 1e-3, 2);
    bad.stage = 7;
    CHECK_THROWS_AS(validate_plan(bad), InputError);
}

TEST_CASE("training examples") {
    const model::Tokenizer tok(data::agreement_vocabulary());
    const data::McqaItem item{"x", "the key of the dogs", {"is", "are"}, 0};
    const auto prompt = data::assemble_prompt(data::agreement_template(), tok, {}, item);
    CHECK(prompt.text == "the key of the dogs\nAnswer:");
    const std::vector<std::int32_t> answer = {tok.id("is")};
    const auto ex = answer_example(prompt, nullptr, answer);
    REQUIRE(ex.ids.size() == prompt.ids.size() + 1);
    for (std::size_t t = 0; t < ex.ids.size(); ++t) {
        CHECK(ex.targets[t] == (t + 2 == ex.ids.size() ? tok.id("is") : -1));
        CHECK(ex.mask[t] == 0);
    }
    const auto st = data::mask_only_structure(prompt);
    const auto ex2 = answer_example(prompt, &st, answer);
    CHECK(ex2.mask.back() == 0);
    CHECK(std::equal(st.mask.begin(), st.mask.end(), ex2.mask.begin()));

    const std::vector<std::int32_t> seq = {1, 4, 5};
    const auto lm = language_model_example(seq);
    CHECK(lm.targets == std::vector<std::int32_t>{4, 5, -1});
    CHECK_THROWS_AS(language_model_example(std::span(seq).first(1)), InputError);
}

TEST_CASE("synthetic agreement task") {
    data::AgreementConfig cfg;
    cfg.examples = 200;
    const auto train = data::generate_agreement(cfg, 7, "train");
    const auto test = data::generate_agreement(cfg, 7, "test", &train);
    std::set<std::string> surfaces;
    for (const auto& e : train) surfaces.insert(e.item.question);
    std::vector<std::size_t> head_counts(4, 0);
    const model::Tokenizer tok(data::agreement_vocabulary());
    for (const auto& e : test) CHECK(surfaces.insert(e.item.question).second);
    for (const auto& e : train) {
        ++head_counts[e.head];
        const auto& f = e.record.fields.at(0);
        const auto t = tree::parse_bracketed(f.tree);
        tree::validate_tree(t);
        CHECK(t.max_depth == 4);
        CHECK(t.word_count() == 11);
        CHECK(tok.encode(e.item.question).ids.size() == 11);
        // The head is the only NP directly under the root; its noun decides.
        std::string head_noun;
        std::size_t plural = 0;
        for (auto c : t.root().children) {
            const auto& node = t.nodes[c];
            if (node.label == "NP") head_noun = t.nodes[t.nodes[node.children[1]].children[0]].label;
        }
        std::istringstream words(e.item.question);
        std::string w;
        std::size_t index = 0;
        while (words >> w) {
            if (index % 3 == 1) plural += w.back() == 's' ? 1 : 0;
            ++index;
        }
        CHECK(plural == 2);
        CHECK(e.item.answer == (head_noun.back() == 's' ? 1u : 0u));
    }
    for (auto c : head_counts) CHECK(c > 20);

    CHECK(data::agreement_tree({"key", "dogs"}, {"of"}, 1) ==
          "(NP (MOD (NP (DT the) (NN key)) (P of)) (NP (DT the) (NN dogs)))");
    CHECK_THROWS_AS(data::agreement_tree({"key"}, {}, 0), InputError);

    // Same seed and prefix, same data.
    const auto again = data::generate_agreement(cfg, 7, "train");
    CHECK(again.size() == train.size());
    CHECK(again[13].item.question == train[13].item.question);
    CHECK(again[13].record.fields[0].tree == train[13].record.fields[0].tree);
}

TEST_CASE("evaluation controls") {
    CHECK(eval::parse_control("permuted_tree") == eval::Control::permuted_tree);
    CHECK_THROWS_AS(eval::parse_control("bogus"), InputError);
    const auto g = eval::apply_toggle({0.1, true, true}, eval::Control::no_gate);
    CHECK_FALSE(g.gate_enabled);
    CHECK(g.mask_enabled);
    CHECK_FALSE(eval::apply_toggle({0.1, true, true}, eval::Control::no_mask).mask_enabled);

    const model::Tokenizer tok(data::agreement_vocabulary());
    data::AgreementConfig cfg;
    cfg.examples = 5;
    const auto ex = data::generate_agreement(cfg, 2, "c");
    const auto prompt = data::assemble_prompt(data::agreement_template(), tok, {}, ex[0].item);
    const auto st = data::prompt_structure(prompt, ex[0].record);
    const auto perm = eval::corrupt_structure(st, eval::Control::permuted_tree, 5);
    CHECK(tree::height_histogram(perm.fields[0].tree) == tree::height_histogram(st.fields[0].tree));
    CHECK(perm.fields[0].tree.root().span == st.fields[0].tree.root().span);
    CHECK(perm.mask == st.mask);
    CHECK_FALSE(perm.fields[0].tree == st.fields[0].tree);
    const auto rnd = eval::corrupt_structure(st, eval::Control::random_tree, 5);
    tree::validate_tree(rnd.fields[0].tree);
    CHECK(rnd.fields[0].tree.word_count() == st.fields[0].tree.word_count());
    CHECK(eval::corrupt_structure(st, eval::Control::no_gate, 5).fields[0].tree == st.fields[0].tree);
    CHECK(eval::corrupt_structure(st, eval::Control::random_tree, 5).fields[0].tree == rnd.fields[0].tree);
}

TEST_CASE("stage freeze audit and alpha trace") {
    const auto cfg = small_experiment();
    const auto d = make_agreement_data(cfg, 4);
    auto base = small_base(cfg, d);
    const auto result = run_variant(Variant::gtca_staged, cfg.variant, base, std::span(d.train_examples), 9);
    const auto& rec = result.record;
    REQUIRE(rec.stages.size() == 3);
    const auto& s1 = rec.stages[0];
    const auto& s2 = rec.stages[1];
    const auto& s3 = rec.stages[2];
    CHECK(s1.hash_before.at("structural") == s1.hash_after.at("structural"));
    CHECK(s1.hash_before.at("backbone") == s1.hash_after.at("backbone"));
    CHECK(s1.hash_before.at("lora") != s1.hash_after.at("lora"));
    CHECK(s2.hash_before.at("backbone") == s2.hash_after.at("backbone"));
    CHECK(s2.hash_before.at("lora") == s2.hash_after.at("lora"));
    CHECK(s2.hash_before.at("structural") != s2.hash_after.at("structural"));
    CHECK(s3.hash_before.at("backbone") == s3.hash_after.at("backbone"));
    CHECK(s3.hash_before.at("lora") != s3.hash_after.at("lora"));
    CHECK(s3.hash_before.at("structural") != s3.hash_after.at("structural"));
    // Stage boundaries chain: each stage starts where the previous ended.
    CHECK(s2.hash_before == s1.hash_after);
    CHECK(s3.hash_before == s2.hash_after);
    CHECK(s1.hash_before.at("backbone") == model::parameter_hash<double>(std::as_const(base).backbone_parameters()));
    CHECK(s3.hash_after == group_hashes(result.model));

    REQUIRE(rec.steps.size() == cfg.variant.total_steps());
    const std::int64_t warm = 1;  // ceil(0.1 * 10)
    for (const auto& s : rec.steps) {
        CHECK(std::isfinite(s.loss));
        if (s.stage == "stage1") CHECK(s.alpha == 0.0);
        if (s.stage == "stage2") CHECK(s.alpha == alpha_schedule(static_cast<std::int64_t>(s.step), warm, 0.15));
        if (s.stage == "stage3") CHECK(s.alpha == 0.15);
    }

    const auto csv = temp_path("loss.csv");
    write_loss_csv(csv, rec);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "stage,step,alpha,loss");
    const auto audit = temp_path("audit.json");
    write_hash_audit(audit, rec);
    std::ifstream ain(audit);
    const auto j = nlohmann::json::parse(ain);
    CHECK(j["stages"].size() == 3);
    CHECK(j["stages"][1]["frozen_unchanged"] == nlohmann::json::array({"backbone", "lora"}));
}

TEST_CASE("variants") {
    auto cfg = small_experiment();
    const auto d = make_agreement_data(cfg, 4);
    auto base = small_base(cfg, d);
    const auto lora = run_variant(Variant::lora_only, cfg.variant, base, std::span(d.train_examples), 9);
    REQUIRE(lora.record.stages.size() == 1);
    CHECK(lora.record.stages[0].steps == cfg.variant.total_steps());
    CHECK(lora.record.stages[0].hash_before.at("structural") == lora.record.stages[0].hash_after.at("structural"));
    for (const auto& s : lora.record.steps) CHECK(s.alpha == 0.0);

    const auto joint = run_variant(Variant::direct_joint, cfg.variant, base, std::span(d.train_examples), 9);
    REQUIRE(joint.record.stages.size() == 1);
    CHECK(joint.record.stages[0].trained == std::vector<std::string>{"lora", "structural"});
    CHECK(joint.record.steps.size() == cfg.variant.total_steps());
    for (const auto& s : joint.record.steps) CHECK(s.alpha == cfg.variant.alpha_star);

    CHECK(parse_variant("gtca_staged") == Variant::gtca_staged);
    CHECK_THROWS_AS(parse_variant("staged"), InputError);
    CHECK_THROWS_AS(run_variant(Variant::lora_only, cfg.variant, lora.model, std::span(d.train_examples), 9),
                    InputError);

    // Same seed, same parameters; worker count does not matter.
    auto threaded = cfg.variant;
    threaded.run.threads = 3;
    const auto a = run_variant(Variant::gtca_staged, cfg.variant, base, std::span(d.train_examples), 11);
    const auto b = run_variant(Variant::gtca_staged, threaded, base, std::span(d.train_examples), 11);
    CHECK(group_hashes(a.model) == group_hashes(b.model));
    const auto c = run_variant(Variant::gtca_staged, cfg.variant, base, std::span(d.train_examples), 12);
    CHECK(group_hashes(a.model) != group_hashes(c.model));
}

TEST_CASE("run_stage errors") {
    const auto cfg = small_experiment();
    const auto d = make_agreement_data(cfg, 4);
    auto m = small_base(cfg, d);
    TrainRunRecord rec;
    const std::span<const TrainExample> data(d.train_examples);
    CHECK_THROWS_AS(run_stage(m, stage1_plan(2, 1e-3, 2), data, 1, rec), InputError);
    CHECK_THROWS_AS(run_stage(m, stage2_plan(2, 1e-3, 2, 0.1, 0.1), data, 1, rec), InputError);
    CHECK_THROWS_AS(run_stage(m, pretrain_plan(2, 1e-3, 2), {}, 1, rec), InputError);
    auto broken = d.train_examples;
    broken[0].targets.pop_back();
    CHECK_THROWS_AS(run_stage(m, pretrain_plan(2, 1e-3, 2), std::span<const TrainExample>(broken), 1, rec),
                    InputError);

    // A non-finite parameter aborts at the first step and names it.
    m.head.value.data()[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        run_stage(m, pretrain_plan(3, 1e-3, 2), data, 1, rec);
        FAIL("expected a numeric error");
    } catch (const num::NumericError& e) {
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("training lowers the answer loss") {
    const auto cfg = small_experiment();
    const auto d = make_agreement_data(cfg, 4);
    auto m = small_base(cfg, d);
    m.lora_wrap(m.attention_targets(), 2, 4.0, 1);
    const std::span<const TrainExample> data(d.train_examples);
    const double before = mean_loss(m, data, 0.0);
    TrainRunRecord rec;
    run_stage(m, stage1_plan(40, 1e-2, 4), data, 1, rec);
    CHECK(mean_loss(m, data, 0.0) < before);
}

TEST_CASE("alpha selection rule") {
    // Dominance: one candidate best on both metrics.
    auto s = select_alpha({{0.0, 70, 60}, {0.1, 72, 65}, {0.2, 69.5, 62}}, 70);
    CHECK(s.alpha == 0.1);
    CHECK_FALSE(s.fallback);

    // Retention constraint excludes the best syntax score.
    s = select_alpha({{0.0, 70, 60}, {0.1, 69.5, 64}, {0.2, 68.9, 70}}, 70);
    CHECK(s.alpha == 0.1);
    CHECK(s.feasible == std::vector<bool>{true, true, false});

    // Exactly 1.0 point is still within the budget.
    s = select_alpha({{0.0, 70, 60}, {0.2, 69.0, 61}}, 70);
    CHECK(s.alpha == 0.2);

    // {0, x}: 0 always passes against itself, so x wins only if it passes too.
    s = select_alpha({{0.0, 70, 60}, {0.3, 50, 99}}, 70);
    CHECK(s.alpha == 0.0);

    // Ties go to the smaller alpha regardless of input order.
    s = select_alpha({{0.2, 70, 65}, {0.0, 70, 60}, {0.1, 70, 65}}, 70);
    CHECK(s.alpha == 0.1);

    // Nobody passes: highest composite mean, flagged.
    s = select_alpha({{0.1, 60, 70}, {0.2, 65, 66}}, 70);
    CHECK(s.fallback);
    CHECK(s.alpha == 0.2);
    CHECK(s.trace.find("fell back") != std::string::npos);

    CHECK_THROWS_AS(select_alpha({{0.0, 1, 1}}, 1), InputError);

    const auto path = temp_path("grid.csv");
    write_grid_csv(path, select_alpha({{0.0, 70, 60}, {0.1, 69.5, 64}}, 70));
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() == "alpha,retention,syntax,retention_drop,feasible,selected\n0,70,60,0,1,0\n0.10000000000000001,69.5,64,0.5,1,1\n");
}

TEST_CASE("grid search driver") {
    auto cfg = small_experiment();
    cfg.variant.stage1 = {2, 1e-2};
    cfg.variant.stage2 = {2, 1e-2};
    cfg.variant.stage3 = {2, 1e-2};
    const auto d = make_agreement_data(cfg, 4);
    auto base = small_base(cfg, d);
    GridValidation val;
    val.tokenizer = &d.tokenizer;
    val.retention_template = d.tmpl;
    val.syntax_template = d.tmpl;
    for (const auto& e : d.test) {
        val.retention.push_back(e.item);
        val.syntax_mcqa.push_back(e.item);
    }
    val.lookup = [&](const data::Prompt& p, std::size_t i) -> std::optional<data::PromptStructure> {
        return data::prompt_structure(p, d.test[i].record);
    };
    const std::vector<double> candidates = {0.05, 0.15};
    const std::vector<std::uint64_t> seeds = {1};
    const auto sel = grid_search_alpha(std::span(candidates), cfg.variant, base, std::span(d.train_examples), val,
                                       std::span(seeds));
    REQUIRE(sel.rows.size() == 2);
    CHECK(sel.rows[0].alpha == 0.05);
    for (const auto& r : sel.rows) {
        CHECK(r.retention >= 0.0);
        CHECK(r.retention <= 100.0);
    }
    // Identical sets for both metrics.
    CHECK(sel.rows[1].retention == sel.rows[1].syntax);

    const std::vector<double> one = {0.1};
    CHECK_THROWS_AS(grid_search_alpha(std::span(one), cfg.variant, base, std::span(d.train_examples), val,
                                      std::span(seeds)),
                    InputError);
    GridValidation empty = val;
    empty.retention.clear();
    CHECK_THROWS_AS(grid_search_alpha(std::span(candidates), cfg.variant, base, std::span(d.train_examples), empty,
                                      std::span(seeds)),
                    InputError);
}
