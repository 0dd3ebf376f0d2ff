// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gtca/cli/commands.hpp"
#include "gtca/data/synthetic.hpp"
#include "gtca/eval/controls.hpp"
#include "gtca/model/checkpoint.hpp"
#include "gtca/model/tokenizer.hpp"
#include "gtca/treebank/trees_file.hpp"
#include "gtca/util/bytes.hpp"
#include "gtca/util/hash.hpp"
#include "json.hpp"

using namespace gtca;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "gtca_unit_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// A synthetic workspace with a config shrunk to a few training steps.
fs::path workspace(const std::string& name) {
    const auto dir = fresh_dir(name);
    cli::CommandArgs a;
    a.seed = 5;
    a.out = dir;
    a.train_examples = 24;
    a.test_examples = 12;
    cli::cmd_synth(a);
    json c = json::parse(read_file_text((dir / "config.json").string()));
    c["train"]["pretrain_steps"] = 4;
    for (const char* s : {"stage1", "stage2", "stage3"}) c["train"][s]["steps"] = 4;
    c["probe"]["steps"] = 10;
    std::ofstream(dir / "config.json") << c.dump(2);
    return dir;
}

cli::CommandArgs args_for(const fs::path& dir, const std::string& out) {
    cli::CommandArgs a;
    a.config = dir / "config.json";
    a.seed = 1;
    a.out = dir / out;
    return a;
}

std::string slurp(const fs::path& p) { return read_file_text(p.string()); }

}  // namespace

TEST_CASE("config loading") {
    const auto dir = fresh_dir("config");
    std::ofstream(dir / "a.json") << R"({"tokenizer": "v.txt", "train": {"dataset": "d.jsonl", "lora_rank": 3,
        "stage2": {"steps": 7}}, "eval": {"dataset": "/abs/e.jsonl", "format": "binary", "alpha": 0.25}})";
    const auto c = cli::load_config(dir / "a.json");
    CHECK(c.tokenizer == dir / "v.txt");
    CHECK(c.train_data.dataset == dir / "d.jsonl");
    CHECK(c.variant_config.lora_rank == 3);
    CHECK(c.variant_config.stage2.steps == 7);
    CHECK(c.eval_data.dataset == "/abs/e.jsonl");
    CHECK(c.eval_alpha == 0.25);
    CHECK(cli::template_for(c, c.eval_data).name == "binary");
    CHECK(c.blob_sha1.size() == 40);

    std::ofstream(dir / "b.json") << R"({"train": {"lora_rnak": 3}})";
    CHECK_THROWS_AS(cli::load_config(dir / "b.json"), InputError);
    std::ofstream(dir / "c.json") << R"({"train": {"variant": "joint"}})";
    CHECK_THROWS_AS(cli::load_config(dir / "c.json"), InputError);
    std::ofstream(dir / "d.json") << "{";
    CHECK_THROWS_AS(cli::load_config(dir / "d.json"), InputError);
    CHECK_THROWS_AS(cli::load_config(dir / "missing.json"), InputError);
}

TEST_CASE("k-shot prompts reuse the zero-shot cache entry") {
    const model::Tokenizer tok(data::agreement_vocabulary());
    data::AgreementConfig task;
    task.examples = 6;
    const auto set = data::generate_agreement(task, 2, "t");
    auto tmpl = data::agreement_template();
    tree::StructureCache cache;
    for (const auto& e : set) {
        const auto p = data::assemble_prompt(tmpl, tok, {}, e.item);
        const auto st = data::prompt_structure(p, e.record);
        cache.put_entry(tree::cache_key(p.ids), {st.fields, st.mask});
    }
    std::vector<data::McqaItem> demos = {set[0].item, set[1].item};
    for (std::size_t k : {0, 1, 2}) {
        tmpl.k = k;
        for (std::size_t i = 2; i < set.size(); ++i) {
            const auto p = data::assemble_prompt(tmpl, tok, demos, set[i].item);
            // Oracle: structure computed directly on the k-shot prompt.
            const auto direct = data::prompt_structure(p, set[i].record);
            const auto cached = cli::cached_structure(cache, p);
            REQUIRE(cached.has_value());
            CHECK(cached->mask == direct.mask);
            CHECK(cached->fields == direct.fields);
        }
    }
    const model::Tokenizer other({"<unk>", "<bos>", "<nl>", "x"});
    CHECK_FALSE(cli::cached_structure(cache, data::sentence_prompt(other, "x")).has_value());
}

TEST_CASE("agreement gold edges") {
    // "the cat of the dogs near the key by the box", head 1 (dogs).
    const auto g = cli::agreement_gold("the cat of the dogs near the key by the box", 1);
    const std::vector<probe::Edge> expected = {{0, 1}, {1, 2}, {2, 4}, {3, 4}, {4, 5}, {5, 7}, {6, 7}, {4, 8}, {8, 10},
                                               {9, 10}};
    auto sorted = expected;
    std::sort(sorted.begin(), sorted.end());
    CHECK(g.edges == sorted);
    CHECK_THROWS_AS(cli::agreement_gold("the cat of", 0), InputError);
    CHECK_THROWS_AS(cli::agreement_gold("the cat of the dog", 2), InputError);
}

TEST_CASE("command pipeline") {
    const auto dir = workspace("pipeline");

    auto cache_args = args_for(dir, "cache");
    cli::cmd_build_cache(cache_args);
    const auto cache_bytes = slurp(dir / "cache/structure.cache");
    cli::cmd_build_cache(cache_args);
    CHECK(slurp(dir / "cache/structure.cache") == cache_bytes);
    {
        tree::StructureCache c(dir / "cache/structure.cache");
        CHECK(c.size() == 36);
    }

    auto train_args = args_for(dir, "run");
    cli::cmd_train(train_args);
    const auto ckpt = dir / "run/checkpoint.gtca";
    REQUIRE(fs::exists(ckpt));
    const auto audit = json::parse(slurp(dir / "run/hash_audit.json"));
    REQUIRE(audit.at("stages").size() == 3);
    for (const auto& st : audit.at("stages")) {
        for (const auto& [group, hash] : st.at("hash_before").items()) {
            const auto trained = st.at("trained").get<std::vector<std::string>>();
            if (std::find(trained.begin(), trained.end(), group) != trained.end()) continue;
            CHECK(st.at("hash_after").at(group) == hash);
        }
    }

    SUBCASE("no_mask ablation equals a direct call with the mask disabled") {
        auto ab = args_for(dir, "ab");
        ab.checkpoint = ckpt;
        ab.toggle = "no_mask";
        cli::cmd_eval(ab);

        const auto config = cli::load_config(dir / "config.json");
        const auto tok = model::Tokenizer::from_file(config.tokenizer);
        const auto m = model::load_checkpoint<float>(ckpt);
        const auto items = data::read_mcqa_file(config.eval_data.dataset);
        tree::StructureCache cache(dir / "cache/structure.cache");
        eval::EvalSettings s{config.tmpl, {}, 1};
        s.update.alpha = config.variant_config.alpha_star;
        s.update.mask_enabled = false;
        const eval::StructureLookup lookup = [&](const data::Prompt& p, std::size_t) {
            return cli::cached_structure(cache, p);
        };
        const auto res = eval::evaluate_mcqa(m, tok, std::span(items), {}, lookup, s);
        std::ifstream in(dir / "ab/predictions.jsonl");
        std::string line;
        std::size_t i = 0;
        while (std::getline(in, line)) {
            const auto j = json::parse(line);
            REQUIRE(i < res.size());
            CHECK(j.at("id") == res[i].id);
            for (std::size_t o = 0; o < res[i].scores.size(); ++o)
                CHECK(j.at("scores").at(o).get<double>() == res[i].scores[o].loglik);
            ++i;
        }
        CHECK(i == res.size());
    }

    SUBCASE("ablation manifests differ from eval only in the control") {
        auto ev = args_for(dir, "ev");
        ev.checkpoint = ckpt;
        cli::cmd_eval(ev);
        auto ab = args_for(dir, "ab_random");
        ab.checkpoint = ckpt;
        ab.toggle = "random_tree";
        cli::cmd_eval(ab);
        const auto a = json::parse(slurp(dir / "ev/eval.manifest.json"));
        const auto b = json::parse(slurp(dir / "ab_random/ablate.manifest.json"));
        CHECK(a.at("inputs") == b.at("inputs"));
        CHECK(a.at("config_git_sha1") == b.at("config_git_sha1"));
        auto sa = a.at("settings"), sb = b.at("settings");
        CHECK(sa.at("control") == "none");
        CHECK(sb.at("control") == "random_tree");
        sa.erase("control");
        sb.erase("control");
        CHECK(sa == sb);
        // Each output is listed with the hash of its bytes.
        for (const auto& o : b.at("outputs")) {
            const auto bytes = read_file_bytes((dir / "ab_random" / o.at("path").get<std::string>()).string());
            CHECK(o.at("sha256") == sha256_hex(std::span<const std::uint8_t>(bytes)));
        }
    }

    SUBCASE("reruns are byte-identical") {
        auto ev1 = args_for(dir, "e1");
        ev1.checkpoint = ckpt;
        auto ev2 = args_for(dir, "e2");
        ev2.checkpoint = ckpt;
        ev2.threads = 3;
        cli::cmd_eval(ev1);
        cli::cmd_eval(ev2);
        CHECK(slurp(dir / "e1/metrics.csv") == slurp(dir / "e2/metrics.csv"));
        CHECK(slurp(dir / "e1/predictions.jsonl") == slurp(dir / "e2/predictions.jsonl"));
        auto tr = args_for(dir, "run_again");
        cli::cmd_train(tr);
        CHECK(slurp(dir / "run_again/checkpoint.gtca") == slurp(ckpt));
        auto pr1 = args_for(dir, "p1");
        pr1.checkpoint = ckpt;
        pr1.subsample = 10;
        cli::cmd_probe(pr1);
        auto pr2 = pr1;
        pr2.out = dir / "p2";
        cli::cmd_probe(pr2);
        CHECK(slurp(dir / "p1/uuas.csv") == slurp(dir / "p2/uuas.csv"));
    }

    SUBCASE("strict cache") {
        auto tr = args_for(dir, "nocache");
        tr.cache = dir / "missing.cache";
        CHECK_THROWS_AS(cli::cmd_train(tr), InputError);
        // An empty cache file has no entries for the training prompts.
        { tree::StructureCache empty(dir / "empty.cache"); }
        tr.cache = dir / "empty.cache";
        CHECK_THROWS_WITH_AS(cli::cmd_train(tr), doctest::Contains("no cached structure"), InputError);
    }
}

TEST_CASE("build-cache keys by content") {
    const auto dir = fresh_dir("dupes");
    std::ofstream(dir / "vocab.txt") << "<unk>\n<bos>\n<nl>\nthe\ncat\nsleeps\ndog\n";
    std::ofstream(dir / "pairs.jsonl")
        << R"J({"id": "a", "sentence_good": "the cat sleeps", "sentence_bad": "cat the sleeps"})J" << "\n"
        << R"J({"id": "b", "sentence_good": "the cat sleeps", "sentence_bad": "the dog"})J" << "\n";
    const std::string good = R"J({"name": "good", "tree": "(S (NP (DT the) (NN cat)) (VP (VBZ sleeps)))", "word_token_spans": [[0,0],[1,1],[2,2]]})J";
    std::ofstream(dir / "trees.jsonl")
        << R"J({"id": "a", "fields": [)J" << good
        << R"J(, {"name": "bad", "tree": "(X (NN cat) (DT the) (VBZ sleeps))", "word_token_spans": [[0,0],[1,1],[2,2]]}]})J" << "\n"
        << R"J({"id": "b", "fields": [)J" << good
        << R"J(, {"name": "bad", "tree": "(NP (DT the) (NN dog))", "word_token_spans": [[0,0],[1,1]]}]})J" << "\n";
    std::ofstream(dir / "config.json") << R"({"tokenizer": "vocab.txt", "eval": {"dataset": "pairs.jsonl",
        "format": "pairs", "trees": "trees.jsonl"}})";
    cli::CommandArgs a;
    a.config = dir / "config.json";
    a.out = dir / "cache";
    cli::cmd_build_cache(a);
    const auto m = json::parse(read_file_text((dir / "cache/build-cache.manifest.json").string()));
    CHECK(m.at("settings").at("entries_written") == "4");
    CHECK(m.at("settings").at("distinct_entries") == "3");

    // The same sentence with a different tree under a second id is ambiguous.
    std::ofstream(dir / "trees2.jsonl")
        << R"J({"id": "a", "fields": [)J" << good
        << R"J(, {"name": "bad", "tree": "(X (NN cat) (DT the) (VBZ sleeps))", "word_token_spans": [[0,0],[1,1],[2,2]]}]})J" << "\n"
        << R"J({"id": "b", "fields": [{"name": "good", "tree": "(S (DT the) (NN cat) (VBZ sleeps))", "word_token_spans": [[0,0],[1,1],[2,2]]}, {"name": "bad", "tree": "(NP (DT the) (NN dog))", "word_token_spans": [[0,0],[1,1]]}]})J" << "\n";
    a.out = dir / "cache2";
    a.dataset = dir / "pairs.jsonl";
    a.format = "pairs";
    a.trees = dir / "trees2.jsonl";
    CHECK_THROWS_AS(cli::cmd_build_cache(a), InputError);
}
