// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/cli/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "gtca/data/synthetic.hpp"
#include "gtca/eval/controls.hpp"
#include "gtca/model/checkpoint.hpp"
#include "gtca/model/tokenizer.hpp"
#include "gtca/treebank/trees_file.hpp"
#include "gtca/util/bytes.hpp"
#include "gtca/util/errors.hpp"
#include "gtca/util/hash.hpp"
#include "gtca/util/rng.hpp"
#include "json.hpp"

namespace gtca::cli {

using json = nlohmann::json;

namespace {

constexpr const char* kCheckpointName = "checkpoint.gtca";
constexpr const char* kCacheName = "structure.cache";

std::string num_str(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Rejects keys outside `allowed` so a misspelled option is not silently ignored.
void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw InputError("config: '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw InputError("config: unknown key '" + key + "' in '" + where + "'");
    }
}

template <typename V>
void read_opt(const json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

fs::path resolve(const fs::path& base, const json& j, const char* key) {
    if (!j.contains(key)) return {};
    fs::path p = j.at(key).get<std::string>();
    if (p.empty() || p.is_absolute()) return p;
    return base / p;
}

data::PromptTemplate parse_template(const json& j) {
    if (j.is_string()) {
        const auto name = j.get<std::string>();
        if (name == "agreement") return data::agreement_template();
        return data::builtin_template(name);
    }
    check_keys(j, "template", {"name", "instruction", "context_line", "question_label", "options_label",
                               "list_options", "answer_cue", "k"});
    if (j.value("name", std::string("mcqa")) != "agreement") return data::template_from_json(j.dump());
    auto t = data::agreement_template();
    read_opt(j, "instruction", t.instruction);
    read_opt(j, "context_line", t.context_line);
    read_opt(j, "question_label", t.question_label);
    read_opt(j, "options_label", t.options_label);
    read_opt(j, "list_options", t.list_options);
    read_opt(j, "answer_cue", t.answer_cue);
    read_opt(j, "k", t.k);
    return t;
}

DataSpec parse_data(const fs::path& base, const json& j, const std::string& where) {
    check_keys(j, where, {"dataset", "format", "trees", "demos", "template"});
    DataSpec d;
    d.dataset = resolve(base, j, "dataset");
    read_opt(j, "format", d.format);
    if (d.format != "mcqa" && d.format != "pairs" && d.format != "binary")
        throw InputError("config: '" + where + ".format' must be mcqa, pairs or binary");
    d.trees = resolve(base, j, "trees");
    d.demos = resolve(base, j, "demos");
    if (j.contains("template")) d.tmpl = parse_template(j.at("template"));
    return d;
}

void parse_model(const json& j, model::ModelConfig& m) {
    check_keys(j, "model", {"d_model", "layers", "heads", "head_dim", "max_len", "mlp_ratio"});
    read_opt(j, "d_model", m.d_model);
    read_opt(j, "layers", m.layers);
    read_opt(j, "heads", m.heads);
    read_opt(j, "head_dim", m.head_dim);
    read_opt(j, "max_len", m.max_len);
    read_opt(j, "mlp_ratio", m.mlp_ratio);
}

void parse_stage(const json& j, const std::string& where, train::StageBudget& s) {
    check_keys(j, where, {"steps", "lr"});
    read_opt(j, "steps", s.steps);
    read_opt(j, "lr", s.lr);
}

void parse_variant(const json& j, RunConfig& c) {
    auto& v = c.variant_config;
    read_opt(j, "lora_rank", v.lora_rank);
    read_opt(j, "lora_alpha", v.lora_alpha);
    read_opt(j, "lora_targets", v.lora_targets);
    read_opt(j, "max_chunks", v.max_chunks);
    read_opt(j, "max_height", v.max_height);
    if (j.contains("stage1")) parse_stage(j.at("stage1"), "stage1", v.stage1);
    if (j.contains("stage2")) parse_stage(j.at("stage2"), "stage2", v.stage2);
    if (j.contains("stage3")) parse_stage(j.at("stage3"), "stage3", v.stage3);
    read_opt(j, "batch", v.batch);
    read_opt(j, "warmup_fraction", v.warmup_fraction);
    read_opt(j, "alpha_star", v.alpha_star);
    read_opt(j, "weight_decay", v.run.optimizer.weight_decay);
    read_opt(j, "clip_norm", v.run.optimizer.clip_norm);
}

std::vector<data::McqaItem> read_items_as_mcqa(const DataSpec& spec) {
    if (spec.format == "mcqa") return data::read_mcqa_file(spec.dataset);
    if (spec.format == "binary") {
        std::vector<data::McqaItem> out;
        for (const auto& b : data::read_binary_file(spec.dataset)) out.push_back(data::binary_as_mcqa(b));
        return out;
    }
    throw InputError("dataset " + spec.dataset.string() + " is not mcqa or binary");
}

std::vector<data::McqaItem> read_demos(const DataSpec& spec, std::size_t k) {
    if (k == 0) return {};
    if (spec.demos.empty()) throw InputError("k = " + std::to_string(k) + " needs a demos file");
    DataSpec d = spec;
    d.dataset = spec.demos;
    return read_items_as_mcqa(d);
}

Artifact artifact(const fs::path& file, const fs::path& relative_to) {
    const auto bytes = read_file_bytes(file.string());
    return {fs::relative(file, relative_to).generic_string(), sha256_hex(std::span<const std::uint8_t>(bytes))};
}

Artifact input_artifact(const fs::path& file) {
    const auto bytes = read_file_bytes(file.string());
    return {file.generic_string(), sha256_hex(std::span<const std::uint8_t>(bytes))};
}

struct Run {
    RunConfig config;
    RunManifest manifest;
    fs::path out;

    Run(const std::string& command, const CommandArgs& args) : config(args.config.empty() ? RunConfig{} : load_config(args.config)), out(args.out) {
        if (args.out.empty()) throw InputError("--out is required");
        fs::create_directories(out);
        manifest.command = command;
        manifest.config = args.config.generic_string();
        manifest.config_sha1 = config.blob_sha1;
        manifest.seeds = {args.seed};
        manifest.output_dir = out.generic_string();
        if (args.threads) config.threads = *args.threads;
        if (!args.cache.empty()) config.cache = args.cache;
    }

    void input(const fs::path& p) {
        if (p.empty()) return;
        for (const auto& a : manifest.inputs)
            if (a.path == p.generic_string()) return;
        manifest.inputs.push_back(input_artifact(p));
    }
    void setting(const std::string& key, const std::string& value) { manifest.settings.emplace_back(key, value); }
    void output(const std::string& name) { manifest.outputs.push_back(artifact(out / name, out)); }
    void finish() { write_manifest(out, manifest); }

    model::Tokenizer tokenizer() {
        if (config.tokenizer.empty()) throw InputError("config has no tokenizer");
        input(config.tokenizer);
        return model::Tokenizer::from_file(config.tokenizer);
    }
};

std::optional<data::PromptStructure> lookup_or_fallback(tree::StructureCache& cache, const data::Prompt& p, bool strict,
                                                        const tree::MaskOptions& mask, const std::string& id) {
    auto st = cached_structure(cache, p);
    if (st) return st;
    if (strict) throw InputError("no cached structure for item '" + id + "' (run build-cache)");
    return data::mask_only_structure(p, mask);
}

// Base model for training: a checkpoint, or a fresh backbone with an optional
// next-token pretraining stage on the training questions.
model::Transformer<float> base_model(Run& run, const model::Tokenizer& tok, const std::vector<data::McqaItem>& items,
                                     std::uint64_t seed) {
    const auto& c = run.config;
    if (!c.base_checkpoint.empty()) {
        run.input(c.base_checkpoint);
        auto m = model::load_checkpoint<float>(c.base_checkpoint);
        if (m.config().vocab != tok.size()) throw InputError("base checkpoint vocabulary does not match tokenizer");
        return m;
    }
    model::ModelConfig mc = c.model;
    mc.vocab = tok.size();
    model::Transformer<float> m(mc, derive_seed(seed, "cli.backbone"));
    if (c.pretrain_steps > 0) {
        std::vector<train::TrainExample> lm;
        for (const auto& item : items) {
            std::vector<std::int32_t> ids = {tok.bos_id()};
            const auto q = tok.encode(item.question).ids;
            ids.insert(ids.end(), q.begin(), q.end());
            lm.push_back(train::language_model_example(ids));
        }
        train::TrainRunRecord rec;
        rec.seed = seed;
        train::RunOptions opts = c.variant_config.run;
        opts.threads = c.threads;
        train::run_stage(m, train::pretrain_plan(c.pretrain_steps, c.pretrain_lr, c.variant_config.batch),
                         std::span<const train::TrainExample>(lm), seed, rec, opts);
        train::write_loss_csv(run.out / "pretrain_loss.csv", rec);
        run.output("pretrain_loss.csv");
    }
    return m;
}

std::vector<train::TrainExample> training_examples(Run& run, const model::Tokenizer& tok,
                                                   const std::vector<data::McqaItem>& items,
                                                   tree::StructureCache& cache) {
    const auto tmpl = template_for(run.config, run.config.train_data);
    if (tmpl.k != 0) throw InputError("training prompts are zero-shot; set k = 0 for the training template");
    std::vector<train::TrainExample> out;
    for (const auto& item : items) {
        const auto prompt = data::assemble_prompt(tmpl, tok, {}, item);
        const auto st = lookup_or_fallback(cache, prompt, run.config.strict_cache, run.config.mask, item.id);
        const auto answer = tok.encode(item.options[item.answer]).ids;
        out.push_back(train::answer_example(prompt, &*st, answer));
    }
    return out;
}

std::unique_ptr<tree::StructureCache> open_cache(Run& run) {
    if (run.config.cache.empty()) return std::make_unique<tree::StructureCache>();
    if (!fs::exists(run.config.cache)) throw InputError("structure cache " + run.config.cache.string() + " not found");
    run.input(run.config.cache);
    return std::make_unique<tree::StructureCache>(run.config.cache);
}

eval::StructureLookup cache_lookup(tree::StructureCache& cache, const RunConfig& c, eval::Control control,
                                   std::uint64_t seed, std::function<std::string(std::size_t)> id_of) {
    return [&cache, &c, control, seed, id_of](const data::Prompt& p,
                                               std::size_t i) -> std::optional<data::PromptStructure> {
        const auto id = id_of(i);
        auto st = lookup_or_fallback(cache, p, c.strict_cache, c.mask, id);
        if (control == eval::Control::none || !st) return st;
        return eval::corrupt_structure(*st, control, derive_seed(seed, "control." + id));
    };
}

void write_metrics_csv(const fs::path& path, const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << "dataset,metric,value,n_items,n_ties,seed\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
        out << '\n';
    }
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& r : rows) out << r.dump() << '\n';
}

std::vector<std::string> split_words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

}  // namespace

RunConfig load_config(const fs::path& path) {
    RunConfig c;
    c.path = path;
    if (!fs::is_regular_file(path)) throw InputError("config " + path.string() + " not found");
    const std::string text = read_file_text(path.string());
    c.blob_sha1 = git_blob_sha1(text);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
    const fs::path base = path.parent_path();
    try {
        check_keys(j, "config", {"model", "tokenizer", "template", "mask", "cache", "strict_cache", "threads", "train",
                                 "eval", "grid", "probe", "experiment"});
        if (j.contains("model")) parse_model(j.at("model"), c.model);
        c.tokenizer = resolve(base, j, "tokenizer");
        if (j.contains("template")) c.tmpl = parse_template(j.at("template"));
        if (j.contains("mask")) {
            check_keys(j.at("mask"), "mask", {"enabled", "strict"});
            read_opt(j.at("mask"), "enabled", c.mask.mask_enabled);
            read_opt(j.at("mask"), "strict", c.mask.strict);
        }
        c.cache = resolve(base, j, "cache");
        read_opt(j, "strict_cache", c.strict_cache);
        read_opt(j, "threads", c.threads);

        if (j.contains("train")) {
            const auto& t = j.at("train");
            check_keys(t, "train",
                       {"dataset", "format", "trees", "demos", "template", "variant", "lora_rank", "lora_alpha",
                        "lora_targets", "max_chunks", "max_height", "stage1", "stage2", "stage3", "batch",
                        "warmup_fraction", "alpha_star", "weight_decay", "clip_norm", "pretrain_steps", "pretrain_lr",
                        "base_checkpoint"});
            json data_part = json::object();
            for (const char* k : {"dataset", "format", "trees", "demos", "template"})
                if (t.contains(k)) data_part[k] = t.at(k);
            c.train_data = parse_data(base, data_part, "train");
            read_opt(t, "variant", c.variant);
            (void)train::parse_variant(c.variant);
            parse_variant(t, c);
            read_opt(t, "pretrain_steps", c.pretrain_steps);
            read_opt(t, "pretrain_lr", c.pretrain_lr);
            c.base_checkpoint = resolve(base, t, "base_checkpoint");
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            check_keys(e, "eval", {"dataset", "format", "trees", "demos", "template", "alpha"});
            json data_part = e;
            data_part.erase("alpha");
            c.eval_data = parse_data(base, data_part, "eval");
            if (e.contains("alpha")) c.eval_alpha = e.at("alpha").get<double>();
        }
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            check_keys(g, "grid", {"alphas", "retention", "syntax", "max_drop", "seeds"});
            read_opt(g, "alphas", c.grid_alphas);
            if (g.contains("retention")) c.grid_retention = parse_data(base, g.at("retention"), "grid.retention");
            if (g.contains("syntax")) c.grid_syntax = parse_data(base, g.at("syntax"), "grid.syntax");
            read_opt(g, "max_drop", c.grid_max_drop);
            read_opt(g, "seeds", c.grid_seeds);
        }
        if (j.contains("probe")) {
            const auto& p = j.at("probe");
            check_keys(p, "probe",
                       {"gold", "subsample", "rank", "steps", "lr", "checkpoint_every", "heldout_fraction"});
            c.probe_gold = resolve(base, p, "gold");
            read_opt(p, "subsample", c.probe_subsample);
            read_opt(p, "rank", c.probe.probe.rank);
            read_opt(p, "steps", c.probe.probe.steps);
            read_opt(p, "lr", c.probe.probe.lr);
            read_opt(p, "checkpoint_every", c.probe.probe.checkpoint_every);
            read_opt(p, "heldout_fraction", c.probe.heldout_fraction);
        }
        if (j.contains("experiment")) {
            const auto& x = j.at("experiment");
            check_keys(x, "experiment",
                       {"model", "nouns", "train_examples", "test_examples", "pretrain_steps", "pretrain_lr",
                        "lora_rank", "lora_alpha", "max_height", "stage1", "stage2", "stage3", "batch",
                        "warmup_fraction", "alpha_star", "seeds"});
            auto& e = c.experiment;
            if (x.contains("model")) parse_model(x.at("model"), e.model);
            read_opt(x, "nouns", e.task.nouns);
            read_opt(x, "train_examples", e.train_examples);
            read_opt(x, "test_examples", e.test_examples);
            read_opt(x, "pretrain_steps", e.pretrain_steps);
            read_opt(x, "pretrain_lr", e.pretrain_lr);
            read_opt(x, "lora_rank", e.variant.lora_rank);
            read_opt(x, "lora_alpha", e.variant.lora_alpha);
            read_opt(x, "max_height", e.variant.max_height);
            if (x.contains("stage1")) parse_stage(x.at("stage1"), "stage1", e.variant.stage1);
            if (x.contains("stage2")) parse_stage(x.at("stage2"), "stage2", e.variant.stage2);
            if (x.contains("stage3")) parse_stage(x.at("stage3"), "stage3", e.variant.stage3);
            read_opt(x, "batch", e.variant.batch);
            read_opt(x, "warmup_fraction", e.variant.warmup_fraction);
            read_opt(x, "alpha_star", e.variant.alpha_star);
            read_opt(x, "seeds", e.seeds);
        }
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
    return c;
}

data::PromptTemplate template_for(const RunConfig& config, const DataSpec& spec) {
    if (spec.tmpl) return *spec.tmpl;
    if (spec.format == "binary") {
        auto t = data::builtin_template("binary");
        t.k = config.tmpl.k;
        return t;
    }
    return config.tmpl;
}

std::vector<data::Prompt> dataset_prompts(const RunConfig& config, const DataSpec& spec,
                                          const model::Tokenizer& tok) {
    std::vector<data::Prompt> out;
    if (spec.format == "pairs") {
        for (const auto& p : data::read_pairs_file(spec.dataset)) {
            out.push_back(data::sentence_prompt(tok, p.good));
            out.push_back(data::sentence_prompt(tok, p.bad));
        }
        return out;
    }
    auto tmpl = template_for(config, spec);
    tmpl.k = 0;
    for (const auto& item : read_items_as_mcqa(spec)) out.push_back(data::assemble_prompt(tmpl, tok, {}, item));
    return out;
}

std::optional<data::PromptStructure> cached_structure(tree::StructureCache& cache, const data::Prompt& prompt) {
    std::size_t lo = prompt.ids.size(), hi = 0;
    for (const auto& s : prompt.segments) {
        if (s.kind != tree::SegmentKind::demo) continue;
        lo = std::min(lo, s.span.lo);
        hi = std::max(hi, s.span.hi);
    }
    if (lo == prompt.ids.size()) {
        auto e = cache.get_entry(tree::cache_key(prompt.ids));
        if (!e) return std::nullopt;
        if (e->mask.size() != prompt.ids.size()) throw InputError("cached mask length does not match prompt");
        return data::PromptStructure{std::move(e->fields), std::move(e->mask)};
    }
    // Every block ends its line, so one newline token follows the last
    // demonstration; it belongs to the removed region.
    ++hi;
    if (hi >= prompt.ids.size()) throw InputError("prompt ends inside its demonstrations");
    for (const auto& s : prompt.segments) {
        const bool outside = s.span.hi < lo || s.span.lo > hi;
        if (!outside && !s.field.empty()) throw InputError("a prompt field overlaps the demonstrations");
    }
    const std::size_t width = hi - lo + 1;
    std::vector<std::int32_t> zero_shot(prompt.ids.begin(), prompt.ids.begin() + static_cast<std::ptrdiff_t>(lo));
    zero_shot.insert(zero_shot.end(), prompt.ids.begin() + static_cast<std::ptrdiff_t>(hi + 1), prompt.ids.end());
    auto e = cache.get_entry(tree::cache_key(zero_shot));
    if (!e) return std::nullopt;
    if (e->mask.size() != zero_shot.size()) throw InputError("cached mask length does not match prompt");
    data::PromptStructure st;
    for (auto& f : e->fields) {
        if (f.tree.root().span.lo >= lo) f.tree = tree::shift_spans(f.tree, width);
        st.fields.push_back(std::move(f));
    }
    st.mask.assign(e->mask.begin(), e->mask.begin() + static_cast<std::ptrdiff_t>(lo));
    st.mask.insert(st.mask.end(), width, 0);
    st.mask.insert(st.mask.end(), e->mask.begin() + static_cast<std::ptrdiff_t>(lo), e->mask.end());
    return st;
}

void write_manifest(const fs::path& out_dir, const RunManifest& m) {
    json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["config_git_sha1"] = m.config_sha1;
    j["seeds"] = m.seeds;
    j["output_dir"] = m.output_dir;
    j["inputs"] = json::array();
    for (const auto& a : m.inputs) j["inputs"].push_back({{"path", a.path}, {"sha256", a.sha256}});
    j["outputs"] = json::array();
    for (const auto& a : m.outputs) j["outputs"].push_back({{"path", a.path}, {"sha256", a.sha256}});
    j["settings"] = json::object();
    for (const auto& [k, v] : m.settings) j["settings"][k] = v;
    const std::string text = j.dump(2) + "\n";
    write_file_bytes((out_dir / (m.command + ".manifest.json")).string(),
                     std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void cmd_build_cache(const CommandArgs& args) {
    Run run("build-cache", args);
    const auto tok = run.tokenizer();
    std::vector<DataSpec> specs;
    if (!args.dataset.empty()) {
        DataSpec d;
        d.dataset = args.dataset;
        d.trees = args.trees;
        if (!args.format.empty()) d.format = args.format;
        specs.push_back(d);
    } else {
        for (const auto* d : {&run.config.train_data, &run.config.eval_data, &run.config.grid_retention,
                              &run.config.grid_syntax})
            if (!d->dataset.empty()) specs.push_back(*d);
    }
    if (specs.empty()) throw InputError("build-cache: no dataset given");

    const fs::path cache_path = run.out / kCacheName;
    tree::StructureCache cache(cache_path);
    std::size_t entries = 0;
    for (const auto& spec : specs) {
        if (spec.trees.empty()) throw InputError("build-cache: dataset " + spec.dataset.string() + " has no trees file");
        run.input(spec.dataset);
        run.input(spec.trees);
        const auto records = tree::read_trees_file(spec.trees);
        std::map<std::string, const tree::TreeRecord*> by_id;
        for (const auto& r : records)
            if (!r.id.empty()) by_id[r.id] = &r;
        const bool keyed = by_id.size() == records.size();

        std::vector<std::string> ids;
        if (spec.format == "pairs") {
            for (const auto& p : data::read_pairs_file(spec.dataset)) ids.push_back(p.id);
        } else {
            for (const auto& i : read_items_as_mcqa(spec)) ids.push_back(i.id);
        }
        if (!keyed && records.size() != ids.size())
            throw InputError("trees file " + spec.trees.string() + " has " + std::to_string(records.size()) +
                             " records for " + std::to_string(ids.size()) + " items and no ids");
        const auto prompts = dataset_prompts(run.config, spec, tok);
        const std::size_t per_item = spec.format == "pairs" ? 2 : 1;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const tree::TreeRecord* rec = nullptr;
            if (keyed) {
                const auto it = by_id.find(ids[i]);
                if (it == by_id.end()) throw InputError("no trees for item '" + ids[i] + "'");
                rec = it->second;
            } else {
                rec = &records[i];
            }
            for (std::size_t s = 0; s < per_item; ++s) {
                const auto& prompt = prompts[i * per_item + s];
                tree::TreeRecord view = *rec;
                if (per_item == 2) {
                    // A pair record holds "good" and "bad"; each sentence prompt has one "sentence" field.
                    const auto* f = rec->find(s == 0 ? "good" : "bad");
                    if (f == nullptr) throw InputError("pair '" + ids[i] + "' needs good and bad trees");
                    view.fields = {*f};
                    view.fields[0].name = "sentence";
                }
                data::PromptStructure st;
                try {
                    st = data::prompt_structure(prompt, view, run.config.mask);
                } catch (const InputError& e) {
                    throw InputError("item '" + ids[i] + "': " + e.what());
                }
                cache.put_entry(tree::cache_key(prompt.ids), {st.fields, st.mask});
                ++entries;
            }
        }
    }
    run.setting("entries_written", std::to_string(entries));
    run.setting("distinct_entries", std::to_string(cache.size()));
    run.output(kCacheName);
    run.finish();
}

void cmd_train(const CommandArgs& args) {
    Run run("train", args);
    auto& c = run.config;
    if (!args.dataset.empty()) c.train_data.dataset = args.dataset;
    if (!args.variant.empty()) c.variant = args.variant;
    const train::Variant variant = train::parse_variant(c.variant);
    if (c.train_data.dataset.empty()) throw InputError("train: no dataset");
    const auto tok = run.tokenizer();
    run.input(c.train_data.dataset);
    const auto items = read_items_as_mcqa(c.train_data);
    auto cache = open_cache(run);
    const auto examples = training_examples(run, tok, items, *cache);
    const auto base = base_model(run, tok, items, args.seed);

    train::VariantConfig vc = c.variant_config;
    vc.run.threads = c.threads;
    const auto result = train::run_variant(variant, vc, base, std::span<const train::TrainExample>(examples), args.seed);
    model::save_checkpoint(result.model, run.out / kCheckpointName);
    train::write_loss_csv(run.out / "loss.csv", result.record);
    train::write_hash_audit(run.out / "hash_audit.json", result.record);
    run.setting("variant", c.variant);
    run.setting("examples", std::to_string(examples.size()));
    run.output(kCheckpointName);
    run.output("loss.csv");
    run.output("hash_audit.json");
    run.finish();
}

void cmd_eval(const CommandArgs& args) {
    const eval::Control control = eval::parse_control(args.toggle);
    Run run(control == eval::Control::none ? "eval" : "ablate", args);
    auto& c = run.config;
    DataSpec spec = c.eval_data;
    if (!args.dataset.empty()) spec.dataset = args.dataset;
    if (!args.format.empty()) spec.format = args.format;
    if (!args.demos.empty()) spec.demos = args.demos;
    if (spec.dataset.empty()) throw InputError("eval: no dataset");
    if (args.checkpoint.empty()) throw InputError("eval: --checkpoint is required");
    const auto tok = run.tokenizer();
    run.input(args.checkpoint);
    run.input(spec.dataset);
    const auto m = model::load_checkpoint<float>(args.checkpoint);
    if (m.config().vocab != tok.size()) throw InputError("checkpoint vocabulary does not match tokenizer");
    auto cache = open_cache(run);

    eval::EvalSettings settings{template_for(c, spec), eval::apply_toggle({}, control), c.threads};
    if (args.k) settings.tmpl.k = *args.k;
    settings.update.alpha = args.alpha ? *args.alpha : c.eval_alpha.value_or(c.variant_config.alpha_star);
    const bool structured = settings.update.alpha != 0.0 && m.has_structural_branch();

    const std::string dataset = spec.dataset.stem().string();
    const std::string seed = std::to_string(args.seed);
    std::vector<json> predictions;
    std::vector<std::vector<std::string>> metrics;
    if (spec.format == "pairs") {
        const auto items = data::read_pairs_file(spec.dataset);
        const auto lookup = structured ? cache_lookup(*cache, c, control, args.seed,
                                                      [&](std::size_t i) { return items[i].id; })
                                       : eval::StructureLookup{};
        const auto res = eval::evaluate_pairs(m, tok, std::span(items), lookup, settings);
        std::size_t hits = 0, ties = 0;
        for (const auto& r : res) {
            hits += r.outcome.correct() ? 1 : 0;
            ties += r.outcome.good == r.outcome.bad ? 1 : 0;
            predictions.push_back({{"id", r.id},
                                   {"loglik_good", r.outcome.good},
                                   {"loglik_bad", r.outcome.bad},
                                   {"correct", r.outcome.correct()}});
        }
        const double acc = res.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(res.size());
        metrics.push_back({dataset, "accuracy", num_str(acc), std::to_string(res.size()), std::to_string(ties), seed});
    } else {
        const auto items = read_items_as_mcqa(spec);
        const auto demos = read_demos(spec, settings.tmpl.k);
        if (!spec.demos.empty()) run.input(spec.demos);
        const auto lookup = structured ? cache_lookup(*cache, c, control, args.seed,
                                                      [&](std::size_t i) { return items[i].id; })
                                       : eval::StructureLookup{};
        const auto res = eval::evaluate_mcqa(m, tok, std::span(items), std::span(demos), lookup, settings);
        std::vector<std::size_t> gold, pred;
        std::vector<int> gold_bin, pred_bin;
        std::size_t ties = 0;
        for (const auto& r : res) {
            json scores = json::array();
            for (const auto& s : r.scores) scores.push_back(s.loglik);
            predictions.push_back({{"id", r.id},
                                   {"gold", r.gold},
                                   {"prediction", r.prediction.index},
                                   {"tie", r.prediction.tie},
                                   {"scores", scores}});
            gold.push_back(r.gold);
            pred.push_back(r.prediction.index);
            gold_bin.push_back(static_cast<int>(r.gold));
            pred_bin.push_back(static_cast<int>(r.prediction.index));
            ties += r.prediction.tie ? 1 : 0;
        }
        const std::string n = std::to_string(res.size()), t = std::to_string(ties);
        metrics.push_back({dataset, "accuracy", num_str(100.0 * eval::accuracy(gold, pred)), n, t, seed});
        if (spec.format == "binary") metrics.push_back({dataset, "mcc", num_str(eval::mcc(gold_bin, pred_bin)), n, t, seed});
    }
    write_jsonl(run.out / "predictions.jsonl", predictions);
    write_metrics_csv(run.out / "metrics.csv", metrics);
    run.setting("control", eval::control_name(control));
    run.setting("alpha", num_str(settings.update.alpha));
    run.setting("k", std::to_string(settings.tmpl.k));
    run.setting("format", spec.format);
    run.output("predictions.jsonl");
    run.output("metrics.csv");
    run.finish();
}

void cmd_probe(const CommandArgs& args) {
    Run run("probe", args);
    auto& c = run.config;
    if (args.checkpoint.empty()) throw InputError("probe: --checkpoint is required");
    const fs::path gold_path = args.dataset.empty() ? c.probe_gold : args.dataset;
    if (gold_path.empty()) throw InputError("probe: no gold file");
    const auto tok = run.tokenizer();
    run.input(args.checkpoint);
    run.input(gold_path);
    const auto m = model::load_checkpoint<float>(args.checkpoint);
    const std::size_t n = args.subsample ? *args.subsample : c.probe_subsample;
    const auto items = probe::subsample(probe::read_gold_file(gold_path), n, derive_seed(args.seed, "probe.subsample"));
    probe::ProbeLayersOptions opts = c.probe;
    opts.probe.seed = derive_seed(args.seed, "probe.layers");
    opts.threads = c.threads;
    const auto rows = probe::probe_layers(m, tok, items, opts);
    probe::write_uuas_csv(run.out / "uuas.csv", rows);
    {
        std::ofstream out(run.out / "random_baseline.csv", std::ios::binary);
        out << "uuas,n_sentences\n"
            << num_str(probe::random_baseline_uuas(items, 100, derive_seed(args.seed, "probe.baseline"))) << ','
            << items.size() << '\n';
    }
    run.setting("subsample", std::to_string(items.size()));
    run.output("uuas.csv");
    run.output("random_baseline.csv");
    run.finish();
}

void cmd_grid_alpha(const CommandArgs& args) {
    Run run("grid-alpha", args);
    auto& c = run.config;
    if (c.grid_alphas.empty()) throw InputError("grid-alpha: no candidate alphas");
    if (c.grid_retention.dataset.empty() || c.grid_syntax.dataset.empty())
        throw InputError("grid-alpha: retention and syntax datasets are required");
    const auto tok = run.tokenizer();
    run.input(c.train_data.dataset);
    run.input(c.grid_retention.dataset);
    run.input(c.grid_syntax.dataset);
    const auto items = read_items_as_mcqa(c.train_data);
    auto cache = open_cache(run);
    const auto examples = training_examples(run, tok, items, *cache);
    const auto base = base_model(run, tok, items, args.seed);

    train::GridValidation val;
    val.tokenizer = &tok;
    val.retention = read_items_as_mcqa(c.grid_retention);
    val.retention_template = template_for(c, c.grid_retention);
    if (c.grid_syntax.format == "pairs") {
        val.syntax_pairs = data::read_pairs_file(c.grid_syntax.dataset);
    } else {
        val.syntax_mcqa = read_items_as_mcqa(c.grid_syntax);
        val.syntax_template = template_for(c, c.grid_syntax);
    }
    val.threads = c.threads;
    // Both validation sets resolve structure by content, so one lookup serves both.
    tree::StructureCache* cache_ptr = cache.get();
    const bool strict = c.strict_cache;
    const auto mask = c.mask;
    val.lookup = [cache_ptr, strict, mask](const data::Prompt& p, std::size_t i) {
        return lookup_or_fallback(*cache_ptr, p, strict, mask, "#" + std::to_string(i));
    };
    std::vector<std::uint64_t> seeds = c.grid_seeds.empty() ? std::vector<std::uint64_t>{args.seed} : c.grid_seeds;
    run.manifest.seeds = seeds;
    train::VariantConfig vc = c.variant_config;
    vc.run.threads = c.threads;
    const auto sel = train::grid_search_alpha(std::span<const double>(c.grid_alphas), vc, base,
                                              std::span<const train::TrainExample>(examples), val,
                                              std::span<const std::uint64_t>(seeds));
    train::write_grid_csv(run.out / "grid.csv", sel);
    json s = {{"alpha", sel.alpha},
              {"fallback", sel.fallback},
              {"baseline_retention", sel.baseline_retention},
              {"max_drop", c.grid_max_drop},
              {"trace", sel.trace}};
    std::ofstream(run.out / "selection.json", std::ios::binary) << s.dump(2) << '\n';
    run.setting("selected_alpha", num_str(sel.alpha));
    run.output("grid.csv");
    run.output("selection.json");
    run.finish();
}

void cmd_experiment(const CommandArgs& args) {
    Run run("experiment", args);
    train::ExperimentConfig e = run.config.experiment;
    if (!args.seeds.empty()) e.seeds = args.seeds;
    e.threads = run.config.threads;
    run.manifest.seeds = e.seeds;
    const auto result = train::run_agreement_experiment(e);
    train::write_experiment_csv(run.out / "experiment.csv", result);
    run.setting("staged_at_least_lora", result.staged_at_least_lora ? "true" : "false");
    run.setting("permuted_below_gold", result.permuted_below_gold ? "true" : "false");
    run.output("experiment.csv");
    run.finish();
}

probe::GoldItem agreement_gold(const std::string& question, std::size_t head) {
    const auto words = split_words(question);
    if (words.size() % 3 != 2) throw InputError("not an agreement question: " + question);
    const std::size_t nouns = (words.size() + 1) / 3;
    if (head >= nouns) throw InputError("head out of range");
    probe::GoldItem g;
    g.tokens = words;
    for (std::size_t w = 0; w < words.size(); ++w) g.word_token_spans.push_back({w, w});
    auto edge = [&](std::size_t a, std::size_t b) { g.edges.push_back({std::min(a, b), std::max(a, b)}); };
    const std::size_t head_word = 3 * head + 1;
    for (std::size_t n = 0; n < nouns; ++n) {
        edge(3 * n, 3 * n + 1);
        if (n == head) continue;
        const std::size_t prep = n < head ? 3 * n + 2 : 3 * n - 1;
        edge(3 * n + 1, prep);
        edge(prep, head_word);
    }
    std::sort(g.edges.begin(), g.edges.end());
    probe::validate_gold(g);
    return g;
}

void cmd_synth(const CommandArgs& args) {
    if (args.out.empty()) throw InputError("--out is required");
    fs::create_directories(args.out);
    const fs::path out = args.out;
    data::AgreementConfig task;
    task.examples = args.train_examples;
    const auto train_set = data::generate_agreement(task, args.seed, "train");
    task.examples = args.test_examples;
    const auto test_set = data::generate_agreement(task, args.seed, "test", &train_set);

    {
        std::ofstream v(out / "vocab.txt", std::ios::binary);
        for (const auto& t : data::agreement_vocabulary()) v << t << '\n';
    }
    auto write_split = [&](const std::string& name, const std::vector<data::AgreementExample>& set) {
        std::vector<data::McqaItem> items;
        std::vector<tree::TreeRecord> records;
        for (const auto& e : set) {
            items.push_back(e.item);
            records.push_back(e.record);
        }
        data::write_mcqa_file(out / (name + ".jsonl"), items);
        tree::write_trees_file(out / (name + "_trees.jsonl"), records);
    };
    write_split("train", train_set);
    write_split("test", test_set);
    std::vector<probe::GoldItem> gold;
    for (const auto& e : test_set) gold.push_back(agreement_gold(e.item.question, e.head));
    probe::write_gold_file(out / "probe_gold.jsonl", gold);

    const auto x = train::ExperimentConfig::defaults();
    json config = {
        {"model",
         {{"d_model", x.model.d_model},
          {"layers", x.model.layers},
          {"heads", x.model.heads},
          {"head_dim", x.model.head_dim},
          {"max_len", x.model.max_len},
          {"mlp_ratio", x.model.mlp_ratio}}},
        {"tokenizer", "vocab.txt"},
        {"template", "agreement"},
        {"cache", "cache/structure.cache"},
        {"train",
         {{"dataset", "train.jsonl"},
          {"trees", "train_trees.jsonl"},
          {"variant", "gtca_staged"},
          {"lora_rank", x.variant.lora_rank},
          {"lora_alpha", x.variant.lora_alpha},
          {"max_height", x.variant.max_height},
          {"stage1", {{"steps", x.variant.stage1.steps}, {"lr", x.variant.stage1.lr}}},
          {"stage2", {{"steps", x.variant.stage2.steps}, {"lr", x.variant.stage2.lr}}},
          {"stage3", {{"steps", x.variant.stage3.steps}, {"lr", x.variant.stage3.lr}}},
          {"batch", x.variant.batch},
          {"alpha_star", x.variant.alpha_star},
          {"pretrain_steps", x.pretrain_steps},
          {"pretrain_lr", x.pretrain_lr}}},
        {"eval", {{"dataset", "test.jsonl"}, {"trees", "test_trees.jsonl"}}},
        {"probe", {{"gold", "probe_gold.jsonl"}, {"steps", 200}}},
    };
    std::ofstream(out / "config.json", std::ios::binary) << config.dump(2) << '\n';

    RunManifest m;
    m.command = "synth";
    m.seeds = {args.seed};
    m.output_dir = out.generic_string();
    for (const char* f : {"vocab.txt", "train.jsonl", "train_trees.jsonl", "test.jsonl", "test_trees.jsonl",
                          "probe_gold.jsonl", "config.json"})
        m.outputs.push_back(artifact(out / f, out));
    m.settings = {{"train_examples", std::to_string(args.train_examples)},
                  {"test_examples", std::to_string(args.test_examples)}};
    write_manifest(out, m);
}

}  // namespace gtca::cli
