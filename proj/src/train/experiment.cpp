// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/train/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "gtca/eval/controls.hpp"
#include "gtca/util/rng.hpp"

namespace gtca::train {

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    c.model.d_model = 32;
    c.model.layers = 3;
    c.model.heads = 4;
    c.model.head_dim = 8;
    c.model.max_len = 32;
    c.model.mlp_ratio = 2;
    c.variant.lora_rank = 4;
    c.variant.lora_alpha = 8.0;
    c.variant.max_height = 8;
    c.variant.stage1 = {600, 3e-3};
    c.variant.stage2 = {600, 3e-3};
    c.variant.stage3 = {800, 2e-3};
    c.variant.batch = 8;
    c.variant.alpha_star = 0.15;
    return c;
}

AgreementData make_agreement_data(const ExperimentConfig& config, std::uint64_t seed) {
    AgreementData d;
    d.tokenizer = model::Tokenizer(data::agreement_vocabulary());
    d.tmpl = data::agreement_template();
    data::AgreementConfig task = config.task;
    task.examples = config.train_examples;
    d.train = data::generate_agreement(task, seed, "train");
    task.examples = config.test_examples;
    d.test = data::generate_agreement(task, seed, "test", &d.train);
    for (const auto& ex : d.train) {
        const auto prompt = data::assemble_prompt(d.tmpl, d.tokenizer, {}, ex.item);
        const auto st = data::prompt_structure(prompt, ex.record);
        const auto answer = d.tokenizer.encode(ex.item.options[ex.item.answer]).ids;
        d.train_examples.push_back(answer_example(prompt, &st, answer));
        std::vector<std::int32_t> ids = {d.tokenizer.bos_id()};
        const auto q = d.tokenizer.encode(ex.item.question).ids;
        ids.insert(ids.end(), q.begin(), q.end());
        d.pretrain_examples.push_back(language_model_example(ids));
    }
    return d;
}

template <typename T>
double agreement_accuracy(const model::Transformer<T>& m, const AgreementData& data,
                          const std::vector<data::AgreementExample>& examples, double alpha, const std::string& control,
                          std::uint64_t seed) {
    const eval::Control c = eval::parse_control(control);
    std::vector<data::McqaItem> items;
    for (const auto& e : examples) items.push_back(e.item);
    eval::EvalSettings settings{data.tmpl, eval::apply_toggle({}, c), 1};
    settings.update.alpha = alpha;
    eval::StructureLookup lookup;
    if (alpha != 0.0) {
        lookup = [&](const data::Prompt& p, std::size_t i) -> std::optional<data::PromptStructure> {
            const auto st = data::prompt_structure(p, examples[i].record);
            return eval::corrupt_structure(st, c, derive_seed(seed, "control." + examples[i].item.id));
        };
    }
    const auto res = eval::evaluate_mcqa(m, data.tokenizer, std::span(items), {}, lookup, settings);
    std::size_t hits = 0;
    for (const auto& r : res) hits += r.prediction.index == r.gold ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(res.size());
}

SeedOutcome run_agreement_seed(const ExperimentConfig& config, std::uint64_t seed) {
    const AgreementData data = make_agreement_data(config, seed);
    model::ModelConfig mc = config.model;
    mc.vocab = data.tokenizer.size();
    model::Transformer<float> base(mc, derive_seed(seed, "experiment.backbone"));
    TrainRunRecord pre;
    run_stage(base, pretrain_plan(config.pretrain_steps, config.pretrain_lr, config.variant.batch),
              std::span(data.pretrain_examples), seed, pre, config.variant.run);

    SeedOutcome out;
    out.seed = seed;
    const double a = config.variant.alpha_star;
    for (Variant v : {Variant::lora_only, Variant::direct_joint, Variant::gtca_staged}) {
        const auto run = run_variant(v, config.variant, base, std::span(data.train_examples), seed);
        const double alpha = v == Variant::lora_only ? 0.0 : a;
        out.accuracy[variant_name(v)] = agreement_accuracy(run.model, data, data.test, alpha, "none", seed);
        if (v == Variant::gtca_staged) {
            out.accuracy["permuted_tree"] = agreement_accuracy(run.model, data, data.test, a, "permuted_tree", seed);
        }
    }
    return out;
}

ExperimentResult run_agreement_experiment(const ExperimentConfig& config) {
    if (config.seeds.empty()) throw InputError("experiment needs at least one seed");
    ExperimentResult result;
    result.seeds.resize(config.seeds.size());
    const std::size_t threads = std::max<std::size_t>(1, std::min(config.threads, config.seeds.size()));
    std::exception_ptr error;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < config.seeds.size(); i += threads) {
                try {
                    result.seeds[i] = run_agreement_seed(config, config.seeds[i]);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
    for (const auto& s : result.seeds)
        for (const auto& [k, v] : s.accuracy) result.mean[k] += v / static_cast<double>(result.seeds.size());
    result.staged_at_least_lora = result.mean.at("gtca_staged") >= result.mean.at("lora_only");
    result.permuted_below_gold = result.mean.at("permuted_tree") < result.mean.at("gtca_staged");
    return result;
}

void write_experiment_csv(const std::filesystem::path& path, const ExperimentResult& result) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << "seed,variant,accuracy\n";
    char buf[40];
    for (const auto& s : result.seeds) {
        for (const auto& [k, v] : s.accuracy) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << s.seed << ',' << k << ',' << buf << '\n';
        }
    }
    for (const auto& [k, v] : result.mean) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << "mean," << k << ',' << buf << '\n';
    }
}

template double agreement_accuracy<float>(const model::Transformer<float>&, const AgreementData&,
                                          const std::vector<data::AgreementExample>&, double, const std::string&,
                                          std::uint64_t);
template double agreement_accuracy<double>(const model::Transformer<double>&, const AgreementData&,
                                           const std::vector<data::AgreementExample>&, double, const std::string&,
                                           std::uint64_t);

}  // namespace gtca::train
