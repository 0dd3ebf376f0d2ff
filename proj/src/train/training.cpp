// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/train/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <mutex>
#include <thread>

#include "gtca/numerics/ops.hpp"
#include "gtca/util/rng.hpp"
#include "json.hpp"

namespace gtca::train {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
std::vector<num::Parameter<T>*> group_params(model::Transformer<T>& m, Group g) {
    switch (g) {
        case Group::backbone: return m.backbone_parameters();
        case Group::lora: return m.lora_parameters();
        case Group::structural: return m.has_structural_branch() ? m.structural_parameters()
                                                                 : std::vector<num::Parameter<T>*>{};
    }
    return {};
}

bool trains(const model::Trainable& t, Group g) {
    switch (g) {
        case Group::backbone: return t.backbone;
        case Group::lora: return t.lora;
        case Group::structural: return t.structural;
    }
    return false;
}

// Loss graph for one example; returns the loss value.
template <typename T>
double example_loss(const model::Transformer<T>& m, num::Graph<T>& g, const TrainExample& ex, double alpha,
                    const model::Trainable& trainable) {
    model::StructureInput in{ex.fields, ex.mask, {}};
    in.update.alpha = alpha;
    // alpha = 0 is bitwise the plain backbone; skip the branch entirely.
    const model::StructureInput* sp = alpha != 0.0 ? &in : nullptr;
    auto out = num::cross_entropy(m.forward(g, ex.ids, sp, trainable).logits,
                                  std::span<const std::int32_t>(ex.targets));
    g.backward(out);
    return static_cast<double>(out.value().data()[0]);
}

}  // namespace

TrainExample answer_example(const data::Prompt& prompt, const data::PromptStructure* structure,
                            std::span<const std::int32_t> answer) {
    if (prompt.ids.empty() || answer.empty()) throw InputError("answer_example: empty prompt or answer");
    TrainExample ex;
    ex.ids = prompt.ids;
    ex.ids.insert(ex.ids.end(), answer.begin(), answer.end());
    // The last answer token predicts nothing.
    ex.targets.assign(ex.ids.size(), -1);
    for (std::size_t t = 0; t < answer.size(); ++t) ex.targets[prompt.ids.size() - 1 + t] = answer[t];
    if (structure != nullptr) {
        if (structure->mask.size() != prompt.ids.size()) throw InputError("answer_example: mask/prompt size mismatch");
        ex.fields = structure->fields;
        ex.mask = structure->mask;
    } else {
        ex.mask.assign(prompt.ids.size(), 0);
    }
    ex.mask.resize(ex.ids.size(), 0);
    return ex;
}

TrainExample language_model_example(std::span<const std::int32_t> ids) {
    if (ids.size() < 2) throw InputError("language_model_example: need at least two tokens");
    TrainExample ex;
    ex.ids.assign(ids.begin(), ids.end());
    ex.targets.assign(ids.size(), -1);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) ex.targets[t] = ids[t + 1];
    ex.mask.assign(ids.size(), 0);
    return ex;
}

double alpha_schedule(std::int64_t t, std::int64_t warmup, double target) {
    if (t < 0) throw InputError("alpha_schedule: negative step " + std::to_string(t));
    if (warmup < 1) throw InputError("alpha_schedule: warm-up length must be at least 1");
    return std::min(target, target * static_cast<double>(t) / static_cast<double>(warmup));
}

const char* group_name(Group g) {
    switch (g) {
        case Group::backbone: return "backbone";
        case Group::lora: return "lora";
        case Group::structural: return "structural";
    }
    return "?";
}

std::int64_t StagePlan::warmup_steps() const {
    if (warmup_fraction <= 0.0) return 0;
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(steps))));
}

double StagePlan::alpha_at(std::size_t step) const {
    const std::int64_t w = warmup_steps();
    if (w == 0) return alpha_target;
    return alpha_schedule(static_cast<std::int64_t>(step), w, alpha_target);
}

StagePlan stage1_plan(std::size_t steps, double lr, std::size_t batch) {
    return {1, "stage1", {false, true, false}, lr, 0.0, 0.0, steps, batch};
}

StagePlan stage2_plan(std::size_t steps, double lr, std::size_t batch, double alpha_star, double warmup_fraction) {
    return {2, "stage2", {false, false, true}, lr, alpha_star, warmup_fraction, steps, batch};
}

StagePlan stage3_plan(std::size_t steps, double lr, std::size_t batch, double alpha_star) {
    return {3, "stage3", {false, true, true}, lr, alpha_star, 0.0, steps, batch};
}

StagePlan pretrain_plan(std::size_t steps, double lr, std::size_t batch) {
    return {0, "pretrain", {true, false, false}, lr, 0.0, 0.0, steps, batch};
}

void validate_plan(const StagePlan& p) {
    auto fail = [&](const std::string& why) { throw InputError("stage plan '" + p.name + "': " + why); };
    if (p.batch == 0) fail("batch must be positive");
    if (!(p.lr > 0.0) || !std::isfinite(p.lr)) fail("learning rate must be positive");
    if (p.alpha_target < 0.0 || !std::isfinite(p.alpha_target)) fail("alpha must be finite and non-negative");
    if (p.warmup_fraction < 0.0 || p.warmup_fraction > 1.0) fail("warm-up fraction must lie in [0, 1]");
    const auto& g = p.groups;
    switch (p.stage) {
        case 0:
            if (!g.backbone || g.lora || g.structural || p.alpha_target != 0.0) fail("pretraining trains the backbone only at alpha 0");
            break;
        case 1:
            if (g.backbone || !g.lora || g.structural || p.alpha_target != 0.0) fail("stage 1 trains LoRA only at alpha 0");
            break;
        case 2:
            if (g.backbone || g.lora || !g.structural) fail("stage 2 trains the structural modules only");
            break;
        case 3:
            if (g.backbone || !g.lora || !g.structural) fail("stage 3 trains structural modules and LoRA only");
            if (p.warmup_fraction != 0.0) fail("stage 3 keeps alpha fixed");
            break;
        default: fail("unknown stage id " + std::to_string(p.stage));
    }
}

template <typename T>
std::map<std::string, std::string> group_hashes(const model::Transformer<T>& m) {
    std::map<std::string, std::string> out;
    out["backbone"] = model::parameter_hash<T>(m.backbone_parameters());
    out["lora"] = model::parameter_hash<T>(m.lora_parameters());
    out["structural"] = model::parameter_hash<T>(m.has_structural_branch() ? m.structural_parameters()
                                                                           : std::vector<const num::Parameter<T>*>{});
    return out;
}

template <typename T>
void run_stage(model::Transformer<T>& m, const StagePlan& plan, std::span<const TrainExample> data,
               std::uint64_t seed, TrainRunRecord& record, const RunOptions& options) {
    validate_plan(plan);
    if (data.empty()) throw InputError("stage '" + plan.name + "': no training examples");
    if (plan.groups.lora && m.adapters().empty()) throw InputError("stage '" + plan.name + "' needs LoRA adapters");
    if ((plan.groups.structural || plan.alpha_target > 0.0) && !m.has_structural_branch()) {
        throw InputError("stage '" + plan.name + "' needs the structural branch");
    }
    for (const auto& ex : data) {
        if (ex.targets.size() != ex.ids.size() || ex.mask.size() != ex.ids.size()) {
            throw InputError("stage '" + plan.name + "': example targets/mask do not match its ids");
        }
    }

    StageTrace trace;
    trace.name = plan.name;
    trace.stage = plan.stage;
    trace.steps = plan.steps;
    trace.hash_before = group_hashes(m);

    std::vector<num::Parameter<T>*> params;
    for (Group g : kAllGroups) {
        if (!trains(plan.groups, g)) continue;
        auto ps = group_params(m, g);
        params.insert(params.end(), ps.begin(), ps.end());
        trace.trained.push_back(group_name(g));
    }
    num::GradientBuffer<T> grads(params);
    num::AdamW<T> opt(params, options.optimizer);

    Rng order_rng(derive_seed(seed, "train.order." + plan.name));
    std::vector<std::size_t> order(data.size());
    std::size_t cursor = order.size();
    auto next_index = [&]() {
        if (cursor == order.size()) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            order_rng.shuffle(order);
            cursor = 0;
        }
        return order[cursor++];
    };

    const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, plan.batch));
    const T weight = static_cast<T>(1.0 / static_cast<double>(plan.batch));
    std::vector<num::Graph<T>> graphs(plan.batch);
    std::vector<double> losses(plan.batch);
    std::vector<std::size_t> batch(plan.batch);

    for (std::size_t step = 0; step < plan.steps; ++step) {
        const double alpha = plan.alpha_at(step);
        for (auto& b : batch) b = next_index();
        auto work = [&](std::size_t b) {
            graphs[b].reset();
            losses[b] = example_loss(m, graphs[b], data[batch[b]], alpha, plan.groups);
        };
        auto run_batch = [&] {
            if (threads == 1) {
                for (std::size_t b = 0; b < plan.batch; ++b) work(b);
                return;
            }
            std::vector<std::thread> pool;
            std::exception_ptr error;
            std::mutex mu;
            for (std::size_t w = 0; w < threads; ++w) {
                pool.emplace_back([&, w] {
                    for (std::size_t b = w; b < plan.batch; b += threads) {
                        try {
                            work(b);
                        } catch (...) {
                            std::lock_guard lock(mu);
                            if (!error) error = std::current_exception();
                        }
                    }
                });
            }
            for (auto& t : pool) t.join();
            if (error) std::rethrow_exception(error);
        };
        try {
            run_batch();
        } catch (const num::NumericError& e) {
            throw num::NumericError("stage '" + plan.name + "' step " + std::to_string(step) + ": " + e.what());
        }
        grads.clear();
        double loss = 0.0;
        for (std::size_t b = 0; b < plan.batch; ++b) {
            grads.accumulate(graphs[b], weight);
            loss += losses[b];
        }
        loss /= static_cast<double>(plan.batch);
        if (!std::isfinite(loss)) {
            throw num::NumericError("stage '" + plan.name + "': non-finite loss at step " + std::to_string(step));
        }
        try {
            opt.step(grads, plan.lr);
        } catch (const num::NumericError& e) {
            throw num::NumericError("stage '" + plan.name + "' step " + std::to_string(step) + ": " + e.what());
        }
        record.steps.push_back({plan.name, step, alpha, loss});
    }
    for (auto& g : graphs) g.reset();

    trace.hash_after = group_hashes(m);
    for (Group g : kAllGroups) {
        if (trains(plan.groups, g)) continue;
        const std::string name = group_name(g);
        if (trace.hash_before.at(name) != trace.hash_after.at(name)) {
            throw std::logic_error("stage '" + plan.name + "' modified frozen group " + name);
        }
    }
    record.stages.push_back(std::move(trace));
}

template <typename T>
double mean_loss(const model::Transformer<T>& m, std::span<const TrainExample> data, double alpha) {
    if (data.empty()) throw InputError("mean_loss: no examples");
    double total = 0.0;
    for (const auto& ex : data) {
        model::StructureInput in{ex.fields, ex.mask, {}};
        in.update.alpha = alpha;
        const auto logits = m.logits(ex.ids, alpha != 0.0 ? &in : nullptr);
        total += static_cast<double>(num::cross_entropy(logits, std::span<const std::int32_t>(ex.targets)));
    }
    return total / static_cast<double>(data.size());
}

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::lora_only: return "lora_only";
        case Variant::direct_joint: return "direct_joint";
        case Variant::gtca_staged: return "gtca_staged";
    }
    return "?";
}

Variant parse_variant(const std::string& name) {
    for (Variant v : {Variant::lora_only, Variant::direct_joint, Variant::gtca_staged})
        if (name == variant_name(v)) return v;
    throw InputError("unknown variant '" + name + "'");
}

std::vector<StagePlan> variant_plans(Variant v, const VariantConfig& c) {
    switch (v) {
        case Variant::lora_only: {
            auto p = stage1_plan(c.total_steps(), c.stage1.lr, c.batch);
            p.name = "lora_only";
            return {p};
        }
        case Variant::direct_joint: {
            auto p = stage3_plan(c.total_steps(), c.stage3.lr, c.batch, c.alpha_star);
            p.name = "direct_joint";
            return {p};
        }
        case Variant::gtca_staged:
            return {stage1_plan(c.stage1.steps, c.stage1.lr, c.batch),
                    stage2_plan(c.stage2.steps, c.stage2.lr, c.batch, c.alpha_star, c.warmup_fraction),
                    stage3_plan(c.stage3.steps, c.stage3.lr, c.batch, c.alpha_star)};
    }
    return {};
}

template <typename T>
VariantResult<T> run_variant(Variant v, const VariantConfig& config, const model::Transformer<T>& base,
                             std::span<const TrainExample> data, std::uint64_t seed) {
    if (!base.adapters().empty() || base.has_structural_branch()) {
        throw InputError("run_variant expects a bare backbone");
    }
    VariantResult<T> out{base, {}};
    out.record.seed = seed;
    auto& m = out.model;
    const auto targets = config.lora_targets.empty() ? m.attention_targets() : config.lora_targets;
    m.lora_wrap(targets, config.lora_rank, config.lora_alpha, derive_seed(seed, "lora.init"));
    const auto& mc = m.config();
    branch::BranchConfig bc{mc.d_model, mc.layers, mc.heads, static_cast<std::uint32_t>(config.max_height),
                            config.max_chunks};
    m.attach_structural_branch(branch::StructuralBranch<T>(bc, derive_seed(seed, "struct.init")));
    for (const auto& plan : variant_plans(v, config)) {
        if (plan.steps == 0) continue;
        run_stage(m, plan, data, seed, out.record, config.run);
    }
    return out;
}

GridSelection select_alpha(std::vector<GridRow> rows, double baseline_retention, double max_drop) {
    if (rows.size() < 2) throw InputError("grid search needs at least two candidates");
    std::sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) { return a.alpha < b.alpha; });
    GridSelection s;
    s.rows = rows;
    s.baseline_retention = baseline_retention;
    std::string trace;
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double drop = baseline_retention - rows[i].retention;
        const bool ok = drop <= max_drop;
        s.feasible.push_back(ok);
        trace += "alpha=" + fmt(rows[i].alpha) + " retention_drop=" + fmt(drop) + (ok ? " feasible" : " infeasible") +
                 "\n";
        // Strict > keeps the smaller alpha on ties (rows are sorted).
        if (ok && (best < 0 || rows[i].syntax > rows[static_cast<std::size_t>(best)].syntax)) {
            best = static_cast<std::ptrdiff_t>(i);
        }
    }
    if (best < 0) {
        s.fallback = true;
        auto composite = [](const GridRow& r) { return (r.retention + r.syntax) / 2.0; };
        best = 0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            if (composite(rows[i]) > composite(rows[static_cast<std::size_t>(best)])) best = static_cast<std::ptrdiff_t>(i);
        }
        trace += "no feasible candidate; fell back to the best composite mean\n";
    }
    s.alpha = rows[static_cast<std::size_t>(best)].alpha;
    trace += "selected alpha=" + fmt(s.alpha) + "\n";
    s.trace = std::move(trace);
    return s;
}

template <typename T>
GridRow validate_at(const model::Transformer<T>& m, const GridValidation& val, double alpha) {
    if (val.tokenizer == nullptr) throw InputError("grid validation needs a tokenizer");
    if (val.retention.empty()) throw InputError("grid validation: empty retention set");
    if (val.syntax_pairs.empty() && val.syntax_mcqa.empty()) throw InputError("grid validation: empty syntax set");
    branch::StructuralUpdateConfig upd;
    upd.alpha = alpha;
    auto mcqa_accuracy = [&](const std::vector<data::McqaItem>& items, const data::PromptTemplate& tmpl) {
        eval::EvalSettings s{tmpl, upd, val.threads};
        const auto res = eval::evaluate_mcqa(m, *val.tokenizer, std::span(items), {}, alpha != 0.0 ? val.lookup : nullptr, s);
        std::size_t hits = 0;
        for (const auto& r : res) hits += r.prediction.index == r.gold ? 1 : 0;
        return 100.0 * static_cast<double>(hits) / static_cast<double>(res.size());
    };
    GridRow row;
    row.alpha = alpha;
    row.retention = mcqa_accuracy(val.retention, val.retention_template);
    if (!val.syntax_pairs.empty()) {
        eval::EvalSettings s{val.syntax_template, upd, val.threads};
        const auto res = eval::evaluate_pairs(m, *val.tokenizer, std::span(val.syntax_pairs),
                                              alpha != 0.0 ? val.lookup : nullptr, s);
        std::size_t hits = 0;
        for (const auto& r : res) hits += r.outcome.correct() ? 1 : 0;
        row.syntax = 100.0 * static_cast<double>(hits) / static_cast<double>(res.size());
    } else {
        row.syntax = mcqa_accuracy(val.syntax_mcqa, val.syntax_template);
    }
    return row;
}

template <typename T>
GridSelection grid_search_alpha(std::span<const double> candidates, VariantConfig config,
                                const model::Transformer<T>& base, std::span<const TrainExample> data,
                                const GridValidation& val, std::span<const std::uint64_t> seeds) {
    if (candidates.size() < 2) throw InputError("grid search needs at least two candidates");
    if (seeds.empty()) throw InputError("grid search needs at least one seed");
    if (val.retention.empty() || (val.syntax_pairs.empty() && val.syntax_mcqa.empty())) {
        throw InputError("grid search: empty validation set");
    }
    std::vector<double> alphas(candidates.begin(), candidates.end());
    const bool has_zero = std::find(alphas.begin(), alphas.end(), 0.0) != alphas.end();
    if (!has_zero) alphas.push_back(0.0);
    std::vector<GridRow> rows;
    double baseline = 0.0;
    for (double a : alphas) {
        if (a < 0.0) throw InputError("grid search: negative candidate");
        GridRow mean{a, 0.0, 0.0};
        for (std::uint64_t seed : seeds) {
            config.alpha_star = a;
            const auto run = run_variant(Variant::gtca_staged, config, base, data, seed);
            const GridRow r = validate_at(run.model, val, a);
            mean.retention += r.retention / static_cast<double>(seeds.size());
            mean.syntax += r.syntax / static_cast<double>(seeds.size());
        }
        if (a == 0.0) baseline = mean.retention;
        if (a != 0.0 || has_zero) rows.push_back(mean);
    }
    return select_alpha(rows, baseline);
}

void write_loss_csv(const std::filesystem::path& path, const TrainRunRecord& record) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << "stage,step,alpha,loss\n";
    for (const auto& s : record.steps) out << s.stage << ',' << s.step << ',' << fmt(s.alpha) << ',' << fmt(s.loss) << '\n';
}

void write_hash_audit(const std::filesystem::path& path, const TrainRunRecord& record) {
    nlohmann::ordered_json j;
    j["seed"] = record.seed;
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& st : record.stages) {
        nlohmann::ordered_json s;
        s["name"] = st.name;
        s["stage"] = st.stage;
        s["steps"] = st.steps;
        s["trained"] = st.trained;
        s["hash_before"] = st.hash_before;
        s["hash_after"] = st.hash_after;
        std::vector<std::string> frozen_ok;
        for (const auto& [g, h] : st.hash_before) {
            if (std::find(st.trained.begin(), st.trained.end(), g) == st.trained.end() && st.hash_after.at(g) == h) {
                frozen_ok.push_back(g);
            }
        }
        s["frozen_unchanged"] = frozen_ok;
        j["stages"].push_back(s);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void write_grid_csv(const std::filesystem::path& path, const GridSelection& s) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << "alpha,retention,syntax,retention_drop,feasible,selected\n";
    for (std::size_t i = 0; i < s.rows.size(); ++i) {
        const auto& r = s.rows[i];
        out << fmt(r.alpha) << ',' << fmt(r.retention) << ',' << fmt(r.syntax) << ','
            << fmt(s.baseline_retention - r.retention) << ',' << (s.feasible[i] ? 1 : 0) << ','
            << (r.alpha == s.alpha ? 1 : 0) << '\n';
    }
}

#define GTCA_INSTANTIATE_TRAIN(T)                                                                                     \
    template std::map<std::string, std::string> group_hashes<T>(const model::Transformer<T>&);                        \
    template void run_stage<T>(model::Transformer<T>&, const StagePlan&, std::span<const TrainExample>,               \
                               std::uint64_t, TrainRunRecord&, const RunOptions&);                                    \
    template double mean_loss<T>(const model::Transformer<T>&, std::span<const TrainExample>, double);               \
    template VariantResult<T> run_variant<T>(Variant, const VariantConfig&, const model::Transformer<T>&,              \
                                             std::span<const TrainExample>, std::uint64_t);                           \
    template GridRow validate_at<T>(const model::Transformer<T>&, const GridValidation&, double);                    \
    template GridSelection grid_search_alpha<T>(std::span<const double>, VariantConfig, const model::Transformer<T>&, \
                                                std::span<const TrainExample>, const GridValidation&,                 \
                                                std::span<const std::uint64_t>);

GTCA_INSTANTIATE_TRAIN(float)
GTCA_INSTANTIATE_TRAIN(double)

#undef GTCA_INSTANTIATE_TRAIN

}  // namespace gtca::train
