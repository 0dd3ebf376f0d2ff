// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Staged training: stage plans, the alpha warm-up schedule, the single-stage
// driver with its parameter-group hash audit, the three training variants and
// the alpha grid search.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gtca/data/prompt.hpp"
#include "gtca/eval/scoring.hpp"
#include "gtca/model/transformer.hpp"
#include "gtca/numerics/adamw.hpp"

namespace gtca::train {

/// One training sequence. targets[t] is the id predicted from position t, or
/// -1 when position t carries no loss. `mask` has one entry per id.
struct TrainExample {
    std::vector<std::int32_t> ids;
    std::vector<std::int32_t> targets;
    std::vector<tree::FieldTree> fields;
    std::vector<std::uint8_t> mask;
};

/// prompt + answer with loss on the answer tokens only. The answer positions
/// are outside the update mask. `structure` may be null (no trees).
TrainExample answer_example(const data::Prompt& prompt, const data::PromptStructure* structure,
                            std::span<const std::int32_t> answer);
/// Next-token loss at every position; no structure.
TrainExample language_model_example(std::span<const std::int32_t> ids);

/// min(target, target * t / warmup). Throws InputError for t < 0 or warmup < 1.
double alpha_schedule(std::int64_t t, std::int64_t warmup, double target);

enum class Group : std::uint8_t { backbone, lora, structural };
const char* group_name(Group g);
inline constexpr Group kAllGroups[] = {Group::backbone, Group::lora, Group::structural};

/// Stage 0 is backbone language-model pretraining (toy stand-in for a
/// pretrained checkpoint); stages 1-3 are the structural pipeline.
struct StagePlan {
    int stage = 1;
    std::string name = "stage1";
    model::Trainable groups;
    double lr = 5e-5;
    double alpha_target = 0.0;
    /// Fraction of the stage spent warming alpha up from 0; 0 keeps alpha
    /// at alpha_target from the first step.
    double warmup_fraction = 0.0;
    std::size_t steps = 2000;
    std::size_t batch = 8;

    std::int64_t warmup_steps() const;
    double alpha_at(std::size_t step) const;
};

/// The canonical plans. Stage 1: LoRA only, alpha 0. Stage 2: structural
/// only, alpha warm-up. Stage 3: structural + LoRA at constant alpha.
StagePlan stage1_plan(std::size_t steps, double lr, std::size_t batch);
StagePlan stage2_plan(std::size_t steps, double lr, std::size_t batch, double alpha_star, double warmup_fraction);
StagePlan stage3_plan(std::size_t steps, double lr, std::size_t batch, double alpha_star);
StagePlan pretrain_plan(std::size_t steps, double lr, std::size_t batch);

/// Checks the group/alpha invariants of each stage id. Throws InputError.
void validate_plan(const StagePlan& plan);

struct StepLog {
    std::string stage;
    std::size_t step = 0;  // within the stage
    double alpha = 0.0;
    double loss = 0.0;
};

struct StageTrace {
    std::string name;
    int stage = 0;
    std::size_t steps = 0;
    std::map<std::string, std::string> hash_before;
    std::map<std::string, std::string> hash_after;
    std::vector<std::string> trained;  // group names in the optimizer
};

struct TrainRunRecord {
    std::uint64_t seed = 0;
    std::vector<StageTrace> stages;
    std::vector<StepLog> steps;
};

struct RunOptions {
    num::AdamWConfig optimizer;
    /// Examples of one batch processed concurrently. Gradients are summed in
    /// example order, so results do not depend on this.
    std::size_t threads = 1;
};

template <typename T>
std::map<std::string, std::string> group_hashes(const model::Transformer<T>& m);

/// Runs one stage and appends its trace and per-step log to `record`.
/// Examples are drawn in a seeded shuffled order. Throws InputError when the
/// plan needs a group the model lacks, and NumericError naming the step on a
/// non-finite loss. Afterwards every group outside plan.groups is checked to
/// hash identically; a violation throws std::logic_error.
template <typename T>
void run_stage(model::Transformer<T>& m, const StagePlan& plan, std::span<const TrainExample> data,
               std::uint64_t seed, TrainRunRecord& record, const RunOptions& options = {});

/// Mean loss over `data` at the given alpha (no gradients).
template <typename T>
double mean_loss(const model::Transformer<T>& m, std::span<const TrainExample> data, double alpha);

enum class Variant : std::uint8_t { lora_only, direct_joint, gtca_staged };
const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct StageBudget {
    std::size_t steps = 0;
    double lr = 0.0;
};

struct VariantConfig {
    std::size_t lora_rank = 16;
    double lora_alpha = 32.0;
    std::vector<std::string> lora_targets;  // empty: every attention projection
    std::size_t max_chunks = 64;
    std::size_t max_height = 16;
    StageBudget stage1{2000, 5e-5};
    StageBudget stage2{500, 3e-5};
    StageBudget stage3{2000, 5e-5};
    std::size_t batch = 8;
    double warmup_fraction = 0.1;
    double alpha_star = 0.15;
    RunOptions run;

    std::size_t total_steps() const { return stage1.steps + stage2.steps + stage3.steps; }
};

/// The stage plans a variant runs. Every variant spends total_steps():
/// lora_only runs one LoRA stage at alpha 0, direct_joint one Stage-3 style
/// stage from the start, gtca_staged stages 1, 2 and 3.
std::vector<StagePlan> variant_plans(Variant v, const VariantConfig& config);

template <typename T>
struct VariantResult {
    model::Transformer<T> model;
    TrainRunRecord record;
};

/// Copies `base`, adds fresh LoRA adapters and a fresh structural branch
/// (seeded from `seed`), then runs the variant's plans.
template <typename T>
VariantResult<T> run_variant(Variant v, const VariantConfig& config, const model::Transformer<T>& base,
                             std::span<const TrainExample> data, std::uint64_t seed);

// ---- alpha grid search ------------------------------------------------------

struct GridRow {
    double alpha = 0.0;
    double retention = 0.0;  // MCQA-style metric, percent
    double syntax = 0.0;     // syntax metric, percent
};

struct GridSelection {
    double alpha = 0.0;
    bool fallback = false;  // no candidate met the retention constraint
    double baseline_retention = 0.0;
    std::vector<GridRow> rows;
    std::vector<bool> feasible;
    std::string trace;
};

/// Highest syntax score among rows whose retention is at most `max_drop`
/// points below `baseline_retention`; ties go to the smaller alpha. When no
/// row qualifies, the highest (retention + syntax) / 2 wins and `fallback`
/// is set.
GridSelection select_alpha(std::vector<GridRow> rows, double baseline_retention, double max_drop = 1.0);

struct GridValidation {
    const model::Tokenizer* tokenizer = nullptr;
    std::vector<data::McqaItem> retention;  // scored by option likelihood
    data::PromptTemplate retention_template;
    /// Syntax metric: pairwise accuracy when `syntax_pairs` is non-empty,
    /// otherwise accuracy on `syntax_mcqa`.
    std::vector<data::PairItem> syntax_pairs;
    std::vector<data::McqaItem> syntax_mcqa;
    data::PromptTemplate syntax_template;
    eval::StructureLookup lookup;
    std::size_t threads = 1;
};

/// Retention and syntax accuracy (percent) at structural coefficient alpha.
template <typename T>
GridRow validate_at(const model::Transformer<T>& m, const GridValidation& val, double alpha);

/// Full gtca_staged run per (candidate, seed), metrics averaged over seeds.
/// The baseline is the alpha = 0 candidate, run separately when absent.
template <typename T>
GridSelection grid_search_alpha(std::span<const double> candidates, VariantConfig config,
                                const model::Transformer<T>& base, std::span<const TrainExample> data,
                                const GridValidation& val, std::span<const std::uint64_t> seeds);

// ---- run artifacts ----------------------------------------------------------

void write_loss_csv(const std::filesystem::path& path, const TrainRunRecord& record);
void write_hash_audit(const std::filesystem::path& path, const TrainRunRecord& record);
void write_grid_csv(const std::filesystem::path& path, const GridSelection& selection);

}  // namespace gtca::train
