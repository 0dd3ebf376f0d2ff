// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// Directional experiment on the generated agreement task: a pretrained toy
// backbone, the three training variants at equal total steps, and the
// permuted-tree control on the staged checkpoints.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gtca/data/synthetic.hpp"
#include "gtca/train/training.hpp"

namespace gtca::train {

struct ExperimentConfig {
    model::ModelConfig model;  // vocab is filled in from the task vocabulary
    data::AgreementConfig task;
    std::size_t train_examples = 800;
    std::size_t test_examples = 300;
    std::size_t pretrain_steps = 400;
    double pretrain_lr = 3e-3;
    VariantConfig variant;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    /// Seeds trained concurrently. Each seed is self-contained, so results do
    /// not depend on this.
    std::size_t threads = 1;

    /// Toy defaults: d 32, 3 layers, 4 heads, LoRA rank 4.
    static ExperimentConfig defaults();
};

struct SeedOutcome {
    std::uint64_t seed = 0;
    std::map<std::string, double> accuracy;  // percent; variant names plus "permuted_tree"
};

struct ExperimentResult {
    std::vector<SeedOutcome> seeds;
    std::map<std::string, double> mean;
    /// gtca_staged >= lora_only and permuted_tree < gtca_staged, on means.
    bool staged_at_least_lora = false;
    bool permuted_below_gold = false;
};

/// Task data for one seed, already tokenized and paired with gold structure.
struct AgreementData {
    model::Tokenizer tokenizer;
    data::PromptTemplate tmpl;
    std::vector<data::AgreementExample> train;
    std::vector<data::AgreementExample> test;
    std::vector<TrainExample> train_examples;
    std::vector<TrainExample> pretrain_examples;  // question text only
};

AgreementData make_agreement_data(const ExperimentConfig& config, std::uint64_t seed);

/// Accuracy (percent) on `examples` with gold trees corrupted by `control`;
/// alpha 0 runs the plain backbone.
template <typename T>
double agreement_accuracy(const model::Transformer<T>& m, const AgreementData& data,
                          const std::vector<data::AgreementExample>& examples, double alpha, const std::string& control,
                          std::uint64_t seed);

SeedOutcome run_agreement_seed(const ExperimentConfig& config, std::uint64_t seed);
ExperimentResult run_agreement_experiment(const ExperimentConfig& config);

void write_experiment_csv(const std::filesystem::path& path, const ExperimentResult& result);

}  // namespace gtca::train
