// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// The command layer behind tools/gtca. Every command reads one JSON config,
// takes a single seed and writes its artifacts plus a manifest under an
// output directory. Relative paths in a config resolve against the config's
// own directory.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gtca/data/prompt.hpp"
#include "gtca/eval/scoring.hpp"
#include "gtca/model/transformer.hpp"
#include "gtca/probe/probe.hpp"
#include "gtca/train/experiment.hpp"
#include "gtca/train/training.hpp"
#include "gtca/treebank/structure_cache.hpp"

namespace gtca::cli {

namespace fs = std::filesystem;

/// A dataset on disk. `format` is mcqa, pairs or binary; `trees` is only
/// needed by build-cache.
struct DataSpec {
    fs::path dataset;
    std::string format = "mcqa";
    fs::path trees;
    fs::path demos;  // k-shot demonstrations (mcqa / binary)
    std::optional<data::PromptTemplate> tmpl;
};

struct RunConfig {
    fs::path path;
    std::string blob_sha1;  // git-style hash of the config bytes

    model::ModelConfig model;
    fs::path tokenizer;
    data::PromptTemplate tmpl;
    tree::MaskOptions mask;
    fs::path cache;
    bool strict_cache = true;
    std::size_t threads = 1;

    DataSpec train_data;
    std::string variant = "gtca_staged";
    train::VariantConfig variant_config;
    std::size_t pretrain_steps = 0;
    double pretrain_lr = 3e-3;
    fs::path base_checkpoint;

    DataSpec eval_data;
    std::optional<double> eval_alpha;  // default: alpha_star

    std::vector<double> grid_alphas;
    DataSpec grid_retention;
    DataSpec grid_syntax;
    double grid_max_drop = 1.0;
    std::vector<std::uint64_t> grid_seeds;  // empty: the command seed

    fs::path probe_gold;
    std::size_t probe_subsample = 3000;
    probe::ProbeLayersOptions probe;

    train::ExperimentConfig experiment = train::ExperimentConfig::defaults();
};

/// Parses a config file. Unknown keys are rejected so typos fail loudly.
RunConfig load_config(const fs::path& path);

/// The template a dataset is rendered with: its own, else "binary" for
/// binary datasets, else the config template. k is the configured k.
data::PromptTemplate template_for(const RunConfig& config, const DataSpec& spec);

/// Zero-shot prompts of a dataset, in the order build-cache keys them. Pairs
/// contribute their good then bad sentence.
std::vector<data::Prompt> dataset_prompts(const RunConfig& config, const DataSpec& spec,
                                          const model::Tokenizer& tok);

/// Cached structure for a prompt. A k-shot prompt is looked up under its
/// zero-shot ids (the demonstration region removed), then shifted back with a
/// zero mask over the demonstrations.
std::optional<data::PromptStructure> cached_structure(tree::StructureCache& cache, const data::Prompt& prompt);

struct Artifact {
    std::string path;  // relative to the output directory
    std::string sha256;
};

struct RunManifest {
    std::string command;
    std::string config;
    std::string config_sha1;
    std::vector<std::uint64_t> seeds;
    std::vector<Artifact> inputs;
    std::string output_dir;
    std::vector<Artifact> outputs;
    std::vector<std::pair<std::string, std::string>> settings;
};

/// Writes <out>/<command>.manifest.json. Files are hashed as they are now.
void write_manifest(const fs::path& out_dir, const RunManifest& manifest);

struct CommandArgs {
    fs::path config;
    std::uint64_t seed = 0;
    fs::path out;
    // Overrides; empty / unset keeps the config value.
    fs::path dataset;
    std::string format;
    fs::path trees;
    fs::path cache;
    fs::path checkpoint;
    fs::path demos;
    std::string variant;
    std::string toggle = "none";
    std::optional<std::size_t> k;
    std::optional<double> alpha;
    std::optional<std::size_t> subsample;
    std::optional<std::size_t> threads;
    std::vector<std::uint64_t> seeds;
    std::size_t train_examples = 800;
    std::size_t test_examples = 300;
};

void cmd_build_cache(const CommandArgs& args);
void cmd_train(const CommandArgs& args);
/// Evaluation and ablation share one path; eval is the "none" toggle.
void cmd_eval(const CommandArgs& args);
void cmd_probe(const CommandArgs& args);
void cmd_grid_alpha(const CommandArgs& args);
/// The synthetic agreement experiment over several seeds.
void cmd_experiment(const CommandArgs& args);
/// Writes a synthetic agreement dataset, its trees, probe gold, a vocabulary
/// and a ready-to-run config.
void cmd_synth(const CommandArgs& args);

/// Dependency-style gold edges of a synthetic agreement question: each
/// determiner to its noun, each modifier noun to its preposition and each
/// preposition to the head noun.
probe::GoldItem agreement_gold(const std::string& question, std::size_t head);

}  // namespace gtca::cli
