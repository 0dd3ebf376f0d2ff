// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

// gtca: command-line driver. Exit codes: 0 success, 2 input error, 3 numeric
// failure, 1 anything else.

#include <cstdio>
#include <exception>

#include "CLI11.hpp"
#include "gtca/cli/commands.hpp"
#include "gtca/numerics/tensor.hpp"
#include "gtca/util/errors.hpp"

namespace {

using gtca::cli::CommandArgs;

void common(CLI::App* sub, CommandArgs& a, bool needs_config = true) {
    auto* c = sub->add_option("--config", a.config, "JSON config file");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", a.seed, "run seed")->default_val(0);
    sub->add_option("--out", a.out, "output directory")->required();
    sub->add_option("--threads", a.threads, "worker threads (results do not depend on this)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GTCA: gated tree cross-attention toolkit"};
    app.require_subcommand(1);
    CommandArgs a;

    auto* build = app.add_subcommand("build-cache", "parse trees and cache aligned structure per prompt");
    common(build, a);
    build->add_option("--dataset", a.dataset, "dataset file (default: every dataset in the config)");
    build->add_option("--trees", a.trees, "trees file for --dataset");
    build->add_option("--format", a.format, "mcqa | pairs | binary");

    auto* train = app.add_subcommand("train", "train one variant and write a checkpoint");
    common(train, a);
    train->add_option("--variant", a.variant, "lora_only | direct_joint | gtca_staged");
    train->add_option("--dataset", a.dataset, "training dataset (mcqa)");
    train->add_option("--cache", a.cache, "structure cache file");

    auto add_eval_flags = [&](CLI::App* sub) {
        common(sub, a);
        sub->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
        sub->add_option("--dataset", a.dataset, "evaluation dataset");
        sub->add_option("--format", a.format, "mcqa | pairs | binary");
        sub->add_option("--cache", a.cache, "structure cache file");
        sub->add_option("--demos", a.demos, "k-shot demonstrations file");
        sub->add_option("--k", a.k, "number of demonstrations");
        sub->add_option("--alpha", a.alpha, "structural coefficient (default: alpha_star)");
    };
    auto* eval = app.add_subcommand("eval", "score a dataset and write predictions and metrics");
    add_eval_flags(eval);
    auto* ablate = app.add_subcommand("ablate", "evaluate with a component toggled or the trees corrupted");
    add_eval_flags(ablate);
    ablate->add_option("--toggle", a.toggle, "no_gate | no_mask | weak_tree | random_tree | permuted_tree")
        ->required();

    auto* probe = app.add_subcommand("probe", "layer-wise structural probe, UUAS per layer");
    common(probe, a);
    probe->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    probe->add_option("--gold", a.dataset, "gold dependency file");
    probe->add_option("--subsample", a.subsample, "number of sentences");

    auto* grid = app.add_subcommand("grid-alpha", "grid search over alpha on the validation sets");
    common(grid, a);
    grid->add_option("--cache", a.cache, "structure cache file");

    auto* experiment = app.add_subcommand("experiment", "synthetic agreement experiment over seeds");
    common(experiment, a, false);
    experiment->add_option("--seeds", a.seeds, "seeds (default: the config's)");

    auto* synth = app.add_subcommand("synth", "write a synthetic agreement dataset and config");
    synth->add_option("--seed", a.seed, "generator seed")->default_val(0);
    synth->add_option("--out", a.out, "output directory")->required();
    synth->add_option("--train", a.train_examples, "training questions")->default_val(800);
    synth->add_option("--test", a.test_examples, "test questions")->default_val(300);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*build) gtca::cli::cmd_build_cache(a);
        else if (*train) gtca::cli::cmd_train(a);
        else if (*eval) gtca::cli::cmd_eval(a);
        else if (*ablate) gtca::cli::cmd_eval(a);
        else if (*probe) gtca::cli::cmd_probe(a);
        else if (*grid) gtca::cli::cmd_grid_alpha(a);
        else if (*experiment) gtca::cli::cmd_experiment(a);
        else if (*synth) gtca::cli::cmd_synth(a);
    } catch (const gtca::InputError& e) {
        std::fprintf(stderr, "gtca: input error: %s\n", e.what());
        return 2;
    } catch (const gtca::num::NumericError& e) {
        std::fprintf(stderr, "gtca: numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "gtca: %s\n", e.what());
        return 1;
    }
    return 0;
}
