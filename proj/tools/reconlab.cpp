// SPDX-License-Identifier: Apache-2.0
//
// reconlab: train a small byte-level GPT, prune it, reconstruct it and
// report recovery.

#include "recon/data.h"
#include "recon/errors.h"
#include "recon/experiment.h"
#include "recon/metrics.h"
#include "recon/reconstruct.h"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <malloc.h>

namespace fs = std::filesystem;
using namespace recon;

namespace {

struct Flags {
    std::string config;
    std::string corpus;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> granularity;
    std::vector<std::string> strategy;
    std::vector<std::string> loss;
    std::vector<double> lr;
    std::vector<std::size_t> epochs;
    std::string pattern;
    std::string criterion;
    std::string checkpoint;
    bool verbose = false;
};

void common_flags(CLI::App * cmd, Flags & f) {
    cmd->add_option("--config", f.config, "JSON experiment config");
    cmd->add_option("--corpus", f.corpus, "text corpus file");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--seed", f.seed, "seed (calibration seed; training seed for train-dense)");
    cmd->add_option("--granularity", f.granularity, "per-matrix, half-block, blocks-<k>, full-decoder")->delimiter(',');
    cmd->add_option("--strategy", f.strategy, "dp, sp, mp")->delimiter(',');
    cmd->add_option("--loss", f.loss, "mse, cs")->delimiter(',');
    cmd->add_option("--lr", f.lr, "reconstruction learning rate(s)")->delimiter(',');
    cmd->add_option("--epochs", f.epochs, "reconstruction epochs")->delimiter(',');
    cmd->add_option("--pattern", f.pattern, "sparsity: 0.5, 50%, 2:4");
    cmd->add_option("--criterion", f.criterion, "magnitude, wanda, sparsegpt");
}

ExperimentConfig resolve(const Flags & f, bool train_seed) {
    ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
    if (!f.corpus.empty()) {
        cfg.corpus_path = f.corpus;
    }
    if (!f.out.empty()) {
        cfg.out_dir = f.out;
    }
    if (f.seed) {
        if (train_seed) {
            cfg.train.seed = *f.seed;
        } else {
            cfg.seeds = {*f.seed};
        }
    }
    if (!f.granularity.empty()) {
        cfg.granularities.clear();
        for (const auto & g : f.granularity) {
            try {
                cfg.granularities.push_back(Granularity::parse(g));
            } catch (const std::invalid_argument & e) {
                throw ConfigError(e.what());
            }
        }
    }
    if (!f.strategy.empty()) {
        cfg.strategies.clear();
        for (const auto & s : f.strategy) {
            cfg.strategies.push_back(parse_strategy(s));
        }
    }
    if (!f.loss.empty()) {
        cfg.losses.clear();
        for (const auto & s : f.loss) {
            cfg.losses.push_back(parse_loss(s));
        }
    }
    if (!f.lr.empty()) {
        cfg.lrs = f.lr;
    }
    if (!f.epochs.empty()) {
        cfg.epochs = f.epochs;
    }
    if (!f.pattern.empty()) {
        cfg.pattern = SparsityPattern::parse(f.pattern);
    }
    if (!f.criterion.empty()) {
        cfg.criterion = parse_criterion(f.criterion);
    }
    cfg.validate();
    return cfg;
}

std::string checkpoint_path(const ExperimentConfig & cfg, const std::string & name) {
    return (fs::path(cfg.out_dir) / "checkpoints" / name).string();
}

GptModel load_existing(const std::string & path) {
    if (!fs::exists(path)) {
        throw ConfigError("checkpoint " + path + " not found");
    }
    return load_checkpoint(path);
}

int run(int argc, char ** argv) {
    CLI::App app{"Post-pruning reconstruction lab for small byte-level GPT models"};
    app.require_subcommand(1);
    Flags f;

    std::size_t n_bytes = 1 << 20;
    std::uint64_t corpus_seed = 0;
    std::string corpus_out;
    auto * gen = app.add_subcommand("gen-corpus", "write a synthetic English-like corpus");
    gen->add_option("--bytes", n_bytes, "corpus size in bytes");
    gen->add_option("--seed", corpus_seed, "generator seed");
    gen->add_option("--out", corpus_out, "output file")->required();

    auto * train = app.add_subcommand("train-dense", "train the dense model");
    common_flags(train, f);
    auto * prune = app.add_subcommand("prune", "prune the dense checkpoint");
    common_flags(prune, f);
    auto * recon = app.add_subcommand("reconstruct", "reconstruct a pruned checkpoint");
    common_flags(recon, f);
    recon->add_option("--checkpoint", f.checkpoint, "pruned checkpoint (default <out>/checkpoints/pruned.ckpt)");
    auto * eval = app.add_subcommand("eval", "holdout perplexity of a checkpoint");
    common_flags(eval, f);
    eval->add_option("--checkpoint", f.checkpoint, "checkpoint (default: the dense checkpoint)");
    auto * sweep = app.add_subcommand("sweep", "run the reconstruction grid");
    common_flags(sweep, f);
    sweep->add_flag("-v,--verbose", f.verbose, "log each finished cell");
    auto * report = app.add_subcommand("report", "rebuild runs.csv and summary.md");
    common_flags(report, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    if (gen->parsed()) {
        std::ofstream os(corpus_out, std::ios::binary);
        if (!os) {
            throw ConfigError("cannot write " + corpus_out);
        }
        os << synthetic_corpus(n_bytes, corpus_seed);
        return 0;
    }
    if (train->parsed()) {
        const ExperimentConfig cfg = resolve(f, true);
        const DenseTrainResult r = cmd_train_dense(cfg);
        std::printf("steps %zu  holdout ppl %.4f  unigram ppl %.4f\ncheckpoint %s\n", r.steps, r.holdout_ppl,
                    r.unigram_ppl, r.checkpoint.c_str());
        return 0;
    }
    if (prune->parsed()) {
        const ExperimentConfig cfg = resolve(f, false);
        GptModel model = load_existing(cfg.dense_path());
        const Corpus corpus = Corpus::from_file(cfg.corpus_path, cfg.holdout_fraction);
        const CalibrationSet calib = sample_calibration(corpus, cfg.n_samples, cfg.seq_len, cfg.seeds.front());
        prune_model(model, calib.tokens, PruneOptions{cfg.criterion, cfg.pattern, cfg.sparsegpt});
        const std::string path = checkpoint_path(cfg, "pruned.ckpt");
        fs::create_directories(fs::path(path).parent_path());
        save_checkpoint(model, path);
        std::printf("sparsity %.4f\ncheckpoint %s\n", model.sparsity(), path.c_str());
        return 0;
    }
    if (recon->parsed()) {
        const ExperimentConfig cfg = resolve(f, false);
        const std::string in = f.checkpoint.empty() ? checkpoint_path(cfg, "pruned.ckpt") : f.checkpoint;
        GptModel model = load_existing(in);
        const Corpus corpus = Corpus::from_file(cfg.corpus_path, cfg.holdout_fraction);
        const CalibrationSet calib = sample_calibration(corpus, cfg.n_samples, cfg.seq_len, cfg.seeds.front());
        PipelineConfig pc;
        pc.granularity = cfg.granularities.front();
        pc.strategy = cfg.strategies.front();
        pc.loss = cfg.losses.front();
        pc.opt = cfg.opt;
        pc.opt.lr = cfg.lrs.front();
        pc.opt.epochs = cfg.epochs.front();
        pc.opt.seed = cfg.seeds.front();
        pc.train_norm_params = cfg.train_norm_params;
        pc.per_matrix_solver = cfg.per_matrix_solver;
        pc.ridge = cfg.ridge;
        const PipelineResult res = run_pipeline(model, calib.tokens, pc);
        const std::string path = checkpoint_path(cfg, "reconstructed.ckpt");
        fs::create_directories(fs::path(path).parent_path());
        save_checkpoint(model, path);
        std::ofstream trace(fs::path(cfg.out_dir) / "trace.csv");
        write_trace_csv(trace, res.trace);
        for (const UnitResult & u : res.units) {
            std::printf("%-10s loss %.6g -> %.6g%s\n", u.label.c_str(), u.initial_loss, u.final_loss,
                        u.skipped ? " (skipped)" : "");
        }
        std::printf("checkpoint %s\n", path.c_str());
        return 0;
    }
    if (eval->parsed()) {
        const ExperimentConfig cfg = resolve(f, false);
        const GptModel model = load_existing(f.checkpoint.empty() ? cfg.dense_path() : f.checkpoint);
        const Corpus corpus = Corpus::from_file(cfg.corpus_path, cfg.holdout_fraction);
        const TokenMatrix windows = holdout_windows(corpus, cfg.model.seq_len, cfg.eval_windows);
        std::printf("dense ppl %.6f\npruned ppl %.6f\nsparsity %.4f\nunigram ppl %.6f\n",
                    perplexity(model, windows, WeightSet::dense), perplexity(model, windows, WeightSet::pruned),
                    model.sparsity(), unigram_perplexity(corpus, windows));
        return 0;
    }
    if (sweep->parsed()) {
        const ExperimentConfig cfg = resolve(f, false);
        SweepOptions so;
        so.verbose = f.verbose;
        const SweepResult r = cmd_sweep(cfg, so);
        std::printf("executed %zu  skipped %zu\nsummary %s\n", r.executed, r.skipped, r.summary_path.c_str());
        for (const GranularityRanking & g : rank_granularities(r.reports)) {
            std::printf("%-14s %.4f  %s\n", g.granularity.c_str(), g.mean_recovery, g.best_cell.c_str());
        }
        return 0;
    }
    if (report->parsed()) {
        const ExperimentConfig cfg = resolve(f, false);
        const auto reports = cmd_report(cfg);
        std::printf("%zu runs\n", reports.size());
        return 0;
    }
    return 2;
}

}  // namespace

int main(int argc, char ** argv) {
    // Activation buffers are large and short-lived; keep them off mmap so the
    // kernel is not asked to zero fresh pages on every forward pass.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    try {
        return run(argc, argv);
    } catch (const ConfigError & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError & e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
