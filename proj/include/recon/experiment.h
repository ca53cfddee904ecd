// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: dense pre-training, resumable sweeps over the
// reconstruction grid, and report assembly.

#pragma once

#include "recon/criteria.h"
#include "recon/data.h"
#include "recon/metrics.h"
#include "recon/model.h"
#include "recon/reconstruct.h"

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace recon {

struct DenseTrainConfig {
    std::size_t max_steps = 2000;
    std::size_t batch_size = 8;
    double lr = 3e-3;
    double warmup_frac = 0.05;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::size_t eval_every = 250;
    double target_ppl = 0.0;  // stop early once holdout perplexity drops to this; 0 disables
};

struct ExperimentConfig {
    ModelConfig model;
    std::string corpus_path;
    double holdout_fraction = 0.1;
    std::size_t eval_windows = 0;  // 0: all non-overlapping holdout windows
    DenseTrainConfig train;

    std::size_t n_samples = 256;
    std::size_t seq_len = 128;
    std::vector<std::uint64_t> seeds = {0};

    Criterion criterion = Criterion::wanda;
    SparsityPattern pattern = SparsityPattern::unstructured(0.5);
    SparseGptOptions sparsegpt;

    std::vector<Granularity> granularities = {Granularity::half_block()};
    std::vector<Strategy> strategies = {Strategy::mixed};
    std::vector<LossKind> losses = {LossKind::mse};
    std::vector<double> lrs = {3e-5};
    std::vector<std::size_t> epochs = {1};
    OptimConfig opt;  // lr, epochs and seed are taken from the grid
    bool train_norm_params = false;
    PerMatrixSolver per_matrix_solver = PerMatrixSolver::gradient;
    double ridge = 1e-6;
    bool include_retrain = false;
    bool save_run_checkpoints = false;

    std::string out_dir = "out";
    std::string dense_checkpoint;  // empty: <out_dir>/checkpoints/dense.ckpt

    std::string dense_path() const;
    void validate() const;
};

// Reads a JSON config; unknown keys are rejected (ConfigError).
ExperimentConfig load_config(const std::string & path);
ExperimentConfig config_from_json(const std::string & text);
std::string config_to_json(const ExperimentConfig & cfg);

struct DenseTrainResult {
    std::size_t steps = 0;
    double holdout_ppl = 0.0;
    double unigram_ppl = 0.0;
    std::vector<double> train_loss;  // mean loss per eval interval
    std::string checkpoint;
};

// Trains the dense model with next-token cross-entropy and writes the
// checkpoint to cfg.dense_path().
DenseTrainResult cmd_train_dense(const ExperimentConfig & cfg);

struct SweepOptions {
    // Stops after this many freshly executed cells (simulates an interrupted
    // run); 0 runs everything.
    std::size_t max_new_cells = 0;
    bool verbose = false;
};

struct SweepResult {
    std::size_t executed = 0;
    std::size_t skipped = 0;
    bool complete = false;
    std::vector<RecoveryReport> reports;
    std::string summary_path;
};

// Runs every cell of granularity x strategy x loss x lr x epochs x seed that
// has no result file yet, then rewrites runs.csv and summary.md from the
// per-cell files.
SweepResult cmd_sweep(const ExperimentConfig & cfg, const SweepOptions & opts = {});

// Rebuilds runs.csv and summary.md from existing per-cell files.
std::vector<RecoveryReport> cmd_report(const ExperimentConfig & cfg);

// Mean recovery over seeds, best (strategy, loss, lr, epochs) per granularity.
struct GranularityRanking {
    std::string granularity;
    std::string best_cell;
    double mean_recovery = 0.0;
    std::size_t seeds = 0;
};
std::vector<GranularityRanking> rank_granularities(const std::vector<RecoveryReport> & reports);

// FNV-1a, used for content fingerprints.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ULL);
std::string hex64(std::uint64_t v);

}  // namespace recon
