// SPDX-License-Identifier: Apache-2.0
//
// Perplexity, recovery, paired recovery differences and the analytic
// peak-memory model.

#pragma once

#include "recon/model.h"
#include "recon/tensor.h"
#include "recon/tokens.h"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace recon {

// Mean negative log-likelihood of `targets` under logits [N, V]; -1 targets
// are skipped. Returns the NLL sum and the number of scored positions.
struct NllSum {
    double sum = 0.0;
    std::size_t count = 0;
};
NllSum next_token_nll(const Tensor & logits, std::span<const int> targets);

// exp(mean next-token NLL) over the given windows (one per row); every
// position after the first of a window is scored.
double perplexity(const GptModel & model, const TokenMatrix & windows, WeightSet weights);

// (ppl_pruned - ppl_recon) / (ppl_pruned - ppl_dense); empty when the
// denominator is zero.
std::optional<double> recovery(double ppl_dense, double ppl_pruned, double ppl_reconstructed);

// Identifies one sweep cell. `model` names the dense checkpoint, `sparsity`
// the pattern string.
struct RunFingerprint {
    std::string model;
    std::string sparsity;
    std::string criterion;
    std::string granularity;
    std::string strategy;
    std::string loss;
    double lr = 0.0;
    std::size_t epochs = 0;
    std::uint64_t seed = 0;

    std::string key() const;
    bool operator==(const RunFingerprint &) const = default;
};

struct RecoveryReport {
    RunFingerprint config;
    double ppl_dense = 0.0;
    double ppl_pruned = 0.0;
    double ppl_reconstructed = 0.0;
    std::optional<double> recovery;
};

RecoveryReport make_report(const RunFingerprint & config, double ppl_dense, double ppl_pruned,
                           double ppl_reconstructed);

enum class DiffAxis { strategy, loss };
enum class Pairing { identical_config, best_per_model_sparsity };

struct RecoveryDiff {
    std::string key;  // what the pair shares
    double diff = 0.0;
};

struct RecoveryDiffs {
    std::vector<RecoveryDiff> diffs;
    std::string warning;  // set when no valid pair exists
};

// Differences recovery(axis = a) - recovery(axis = b). Identical-config pairs
// agree on every fingerprint field except the axis; best-per pairing compares
// each side's maximum recovery per (model, sparsity). Reports with undefined
// recovery are ignored.
RecoveryDiffs recovery_diffs(const std::vector<RecoveryReport> & runs, Pairing pairing, DiffAxis axis,
                             const std::string & a, const std::string & b);

// Counts per bin over [lo, hi); values outside fall into the edge bins.
std::vector<std::size_t> histogram(const std::vector<RecoveryDiff> & diffs, std::size_t bins, double lo, double hi);

struct MemoryEstimate {
    std::size_t trainable_params = 0;
    std::size_t frozen_params = 0;
    std::size_t optimizer_state_floats = 0;
    std::size_t activation_floats = 0;
    std::size_t peak_bytes = 0;
    std::string unit;  // label of the largest unit
};

// Largest unit of the split under f64 AdamW: weights, gradients and two
// moments for trainable parameters, weights only for frozen ones, plus
// stored forward activations for batch_size * seq_len tokens.
MemoryEstimate estimate_peak_memory(const ModelConfig & config, const Granularity & granularity,
                                    std::size_t batch_size = 2, std::size_t seq_len = 0,
                                    bool train_norm_params = false);

}  // namespace recon
