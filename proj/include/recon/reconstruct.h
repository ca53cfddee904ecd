// SPDX-License-Identifier: Apache-2.0
//
// Post-pruning reconstruction: analytic per-matrix least squares, gradient
// reconstruction of units against dense/sparse activation streams, the
// sequential pipeline over units, and full retraining with true labels.

#pragma once

#include "recon/criteria.h"
#include "recon/model.h"
#include "recon/tensor.h"
#include "recon/tokens.h"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace recon {

// DP: dense inputs, dense targets. SP: sparse inputs, targets from the dense
// unit applied to the sparse inputs. MP: sparse inputs, dense targets.
enum class Strategy { dense, sparse, mixed };
Strategy parse_strategy(const std::string & s);
std::string to_string(Strategy s);

enum class LossKind { mse, cosine };
LossKind parse_loss(const std::string & s);
std::string to_string(LossKind k);

struct OptimConfig {
    double lr = 3e-5;
    std::size_t epochs = 1;
    double warmup_frac = 0.1;
    std::size_t batch_size = 2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

// Linear warm-up over the first warmup_frac of the steps, then linear decay
// to zero. `step` is 0-based.
double scheduled_lr(const OptimConfig & opt, std::size_t step, std::size_t total_steps);

// AdamW over a fixed list of tensors. Gradients are multiplied by the mask
// (when given) before the update, and the parameter is re-masked after it.
class AdamW {
public:
    AdamW(const OptimConfig & opt, std::vector<Tensor *> params, std::vector<const Tensor *> masks);
    void step(double lr);
    std::size_t steps_taken() const { return t_; }

private:
    OptimConfig opt_;
    std::vector<Tensor *> params_;
    std::vector<const Tensor *> masks_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

// Row-wise least squares with a fixed support: for each output row i with
// support S, W_hat[i, S] = (W[i, :] X X_S^T)(X_S X_S^T + ridge I)^-1, zero
// elsewhere. X = [d_in x B].
Tensor analytic_matrix_recon(const Tensor & w, const Tensor & mask, const Tensor & x, double ridge);
// Cross form: minimises ||W X_t - W_hat X_in||^2 given cross = X_t X_in^T and
// g = X_in X_in^T. Equals the plain form when X_t = X_in.
Tensor analytic_matrix_recon_gram(const Tensor & w, const Tensor & mask, const Tensor & cross, const Tensor & g,
                                  double ridge);

// Dense stream X (computed once from the dense weights) and sparse stream
// X-hat (advanced as units are reconstructed). Taps follow ForwardTaps;
// a sparse tap that has not been produced yet is empty.
struct ActivationStreams {
    std::size_t seq_len = 0;
    std::vector<Tensor> dense;
    std::vector<Tensor> sparse;
    std::vector<MatrixInputs> dense_inputs;
    std::vector<MatrixInputs> sparse_inputs;
    bool matrix_inputs = false;

    static ActivationStreams build(const GptModel & model, const TokenMatrix & calibration, bool matrix_inputs);
    // Recomputes sparse taps s0+1..s1 (and matrix inputs of those stages)
    // from sparse tap s0 with the current pruned weights.
    void advance(const GptModel & model, std::size_t s0, std::size_t s1);
    std::size_t rows() const { return dense.empty() ? 0 : dense.front().shape[0]; }
};

struct UnitBatch {
    Tensor inputs;
    Tensor targets;
};

UnitBatch build_unit_batch(const GptModel & model, const ActivationStreams & streams, const ReconUnit & unit,
                           Strategy strategy);

struct LossValue {
    double value = 0.0;
    std::size_t zero_rows = 0;
};

// MSE: mean over all elements. CS: 1 - mean over token rows of the cosine
// similarity; zero-norm rows count as orthogonal.
LossValue loss_value(const Tensor & pred, const Tensor & target, LossKind loss);

struct TraceRow {
    std::size_t unit = 0;
    std::string label;
    std::size_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct UnitResult {
    std::size_t unit = 0;
    std::string label;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t steps = 0;
    bool skipped = false;
    std::size_t zero_norm_rows = 0;
};

// Trains the unit's pruned parameters with AdamW under the mask, then
// advances the sparse stream through the unit. A unit whose initial loss is
// below 1e-12 is left untouched. Non-finite losses roll the unit back and
// throw NumericalError.
UnitResult reconstruct_unit(GptModel & model, const ReconUnit & unit, ActivationStreams & streams, Strategy strategy,
                            LossKind loss, const OptimConfig & opt, std::vector<TraceRow> * trace = nullptr);

// Closed-form counterpart of reconstruct_unit for per-matrix units.
UnitResult reconstruct_unit_analytic(GptModel & model, const ReconUnit & unit, ActivationStreams & streams,
                                     Strategy strategy, double ridge);

struct PruneOptions {
    Criterion criterion = Criterion::wanda;
    SparsityPattern pattern = SparsityPattern::unstructured(0.5);
    SparseGptOptions sparsegpt;
};

// One-shot layer-wise pruning, block by block: each block is scored on the
// activations produced by the already-pruned blocks before it. SparseGPT
// writes its updated weights into the pruned copy.
void prune_model(GptModel & model, const TokenMatrix & calibration, const PruneOptions & opts);

enum class PerMatrixSolver { gradient, analytic };

struct PipelineConfig {
    Granularity granularity = Granularity::half_block();
    Strategy strategy = Strategy::mixed;
    LossKind loss = LossKind::mse;
    OptimConfig opt;
    bool train_norm_params = false;
    PerMatrixSolver per_matrix_solver = PerMatrixSolver::gradient;
    double ridge = 1e-6;
    // Optional observer, called after each unit with the updated model.
    std::function<void(const ReconUnit &, const UnitResult &, const GptModel &)> after_unit;
};

struct PipelineResult {
    std::vector<UnitResult> units;
    std::vector<TraceRow> trace;
};

// Reconstructs an already-pruned model unit by unit in depth order.
PipelineResult run_pipeline(GptModel & model, const TokenMatrix & calibration, const PipelineConfig & cfg);
// Prunes with `prune` first, then reconstructs.
PipelineResult run_pipeline(GptModel & model, const TokenMatrix & calibration, const PruneOptions & prune,
                            const PipelineConfig & cfg);

// Cross-entropy next-token training of all prunable matrices, norms and the
// LM head on the calibration tokens, with masked gradients. Returns the mean
// training loss per epoch.
std::vector<double> retrain_full(GptModel & model, const TokenMatrix & calibration, const OptimConfig & opt);

void write_trace_csv(std::ostream & os, const std::vector<TraceRow> & trace);

}  // namespace recon
