// SPDX-License-Identifier: Apache-2.0

#include "recon/reconstruct.h"

#include "recon/errors.h"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace recon {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

ConstMap as_matrix(const Tensor & t) {
    return ConstMap(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

// Rows of sequences `seqs` out of a token-major [n_seq*seq, width] tensor.
Tensor gather_sequences(const Tensor & x, std::size_t seq, std::span<const std::size_t> seqs) {
    const std::size_t width = x.shape[1];
    Tensor out({seqs.size() * seq, width});
    const std::size_t stride = seq * width;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(seqs[i] * stride), stride,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return out;
}

// y = A W^T, token-major rows. One fixed evaluation path for every caller.
Tensor apply_matrix(const Tensor & a, const Tensor & w) {
    Tensor out({a.rows(), w.rows()});
    Eigen::Map<RowMat> y(out.data.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(w.rows()));
    y.noalias() = as_matrix(a) * as_matrix(w).transpose();
    return out;
}

Tensor masked(const Tensor & w, const Tensor & mask) {
    Tensor out = w;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] *= mask.data[i];
    }
    return out;
}

bool all_finite(const Tensor & t) {
    return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

const Tensor & require_tap(const Tensor & t, const std::string & what) {
    if (t.data.empty()) {
        throw std::logic_error("activation stream: " + what + " has not been computed yet");
    }
    return t;
}

const Tensor & matrix_tap(const std::vector<MatrixInputs> & inputs, std::size_t block, MatrixKind kind,
                          const char * stream) {
    if (block >= inputs.size()) {
        throw std::logic_error(std::string("activation stream: no ") + stream + " matrix inputs for block " +
                               std::to_string(block));
    }
    return require_tap(inputs[block].for_matrix(kind),
                       std::string(stream) + " input of b" + std::to_string(block) + "." + to_string(kind));
}

// Token embedding plus positions, chunked like the forward pass.
Tensor embed_rows(const GptModel & model, const TokenMatrix & tokens, WeightSet weights) {
    const Binder bind = bind_weights(model, weights);
    const std::size_t total = tokens.rows * tokens.cols;
    Tensor out;
    for (std::size_t r0 = 0; r0 < tokens.rows; r0 += kStreamChunk) {
        const std::size_t r1 = std::min(tokens.rows, r0 + kStreamChunk);
        Graph g;
        const Tensor & x = embed(g, model, tokens.slice_rows(r0, r1), bind).value();
        if (out.data.empty()) {
            out = Tensor({total, x.shape[1]});
        }
        std::copy(x.data.begin(), x.data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(r0 * tokens.cols * x.shape[1]));
    }
    return out;
}

// Binds the pruned copy everywhere; parameters listed in `trainable` become
// graph leaves, prunable ones behind their mask.
Binder trainable_binder(GptModel & model, const std::vector<bool> & trainable) {
    return [&model, &trainable](Graph & g, std::size_t i) {
        Param & p = model.param(i);
        if (!trainable[i]) {
            return g.input(p.pruned);
        }
        Var v = g.param(p.pruned);
        return p.prunable() ? g.mask_mul(v, p.mask) : v;
    };
}

struct TrainSet {
    std::vector<std::size_t> ids;
    std::vector<Tensor *> tensors;
    std::vector<const Tensor *> masks;
    std::vector<Tensor> snapshot;
    std::vector<bool> flag;
};

TrainSet make_train_set(GptModel & model, const std::vector<std::size_t> & ids) {
    TrainSet ts;
    ts.flag.assign(model.params().size(), false);
    for (std::size_t i : ids) {
        if (ts.flag.at(i)) {
            continue;
        }
        ts.flag[i] = true;
        ts.ids.push_back(i);
        Param & p = model.param(i);
        ts.tensors.push_back(&p.pruned);
        ts.masks.push_back(p.prunable() ? &p.mask : nullptr);
        ts.snapshot.push_back(p.pruned);
        p.pruned.requires_grad = true;
        p.pruned.clear_grad();
    }
    return ts;
}

void release(TrainSet & ts) {
    for (Tensor * t : ts.tensors) {
        t->requires_grad = false;
        t->clear_grad();
    }
}

void rollback(TrainSet & ts) {
    for (std::size_t i = 0; i < ts.tensors.size(); ++i) {
        *ts.tensors[i] = ts.snapshot[i];
    }
    release(ts);
}

std::size_t total_steps(std::size_t n_seq, const OptimConfig & opt) {
    return opt.epochs * ((n_seq + opt.batch_size - 1) / opt.batch_size);
}

void check_opt(const OptimConfig & opt) {
    if (opt.batch_size == 0) {
        throw ConfigError("optimizer: batch_size must be positive");
    }
    if (!(opt.lr > 0.0) || !std::isfinite(opt.lr)) {
        throw ConfigError("optimizer: lr must be positive and finite");
    }
    if (opt.warmup_frac < 0.0 || opt.warmup_frac > 1.0) {
        throw ConfigError("optimizer: warmup_frac must lie in [0, 1]");
    }
}

Var unit_loss(Graph & g, Var pred, Var target, LossKind loss, std::size_t * zero_rows) {
    return loss == LossKind::mse ? g.mse_loss(pred, target) : g.cosine_loss(pred, target, zero_rows);
}

// Prediction of the unit on `inputs` with the current pruned weights.
Tensor unit_forward(const GptModel & model, const ReconUnit & unit, const Tensor & inputs, std::size_t seq) {
    if (unit.per_matrix()) {
        const Param & p = model.param(unit.params.front());
        return apply_matrix(inputs, p.pruned);
    }
    return run_stages(model, inputs, seq, unit.stage_begin, unit.stage_end, WeightSet::pruned).residual.back();
}

}  // namespace

Strategy parse_strategy(const std::string & s) {
    if (s == "dp" || s == "DP" || s == "dense") {
        return Strategy::dense;
    }
    if (s == "sp" || s == "SP" || s == "sparse") {
        return Strategy::sparse;
    }
    if (s == "mp" || s == "MP" || s == "mixed") {
        return Strategy::mixed;
    }
    throw ConfigError("unknown strategy '" + s + "' (dp, sp, mp)");
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::dense: return "dp";
        case Strategy::sparse: return "sp";
        case Strategy::mixed: return "mp";
    }
    return "?";
}

LossKind parse_loss(const std::string & s) {
    if (s == "mse" || s == "MSE") {
        return LossKind::mse;
    }
    if (s == "cs" || s == "CS" || s == "cosine") {
        return LossKind::cosine;
    }
    throw ConfigError("unknown loss '" + s + "' (mse, cs)");
}

std::string to_string(LossKind k) {
    return k == LossKind::mse ? "mse" : "cs";
}

double scheduled_lr(const OptimConfig & opt, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) {
        return 0.0;
    }
    const double warm = std::ceil(opt.warmup_frac * static_cast<double>(total_steps));
    const double s = static_cast<double>(step);
    if (s < warm) {
        return opt.lr * (s + 1.0) / warm;
    }
    const double rest = static_cast<double>(total_steps) - warm;
    if (rest <= 0.0) {
        return opt.lr;
    }
    return opt.lr * std::max(0.0, (static_cast<double>(total_steps) - s) / rest);
}

AdamW::AdamW(const OptimConfig & opt, std::vector<Tensor *> params, std::vector<const Tensor *> masks)
    : opt_(opt), params_(std::move(params)), masks_(std::move(masks)) {
    if (masks_.size() != params_.size()) {
        throw std::invalid_argument("AdamW: one mask slot per parameter required");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (masks_[i] && masks_[i]->shape != params_[i]->shape) {
            throw ShapeError("AdamW: mask shape " + shape_str(masks_[i]->shape) + " vs parameter " +
                             shape_str(params_[i]->shape));
        }
        m_.emplace_back(params_[i]->size(), 0.0);
        v_.emplace_back(params_[i]->size(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor & p = *params_[i];
        if (!p.has_grad()) {
            continue;
        }
        const Tensor * mask = masks_[i];
        std::vector<double> & m = m_[i];
        std::vector<double> & v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double keep = mask ? mask->data[j] : 1.0;
            const double g = p.grad[j] * keep;
            m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g;
            v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g * g;
            double w = p.data[j] * (1.0 - lr * opt_.weight_decay);
            w -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps);
            p.data[j] = w * keep;
        }
    }
}

Tensor analytic_matrix_recon_gram(const Tensor & w, const Tensor & mask, const Tensor & cross, const Tensor & g,
                                  double ridge) {
    const std::size_t d_out = w.rows();
    const std::size_t d_in = w.cols();
    if (mask.shape != w.shape) {
        throw ShapeError("analytic_matrix_recon: mask " + shape_str(mask.shape) + " vs weights " + shape_str(w.shape));
    }
    if (cross.shape != Shape{d_in, d_in} || g.shape != Shape{d_in, d_in}) {
        throw ShapeError("analytic_matrix_recon: Gram matrices must be " + std::to_string(d_in) + "x" +
                         std::to_string(d_in));
    }
    if (ridge < 0.0) {
        throw ConfigError("analytic_matrix_recon: ridge must be >= 0");
    }
    const ConstMap wm = as_matrix(w);
    const ConstMap cm = as_matrix(cross);
    const ConstMap gm = as_matrix(g);
    Tensor out({d_out, d_in});
    std::vector<Eigen::Index> support;
    for (std::size_t i = 0; i < d_out; ++i) {
        support.clear();
        for (std::size_t j = 0; j < d_in; ++j) {
            if (mask.at(i, j) != 0.0) {
                support.push_back(static_cast<Eigen::Index>(j));
            }
        }
        if (support.empty()) {
            continue;
        }
        const auto k = static_cast<Eigen::Index>(support.size());
        Eigen::MatrixXd a(k, k);
        Eigen::VectorXd rhs(k);
        const Eigen::RowVectorXd wc = wm.row(static_cast<Eigen::Index>(i)) * cm;
        for (Eigen::Index r = 0; r < k; ++r) {
            rhs(r) = wc(support[static_cast<std::size_t>(r)]);
            for (Eigen::Index c = 0; c < k; ++c) {
                a(r, c) = gm(support[static_cast<std::size_t>(r)], support[static_cast<std::size_t>(c)]);
            }
            a(r, r) += ridge;
        }
        Eigen::LLT<Eigen::MatrixXd> llt(a);
        if (llt.info() != Eigen::Success || llt.rcond() < 1e-13) {
            throw NumericalError("analytic_matrix_recon: normal matrix of row " + std::to_string(i) +
                                 " is singular; set ridge > 0");
        }
        const Eigen::VectorXd sol = llt.solve(rhs);
        for (Eigen::Index r = 0; r < k; ++r) {
            out.at(i, static_cast<std::size_t>(support[static_cast<std::size_t>(r)])) = sol(r);
        }
    }
    return out;
}

Tensor analytic_matrix_recon(const Tensor & w, const Tensor & mask, const Tensor & x, double ridge) {
    if (x.rank() != 2 || x.rows() != w.cols()) {
        throw ShapeError("analytic_matrix_recon: X " + shape_str(x.shape) + " needs " + std::to_string(w.cols()) +
                         " rows");
    }
    const Tensor g = gram(x);
    return analytic_matrix_recon_gram(w, mask, g, g, ridge);
}

ActivationStreams ActivationStreams::build(const GptModel & model, const TokenMatrix & calibration,
                                           bool matrix_inputs) {
    ActivationStreams s;
    s.seq_len = calibration.cols;
    s.matrix_inputs = matrix_inputs;
    ForwardOptions fo;
    fo.record_matrix_inputs = matrix_inputs;
    fo.compute_logits = false;
    ForwardTaps taps = forward_with_taps(model, calibration, WeightSet::dense, fo);
    s.dense = std::move(taps.residual);
    s.dense_inputs = std::move(taps.matrix_inputs);
    s.sparse.assign(s.dense.size(), Tensor{});
    s.sparse[0] = embed_rows(model, calibration, WeightSet::pruned);
    if (matrix_inputs) {
        s.sparse_inputs.assign(model.config().n_blocks, MatrixInputs{});
    }
    return s;
}

void ActivationStreams::advance(const GptModel & model, std::size_t s0, std::size_t s1) {
    if (s1 <= s0 || s1 >= sparse.size()) {
        throw std::out_of_range("activation stream: cannot advance over stages [" + std::to_string(s0) + "," +
                                std::to_string(s1) + ")");
    }
    const Tensor & x = require_tap(sparse[s0], "sparse tap " + std::to_string(s0));
    StageRun run = run_stages(model, x, seq_len, s0, s1, WeightSet::pruned, matrix_inputs);
    for (std::size_t s = s0; s < s1; ++s) {
        sparse[s + 1] = std::move(run.residual[s - s0]);
        if (matrix_inputs) {
            MatrixInputs & src = run.matrix_inputs[s / 2 - s0 / 2];
            MatrixInputs & dst = sparse_inputs[s / 2];
            if (s % 2 == 0) {
                dst.attn_in = std::move(src.attn_in);
                dst.context = std::move(src.context);
            } else {
                dst.mlp_in = std::move(src.mlp_in);
                dst.hidden = std::move(src.hidden);
            }
        }
    }
}

UnitBatch build_unit_batch(const GptModel & model, const ActivationStreams & streams, const ReconUnit & unit,
                           Strategy strategy) {
    const bool sparse_in = strategy != Strategy::dense;
    UnitBatch batch;
    if (unit.per_matrix()) {
        if (!streams.matrix_inputs) {
            throw std::logic_error("activation stream: per-matrix unit needs recorded matrix inputs");
        }
        const std::size_t b = unit.input.index;
        const MatrixKind kind = unit.input.matrix;
        const Tensor & w = model.param(unit.params.front()).dense;
        const Tensor & x_dense = matrix_tap(streams.dense_inputs, b, kind, "dense");
        batch.inputs = sparse_in ? matrix_tap(streams.sparse_inputs, b, kind, "sparse") : x_dense;
        batch.targets = apply_matrix(strategy == Strategy::sparse ? batch.inputs : x_dense, w);
        return batch;
    }
    const std::size_t s0 = unit.stage_begin;
    const std::size_t s1 = unit.stage_end;
    if (s1 >= streams.dense.size() || s0 >= s1) {
        throw std::out_of_range("build_unit_batch: unit stages outside the stream");
    }
    const Tensor & x_dense = require_tap(streams.dense[s0], "dense tap " + std::to_string(s0));
    batch.inputs = sparse_in ? require_tap(streams.sparse[s0], "sparse tap " + std::to_string(s0)) : x_dense;
    if (strategy == Strategy::sparse) {
        batch.targets = run_stages(model, batch.inputs, streams.seq_len, s0, s1, WeightSet::dense).residual.back();
    } else {
        batch.targets = require_tap(streams.dense[s1], "dense tap " + std::to_string(s1));
    }
    return batch;
}

LossValue loss_value(const Tensor & pred, const Tensor & target, LossKind loss) {
    Graph g;
    LossValue out;
    out.value = unit_loss(g, g.input(pred), g.input(target), loss, &out.zero_rows).value().data[0];
    return out;
}

UnitResult reconstruct_unit(GptModel & model, const ReconUnit & unit, ActivationStreams & streams, Strategy strategy,
                            LossKind loss, const OptimConfig & opt, std::vector<TraceRow> * trace) {
    check_opt(opt);
    const std::size_t seq = streams.seq_len;
    const std::size_t stage = unit.stage_begin;
    if (unit.per_matrix() && streams.sparse_inputs.at(unit.input.index).for_matrix(unit.input.matrix).data.empty()) {
        streams.advance(model, stage, stage + 1);
    }
    UnitResult res;
    res.unit = unit.id;
    res.label = unit.label(model);

    const UnitBatch batch = build_unit_batch(model, streams, unit, strategy);
    const std::size_t n_seq = batch.inputs.rows() / seq;
    const LossValue initial = loss_value(unit_forward(model, unit, batch.inputs, seq), batch.targets, loss);
    res.initial_loss = initial.value;
    res.final_loss = initial.value;
    res.zero_norm_rows = initial.zero_rows;
    if (!std::isfinite(initial.value)) {
        throw NumericalError("unit " + res.label + ": initial loss is not finite");
    }

    if (opt.epochs == 0 || initial.value < 1e-12) {
        res.skipped = true;
    } else {
        TrainSet ts = make_train_set(model, unit.params);
        AdamW adam(opt, ts.tensors, ts.masks);
        const Binder bind = trainable_binder(model, ts.flag);
        const std::size_t steps = total_steps(n_seq, opt);
        std::mt19937_64 rng(opt.seed);
        std::vector<std::size_t> order(n_seq);
        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            double sum = 0.0;
            std::size_t count = 0;
            double lr = 0.0;
            for (std::size_t b0 = 0; b0 < n_seq; b0 += opt.batch_size) {
                const std::size_t b1 = std::min(n_seq, b0 + opt.batch_size);
                const std::span<const std::size_t> pick(order.data() + b0, b1 - b0);
                const Tensor xin = gather_sequences(batch.inputs, seq, pick);
                const Tensor tgt = gather_sequences(batch.targets, seq, pick);
                for (Tensor * t : ts.tensors) {
                    t->clear_grad();
                }
                Graph g;
                Var pred;
                if (unit.per_matrix()) {
                    pred = g.matmul(g.input(xin), bind(g, unit.params.front()), true);
                } else {
                    pred = g.input(xin);
                    for (std::size_t s = unit.stage_begin; s < unit.stage_end; ++s) {
                        pred = run_stage(g, model, s, pred, seq, bind);
                    }
                }
                Var l = unit_loss(g, pred, g.input(tgt), loss, nullptr);
                const double lv = l.value().data[0];
                if (!std::isfinite(lv)) {
                    rollback(ts);
                    throw NumericalError("unit " + res.label + ": non-finite loss at epoch " + std::to_string(epoch) +
                                         "; parameters rolled back (try a smaller lr)");
                }
                g.backward(l);
                lr = scheduled_lr(opt, step, steps);
                adam.step(lr);
                ++step;
                sum += lv;
                ++count;
            }
            if (trace) {
                trace->push_back({unit.id, res.label, epoch, sum / static_cast<double>(count), lr});
            }
        }
        for (Tensor * t : ts.tensors) {
            if (!all_finite(*t)) {
                rollback(ts);
                throw NumericalError("unit " + res.label + ": parameters diverged; rolled back");
            }
        }
        release(ts);
        res.steps = step;
        const LossValue fin = loss_value(unit_forward(model, unit, batch.inputs, seq), batch.targets, loss);
        if (!std::isfinite(fin.value)) {
            rollback(ts);
            throw NumericalError("unit " + res.label + ": final loss is not finite; parameters rolled back");
        }
        res.final_loss = fin.value;
        res.zero_norm_rows = fin.zero_rows;
    }
    streams.advance(model, unit.stage_begin, unit.stage_end);
    return res;
}

UnitResult reconstruct_unit_analytic(GptModel & model, const ReconUnit & unit, ActivationStreams & streams,
                                     Strategy strategy, double ridge) {
    if (!unit.per_matrix()) {
        throw ConfigError("analytic reconstruction applies to per-matrix units only");
    }
    const std::size_t stage = unit.stage_begin;
    if (streams.sparse_inputs.at(unit.input.index).for_matrix(unit.input.matrix).data.empty()) {
        streams.advance(model, stage, stage + 1);
    }
    UnitResult res;
    res.unit = unit.id;
    res.label = unit.label(model);
    const UnitBatch batch = build_unit_batch(model, streams, unit, strategy);
    Param & p = model.param(unit.params.front());
    res.initial_loss = loss_value(apply_matrix(batch.inputs, p.pruned), batch.targets, LossKind::mse).value;

    // Target rows are W x_t; the solver needs the cross term X_t X_in^T.
    const Tensor & x_t = strategy == Strategy::mixed
                             ? matrix_tap(streams.dense_inputs, unit.input.index, unit.input.matrix, "dense")
                             : batch.inputs;
    const Tensor g = gram_from_rows(batch.inputs);
    Tensor cross({x_t.cols(), x_t.cols()});
    Eigen::Map<RowMat>(cross.data.data(), static_cast<Eigen::Index>(x_t.cols()),
                       static_cast<Eigen::Index>(x_t.cols()))
        .noalias() = as_matrix(x_t).transpose() * as_matrix(batch.inputs);
    Tensor solved = analytic_matrix_recon_gram(p.dense, p.mask, cross, g, ridge);
    if (!all_finite(solved)) {
        throw NumericalError("unit " + res.label + ": analytic solution is not finite");
    }
    p.pruned = masked(solved, p.mask);
    res.final_loss = loss_value(apply_matrix(batch.inputs, p.pruned), batch.targets, LossKind::mse).value;
    streams.advance(model, stage, stage + 1);
    return res;
}

void prune_model(GptModel & model, const TokenMatrix & calibration, const PruneOptions & opts) {
    opts.pattern.validate();
    model.reset_pruning();
    const ModelConfig & cfg = model.config();
    const std::size_t seq = calibration.cols;
    Tensor x = embed_rows(model, calibration, WeightSet::pruned);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const StageRun probe = run_stages(model, x, seq, 2 * b, 2 * b + 2, WeightSet::pruned, true);
        const MatrixInputs & in = probe.matrix_inputs.front();
        for (MatrixKind kind : kMatrixKinds) {
            Param & p = model.param(model.matrix_param(b, kind));
            const Tensor & a = in.for_matrix(kind);
            opts.pattern.check_columns(p.dense.cols());
            switch (opts.criterion) {
                case Criterion::magnitude:
                    p.mask = select_mask(score_magnitude(p.dense), opts.pattern);
                    p.pruned = masked(p.dense, p.mask);
                    break;
                case Criterion::wanda: {
                    std::vector<double> norms(a.cols(), 0.0);
                    for (std::size_t r = 0; r < a.rows(); ++r) {
                        for (std::size_t c = 0; c < a.cols(); ++c) {
                            norms[c] += a.at(r, c) * a.at(r, c);
                        }
                    }
                    for (double & v : norms) {
                        v = std::sqrt(v);
                    }
                    p.mask = select_mask(score_wanda_norms(p.dense, norms), opts.pattern);
                    p.pruned = masked(p.dense, p.mask);
                    break;
                }
                case Criterion::sparsegpt: {
                    SparseGptResult r = sparsegpt_prune_update_gram(p.dense, gram_from_rows(a), opts.pattern,
                                                                    opts.sparsegpt);
                    p.mask = std::move(r.mask);
                    p.pruned = std::move(r.weights);
                    break;
                }
            }
        }
        x = run_stages(model, x, seq, 2 * b, 2 * b + 2, WeightSet::pruned).residual.back();
    }
    model.check_masks();
}

PipelineResult run_pipeline(GptModel & model, const TokenMatrix & calibration, const PipelineConfig & cfg) {
    check_opt(cfg.opt);
    const std::vector<ReconUnit> units = split(model, cfg.granularity, cfg.train_norm_params);
    const bool per_matrix = cfg.granularity.kind == Granularity::Kind::per_matrix;
    ActivationStreams streams = ActivationStreams::build(model, calibration, per_matrix);
    PipelineResult out;
    model.check_masks();
    for (const ReconUnit & unit : units) {
        if (per_matrix && cfg.per_matrix_solver == PerMatrixSolver::analytic) {
            out.units.push_back(reconstruct_unit_analytic(model, unit, streams, cfg.strategy, cfg.ridge));
        } else {
            out.units.push_back(
                reconstruct_unit(model, unit, streams, cfg.strategy, cfg.loss, cfg.opt, &out.trace));
        }
        model.check_masks();
        if (cfg.after_unit) {
            cfg.after_unit(unit, out.units.back(), model);
        }
    }
    return out;
}

PipelineResult run_pipeline(GptModel & model, const TokenMatrix & calibration, const PruneOptions & prune,
                            const PipelineConfig & cfg) {
    prune_model(model, calibration, prune);
    return run_pipeline(model, calibration, cfg);
}

std::vector<double> retrain_full(GptModel & model, const TokenMatrix & calibration, const OptimConfig & opt) {
    check_opt(opt);
    std::vector<double> epoch_loss;
    if (opt.epochs == 0) {
        return epoch_loss;
    }
    std::vector<std::size_t> ids = model.prunable_params();
    ids.push_back(model.lm_head());
    ids.push_back(model.final_gain());
    if (model.final_bias() != kNoParam) {
        ids.push_back(model.final_bias());
    }
    for (std::size_t b = 0; b < model.config().n_blocks; ++b) {
        const BlockParams & bp = model.block(b);
        for (std::size_t i : {bp.norm1_gain, bp.norm1_bias, bp.norm2_gain, bp.norm2_bias}) {
            if (i != kNoParam) {
                ids.push_back(i);
            }
        }
    }
    TrainSet ts = make_train_set(model, ids);
    AdamW adam(opt, ts.tensors, ts.masks);
    const Binder bind = trainable_binder(model, ts.flag);
    const std::size_t n_seq = calibration.rows;
    const std::size_t seq = calibration.cols;
    const std::size_t steps = total_steps(n_seq, opt);
    std::mt19937_64 rng(opt.seed);
    std::vector<std::size_t> order(n_seq);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t b0 = 0; b0 < n_seq; b0 += opt.batch_size) {
            const std::size_t b1 = std::min(n_seq, b0 + opt.batch_size);
            const TokenMatrix tok = calibration.gather_rows(std::span<const std::size_t>(order.data() + b0, b1 - b0));
            std::vector<int> targets(tok.ids.size(), -1);
            for (std::size_t r = 0; r < tok.rows; ++r) {
                for (std::size_t t = 0; t + 1 < seq; ++t) {
                    targets[r * seq + t] = tok.ids[r * seq + t + 1];
                }
            }
            for (Tensor * t : ts.tensors) {
                t->clear_grad();
            }
            Graph g;
            Var h = embed(g, model, tok, bind);
            for (std::size_t s = 0; s < 2 * model.config().n_blocks; ++s) {
                h = run_stage(g, model, s, h, seq, bind);
            }
            Var l = g.cross_entropy(lm_logits(g, model, h, bind), targets);
            const double lv = l.value().data[0];
            if (!std::isfinite(lv)) {
                rollback(ts);
                throw NumericalError("retrain: non-finite loss at epoch " + std::to_string(epoch) +
                                     "; parameters rolled back");
            }
            g.backward(l);
            adam.step(scheduled_lr(opt, step, steps));
            ++step;
            sum += lv;
            ++count;
        }
        epoch_loss.push_back(sum / static_cast<double>(count));
    }
    for (Tensor * t : ts.tensors) {
        if (!all_finite(*t)) {
            rollback(ts);
            throw NumericalError("retrain: parameters diverged; rolled back");
        }
    }
    release(ts);
    return epoch_loss;
}

void write_trace_csv(std::ostream & os, const std::vector<TraceRow> & trace) {
    os << "unit,label,epoch,loss,lr\n";
    os.precision(17);
    for (const TraceRow & r : trace) {
        os << r.unit << ',' << r.label << ',' << r.epoch << ',' << r.loss << ',' << r.lr << '\n';
    }
}

}  // namespace recon
