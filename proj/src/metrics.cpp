// SPDX-License-Identifier: Apache-2.0

#include "recon/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace recon {

NllSum next_token_nll(const Tensor & logits, std::span<const int> targets) {
    if (logits.rank() != 2 || logits.rows() != targets.size()) {
        throw ShapeError("next_token_nll: logits " + shape_str(logits.shape) + " vs " +
                         std::to_string(targets.size()) + " targets");
    }
    const std::size_t v = logits.cols();
    NllSum out;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        const int t = targets[r];
        if (t == -1) {
            continue;
        }
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw std::out_of_range("next_token_nll: target " + std::to_string(t) + " outside vocabulary");
        }
        const double * row = logits.data.data() + r * v;
        const double mx = *std::max_element(row, row + v);
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            s += std::exp(row[j] - mx);
        }
        out.sum += mx + std::log(s) - row[t];
        ++out.count;
    }
    return out;
}

double perplexity(const GptModel & model, const TokenMatrix & windows, WeightSet weights) {
    if (windows.rows == 0 || windows.cols < 2) {
        throw std::invalid_argument("perplexity: holdout is empty or shorter than two tokens per window");
    }
    const Binder bind = bind_weights(model, weights);
    const std::size_t seq = windows.cols;
    const std::size_t stages = 2 * model.config().n_blocks;
    NllSum total;
    for (std::size_t r0 = 0; r0 < windows.rows; r0 += kStreamChunk) {
        const std::size_t r1 = std::min(windows.rows, r0 + kStreamChunk);
        const TokenMatrix chunk = windows.slice_rows(r0, r1);
        std::vector<int> targets(chunk.ids.size(), -1);
        for (std::size_t r = 0; r < chunk.rows; ++r) {
            for (std::size_t t = 0; t + 1 < seq; ++t) {
                targets[r * seq + t] = chunk.ids[r * seq + t + 1];
            }
        }
        Graph g;
        Var h = embed(g, model, chunk, bind);
        for (std::size_t s = 0; s < stages; ++s) {
            h = run_stage(g, model, s, h, seq, bind);
        }
        const NllSum part = next_token_nll(lm_logits(g, model, h, bind).value(), targets);
        total.sum += part.sum;
        total.count += part.count;
    }
    return std::exp(total.sum / static_cast<double>(total.count));
}

std::optional<double> recovery(double ppl_dense, double ppl_pruned, double ppl_reconstructed) {
    const double gap = ppl_pruned - ppl_dense;
    if (gap == 0.0 || !std::isfinite(gap)) {
        return std::nullopt;
    }
    return (ppl_pruned - ppl_reconstructed) / gap;
}

std::string RunFingerprint::key() const {
    char lr_buf[32];
    std::snprintf(lr_buf, sizeof lr_buf, "%.17g", lr);
    return "model=" + model + ";sparsity=" + sparsity + ";criterion=" + criterion + ";granularity=" + granularity +
           ";strategy=" + strategy + ";loss=" + loss + ";lr=" + lr_buf + ";epochs=" + std::to_string(epochs) +
           ";seed=" + std::to_string(seed);
}

RecoveryReport make_report(const RunFingerprint & config, double ppl_dense, double ppl_pruned,
                           double ppl_reconstructed) {
    return {config, ppl_dense, ppl_pruned, ppl_reconstructed, recovery(ppl_dense, ppl_pruned, ppl_reconstructed)};
}

namespace {

const std::string & axis_value(const RunFingerprint & f, DiffAxis axis) {
    return axis == DiffAxis::strategy ? f.strategy : f.loss;
}

// Fingerprint with the compared axis blanked out.
std::string shared_key(RunFingerprint f, DiffAxis axis) {
    (axis == DiffAxis::strategy ? f.strategy : f.loss) = "*";
    return f.key();
}

}  // namespace

RecoveryDiffs recovery_diffs(const std::vector<RecoveryReport> & runs, Pairing pairing, DiffAxis axis,
                             const std::string & a, const std::string & b) {
    RecoveryDiffs out;
    if (pairing == Pairing::identical_config) {
        for (const RecoveryReport & ra : runs) {
            if (!ra.recovery || axis_value(ra.config, axis) != a) {
                continue;
            }
            const std::string key = shared_key(ra.config, axis);
            for (const RecoveryReport & rb : runs) {
                if (!rb.recovery || axis_value(rb.config, axis) != b || shared_key(rb.config, axis) != key) {
                    continue;
                }
                out.diffs.push_back({key, *ra.recovery - *rb.recovery});
            }
        }
    } else {
        std::map<std::string, std::optional<double>> best_a;
        std::map<std::string, std::optional<double>> best_b;
        for (const RecoveryReport & r : runs) {
            if (!r.recovery) {
                continue;
            }
            const std::string key = "model=" + r.config.model + ";sparsity=" + r.config.sparsity;
            const std::string & v = axis_value(r.config, axis);
            for (auto [side, name] : {std::pair{&best_a, &a}, std::pair{&best_b, &b}}) {
                if (v == *name) {
                    std::optional<double> & cur = (*side)[key];
                    cur = cur ? std::max(*cur, *r.recovery) : *r.recovery;
                }
            }
        }
        for (const auto & [key, va] : best_a) {
            const auto it = best_b.find(key);
            if (va && it != best_b.end() && it->second) {
                out.diffs.push_back({key, *va - *it->second});
            }
        }
    }
    if (out.diffs.empty()) {
        out.warning = "recovery_diffs: no valid pairs for " + a + " vs " + b;
    }
    return out;
}

std::vector<std::size_t> histogram(const std::vector<RecoveryDiff> & diffs, std::size_t bins, double lo, double hi) {
    if (bins == 0 || !(hi > lo)) {
        throw std::invalid_argument("histogram: need bins > 0 and hi > lo");
    }
    std::vector<std::size_t> counts(bins, 0);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (const RecoveryDiff & d : diffs) {
        double pos = std::floor((d.diff - lo) / width);
        pos = std::clamp(pos, 0.0, static_cast<double>(bins - 1));
        ++counts[static_cast<std::size_t>(pos)];
    }
    return counts;
}

MemoryEstimate estimate_peak_memory(const ModelConfig & config, const Granularity & granularity,
                                    std::size_t batch_size, std::size_t seq_len, bool train_norm_params) {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t ff = config.d_ff;
    const std::size_t tokens = batch_size * (seq_len ? seq_len : config.seq_len);
    const std::size_t t = seq_len ? seq_len : config.seq_len;
    const std::size_t norm_params = config.norm_kind == NormKind::layernorm ? 2 * d : d;

    struct Stage {
        std::size_t matrices, norms, acts;
    };
    // Per token: attention keeps input, norm output, q, k, v, context, output
    // and the score and probability rows of every head; the MLP keeps input,
    // norm output, output, residual sum and both d_ff-wide activations.
    const Stage attn{4 * d * d, norm_params, 7 * d + 2 * config.n_heads * t};
    const Stage mlp{2 * d * ff, norm_params, 4 * d + 2 * ff};

    MemoryEstimate best;
    auto consider = [&](std::size_t trainable, std::size_t frozen, std::size_t acts, std::string label) {
        MemoryEstimate e;
        e.trainable_params = trainable;
        e.frozen_params = frozen;
        e.optimizer_state_floats = 2 * trainable;
        e.activation_floats = acts * tokens;
        e.peak_bytes = 8 * (4 * trainable + frozen + e.activation_floats);
        e.unit = std::move(label);
        if (e.peak_bytes > best.peak_bytes) {
            best = e;
        }
    };
    auto stage_range = [&](std::size_t s0, std::size_t s1, std::string label) {
        std::size_t mat = 0, norms = 0, acts = 0;
        for (std::size_t s = s0; s < s1; ++s) {
            const Stage & st = s % 2 == 0 ? attn : mlp;
            mat += st.matrices;
            norms += st.norms;
            acts += st.acts;
        }
        consider(mat + (train_norm_params ? norms : 0), train_norm_params ? 0 : norms, acts, std::move(label));
    };

    const std::size_t n = config.n_blocks;
    switch (granularity.kind) {
        case Granularity::Kind::per_matrix:
            consider(d * d, 0, d + d, "wq");
            consider(d * ff, 0, d + ff, "w1");
            consider(ff * d, 0, ff + d, "w2");
            break;
        case Granularity::Kind::half_block:
            stage_range(0, 1, "attn");
            stage_range(1, 2, "mlp");
            break;
        case Granularity::Kind::blocks:
            if (granularity.k < 1 || granularity.k > n) {
                throw std::invalid_argument("estimate_peak_memory: blocks-" + std::to_string(granularity.k) +
                                            " needs 1 <= k <= n_blocks");
            }
            stage_range(0, 2 * granularity.k, granularity.to_string());
            break;
        case Granularity::Kind::full_decoder:
            stage_range(0, 2 * n, "decoder");
            break;
    }
    return best;
}

}  // namespace recon
