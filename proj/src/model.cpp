// SPDX-License-Identifier: Apache-2.0

#include "recon/model.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace recon {

namespace {

// Copies `src` rows into `dst` starting at `row`; allocates dst on first use.
void put_rows(Tensor & dst, const Tensor & src, std::size_t row, std::size_t total_rows) {
    const std::size_t width = src.shape.back();
    if (dst.data.empty()) {
        dst = Tensor({total_rows, width});
    }
    std::copy(src.data.begin(), src.data.end(), dst.data.begin() + static_cast<std::ptrdiff_t>(row * width));
}

Var norm(Graph & g, const GptModel & model, Var x, std::size_t gain, std::size_t bias, const Binder & bind) {
    if (model.config().norm_kind == NormKind::layernorm) {
        return g.layernorm(x, bind(g, gain), bind(g, bias));
    }
    return g.rmsnorm(x, bind(g, gain));
}

Var attention(Graph & g, const GptModel & model, const BlockParams & bp, Var x, std::size_t seq, const Binder & bind,
              MatrixInputs * record) {
    const ModelConfig & cfg = model.config();
    const std::size_t rows = x.shape()[0];
    const std::size_t batch = rows / seq;
    const std::size_t heads = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();

    Var h = norm(g, model, x, bp.norm1_gain, bp.norm1_bias, bind);
    Var q = g.matmul(h, bind(g, bp[MatrixKind::wq]), true);
    Var k = g.matmul(h, bind(g, bp[MatrixKind::wk]), true);
    Var v = g.matmul(h, bind(g, bp[MatrixKind::wv]), true);

    q = g.transpose(g.reshape(q, {batch, seq, heads, dh}), 1, 2);
    k = g.transpose(g.transpose(g.reshape(k, {batch, seq, heads, dh}), 1, 2), 2, 3);
    v = g.transpose(g.reshape(v, {batch, seq, heads, dh}), 1, 2);

    Var scores = g.scale(g.matmul(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var probs = g.softmax_lastdim(scores, true);
    Var ctx = g.reshape(g.transpose(g.matmul(probs, v), 1, 2), {rows, cfg.d_model});
    Var out = g.matmul(ctx, bind(g, bp[MatrixKind::wo]), true);
    if (record) {
        record->attn_in = h.value();
        record->context = ctx.value();
    }
    return g.add(x, out);
}

Var mlp(Graph & g, const GptModel & model, const BlockParams & bp, Var x, const Binder & bind,
        MatrixInputs * record) {
    Var h = norm(g, model, x, bp.norm2_gain, bp.norm2_bias, bind);
    Var a = g.matmul(h, bind(g, bp[MatrixKind::w1]), true);
    a = model.config().norm_kind == NormKind::layernorm ? g.gelu(a) : g.silu(a);
    Var out = g.matmul(a, bind(g, bp[MatrixKind::w2]), true);
    if (record) {
        record->mlp_in = h.value();
        record->hidden = a.value();
    }
    return g.add(x, out);
}

}  // namespace

void ModelConfig::validate() const {
    if (n_blocks == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab == 0 || seq_len == 0) {
        throw std::invalid_argument("model config: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
    }
}

std::string to_string(NormKind kind) {
    return kind == NormKind::layernorm ? "layernorm" : "rmsnorm";
}

NormKind parse_norm_kind(const std::string & s) {
    if (s == "layernorm") {
        return NormKind::layernorm;
    }
    if (s == "rmsnorm") {
        return NormKind::rmsnorm;
    }
    throw std::invalid_argument("unknown norm kind '" + s + "'");
}

std::string to_string(MatrixKind kind) {
    switch (kind) {
        case MatrixKind::wq: return "wq";
        case MatrixKind::wk: return "wk";
        case MatrixKind::wv: return "wv";
        case MatrixKind::wo: return "wo";
        case MatrixKind::w1: return "w1";
        case MatrixKind::w2: return "w2";
    }
    return "?";
}

const Tensor & MatrixInputs::for_matrix(MatrixKind kind) const {
    switch (kind) {
        case MatrixKind::wq:
        case MatrixKind::wk:
        case MatrixKind::wv: return attn_in;
        case MatrixKind::wo: return context;
        case MatrixKind::w1: return mlp_in;
        case MatrixKind::w2: return hidden;
    }
    return attn_in;
}

void GptModel::build_table() {
    const ModelConfig & c = config_;
    params_.clear();
    blocks_.assign(c.n_blocks, BlockParams{});
    auto add = [&](std::string name, Shape shape, bool prunable, double fill) {
        Param p;
        p.name = std::move(name);
        p.dense = Tensor(shape, fill);
        p.pruned = p.dense;
        if (prunable) {
            p.mask = Tensor(shape, 1.0);
        }
        params_.push_back(std::move(p));
        return params_.size() - 1;
    };
    const bool ln = c.norm_kind == NormKind::layernorm;
    tok_embed_ = add("tok_embed", {c.vocab, c.d_model}, false, 0.0);
    pos_embed_ = add("pos_embed", {c.seq_len, c.d_model}, false, 0.0);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        BlockParams & bp = blocks_[b];
        bp.norm1_gain = add(pre + "norm1.gain", {c.d_model}, false, 1.0);
        if (ln) {
            bp.norm1_bias = add(pre + "norm1.bias", {c.d_model}, false, 0.0);
        }
        bp.matrix[0] = add(pre + "attn.wq", {c.d_model, c.d_model}, true, 0.0);
        bp.matrix[1] = add(pre + "attn.wk", {c.d_model, c.d_model}, true, 0.0);
        bp.matrix[2] = add(pre + "attn.wv", {c.d_model, c.d_model}, true, 0.0);
        bp.matrix[3] = add(pre + "attn.wo", {c.d_model, c.d_model}, true, 0.0);
        bp.norm2_gain = add(pre + "norm2.gain", {c.d_model}, false, 1.0);
        if (ln) {
            bp.norm2_bias = add(pre + "norm2.bias", {c.d_model}, false, 0.0);
        }
        bp.matrix[4] = add(pre + "mlp.w1", {c.d_ff, c.d_model}, true, 0.0);
        bp.matrix[5] = add(pre + "mlp.w2", {c.d_model, c.d_ff}, true, 0.0);
    }
    final_gain_ = add("final_norm.gain", {c.d_model}, false, 1.0);
    final_bias_ = ln ? add("final_norm.bias", {c.d_model}, false, 0.0) : kNoParam;
    lm_head_ = c.tie_lm_head ? tok_embed_ : add("lm_head", {c.vocab, c.d_model}, false, 0.0);
}

GptModel GptModel::skeleton(const ModelConfig & config) {
    config.validate();
    GptModel m;
    m.config_ = config;
    m.build_table();
    return m;
}

GptModel GptModel::init(const ModelConfig & config, std::uint64_t seed) {
    GptModel m = skeleton(config);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_blocks));
    for (std::size_t i = 0; i < m.params_.size(); ++i) {
        Param & p = m.params_[i];
        if (p.dense.rank() != 2) {
            continue;
        }
        const bool resid = p.name.ends_with("attn.wo") || p.name.ends_with("mlp.w2");
        const double std = 0.02 * (resid ? resid_scale : 1.0);
        for (double & v : p.dense.data) {
            v = std * normal(rng);
        }
        p.pruned = p.dense;
    }
    return m;
}

std::size_t GptModel::find(const std::string & name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == name) {
            return i;
        }
    }
    return kNoParam;
}

std::vector<std::size_t> GptModel::prunable_params() const {
    std::vector<std::size_t> out;
    for (const auto & bp : blocks_) {
        out.insert(out.end(), bp.matrix.begin(), bp.matrix.end());
    }
    return out;
}

void GptModel::reset_pruning() {
    for (Param & p : params_) {
        p.pruned = p.dense;
        if (p.prunable()) {
            std::fill(p.mask.data.begin(), p.mask.data.end(), 1.0);
        }
    }
}

void GptModel::commit_dense() {
    for (Param & p : params_) {
        p.dense = p.pruned;
        p.dense.clear_grad();
        p.dense.requires_grad = false;
    }
}

void GptModel::check_masks() const {
    for (const Param & p : params_) {
        if (!p.prunable()) {
            continue;
        }
        if (p.mask.shape != p.pruned.shape) {
            throw std::logic_error("mask shape mismatch for " + p.name);
        }
        for (std::size_t i = 0; i < p.mask.size(); ++i) {
            if (p.mask.data[i] == 0.0 && p.pruned.data[i] != 0.0) {
                throw std::logic_error("pruned weight " + p.name + "[" + std::to_string(i) + "] is nonzero under a zero mask");
            }
        }
    }
}

std::size_t GptModel::count_params() const {
    std::size_t n = 0;
    for (const Param & p : params_) {
        n += p.dense.size();
    }
    return n;
}

double GptModel::sparsity() const {
    std::size_t total = 0;
    std::size_t zeros = 0;
    for (const Param & p : params_) {
        if (!p.prunable()) {
            continue;
        }
        total += p.mask.size();
        zeros += static_cast<std::size_t>(std::count(p.mask.data.begin(), p.mask.data.end(), 0.0));
    }
    return total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
}

Binder bind_weights(const GptModel & model, WeightSet weights) {
    return [&model, weights](Graph & g, std::size_t i) {
        const Param & p = model.param(i);
        return g.input(weights == WeightSet::dense ? p.dense : p.pruned);
    };
}

Var run_stage(Graph & g, const GptModel & model, std::size_t stage, Var x, std::size_t seq, const Binder & bind,
              MatrixInputs * record) {
    const std::size_t b = stage / 2;
    if (b >= model.config().n_blocks) {
        throw std::out_of_range("run_stage: stage " + std::to_string(stage) + " beyond model depth");
    }
    const BlockParams & bp = model.block(b);
    return stage % 2 == 0 ? attention(g, model, bp, x, seq, bind, record) : mlp(g, model, bp, x, bind, record);
}

Var embed(Graph & g, const GptModel & model, const TokenMatrix & tokens, const Binder & bind) {
    if (tokens.cols > model.config().seq_len) {
        throw ShapeError("embed: sequence length " + std::to_string(tokens.cols) + " exceeds model seq_len " +
                         std::to_string(model.config().seq_len));
    }
    std::vector<int> positions(tokens.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = static_cast<int>(i % tokens.cols);
    }
    Var tok = g.embed_lookup(bind(g, model.tok_embed()), tokens.ids);
    Var pos = g.embed_lookup(bind(g, model.pos_embed()), positions);
    return g.add(tok, pos);
}

Var lm_logits(Graph & g, const GptModel & model, Var hidden, const Binder & bind) {
    Var h = norm(g, model, hidden, model.final_gain(), model.final_bias(), bind);
    return g.matmul(h, bind(g, model.lm_head()), true);
}

ForwardTaps forward_with_taps(const GptModel & model, const TokenMatrix & tokens, WeightSet weights,
                              const ForwardOptions & opts) {
    const ModelConfig & cfg = model.config();
    const std::size_t stages = 2 * cfg.n_blocks;
    const std::size_t seq = tokens.cols;
    const std::size_t total = tokens.rows * seq;
    if (tokens.rows == 0 || seq == 0) {
        throw ShapeError("forward: empty token matrix");
    }
    ForwardTaps taps;
    taps.residual.resize(stages + 1);
    if (opts.record_matrix_inputs) {
        taps.matrix_inputs.resize(cfg.n_blocks);
    }
    const Binder bind = bind_weights(model, weights);
    for (std::size_t r0 = 0; r0 < tokens.rows; r0 += kStreamChunk) {
        const std::size_t r1 = std::min(tokens.rows, r0 + kStreamChunk);
        const TokenMatrix chunk = tokens.slice_rows(r0, r1);
        const std::size_t row = r0 * seq;
        Graph g;
        Var x = embed(g, model, chunk, bind);
        put_rows(taps.residual[0], x.value(), row, total);
        for (std::size_t s = 0; s < stages; ++s) {
            MatrixInputs rec;
            x = run_stage(g, model, s, x, seq, bind, opts.record_matrix_inputs ? &rec : nullptr);
            put_rows(taps.residual[s + 1], x.value(), row, total);
            if (opts.record_matrix_inputs) {
                MatrixInputs & mi = taps.matrix_inputs[s / 2];
                if (s % 2 == 0) {
                    put_rows(mi.attn_in, rec.attn_in, row, total);
                    put_rows(mi.context, rec.context, row, total);
                } else {
                    put_rows(mi.mlp_in, rec.mlp_in, row, total);
                    put_rows(mi.hidden, rec.hidden, row, total);
                }
            }
        }
        if (opts.compute_logits) {
            put_rows(taps.logits, lm_logits(g, model, x, bind).value(), row, total);
        }
    }
    return taps;
}

StageRun run_stages(const GptModel & model, const Tensor & x, std::size_t seq, std::size_t s0, std::size_t s1,
                    WeightSet weights, bool record_matrix_inputs) {
    const ModelConfig & cfg = model.config();
    if (s0 >= s1 || s1 > 2 * cfg.n_blocks) {
        throw std::out_of_range("run_stages: bad stage range [" + std::to_string(s0) + "," + std::to_string(s1) + ")");
    }
    if (x.rank() != 2 || x.shape[1] != cfg.d_model || seq == 0 || x.shape[0] % seq != 0) {
        throw ShapeError("run_stages: residual rows " + shape_str(x.shape) + " incompatible with seq " +
                         std::to_string(seq) + " and d_model " + std::to_string(cfg.d_model));
    }
    const std::size_t total = x.shape[0];
    const std::size_t n_seq = total / seq;
    StageRun run;
    run.residual.resize(s1 - s0);
    if (record_matrix_inputs) {
        run.matrix_inputs.resize((s1 - 1) / 2 - s0 / 2 + 1);
    }
    const Binder bind = bind_weights(model, weights);
    const std::size_t d = cfg.d_model;
    for (std::size_t r0 = 0; r0 < n_seq; r0 += kStreamChunk) {
        const std::size_t r1 = std::min(n_seq, r0 + kStreamChunk);
        const std::size_t row = r0 * seq;
        Tensor chunk({(r1 - r0) * seq, d});
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(row * d), chunk.size(), chunk.data.begin());
        Graph g;
        Var h = g.input(chunk);
        for (std::size_t s = s0; s < s1; ++s) {
            MatrixInputs rec;
            h = run_stage(g, model, s, h, seq, bind, record_matrix_inputs ? &rec : nullptr);
            put_rows(run.residual[s - s0], h.value(), row, total);
            if (record_matrix_inputs) {
                MatrixInputs & mi = run.matrix_inputs[s / 2 - s0 / 2];
                if (s % 2 == 0) {
                    put_rows(mi.attn_in, rec.attn_in, row, total);
                    put_rows(mi.context, rec.context, row, total);
                } else {
                    put_rows(mi.mlp_in, rec.mlp_in, row, total);
                    put_rows(mi.hidden, rec.hidden, row, total);
                }
            }
        }
    }
    return run;
}

Granularity Granularity::parse(const std::string & s) {
    if (s == "per-matrix") {
        return per_matrix();
    }
    if (s == "half-block") {
        return half_block();
    }
    if (s == "full-decoder") {
        return full_decoder();
    }
    if (s.starts_with("blocks-")) {
        const std::string num = s.substr(7);
        if (!num.empty() && std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            const auto k = std::stoul(num);
            if (k >= 1) {
                return blocks(k);
            }
        }
    }
    throw std::invalid_argument("unknown granularity '" + s + "' (per-matrix, half-block, blocks-<k>, full-decoder)");
}

std::string Granularity::to_string() const {
    switch (kind) {
        case Kind::per_matrix: return "per-matrix";
        case Kind::half_block: return "half-block";
        case Kind::blocks: return "blocks-" + std::to_string(k);
        case Kind::full_decoder: return "full-decoder";
    }
    return "?";
}

std::string ReconUnit::label(const GptModel & model) const {
    if (per_matrix()) {
        return "b" + std::to_string(input.index) + "." + to_string(input.matrix);
    }
    if (freeze_embedding) {
        return "decoder";
    }
    if (stage_end - stage_begin == 1) {
        return "b" + std::to_string(stage_begin / 2) + (stage_begin % 2 == 0 ? ".attn" : ".mlp");
    }
    (void)model;
    return "b" + std::to_string(stage_begin / 2) + "-" + std::to_string((stage_end - 1) / 2);
}

std::vector<ReconUnit> split(const GptModel & model, const Granularity & gran, bool train_norm_params) {
    const std::size_t n = model.config().n_blocks;
    std::vector<ReconUnit> units;

    auto stage_params = [&](std::size_t stage, std::vector<std::size_t> & out) {
        const BlockParams & bp = model.block(stage / 2);
        const bool attn = stage % 2 == 0;
        if (train_norm_params) {
            const std::size_t gain = attn ? bp.norm1_gain : bp.norm2_gain;
            const std::size_t bias = attn ? bp.norm1_bias : bp.norm2_bias;
            out.push_back(gain);
            if (bias != kNoParam) {
                out.push_back(bias);
            }
        }
        if (attn) {
            for (auto k : {MatrixKind::wq, MatrixKind::wk, MatrixKind::wv, MatrixKind::wo}) {
                out.push_back(bp[k]);
            }
        } else {
            out.push_back(bp[MatrixKind::w1]);
            out.push_back(bp[MatrixKind::w2]);
        }
    };
    auto stage_unit = [&](std::size_t s0, std::size_t s1) {
        ReconUnit u;
        u.id = units.size();
        u.stage_begin = s0;
        u.stage_end = s1;
        u.input = {TapRef::Site::residual, s0, MatrixKind::wq};
        u.output = {TapRef::Site::residual, s1, MatrixKind::wq};
        u.train_norm_params = train_norm_params;
        for (std::size_t s = s0; s < s1; ++s) {
            stage_params(s, u.params);
        }
        units.push_back(std::move(u));
        return &units.back();
    };

    switch (gran.kind) {
        case Granularity::Kind::per_matrix:
            for (std::size_t b = 0; b < n; ++b) {
                for (MatrixKind kind : kMatrixKinds) {
                    ReconUnit u;
                    u.id = units.size();
                    u.params = {model.block(b)[kind]};
                    u.input = {TapRef::Site::matrix_input, b, kind};
                    u.output = {TapRef::Site::matrix_output, b, kind};
                    u.stage_begin = 2 * b + (kind == MatrixKind::w1 || kind == MatrixKind::w2 ? 1 : 0);
                    u.stage_end = u.stage_begin + 1;
                    u.contains_residual = false;
                    units.push_back(std::move(u));
                }
            }
            break;
        case Granularity::Kind::half_block:
            for (std::size_t s = 0; s < 2 * n; ++s) {
                stage_unit(s, s + 1);
            }
            break;
        case Granularity::Kind::blocks:
            if (gran.k < 1 || gran.k > n) {
                throw std::invalid_argument("split: blocks-" + std::to_string(gran.k) + " needs 1 <= k <= n_blocks (" +
                                            std::to_string(n) + ")");
            }
            for (std::size_t b = 0; b < n; b += gran.k) {
                stage_unit(2 * b, 2 * std::min(n, b + gran.k));
            }
            break;
        case Granularity::Kind::full_decoder: {
            ReconUnit * u = stage_unit(0, 2 * n);
            u->freeze_embedding = true;
            u->exclude_lm_head = true;
            break;
        }
    }
    return units;
}

}  // namespace recon
