// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer with residual-stream taps and the granularity
// splitter that cuts it into reconstruction units.

#pragma once

#include "recon/tensor.h"
#include "recon/tokens.h"

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace recon {

enum class NormKind { layernorm, rmsnorm };

// LayerNorm models use a GELU MLP, RMSNorm models a SiLU MLP.
struct ModelConfig {
    std::size_t n_blocks = 4;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t vocab = 258;
    std::size_t seq_len = 128;
    NormKind norm_kind = NormKind::layernorm;
    bool tie_lm_head = false;

    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig &) const = default;
};

std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string & s);

enum class MatrixKind : std::size_t { wq = 0, wk, wv, wo, w1, w2 };
inline constexpr std::size_t kMatricesPerBlock = 6;
inline constexpr std::array<MatrixKind, kMatricesPerBlock> kMatrixKinds = {
    MatrixKind::wq, MatrixKind::wk, MatrixKind::wv, MatrixKind::wo, MatrixKind::w1, MatrixKind::w2};
std::string to_string(MatrixKind kind);

inline constexpr std::size_t kNoParam = std::numeric_limits<std::size_t>::max();

// Every parameter keeps a dense copy (theta) and a pruned copy (theta-hat).
// Prunable matrices additionally carry a 0/1 mask; the pruned copy is zero
// wherever the mask is zero.
struct Param {
    std::string name;
    Tensor dense;
    Tensor pruned;
    Tensor mask;

    bool prunable() const { return !mask.data.empty(); }
};

struct BlockParams {
    std::array<std::size_t, kMatricesPerBlock> matrix{};
    std::size_t norm1_gain = kNoParam;
    std::size_t norm1_bias = kNoParam;
    std::size_t norm2_gain = kNoParam;
    std::size_t norm2_bias = kNoParam;

    std::size_t operator[](MatrixKind k) const { return matrix[static_cast<std::size_t>(k)]; }
};

enum class WeightSet { dense, pruned };

class GptModel {
public:
    GptModel() = default;
    // GPT-2 style init: N(0, 0.02), residual projections scaled by 1/sqrt(2 n_blocks).
    static GptModel init(const ModelConfig & config, std::uint64_t seed);
    // Empty parameter table with the right names and shapes (used by the loader).
    static GptModel skeleton(const ModelConfig & config);

    const ModelConfig & config() const { return config_; }

    std::vector<Param> & params() { return params_; }
    const std::vector<Param> & params() const { return params_; }
    Param & param(std::size_t i) { return params_.at(i); }
    const Param & param(std::size_t i) const { return params_.at(i); }
    std::size_t find(const std::string & name) const;

    const BlockParams & block(std::size_t b) const { return blocks_.at(b); }
    std::size_t tok_embed() const { return tok_embed_; }
    std::size_t pos_embed() const { return pos_embed_; }
    std::size_t final_gain() const { return final_gain_; }
    std::size_t final_bias() const { return final_bias_; }
    // LM head parameter; the token embedding when tied.
    std::size_t lm_head() const { return lm_head_; }

    std::vector<std::size_t> prunable_params() const;
    std::size_t matrix_param(std::size_t block, MatrixKind kind) const { return blocks_.at(block)[kind]; }

    // pruned = dense, masks all ones.
    void reset_pruning();
    // Copies pruned weights over dense ones (used to promote a trained model).
    void commit_dense();
    // Throws when any pruned entry under a zero mask is nonzero.
    void check_masks() const;
    std::size_t count_params() const;
    double sparsity() const;

private:
    void build_table();

    ModelConfig config_;
    std::vector<Param> params_;
    std::vector<BlockParams> blocks_;
    std::size_t tok_embed_ = kNoParam;
    std::size_t pos_embed_ = kNoParam;
    std::size_t final_gain_ = kNoParam;
    std::size_t final_bias_ = kNoParam;
    std::size_t lm_head_ = kNoParam;
};

// Maps a parameter index to a graph variable; decides which copy is used and
// whether it is trainable.
using Binder = std::function<Var(Graph &, std::size_t)>;
Binder bind_weights(const GptModel & model, WeightSet weights);

// Activations feeding each prunable matrix of one block, [tokens x d_in].
struct MatrixInputs {
    Tensor attn_in;   // wq, wk, wv
    Tensor context;   // wo
    Tensor mlp_in;    // w1
    Tensor hidden;    // w2

    const Tensor & for_matrix(MatrixKind kind) const;
};

// A stage is half a block: stage 2b is the attention sublayer of block b and
// stage 2b+1 its MLP sublayer, each including pre-norm and residual add.
// `x` is the residual stream as [batch*seq, d_model].
Var run_stage(Graph & g, const GptModel & model, std::size_t stage, Var x, std::size_t seq, const Binder & bind,
              MatrixInputs * record = nullptr);
Var embed(Graph & g, const GptModel & model, const TokenMatrix & tokens, const Binder & bind);
Var lm_logits(Graph & g, const GptModel & model, Var hidden, const Binder & bind);

// Residual-stream taps: index 0 is the embedding output, 2b+1 follows the
// attention residual add of block b, 2b+2 the MLP residual add. The last tap
// is the hidden state entering the final norm and LM head.
struct ForwardTaps {
    std::vector<Tensor> residual;
    std::vector<MatrixInputs> matrix_inputs;
    Tensor logits;
};

struct ForwardOptions {
    bool record_matrix_inputs = false;
    bool compute_logits = true;
};

// Sequences are processed in chunks of kStreamChunk rows; every stream and
// target computation uses the same chunking so results line up bit for bit.
inline constexpr std::size_t kStreamChunk = 2;

ForwardTaps forward_with_taps(const GptModel & model, const TokenMatrix & tokens, WeightSet weights,
                              const ForwardOptions & opts = {});

// Runs stages [s0, s1) over token-major residual rows x = [rows*seq, d_model]
// in kStreamChunk-sequence chunks. residual[i] is the tap after stage s0+i;
// matrix_inputs[b - s0/2] holds inputs of block b when requested.
struct StageRun {
    std::vector<Tensor> residual;
    std::vector<MatrixInputs> matrix_inputs;
};

StageRun run_stages(const GptModel & model, const Tensor & x, std::size_t seq, std::size_t s0, std::size_t s1,
                    WeightSet weights, bool record_matrix_inputs = false);

struct Granularity {
    enum class Kind { per_matrix, half_block, blocks, full_decoder };
    Kind kind = Kind::half_block;
    std::size_t k = 1;

    static Granularity per_matrix() { return {Kind::per_matrix, 0}; }
    static Granularity half_block() { return {Kind::half_block, 0}; }
    static Granularity blocks(std::size_t k) { return {Kind::blocks, k}; }
    static Granularity full_decoder() { return {Kind::full_decoder, 0}; }

    // "per-matrix", "half-block", "blocks-<k>", "full-decoder"
    static Granularity parse(const std::string & s);
    std::string to_string() const;
    bool operator==(const Granularity &) const = default;
};

struct TapRef {
    enum class Site { residual, matrix_input, matrix_output };
    Site site = Site::residual;
    std::size_t index = 0;  // residual tap, or block for matrix sites
    MatrixKind matrix = MatrixKind::wq;
    bool operator==(const TapRef &) const = default;
};

struct ReconUnit {
    std::size_t id = 0;
    std::vector<std::size_t> params;
    TapRef input;
    TapRef output;
    std::size_t stage_begin = 0;  // stage range for residual-stream units
    std::size_t stage_end = 0;
    bool contains_residual = true;
    bool train_norm_params = false;
    bool freeze_embedding = false;
    bool exclude_lm_head = false;

    bool per_matrix() const { return input.site == TapRef::Site::matrix_input; }
    std::string label(const GptModel & model) const;
};

std::vector<ReconUnit> split(const GptModel & model, const Granularity & g, bool train_norm_params = false);

// Checkpoint file: text header (config + tensor index) followed by
// little-endian f64 payloads. See checkpoint.cpp for the exact layout.
void save_checkpoint(const GptModel & model, const std::string & path);
GptModel load_checkpoint(const std::string & path);

}  // namespace recon
