// SPDX-License-Identifier: Apache-2.0
//
// Mask selection: magnitude, Wanda and a column-blocked SparseGPT variant.
// Weights are [d_out x d_in]; calibration activations are X = [d_in x B] as
// in the layer-wise objective ||W X - (M . W_hat) X||_F^2.

#pragma once

#include "recon/tensor.h"

#include <cstddef>
#include <optional>
#include <string>

namespace recon {

struct SparsityPattern {
    enum class Kind { unstructured, semi_structured };
    Kind kind = Kind::unstructured;
    double ratio = 0.5;  // fraction removed (unstructured)
    std::size_t n = 2;   // kept per group (semi-structured)
    std::size_t m = 4;   // group size (semi-structured)

    static SparsityPattern unstructured(double ratio) { return {Kind::unstructured, ratio, 0, 0}; }
    static SparsityPattern semi_structured(std::size_t n, std::size_t m) { return {Kind::semi_structured, 0.0, n, m}; }
    // "0.5", "50%", "unstructured-0.5" or "2:4"
    static SparsityPattern parse(const std::string & s);
    std::string to_string() const;
    void validate() const;
    // Throws when a matrix with this many input columns cannot carry the pattern.
    void check_columns(std::size_t d_in) const;
    double removed_fraction() const;
};

enum class ComparisonGroup { per_matrix, per_output_row, per_nm_group };

struct CriterionScore {
    Tensor score;
    ComparisonGroup group = ComparisonGroup::per_output_row;
};

enum class Criterion { magnitude, wanda, sparsegpt };
Criterion parse_criterion(const std::string & s);
std::string to_string(Criterion c);

CriterionScore score_magnitude(const Tensor & w);
// score[i, j] = |W[i, j]| * ||X[j, :]||_2
CriterionScore score_wanda(const Tensor & w, const Tensor & x);
// Same with the activation row norms supplied directly.
CriterionScore score_wanda_norms(const Tensor & w, const std::vector<double> & norms);

// 0/1 mask. Unstructured keeps the top ceil((1 - r) * |group|) scores of each
// comparison group; semi-structured keeps the n largest of every m
// consecutive entries along the input axis. Ties go to the lower column.
Tensor select_mask(const CriterionScore & score, const SparsityPattern & pattern);

// X X^T for X = [d_in x B].
Tensor gram(const Tensor & x);
// X X^T from activations stored token-major, A = [B x d_in] (so X = A^T).
Tensor gram_from_rows(const Tensor & a);
// ||W X - W_hat X||_F^2 evaluated through the Gram matrix G = X X^T.
double layer_objective(const Tensor & w, const Tensor & w_hat, const Tensor & g);
// 0.01 * mean(diag(G)).
double default_damping(const Tensor & g);

struct SparseGptOptions {
    std::optional<double> damping;  // unset: default_damping(G)
    std::size_t block_size = 4;     // lazy-update column block; rounded up to a multiple of m
};

struct SparseGptResult {
    Tensor mask;
    Tensor weights;  // already multiplied by the mask
};

// Column-blocked OBS pruning. Works left to right over input columns using the
// upper Cholesky factor U of H^-1 (H = X X^T + damping I); each pruned weight's
// error is pushed onto the columns to its right. Unstructured masks are chosen
// per output row from w^2 / U_jj^2; N:M groups are chosen when the sweep
// reaches them, from the already-updated weights.
SparseGptResult sparsegpt_prune_update(const Tensor & w, const Tensor & x, const SparsityPattern & pattern,
                                       const SparseGptOptions & opts = {});
SparseGptResult sparsegpt_prune_update_gram(const Tensor & w, const Tensor & g, const SparsityPattern & pattern,
                                            const SparseGptOptions & opts = {});

}  // namespace recon
