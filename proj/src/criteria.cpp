// SPDX-License-Identifier: Apache-2.0

#include "recon/criteria.h"

#include "recon/errors.h"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace recon {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

// Largest `keep` entries of `idx` by score; ties resolved toward lower index.
void keep_top(const std::vector<double> & score, std::vector<std::size_t> & idx, std::size_t keep,
              std::vector<double> & mask) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) {
            return score[a] > score[b];
        }
        return a < b;
    });
    for (std::size_t i = 0; i < idx.size(); ++i) {
        mask[idx[i]] = i < keep ? 1.0 : 0.0;
    }
}

std::size_t unstructured_keep(double ratio, std::size_t group) {
    const double k = std::ceil((1.0 - ratio) * static_cast<double>(group) - 1e-9);
    return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(group)));
}

void require_matrix(const Tensor & t, const char * what) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(t.shape));
    }
}

}  // namespace

SparsityPattern SparsityPattern::parse(const std::string & s) {
    SparsityPattern p;
    try {
        const auto colon = s.find(':');
        if (colon != std::string::npos) {
            p = semi_structured(std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1)));
        } else {
            std::string num = s;
            if (num.starts_with("unstructured-")) {
                num = num.substr(13);
            }
            double r = 0.0;
            if (!num.empty() && num.back() == '%') {
                r = std::stod(num.substr(0, num.size() - 1)) / 100.0;
            } else {
                r = std::stod(num);
            }
            p = unstructured(r);
        }
    } catch (const std::logic_error &) {
        throw ConfigError("unparseable sparsity pattern '" + s + "' (use e.g. 0.5, 50% or 2:4)");
    }
    p.validate();
    return p;
}

std::string SparsityPattern::to_string() const {
    if (kind == Kind::semi_structured) {
        return std::to_string(n) + ":" + std::to_string(m);
    }
    const long pct = std::lround(ratio * 1000.0);
    std::string out = std::to_string(pct / 10);
    if (pct % 10) {
        out += "." + std::to_string(pct % 10);
    }
    return out + "%";
}

void SparsityPattern::validate() const {
    if (kind == Kind::unstructured) {
        if (!(ratio > 0.0 && ratio < 1.0)) {
            throw ConfigError("unstructured sparsity ratio must lie in (0, 1), got " + std::to_string(ratio));
        }
    } else if (n == 0 || n >= m) {
        throw ConfigError("N:M pattern needs 1 <= n < m, got " + std::to_string(n) + ":" + std::to_string(m));
    }
}

void SparsityPattern::check_columns(std::size_t d_in) const {
    if (kind == Kind::semi_structured && d_in % m != 0) {
        throw ShapeError("N:M pattern " + to_string() + " needs the input dimension to be divisible by " +
                         std::to_string(m) + ", got " + std::to_string(d_in));
    }
}

double SparsityPattern::removed_fraction() const {
    return kind == Kind::unstructured ? ratio : 1.0 - static_cast<double>(n) / static_cast<double>(m);
}

Criterion parse_criterion(const std::string & s) {
    if (s == "magnitude") {
        return Criterion::magnitude;
    }
    if (s == "wanda") {
        return Criterion::wanda;
    }
    if (s == "sparsegpt") {
        return Criterion::sparsegpt;
    }
    throw ConfigError("unknown criterion '" + s + "' (magnitude, wanda, sparsegpt)");
}

std::string to_string(Criterion c) {
    switch (c) {
        case Criterion::magnitude: return "magnitude";
        case Criterion::wanda: return "wanda";
        case Criterion::sparsegpt: return "sparsegpt";
    }
    return "?";
}

CriterionScore score_magnitude(const Tensor & w) {
    require_matrix(w, "score_magnitude");
    CriterionScore s{Tensor(w.shape), ComparisonGroup::per_output_row};
    for (std::size_t i = 0; i < w.size(); ++i) {
        s.score.data[i] = std::abs(w.data[i]);
    }
    return s;
}

CriterionScore score_wanda(const Tensor & w, const Tensor & x) {
    require_matrix(w, "score_wanda");
    require_matrix(x, "score_wanda");
    if (x.rows() != w.cols()) {
        throw ShapeError("score_wanda: activations have " + std::to_string(x.rows()) + " rows but W has d_in " +
                         std::to_string(w.cols()));
    }
    std::vector<double> norms(x.rows());
    for (std::size_t j = 0; j < x.rows(); ++j) {
        double ss = 0.0;
        for (std::size_t b = 0; b < x.cols(); ++b) {
            ss += x.at(j, b) * x.at(j, b);
        }
        norms[j] = std::sqrt(ss);
    }
    return score_wanda_norms(w, norms);
}

CriterionScore score_wanda_norms(const Tensor & w, const std::vector<double> & norms) {
    require_matrix(w, "score_wanda");
    if (norms.size() != w.cols()) {
        throw ShapeError("score_wanda: " + std::to_string(norms.size()) + " activation norms for d_in " +
                         std::to_string(w.cols()));
    }
    CriterionScore s{Tensor(w.shape), ComparisonGroup::per_output_row};
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            s.score.at(i, j) = std::abs(w.at(i, j)) * norms[j];
        }
    }
    return s;
}

Tensor select_mask(const CriterionScore & cs, const SparsityPattern & pattern) {
    pattern.validate();
    const Tensor & s = cs.score;
    require_matrix(s, "select_mask");
    for (double v : s.data) {
        if (!std::isfinite(v)) {
            throw NumericalError("select_mask: non-finite score");
        }
    }
    const std::size_t rows = s.rows();
    const std::size_t cols = s.cols();
    pattern.check_columns(cols);
    Tensor mask(s.shape, 0.0);
    std::vector<std::size_t> idx;

    if (pattern.kind == SparsityPattern::Kind::semi_structured) {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c0 = 0; c0 < cols; c0 += pattern.m) {
                idx.resize(pattern.m);
                std::iota(idx.begin(), idx.end(), r * cols + c0);
                keep_top(s.data, idx, pattern.n, mask.data);
            }
        }
        return mask;
    }
    if (cs.group == ComparisonGroup::per_matrix) {
        idx.resize(s.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        keep_top(s.data, idx, unstructured_keep(pattern.ratio, s.size()), mask.data);
        return mask;
    }
    const std::size_t keep = unstructured_keep(pattern.ratio, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        idx.resize(cols);
        std::iota(idx.begin(), idx.end(), r * cols);
        keep_top(s.data, idx, keep, mask.data);
    }
    return mask;
}

Tensor gram(const Tensor & x) {
    require_matrix(x, "gram");
    Tensor g({x.rows(), x.rows()});
    Eigen::Map<RowMat>(g.data.data(), x.rows(), x.rows()).noalias() =
        ConstMap(x.data.data(), x.rows(), x.cols()) * ConstMap(x.data.data(), x.rows(), x.cols()).transpose();
    return g;
}

Tensor gram_from_rows(const Tensor & a) {
    require_matrix(a, "gram");
    Tensor g({a.cols(), a.cols()});
    Eigen::Map<RowMat>(g.data.data(), a.cols(), a.cols()).noalias() =
        ConstMap(a.data.data(), a.rows(), a.cols()).transpose() * ConstMap(a.data.data(), a.rows(), a.cols());
    return g;
}

double layer_objective(const Tensor & w, const Tensor & w_hat, const Tensor & g) {
    require_matrix(w, "layer_objective");
    if (w.shape != w_hat.shape || g.rows() != w.cols() || g.cols() != w.cols()) {
        throw ShapeError("layer_objective: incompatible shapes " + shape_str(w.shape) + ", " + shape_str(w_hat.shape) +
                         ", " + shape_str(g.shape));
    }
    const RowMat d = ConstMap(w.data.data(), w.rows(), w.cols()) - ConstMap(w_hat.data.data(), w.rows(), w.cols());
    const RowMat dg = d * ConstMap(g.data.data(), g.rows(), g.cols());
    return (dg.array() * d.array()).sum();
}

double default_damping(const Tensor & g) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i) {
        s += g.at(i, i);
    }
    return 0.01 * s / static_cast<double>(g.rows());
}

SparseGptResult sparsegpt_prune_update(const Tensor & w, const Tensor & x, const SparsityPattern & pattern,
                                       const SparseGptOptions & opts) {
    require_matrix(x, "sparsegpt");
    if (x.rows() != w.cols()) {
        throw ShapeError("sparsegpt: activations have " + std::to_string(x.rows()) + " rows but W has d_in " +
                         std::to_string(w.cols()));
    }
    return sparsegpt_prune_update_gram(w, gram(x), pattern, opts);
}

SparseGptResult sparsegpt_prune_update_gram(const Tensor & w, const Tensor & g, const SparsityPattern & pattern,
                                            const SparseGptOptions & opts) {
    require_matrix(w, "sparsegpt");
    pattern.validate();
    const std::size_t rows = w.rows();
    const std::size_t cols = w.cols();
    if (g.rank() != 2 || g.rows() != cols || g.cols() != cols) {
        throw ShapeError("sparsegpt: Gram matrix " + shape_str(g.shape) + " does not match d_in " + std::to_string(cols));
    }
    pattern.check_columns(cols);

    const double damping = opts.damping.value_or(default_damping(g));
    Eigen::MatrixXd h = ConstMap(g.data.data(), cols, cols);
    h.diagonal().array() += damping;
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success || llt.rcond() < 1e-13) {
        throw NumericalError("sparsegpt: X X^T + damping*I is singular or indefinite (damping=" +
                             std::to_string(damping) + "); raise the damping");
    }
    const Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(cols)));
    Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
    if (llt_inv.info() != Eigen::Success) {
        throw NumericalError("sparsegpt: inverse Hessian lost definiteness; raise the damping");
    }
    const Eigen::MatrixXd u = llt_inv.matrixU();

    RowMat wm = ConstMap(w.data.data(), rows, cols);
    Tensor mask(w.shape, 1.0);
    const bool nm = pattern.kind == SparsityPattern::Kind::semi_structured;

    if (!nm) {
        CriterionScore cs{Tensor(w.shape), ComparisonGroup::per_output_row};
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = u(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
                cs.score.at(r, c) = wm(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) *
                                    wm(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) / (d * d);
            }
        }
        mask = select_mask(cs, pattern);
    }

    std::size_t bs = std::max<std::size_t>(opts.block_size, 1);
    if (nm && bs % pattern.m != 0) {
        bs = (bs / pattern.m + 1) * pattern.m;
    }

    std::vector<double> group_score;
    std::vector<std::size_t> idx;
    for (std::size_t i1 = 0; i1 < cols; i1 += bs) {
        const std::size_t i2 = std::min(cols, i1 + bs);
        const auto count = static_cast<Eigen::Index>(i2 - i1);
        RowMat w1 = wm.middleCols(static_cast<Eigen::Index>(i1), count);
        RowMat err1 = RowMat::Zero(static_cast<Eigen::Index>(rows), count);
        for (Eigen::Index i = 0; i < count; ++i) {
            const auto j = static_cast<Eigen::Index>(i1) + i;
            if (nm && static_cast<std::size_t>(j) % pattern.m == 0) {
                const auto m = static_cast<Eigen::Index>(pattern.m);
                group_score.assign(rows * pattern.m, 0.0);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (Eigen::Index t = 0; t < m; ++t) {
                        const double d = u(j + t, j + t);
                        const double v = w1(static_cast<Eigen::Index>(r), i + t);
                        group_score[r * pattern.m + static_cast<std::size_t>(t)] = v * v / (d * d);
                    }
                    idx.resize(pattern.m);
                    std::iota(idx.begin(), idx.end(), r * pattern.m);
                    std::vector<double> local(pattern.m * rows, 0.0);
                    keep_top(group_score, idx, pattern.n, local);
                    for (Eigen::Index t = 0; t < m; ++t) {
                        mask.at(r, static_cast<std::size_t>(j + t)) = local[r * pattern.m + static_cast<std::size_t>(t)];
                    }
                }
            }
            const double d = u(j, j);
            for (std::size_t r = 0; r < rows; ++r) {
                const auto ri = static_cast<Eigen::Index>(r);
                const double wv = w1(ri, i);
                const double q = mask.at(r, static_cast<std::size_t>(j)) == 0.0 ? 0.0 : wv;
                const double e = (wv - q) / d;
                for (Eigen::Index k = i + 1; k < count; ++k) {
                    w1(ri, k) -= e * u(j, static_cast<Eigen::Index>(i1) + k);
                }
                w1(ri, i) = q;
                err1(ri, i) = e;
            }
        }
        wm.middleCols(static_cast<Eigen::Index>(i1), count) = w1;
        if (i2 < cols) {
            const auto rest = static_cast<Eigen::Index>(cols - i2);
            wm.rightCols(rest).noalias() -= err1 * u.block(static_cast<Eigen::Index>(i1), static_cast<Eigen::Index>(i2), count, rest);
        }
    }

    SparseGptResult out{mask, Tensor(w.shape)};
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.weights.at(r, c) = mask.at(r, c) == 0.0 ? 0.0 : wm(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        }
    }
    return out;
}

}  // namespace recon
