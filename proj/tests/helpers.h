// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures: tiny models, random tensors and the central-difference
// gradient oracle.

#pragma once

#include "recon/model.h"
#include "recon/tensor.h"
#include "recon/tokens.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

namespace recon::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64 & rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (double & v : t.data) {
        v = u(rng);
    }
    return t;
}

inline Tensor random_mask(Shape shape, std::mt19937_64 & rng, double keep = 0.5) {
    std::bernoulli_distribution b(keep);
    Tensor t(std::move(shape));
    for (double & v : t.data) {
        v = b(rng) ? 1.0 : 0.0;
    }
    return t;
}

inline ModelConfig tiny_config(std::size_t n_blocks = 2, NormKind norm = NormKind::layernorm) {
    ModelConfig c;
    c.n_blocks = n_blocks;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab = 258;
    c.seq_len = 8;
    c.norm_kind = norm;
    return c;
}

// Model whose matrices are large enough that every path carries signal.
inline GptModel tiny_model(std::uint64_t seed, std::size_t n_blocks = 2, NormKind norm = NormKind::layernorm,
                           double scale = 0.3) {
    GptModel m = GptModel::init(tiny_config(n_blocks, norm), seed);
    std::mt19937_64 rng(seed + 17);
    std::normal_distribution<double> nd(0.0, scale);
    std::uniform_real_distribution<double> gain(0.8, 1.2);
    for (Param & p : m.params()) {
        const bool is_gain = p.name.ends_with(".gain");
        const bool is_bias = p.name.ends_with(".bias");
        for (double & v : p.dense.data) {
            v = is_gain ? gain(rng) : (is_bias ? 0.1 * nd(rng) : nd(rng));
        }
        p.pruned = p.dense;
    }
    return m;
}

inline TokenMatrix random_tokens(std::size_t rows, std::size_t cols, std::uint64_t seed, int vocab = 256) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> u(0, vocab - 1);
    TokenMatrix t(rows, cols);
    for (int & id : t.ids) {
        id = u(rng);
    }
    return t;
}

// Applies a 0/1 mask to each prunable matrix of the model.
inline void random_prune(GptModel & m, std::uint64_t seed, double keep = 0.5) {
    std::mt19937_64 rng(seed);
    for (std::size_t i : m.prunable_params()) {
        Param & p = m.param(i);
        p.mask = random_mask(p.dense.shape, rng, keep);
        for (std::size_t j = 0; j < p.pruned.size(); ++j) {
            p.pruned.data[j] = p.dense.data[j] * p.mask.data[j];
        }
    }
}

// Scalar projection <v, R> with a fixed random R so gradients are generic.
inline Var project(Graph & g, Var v, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return g.sum(g.mul(v, g.constant(random_tensor(v.shape(), rng))));
}

struct FdResult {
    double max_rel = 0.0;
    std::size_t checked = 0;
};

// Compares backward() against central differences for `leaves`. `build`
// must create the graph from scratch, binding each leaf with g.param().
// Relative error is |a - f| / max(|a|, |f|, floor).
// `keep` optionally restricts which (leaf, entry) pairs are eligible.
inline FdResult fd_check(const std::vector<Tensor *> & leaves, const std::function<Var(Graph &)> & build,
                         std::size_t max_entries = 0, std::uint64_t seed = 1, double h = 1e-5, double floor = 1e-8,
                         const std::function<bool(std::size_t, std::size_t)> & keep = {}) {
    for (Tensor * t : leaves) {
        t->requires_grad = true;
        t->clear_grad();
    }
    {
        Graph g;
        Var root = build(g);
        g.backward(root);
    }
    std::vector<std::pair<std::size_t, std::size_t>> entries;
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        for (std::size_t i = 0; i < leaves[l]->size(); ++i) {
            if (!keep || keep(l, i)) {
                entries.emplace_back(l, i);
            }
        }
    }
    if (max_entries && entries.size() > max_entries) {
        std::mt19937_64 rng(seed);
        std::shuffle(entries.begin(), entries.end(), rng);
        entries.resize(max_entries);
    }
    auto eval = [&]() {
        Graph g;
        return build(g).value().data[0];
    };
    FdResult res;
    for (auto [l, i] : entries) {
        Tensor & t = *leaves[l];
        const double a = t.has_grad() ? t.grad[i] : 0.0;
        const double orig = t.data[i];
        t.data[i] = orig + h;
        const double fp = eval();
        t.data[i] = orig - h;
        const double fm = eval();
        t.data[i] = orig;
        const double f = (fp - fm) / (2.0 * h);
        const double rel = std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor});
        res.max_rel = std::max(res.max_rel, rel);
        ++res.checked;
    }
    for (Tensor * t : leaves) {
        t->requires_grad = false;
        t->clear_grad();
    }
    return res;
}

// Conjugate gradient on one row: minimise (w - v)^T G (w - v) over v with
// the given support. Independent of the closed form.
inline std::vector<double> cg_support_row(const Tensor & g, const std::vector<double> & w,
                                          const std::vector<bool> & support) {
    const std::size_t n = w.size();
    auto hv = [&](const std::vector<double> & v) {
        std::vector<double> out(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!support[i]) {
                continue;
            }
            for (std::size_t j = 0; j < n; ++j) {
                out[i] += g.at(i, j) * v[j];
            }
        }
        return out;
    };
    std::vector<double> v(n, 0.0);
    std::vector<double> r = hv(w);  // residual of G_SS v = (G w)_S at v = 0
    std::vector<double> p = r;
    double rr = 0.0;
    for (double x : r) {
        rr += x * x;
    }
    for (std::size_t it = 0; it < 10 * n && rr > 1e-30; ++it) {
        const std::vector<double> ap = hv(p);
        double pap = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            pap += p[i] * ap[i];
        }
        const double alpha = rr / pap;
        double rr_new = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            v[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            rr_new += r[i] * r[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = r[i] + (rr_new / rr) * p[i];
        }
        rr = rr_new;
    }
    return v;
}

inline bool bit_equal(const Tensor & a, const Tensor & b) {
    return a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace recon::test
