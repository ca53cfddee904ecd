// SPDX-License-Identifier: Apache-2.0

#include "helpers.h"

#include "recon/metrics.h"

#include <doctest.h>

#include <cmath>

using namespace recon;
using namespace recon::test;

namespace {

RunFingerprint fp(const std::string & strategy, const std::string & loss, double lr, std::uint64_t seed = 0,
                  const std::string & sparsity = "50%") {
    return {"toy", sparsity, "wanda", "half-block", strategy, loss, lr, 1, seed};
}

}  // namespace

TEST_CASE("next-token NLL") {
    const Tensor logits = Tensor::matrix({{0, 0, 0, 0}, {std::log(3.0), 0, 0, 0}});
    const std::vector<int> t = {2, 0};
    const NllSum s = next_token_nll(logits, t);
    CHECK(s.count == 2);
    CHECK(s.sum == doctest::Approx(std::log(4.0) + std::log(2.0)));
    const std::vector<int> skip = {-1, 0};
    CHECK(next_token_nll(logits, skip).count == 1);
    // Probability one on the true token.
    const Tensor sharp = Tensor::matrix({{1000, 0, 0}});
    const std::vector<int> hit = {0};
    CHECK(std::exp(next_token_nll(sharp, hit).sum) == 1.0);
}

TEST_CASE("perplexity of a uniform model is the vocabulary size") {
    GptModel m = tiny_model(1);
    Param & head = m.param(m.lm_head());
    for (double & v : head.dense.data) {
        v = 0.0;
    }
    head.pruned = head.dense;
    const TokenMatrix w = random_tokens(3, 8, 2);
    CHECK(perplexity(m, w, WeightSet::dense) == doctest::Approx(258.0).epsilon(1e-12));
    CHECK_THROWS_AS(perplexity(m, TokenMatrix(0, 8), WeightSet::dense), std::invalid_argument);
}

TEST_CASE("perplexity matches a direct log-softmax and is deterministic") {
    GptModel m = tiny_model(3);
    random_prune(m, 4);
    const TokenMatrix w = random_tokens(5, 8, 5);
    for (WeightSet ws : {WeightSet::dense, WeightSet::pruned}) {
        const Tensor logits = forward_with_taps(m, w, ws).logits;
        const std::size_t v = logits.cols();
        double nll = 0.0;
        std::size_t n = 0;
        for (std::size_t r = 0; r < w.rows; ++r) {
            for (std::size_t t = 0; t + 1 < w.cols; ++t) {
                const std::size_t row = r * w.cols + t;
                double mx = -INFINITY;
                for (std::size_t k = 0; k < v; ++k) {
                    mx = std::max(mx, logits.at(row, k));
                }
                double z = 0.0;
                for (std::size_t k = 0; k < v; ++k) {
                    z += std::exp(logits.at(row, k) - mx);
                }
                nll += mx + std::log(z) - logits.at(row, static_cast<std::size_t>(w.ids[row + 1]));
                ++n;
            }
        }
        const double p = perplexity(m, w, ws);
        CHECK(p == doctest::Approx(std::exp(nll / static_cast<double>(n))).epsilon(1e-10));
        const double again = perplexity(m, w, ws);
        CHECK(std::memcmp(&p, &again, sizeof p) == 0);
    }
    CHECK(perplexity(m, w, WeightSet::dense) != perplexity(m, w, WeightSet::pruned));
}

TEST_CASE("recovery") {
    CHECK(recovery(14.62, 18.31, 15.49).value() == doctest::Approx(0.7642).epsilon(1e-4));
    CHECK(recovery(10, 20, 10).value() == 1.0);
    CHECK(recovery(10, 20, 20).value() == 0.0);
    CHECK_FALSE(recovery(10, 10, 12).has_value());
    double prev = INFINITY;
    for (double r = 9.0; r <= 25.0; r += 0.5) {
        const double v = recovery(10, 20, r).value();
        CHECK(v < prev);
        prev = v;
    }
    const RecoveryReport rep = make_report(fp("mp", "mse", 3e-5), 10, 20, 15);
    CHECK(rep.recovery.value() == doctest::Approx(0.5));
}

TEST_CASE("fingerprint keys separate every field") {
    const RunFingerprint a = fp("mp", "mse", 3e-5);
    RunFingerprint b = a;
    CHECK(a.key() == b.key());
    b.lr = 1e-5;
    CHECK(a.key() != b.key());
    b = a;
    b.seed = 1;
    CHECK(a.key() != b.key());
    b = a;
    b.epochs = 20;
    CHECK(a.key() != b.key());
}

TEST_CASE("recovery differences") {
    const RecoveryReport self = make_report(fp("mp", "mse", 3e-5), 10, 20, 13);
    const RecoveryDiffs d0 = recovery_diffs({self, self}, Pairing::identical_config, DiffAxis::strategy, "mp", "mp");
    REQUIRE_FALSE(d0.diffs.empty());
    for (const RecoveryDiff & d : d0.diffs) {
        CHECK(d.diff == 0.0);
    }

    const RecoveryReport a = make_report(fp("mp", "mse", 3e-5), 10, 20, 13);  // 0.7
    const RecoveryReport b = make_report(fp("sp", "mse", 3e-5), 10, 20, 15);  // 0.5
    const RecoveryDiffs d1 = recovery_diffs({a, b}, Pairing::identical_config, DiffAxis::strategy, "mp", "sp");
    REQUIRE(d1.diffs.size() == 1);
    CHECK(d1.diffs[0].diff == doctest::Approx(0.2));
    CHECK(d1.warning.empty());

    const RecoveryDiffs none = recovery_diffs({a, b}, Pairing::identical_config, DiffAxis::loss, "mse", "cs");
    CHECK(none.diffs.empty());
    CHECK_FALSE(none.warning.empty());

    // Undefined recoveries are ignored.
    const RecoveryReport u = make_report(fp("sp", "mse", 3e-5), 10, 10, 12);
    CHECK(recovery_diffs({a, u}, Pairing::identical_config, DiffAxis::strategy, "mp", "sp").diffs.empty());
}

TEST_CASE("best-per pairing compares maxima per model and sparsity") {
    std::vector<RecoveryReport> runs = {
        make_report(fp("mp", "mse", 1e-5), 10, 20, 14),              // 0.6
        make_report(fp("mp", "mse", 1e-4), 10, 20, 12),              // 0.8
        make_report(fp("sp", "mse", 1e-5), 10, 20, 13),              // 0.7
        make_report(fp("sp", "mse", 1e-4, 0, "2:4"), 10, 20, 16),    // 0.4
        make_report(fp("mp", "mse", 1e-4, 0, "2:4"), 10, 20, 15),    // 0.5
    };
    const RecoveryDiffs d = recovery_diffs(runs, Pairing::best_per_model_sparsity, DiffAxis::strategy, "mp", "sp");
    REQUIRE(d.diffs.size() == 2);
    std::vector<double> got;
    for (const RecoveryDiff & x : d.diffs) {
        got.push_back(x.diff);
    }
    std::sort(got.begin(), got.end());
    CHECK(got[0] == doctest::Approx(0.1));
    CHECK(got[1] == doctest::Approx(0.1));
}

TEST_CASE("histogram of a 10-run grid matches brute-force enumeration") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(11.0, 19.0);
    std::vector<RecoveryReport> runs;
    for (const char * s : {"mp", "sp"}) {
        for (double lr : {1e-6, 1e-5, 3e-5, 1e-4, 1e-3}) {
            runs.push_back(make_report(fp(s, "mse", lr), 10, 20, u(rng)));
        }
    }
    const RecoveryDiffs d = recovery_diffs(runs, Pairing::identical_config, DiffAxis::strategy, "mp", "sp");
    CHECK(d.diffs.size() == 5);

    const std::size_t bins = 8;
    const double lo = -0.8, hi = 0.8;
    std::vector<std::size_t> brute(bins, 0);
    for (const RecoveryReport & x : runs) {
        for (const RecoveryReport & y : runs) {
            RunFingerprint fx = x.config, fy = y.config;
            if (fx.strategy != "mp" || fy.strategy != "sp") {
                continue;
            }
            fx.strategy = fy.strategy = "";
            if (!(fx == fy)) {
                continue;
            }
            const double diff = *x.recovery - *y.recovery;
            const auto raw = static_cast<long>(std::floor((diff - lo) / (hi - lo) * static_cast<double>(bins)));
            ++brute[static_cast<std::size_t>(std::clamp(raw, 0L, static_cast<long>(bins) - 1))];
        }
    }
    CHECK(histogram(d.diffs, bins, lo, hi) == brute);
    std::size_t total = 0;
    for (std::size_t c : brute) {
        total += c;
    }
    CHECK(total == 5);
}

TEST_CASE("peak memory grows with unit size") {
    for (const ModelConfig & c : {tiny_config(4), [] {
                                      ModelConfig o;
                                      o.n_blocks = 24;
                                      o.d_model = 2048;
                                      o.n_heads = 32;
                                      o.d_ff = 8192;
                                      o.vocab = 50272;
                                      o.seq_len = 2048;
                                      return o;
                                  }()}) {
        std::vector<Granularity> order = {Granularity::per_matrix(), Granularity::half_block()};
        for (std::size_t k = 1; k <= c.n_blocks; ++k) {
            order.push_back(Granularity::blocks(k));
        }
        order.push_back(Granularity::full_decoder());
        std::size_t prev = 0;
        for (const Granularity & g : order) {
            const MemoryEstimate e = estimate_peak_memory(c, g);
            CAPTURE(g.to_string());
            CHECK(e.peak_bytes >= prev);
            CHECK(e.peak_bytes ==
                  8 * (4 * e.trainable_params + e.frozen_params + e.activation_floats));
            CHECK(e.optimizer_state_floats == 2 * e.trainable_params);
            prev = e.peak_bytes;
        }
        CHECK(estimate_peak_memory(c, Granularity::per_matrix()).peak_bytes <
              estimate_peak_memory(c, Granularity::full_decoder()).peak_bytes);
        CHECK(estimate_peak_memory(c, Granularity::half_block(), 2, 0, true).peak_bytes >
              estimate_peak_memory(c, Granularity::half_block()).peak_bytes - 1);
    }
}
