// SPDX-License-Identifier: Apache-2.0

#include "recon/data.h"

#include <doctest.h>

#include <random>
#include <set>
#include <stdexcept>
#include <algorithm>

using namespace recon;

TEST_CASE("byte tokenization") {
    CHECK(tokenize("").empty());
    CHECK(tokenize("ab") == std::vector<int>{97, 98});
    std::mt19937_64 rng(1);
    std::string blob(1024, '\0');
    for (char & c : blob) {
        c = static_cast<char>(rng() & 0xff);
    }
    CHECK(detokenize(tokenize(blob)) == blob);
    const std::vector<int> special = {kBosToken};
    CHECK_THROWS_AS(detokenize(special), std::invalid_argument);
}

TEST_CASE("corpus split keeps the holdout at the end") {
    const Corpus c = Corpus::from_bytes(std::string(1000, 'x'), 0.1);
    CHECK(c.train().size() == 900);
    CHECK(c.holdout().size() == 100);
    CHECK_THROWS_AS(Corpus::from_bytes("abc", 0.0), std::invalid_argument);
    CHECK_THROWS(Corpus::from_file("/nonexistent/corpus.txt"));
}

TEST_CASE("calibration sampling") {
    const Corpus c = Corpus::from_bytes(synthetic_corpus(20000, 3));
    const CalibrationSet a = sample_calibration(c, 4, 8, 7);
    const CalibrationSet b = sample_calibration(c, 4, 8, 7);
    CHECK(a.tokens == b.tokens);
    CHECK(a.total_tokens() == 32);
    CHECK(a.tokens.rows == 4);
    CHECK(a.tokens.cols == 8);
    for (std::size_t r = 0; r < 4; ++r) {
        CHECK(a.offsets[r] + 8 <= c.train_end);
        CHECK(detokenize(a.tokens.row(r)) == c.train().substr(a.offsets[r], 8));
    }
    CHECK_THROWS_AS(sample_calibration(Corpus::from_bytes(std::string(100, 'a')), 20, 8, 0), std::invalid_argument);
}

TEST_CASE("different seeds give different, uniformly placed samples") {
    const Corpus c = Corpus::from_bytes(synthetic_corpus(11112, 4));
    const std::size_t n = 4, seq = 8;
    const std::size_t positions = c.train_end - seq + 1;
    std::vector<std::vector<std::size_t>> offsets;
    for (std::uint64_t s = 0; s < 100; ++s) {
        offsets.push_back(sample_calibration(c, n, seq, s).offsets);
    }
    // Exact offset collisions between consecutive seeds: expected
    // 100 * n^2 / positions ~ 0.16.
    std::size_t collisions = 0;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        CHECK(offsets[s] != offsets[s + 1]);
        for (std::size_t x : offsets[s]) {
            collisions += static_cast<std::size_t>(std::count(offsets[s + 1].begin(), offsets[s + 1].end(), x));
        }
    }
    CHECK(collisions <= 3);
    // Chi-square over 10 equal bins, 9 dof; 27.88 is the 0.999 quantile.
    std::vector<double> bins(10, 0.0);
    for (const auto & v : offsets) {
        for (std::size_t x : v) {
            bins[x * 10 / positions] += 1.0;
        }
    }
    const double expected = 400.0 / 10.0;
    double chi2 = 0.0;
    for (double b : bins) {
        chi2 += (b - expected) * (b - expected) / expected;
    }
    CHECK(chi2 < 27.88);
}

TEST_CASE("holdout windows never overlap calibration samples") {
    const Corpus c = Corpus::from_bytes(synthetic_corpus(50000, 5));
    const TokenMatrix w = holdout_windows(c, 16);
    CHECK(w.rows == c.holdout().size() / 16);
    CHECK(holdout_windows(c, 16, 3).rows == 3);
    for (std::uint64_t s = 0; s < 20; ++s) {
        for (std::size_t off : sample_calibration(c, 16, 16, s).offsets) {
            CHECK(off + 16 <= c.train_end);
        }
    }
    CHECK(detokenize(w.row(1)) == c.holdout().substr(16, 16));
    CHECK_THROWS_AS(holdout_windows(Corpus::from_bytes(std::string(50, 'a')), 16), std::invalid_argument);
}

TEST_CASE("unigram perplexity of a single-symbol corpus") {
    // Train split is all 'a': p(a) = (n + 1) / (n + 256).
    const Corpus c = Corpus::from_bytes(std::string(1000, 'a'), 0.1);
    const TokenMatrix w = holdout_windows(c, 10);
    const double p = 901.0 / (900.0 + 256.0);
    CHECK(unigram_perplexity(c, w) == doctest::Approx(1.0 / p).epsilon(1e-12));
}

TEST_CASE("synthetic corpus is deterministic printable text") {
    const std::string a = synthetic_corpus(5000, 9);
    CHECK(a.size() == 5000);
    CHECK(a == synthetic_corpus(5000, 9));
    CHECK(a != synthetic_corpus(5000, 10));
    for (char ch : a) {
        CHECK(((ch >= 32 && ch < 127) || ch == '\n'));
    }
}

TEST_CASE("train batches are windows of the train split") {
    const Corpus c = Corpus::from_bytes(synthetic_corpus(4000, 1));
    std::mt19937_64 rng(2);
    const TokenMatrix b = train_batch(c, 3, 12, rng);
    for (std::size_t r = 0; r < 3; ++r) {
        CHECK(c.train().find(detokenize(b.row(r))) != std::string_view::npos);
    }
}
