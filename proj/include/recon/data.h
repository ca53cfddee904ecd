// SPDX-License-Identifier: Apache-2.0
//
// Byte-level corpus handling and calibration sampling.

#pragma once

#include "recon/tokens.h"

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace recon {

inline constexpr int kPadToken = 256;
inline constexpr int kBosToken = 257;
inline constexpr std::size_t kByteVocab = 258;

std::vector<int> tokenize(std::string_view bytes);
// Inverse of tokenize; special ids are rejected.
std::string detokenize(std::span<const int> ids);

// Raw bytes split into a leading train range and a trailing holdout range.
struct Corpus {
    std::string bytes;
    std::size_t train_end = 0;

    static Corpus from_bytes(std::string bytes, double holdout_fraction = 0.1);
    static Corpus from_file(const std::string & path, double holdout_fraction = 0.1);

    std::string_view train() const { return std::string_view(bytes).substr(0, train_end); }
    std::string_view holdout() const { return std::string_view(bytes).substr(train_end); }
};

struct CalibrationSet {
    std::size_t n_samples = 0;
    std::size_t seq_len = 0;
    std::uint64_t seed = 0;
    TokenMatrix tokens;
    std::vector<std::size_t> offsets;  // byte offset of each sample in the train split

    std::size_t total_tokens() const { return n_samples * seq_len; }
};

// Uniformly placed windows from the train split; deterministic in `seed`.
CalibrationSet sample_calibration(const Corpus & corpus, std::size_t n_samples, std::size_t seq_len,
                                  std::uint64_t seed);

// Non-overlapping holdout windows of seq_len tokens; max_windows = 0 keeps all.
TokenMatrix holdout_windows(const Corpus & corpus, std::size_t seq_len, std::size_t max_windows = 0);

// Random windows of the train split for dense pre-training.
TokenMatrix train_batch(const Corpus & corpus, std::size_t batch, std::size_t seq_len, std::mt19937_64 & rng);

// Perplexity of a byte-unigram model fit on the train split (add-one
// smoothing) over the same next-token positions the LM is scored on.
double unigram_perplexity(const Corpus & corpus, const TokenMatrix & windows);

// English-like text from a small stochastic grammar. Paragraphs share a topic
// so the text has structure beyond local spelling.
std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed);

}  // namespace recon
