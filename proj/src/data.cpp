// SPDX-License-Identifier: Apache-2.0

#include "recon/data.h"

#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace recon {

std::vector<int> tokenize(std::string_view bytes) {
    std::vector<int> ids(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        ids[i] = static_cast<unsigned char>(bytes[i]);
    }
    return ids;
}

std::string detokenize(std::span<const int> ids) {
    std::string out(ids.size(), '\0');
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] > 255) {
            throw std::invalid_argument("detokenize: id " + std::to_string(ids[i]) + " is not a byte");
        }
        out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
    }
    return out;
}

Corpus Corpus::from_bytes(std::string bytes, double holdout_fraction) {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
        throw std::invalid_argument("corpus: holdout fraction must lie in (0, 1)");
    }
    Corpus c;
    c.train_end = bytes.size() - static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(bytes.size())));
    c.bytes = std::move(bytes);
    return c;
}

Corpus Corpus::from_file(const std::string & path, double holdout_fraction) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("corpus: cannot open " + path);
    }
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.empty()) {
        throw std::runtime_error("corpus: " + path + " is empty");
    }
    return from_bytes(std::move(bytes), holdout_fraction);
}

CalibrationSet sample_calibration(const Corpus & corpus, std::size_t n_samples, std::size_t seq_len,
                                  std::uint64_t seed) {
    if (n_samples == 0 || seq_len == 0) {
        throw std::invalid_argument("calibration: n_samples and seq_len must be positive");
    }
    const std::size_t train = corpus.train_end;
    if (train < n_samples * seq_len) {
        throw std::invalid_argument("calibration: train split has " + std::to_string(train) + " bytes, need at least " +
                                    std::to_string(n_samples * seq_len));
    }
    CalibrationSet cs;
    cs.n_samples = n_samples;
    cs.seq_len = seq_len;
    cs.seed = seed;
    cs.tokens = TokenMatrix(n_samples, seq_len);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, train - seq_len);
    for (std::size_t r = 0; r < n_samples; ++r) {
        const std::size_t off = pick(rng);
        cs.offsets.push_back(off);
        const auto ids = tokenize(corpus.train().substr(off, seq_len));
        std::copy(ids.begin(), ids.end(), cs.tokens.row(r).begin());
    }
    return cs;
}

TokenMatrix holdout_windows(const Corpus & corpus, std::size_t seq_len, std::size_t max_windows) {
    const std::string_view h = corpus.holdout();
    std::size_t n = h.size() / seq_len;
    if (max_windows) {
        n = std::min(n, max_windows);
    }
    if (n == 0) {
        throw std::invalid_argument("holdout: need at least " + std::to_string(seq_len) + " bytes, have " +
                                    std::to_string(h.size()));
    }
    TokenMatrix out(n, seq_len);
    for (std::size_t r = 0; r < n; ++r) {
        const auto ids = tokenize(h.substr(r * seq_len, seq_len));
        std::copy(ids.begin(), ids.end(), out.row(r).begin());
    }
    return out;
}

TokenMatrix train_batch(const Corpus & corpus, std::size_t batch, std::size_t seq_len, std::mt19937_64 & rng) {
    if (corpus.train_end < seq_len) {
        throw std::invalid_argument("train batch: train split shorter than one sequence");
    }
    std::uniform_int_distribution<std::size_t> pick(0, corpus.train_end - seq_len);
    TokenMatrix out(batch, seq_len);
    for (std::size_t r = 0; r < batch; ++r) {
        const auto ids = tokenize(corpus.train().substr(pick(rng), seq_len));
        std::copy(ids.begin(), ids.end(), out.row(r).begin());
    }
    return out;
}

double unigram_perplexity(const Corpus & corpus, const TokenMatrix & windows) {
    std::array<double, 256> counts{};
    counts.fill(1.0);
    for (unsigned char c : corpus.train()) {
        counts[c] += 1.0;
    }
    double total = 0.0;
    for (double c : counts) {
        total += c;
    }
    double nll = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < windows.rows; ++r) {
        const auto row = windows.row(r);
        for (std::size_t t = 1; t < row.size(); ++t) {
            nll -= std::log(counts[static_cast<std::size_t>(row[t])] / total);
            ++n;
        }
    }
    return std::exp(nll / static_cast<double>(n));
}

namespace {

struct Topic {
    std::vector<const char *> nouns;
    std::vector<const char *> verbs;
    std::vector<const char *> adjectives;
};

const std::vector<Topic> & topics() {
    static const std::vector<Topic> t = {
        {{"river", "boat", "fisherman", "harbor", "current", "island", "net", "storm", "shore", "sailor"},
         {"crossed", "followed", "repaired", "watched", "pulled", "reached", "carried", "avoided"},
         {"cold", "calm", "narrow", "distant", "grey", "wet"}},
        {{"engine", "machine", "gear", "lever", "factory", "worker", "wheel", "pipe", "valve", "furnace"},
         {"turned", "built", "tested", "replaced", "started", "measured", "cleaned", "adjusted"},
         {"heavy", "noisy", "rusty", "precise", "broken", "new"}},
        {{"garden", "tree", "flower", "seed", "farmer", "field", "root", "harvest", "orchard", "fence"},
         {"planted", "watered", "cut", "grew", "gathered", "covered", "dug", "noticed"},
         {"green", "tall", "young", "dry", "bright", "wild"}},
        {{"city", "street", "market", "merchant", "tower", "bridge", "crowd", "coin", "gate", "council"},
         {"sold", "opened", "visited", "counted", "guarded", "closed", "praised", "entered"},
         {"busy", "old", "crowded", "rich", "quiet", "stone"}},
        {{"library", "book", "scholar", "letter", "page", "lamp", "map", "student", "desk", "story"},
         {"read", "wrote", "copied", "studied", "found", "lost", "explained", "translated"},
         {"thin", "ancient", "careful", "dusty", "long", "strange"}},
    };
    return t;
}

const std::vector<const char *> kNames = {"Anna", "Boris", "Clara", "David", "Elena", "Felix", "Greta", "Henrik"};
const std::vector<const char *> kAdverbs = {"slowly", "quickly", "again", "carefully", "suddenly", "quietly", "often"};
const std::vector<const char *> kPreps = {"near", "under", "beside", "behind", "across", "inside"};
const std::vector<const char *> kTimes = {"In the morning", "At night", "Later", "Before noon", "That winter",
                                          "After the rain"};
const std::vector<const char *> kLinks = {"and then", "because", "while", "but", "so"};

// Zipf-like pick: earlier entries are more frequent.
template <typename T>
const T & zipf(const std::vector<T> & v, std::mt19937_64 & rng) {
    std::vector<double> w(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        w[i] = 1.0 / static_cast<double>(i + 1);
    }
    std::discrete_distribution<std::size_t> d(w.begin(), w.end());
    return v[d(rng)];
}

}  // namespace

std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::string out;
    out.reserve(n_bytes + 256);
    std::uniform_int_distribution<int> coin(0, 99);
    const auto & all = topics();

    while (out.size() < n_bytes) {
        const Topic & topic = all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng)];
        const char * hero = zipf(kNames, rng);
        const int sentences = 3 + coin(rng) % 5;
        for (int s = 0; s < sentences; ++s) {
            std::string sent;
            if (coin(rng) < 30) {
                sent += zipf(kTimes, rng);
                sent += ", ";
            }
            auto noun_phrase = [&] {
                std::string np = "the ";
                if (coin(rng) < 40) {
                    np += zipf(topic.adjectives, rng);
                    np += ' ';
                }
                np += zipf(topic.nouns, rng);
                return np;
            };
            std::string subject = coin(rng) < 45 ? std::string(hero) : noun_phrase();
            sent += subject;
            sent += ' ';
            if (coin(rng) < 25) {
                sent += zipf(kAdverbs, rng);
                sent += ' ';
            }
            sent += zipf(topic.verbs, rng);
            sent += ' ';
            sent += noun_phrase();
            if (coin(rng) < 50) {
                sent += ' ';
                sent += zipf(kPreps, rng);
                sent += ' ';
                sent += noun_phrase();
            }
            if (coin(rng) < 30) {
                sent += ' ';
                sent += zipf(kLinks, rng);
                sent += ' ';
                sent += coin(rng) < 50 ? "she" : "he";
                sent += ' ';
                sent += zipf(topic.verbs, rng);
                sent += ' ';
                sent += noun_phrase();
            }
            if (coin(rng) < 8) {
                sent += " for ";
                sent += std::to_string(2 + coin(rng) % 40);
                sent += " days";
            }
            sent += '.';
            if (sent[0] >= 'a' && sent[0] <= 'z') {
                sent[0] = static_cast<char>(sent[0] - 'a' + 'A');
            }
            out += sent;
            out += ' ';
        }
        out.back() = '\n';
        if (coin(rng) < 30) {
            out += '\n';
        }
    }
    out.resize(n_bytes);
    return out;
}

}  // namespace recon
