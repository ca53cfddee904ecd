// SPDX-License-Identifier: Apache-2.0
//
// Layout:
//
//   RECONLAB-CHECKPOINT 1
//   [config]
//   n_blocks = 4
//   ...
//   [tensors]
//   <param-name> <dense|pruned|mask> <rank> <dims...> <byte offset> <byte count>
//   ...
//   [end]
//   <payload: f64 values, little-endian, offsets relative to payload start>

#include "recon/model.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace recon {

namespace {

constexpr const char * kMagic = "RECONLAB-CHECKPOINT 1";

void write_f64_le(std::ostream & os, const std::vector<double> & values) {
    std::vector<unsigned char> buf(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) {
            buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
        }
    }
    os.write(reinterpret_cast<const char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

std::vector<double> read_f64_le(const std::vector<unsigned char> & payload, std::size_t offset, std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(payload[offset + i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
        }
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

struct Entry {
    std::string name;
    std::string copy;
    Shape shape;
    std::size_t offset = 0;
    std::size_t bytes = 0;
};

[[noreturn]] void bad(const std::string & path, const std::string & why) {
    throw std::runtime_error("checkpoint " + path + ": " + why);
}

}  // namespace

void save_checkpoint(const GptModel & model, const std::string & path) {
    const ModelConfig & c = model.config();
    std::vector<Entry> index;
    std::vector<const Tensor *> payload;
    std::size_t offset = 0;
    auto add = [&](const Param & p, const char * copy, const Tensor & t) {
        index.push_back({p.name, copy, t.shape, offset, t.size() * 8});
        payload.push_back(&t);
        offset += t.size() * 8;
    };
    for (const Param & p : model.params()) {
        add(p, "dense", p.dense);
        add(p, "pruned", p.pruned);
        if (p.prunable()) {
            add(p, "mask", p.mask);
        }
    }

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        bad(path, "cannot open for writing");
    }
    os << kMagic << '\n';
    os << "[config]\n";
    os << "n_blocks = " << c.n_blocks << '\n';
    os << "d_model = " << c.d_model << '\n';
    os << "n_heads = " << c.n_heads << '\n';
    os << "d_ff = " << c.d_ff << '\n';
    os << "vocab = " << c.vocab << '\n';
    os << "seq_len = " << c.seq_len << '\n';
    os << "norm_kind = " << to_string(c.norm_kind) << '\n';
    os << "tie_lm_head = " << (c.tie_lm_head ? "true" : "false") << '\n';
    os << "[tensors]\n";
    for (const Entry & e : index) {
        os << e.name << ' ' << e.copy << ' ' << e.shape.size();
        for (auto d : e.shape) {
            os << ' ' << d;
        }
        os << ' ' << e.offset << ' ' << e.bytes << '\n';
    }
    os << "[end]\n";
    for (const Tensor * t : payload) {
        write_f64_le(os, t->data);
    }
    if (!os) {
        bad(path, "write failed");
    }
}

GptModel load_checkpoint(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        bad(path, "cannot open");
    }
    std::string line;
    if (!std::getline(is, line) || line != kMagic) {
        bad(path, "missing magic line");
    }
    std::map<std::string, std::string> cfg;
    std::vector<Entry> index;
    std::string section;
    bool ended = false;
    while (std::getline(is, line)) {
        if (line == "[end]") {
            ended = true;
            break;
        }
        if (line.size() > 2 && line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        if (section == "config") {
            const auto eq = line.find(" = ");
            if (eq == std::string::npos) {
                bad(path, "malformed config line '" + line + "'");
            }
            cfg[line.substr(0, eq)] = line.substr(eq + 3);
        } else if (section == "tensors") {
            std::istringstream ls(line);
            Entry e;
            std::size_t rank = 0;
            ls >> e.name >> e.copy >> rank;
            e.shape.resize(rank);
            for (auto & d : e.shape) {
                ls >> d;
            }
            ls >> e.offset >> e.bytes;
            if (!ls || e.bytes != numel(e.shape) * 8) {
                bad(path, "malformed tensor entry '" + line + "'");
            }
            index.push_back(std::move(e));
        } else {
            bad(path, "unexpected line '" + line + "'");
        }
    }
    if (!ended) {
        bad(path, "truncated header");
    }
    const std::streampos start = is.tellg();
    is.seekg(0, std::ios::end);
    const std::streamoff n = is.tellg() - start;
    is.seekg(start);
    std::vector<unsigned char> payload(static_cast<std::size_t>(std::max<std::streamoff>(n, 0)));
    is.read(reinterpret_cast<char *>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (is.gcount() != static_cast<std::streamsize>(payload.size())) {
        bad(path, "short read");
    }

    auto get = [&](const char * key) -> const std::string & {
        auto it = cfg.find(key);
        if (it == cfg.end()) {
            bad(path, std::string("missing config key ") + key);
        }
        return it->second;
    };
    ModelConfig c;
    try {
        c.n_blocks = std::stoul(get("n_blocks"));
        c.d_model = std::stoul(get("d_model"));
        c.n_heads = std::stoul(get("n_heads"));
        c.d_ff = std::stoul(get("d_ff"));
        c.vocab = std::stoul(get("vocab"));
        c.seq_len = std::stoul(get("seq_len"));
        c.norm_kind = parse_norm_kind(get("norm_kind"));
        c.tie_lm_head = get("tie_lm_head") == "true";
    } catch (const std::logic_error & e) {
        bad(path, std::string("bad config value: ") + e.what());
    }

    GptModel model = GptModel::skeleton(c);
    std::size_t seen = 0;
    for (const Entry & e : index) {
        const std::size_t pi = model.find(e.name);
        if (pi == kNoParam) {
            bad(path, "unknown tensor " + e.name);
        }
        Param & p = model.param(pi);
        Tensor * dst = e.copy == "dense" ? &p.dense : e.copy == "pruned" ? &p.pruned : e.copy == "mask" ? &p.mask : nullptr;
        if (!dst || dst->data.empty() || dst->shape != e.shape) {
            bad(path, "tensor " + e.name + " " + e.copy + " does not match the configured shape");
        }
        if (e.offset + e.bytes > payload.size()) {
            bad(path, "payload truncated at " + e.name);
        }
        dst->data = read_f64_le(payload, e.offset, numel(e.shape));
        ++seen;
    }
    std::size_t expected = 0;
    for (const Param & p : model.params()) {
        expected += p.prunable() ? 3 : 2;
    }
    if (seen != expected) {
        bad(path, "expected " + std::to_string(expected) + " tensors, found " + std::to_string(seen));
    }
    return model;
}

}  // namespace recon
