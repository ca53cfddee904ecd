// SPDX-License-Identifier: Apache-2.0

#include "recon/experiment.h"

#include "recon/errors.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace recon {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string read_file(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open " + path);
    }
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// Write-then-rename so an interrupted run never leaves a half-written file.
void write_atomic(const fs::path & path, const std::string & text) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
        os << text;
        if (!os) {
            throw std::runtime_error("write failed: " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

void check_keys(const json & j, const std::string & where, std::initializer_list<const char *> allowed) {
    if (!j.is_object()) {
        throw ConfigError("config: '" + where + "' must be an object");
    }
    for (const auto & [k, v] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char * a) { return k == a; }) == allowed.end()) {
            throw ConfigError("config: unknown key '" + where + (where.empty() ? "" : ".") + k + "'");
        }
    }
}

template <typename T>
void get(const json & j, const char * key, T & out) {
    if (!j.contains(key)) {
        return;
    }
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception & e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

template <typename T, typename Parse>
void get_list(const json & j, const char * key, std::vector<T> & out, Parse parse) {
    if (!j.contains(key)) {
        return;
    }
    std::vector<std::string> names;
    get(j, key, names);
    out.clear();
    for (const std::string & n : names) {
        out.push_back(parse(n));
    }
}

Granularity parse_granularity(const std::string & s) {
    try {
        return Granularity::parse(s);
    } catch (const std::invalid_argument & e) {
        throw ConfigError(e.what());
    }
}

std::string solver_name(PerMatrixSolver s) {
    return s == PerMatrixSolver::analytic ? "analytic" : "gradient";
}

// Binds every parameter's dense copy as a trainable leaf.
Binder dense_trainer(GptModel & model) {
    return [&model](Graph & g, std::size_t i) { return g.param(model.param(i).dense); };
}

// One cell of the sweep grid.
struct Cell {
    RunFingerprint fp;
    std::string key;  // full key including the settings every cell shares
    std::string file;
    bool retrain = false;
    Granularity granularity;
    Strategy strategy = Strategy::mixed;
    LossKind loss = LossKind::mse;
};

const char * kRunHeader =
    "key,model,sparsity,criterion,granularity,strategy,loss,lr,epochs,seed,ppl_dense,ppl_pruned,ppl_reconstructed,"
    "recovery,peak_bytes,status";

std::vector<std::string> split_csv(const std::string & line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
        out.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

std::string run_row(const RecoveryReport & r, const std::string & key, std::size_t peak, const std::string & status) {
    const RunFingerprint & f = r.config;
    std::string clean = status;
    std::replace(clean.begin(), clean.end(), ',', ';');
    std::replace(clean.begin(), clean.end(), '\n', ' ');
    return key + "," + f.model + "," + f.sparsity + "," + f.criterion + "," + f.granularity + "," + f.strategy + "," +
           f.loss + "," + fmt_double(f.lr) + "," + std::to_string(f.epochs) + "," + std::to_string(f.seed) + "," +
           fmt_double(r.ppl_dense) + "," + fmt_double(r.ppl_pruned) + "," + fmt_double(r.ppl_reconstructed) + "," +
           (r.recovery ? fmt_double(*r.recovery) : std::string()) + "," + std::to_string(peak) + "," + clean;
}

// Parses a per-cell file; empty when missing, unreadable or for another key.
std::optional<std::pair<RecoveryReport, std::string>> read_cell(const fs::path & path, const std::string & key) {
    std::ifstream is(path);
    if (!is) {
        return std::nullopt;
    }
    std::string header, line;
    if (!std::getline(is, header) || header != kRunHeader || !std::getline(is, line)) {
        return std::nullopt;
    }
    const std::vector<std::string> f = split_csv(line);
    if (f.size() != 16 || f[0] != key) {
        return std::nullopt;
    }
    RecoveryReport r;
    try {
        r.config = {f[1], f[2], f[3], f[4], f[5], f[6], std::stod(f[7]), std::stoul(f[8]), std::stoull(f[9])};
        r.ppl_dense = std::stod(f[10]);
        r.ppl_pruned = std::stod(f[11]);
        r.ppl_reconstructed = std::stod(f[12]);
        if (!f[13].empty()) {
            r.recovery = std::stod(f[13]);
        }
    } catch (const std::exception &) {
        return std::nullopt;
    }
    return std::pair{r, line};
}

struct SweepContext {
    std::string model_tag;
    std::vector<Cell> cells;
};

SweepContext plan_sweep(const ExperimentConfig & cfg) {
    const std::string dense = cfg.dense_path();
    if (!fs::exists(dense)) {
        throw ConfigError("sweep: dense checkpoint " + dense + " not found (run train-dense first)");
    }
    if (!fs::exists(cfg.corpus_path)) {
        throw ConfigError("sweep: corpus " + cfg.corpus_path + " not found");
    }
    SweepContext ctx;
    ctx.model_tag = "ckpt-" + hex64(fnv1a(read_file(dense)));
    const std::string corpus_tag = hex64(fnv1a(read_file(cfg.corpus_path)));
    const OptimConfig & o = cfg.opt;
    std::string shared = ";ratio=" + fmt_double(cfg.pattern.ratio) + ";corpus=" + corpus_tag +
                         ";holdout=" + fmt_double(cfg.holdout_fraction) +
                         ";eval_windows=" + std::to_string(cfg.eval_windows) +
                         ";n_samples=" + std::to_string(cfg.n_samples) + ";seq_len=" + std::to_string(cfg.seq_len) +
                         ";batch=" + std::to_string(o.batch_size) + ";warmup=" + fmt_double(o.warmup_frac) +
                         ";betas=" + fmt_double(o.beta1) + "/" + fmt_double(o.beta2) + ";eps=" + fmt_double(o.eps) +
                         ";wd=" + fmt_double(o.weight_decay) + ";sgpt_block=" + std::to_string(cfg.sparsegpt.block_size) +
                         ";sgpt_damp=" + (cfg.sparsegpt.damping ? fmt_double(*cfg.sparsegpt.damping) : "auto");
    const std::string local = ";norms=" + std::to_string(cfg.train_norm_params) +
                              ";solver=" + solver_name(cfg.per_matrix_solver) + ";ridge=" + fmt_double(cfg.ridge);

    auto add = [&](Cell c, const std::string & extra) {
        c.key = c.fp.key() + shared + extra;
        c.file = hex64(fnv1a(c.key)) + ".csv";
        ctx.cells.push_back(std::move(c));
    };
    for (std::uint64_t seed : cfg.seeds) {
        for (const Granularity & gran : cfg.granularities) {
            for (Strategy st : cfg.strategies) {
                for (LossKind loss : cfg.losses) {
                    for (double lr : cfg.lrs) {
                        for (std::size_t ep : cfg.epochs) {
                            Cell c;
                            c.fp = {ctx.model_tag, cfg.pattern.to_string(), to_string(cfg.criterion),
                                    gran.to_string(), to_string(st), to_string(loss), lr, ep, seed};
                            c.granularity = gran;
                            c.strategy = st;
                            c.loss = loss;
                            add(std::move(c), local);
                        }
                    }
                }
            }
        }
        if (cfg.include_retrain) {
            for (double lr : cfg.lrs) {
                for (std::size_t ep : cfg.epochs) {
                    Cell c;
                    c.fp = {ctx.model_tag, cfg.pattern.to_string(), to_string(cfg.criterion), "retrain", "-", "ce", lr,
                            ep, seed};
                    c.retrain = true;
                    add(std::move(c), "");
                }
            }
        }
    }
    return ctx;
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string summary_markdown(const ExperimentConfig & cfg, const std::vector<RecoveryReport> & reports) {
    std::ostringstream md;
    md << "# Reconstruction sweep\n\n";
    if (!reports.empty()) {
        md << "Model `" << reports.front().config.model << "`, criterion " << to_string(cfg.criterion)
           << ", sparsity " << cfg.pattern.to_string() << ", " << cfg.n_samples << " calibration samples of "
           << cfg.seq_len << " tokens.\n\n";
    }

    md << "## Baselines\n\n| seed | dense ppl | pruned ppl |\n|---:|---:|---:|\n";
    std::set<std::uint64_t> seen;
    for (const RecoveryReport & r : reports) {
        if (seen.insert(r.config.seed).second) {
            md << "| " << r.config.seed << " | " << fixed(r.ppl_dense, 4) << " | " << fixed(r.ppl_pruned, 4) << " |\n";
        }
    }

    md << "\n## Granularity ranking\n\nBest (strategy, loss, lr, epochs) cell per granularity by mean recovery "
          "over seeds.\n\n| rank | granularity | best cell | mean recovery | seeds |\n|---:|---|---|---:|---:|\n";
    const std::vector<GranularityRanking> ranking = rank_granularities(reports);
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        const GranularityRanking & g = ranking[i];
        md << "| " << i + 1 << " | " << g.granularity << " | " << g.best_cell << " | " << fixed(g.mean_recovery, 4)
           << " | " << g.seeds << " |\n";
    }

    // granularity x (strategy/loss) with the best lr/epochs per entry
    std::vector<std::string> columns;
    std::vector<std::string> rows;
    std::map<std::pair<std::string, std::string>, std::map<std::string, std::vector<double>>> cell_values;
    for (const RecoveryReport & r : reports) {
        const std::string col = r.config.strategy + "/" + r.config.loss;
        if (std::find(columns.begin(), columns.end(), col) == columns.end()) {
            columns.push_back(col);
        }
        if (std::find(rows.begin(), rows.end(), r.config.granularity) == rows.end()) {
            rows.push_back(r.config.granularity);
        }
        if (r.recovery) {
            const std::string sub = "lr=" + fmt_double(r.config.lr) + " ep=" + std::to_string(r.config.epochs);
            cell_values[{r.config.granularity, col}][sub].push_back(*r.recovery);
        }
    }
    md << "\n## Recovery by granularity and strategy/loss\n\nMean over seeds at the best lr and epochs.\n\n"
       << "| granularity |";
    for (const std::string & c : columns) {
        md << " " << c << " |";
    }
    md << "\n|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) {
        md << "---:|";
    }
    md << "\n";
    for (const std::string & row : rows) {
        md << "| " << row << " |";
        for (const std::string & col : columns) {
            const auto it = cell_values.find({row, col});
            if (it == cell_values.end()) {
                md << " - |";
                continue;
            }
            double best = -INFINITY;
            for (const auto & [sub, vals] : it->second) {
                best = std::max(best, std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size()));
            }
            md << " " << fixed(best, 4) << " |";
        }
        md << "\n";
    }

    md << "\n## Estimated peak memory\n\n| granularity | largest unit | trainable | frozen | activation floats | "
          "peak MiB |\n|---|---|---:|---:|---:|---:|\n";
    for (const Granularity & g : cfg.granularities) {
        const MemoryEstimate e =
            estimate_peak_memory(cfg.model, g, cfg.opt.batch_size, cfg.seq_len, cfg.train_norm_params);
        md << "| " << g.to_string() << " | " << e.unit << " | " << e.trainable_params << " | " << e.frozen_params
           << " | " << e.activation_floats << " | " << fixed(static_cast<double>(e.peak_bytes) / 1048576.0, 3)
           << " |\n";
    }

    md << "\n## Runs\n\n| granularity | strategy | loss | lr | epochs | seed | ppl | recovery |\n"
          "|---|---|---|---:|---:|---:|---:|---:|\n";
    for (const RecoveryReport & r : reports) {
        const RunFingerprint & f = r.config;
        md << "| " << f.granularity << " | " << f.strategy << " | " << f.loss << " | " << fmt_double(f.lr) << " | "
           << f.epochs << " | " << f.seed << " | " << fixed(r.ppl_reconstructed, 4) << " | "
           << (r.recovery ? fixed(*r.recovery, 4) : std::string("undefined")) << " |\n";
    }
    return md.str();
}

std::vector<RecoveryReport> assemble(const ExperimentConfig & cfg, const SweepContext & ctx, bool require_all) {
    const fs::path out(cfg.out_dir);
    std::vector<RecoveryReport> reports;
    std::string csv = std::string(kRunHeader) + "\n";
    for (const Cell & c : ctx.cells) {
        const auto cell = read_cell(out / "runs" / c.file, c.key);
        if (!cell) {
            if (require_all) {
                throw std::runtime_error("report: missing result for " + c.fp.key());
            }
            continue;
        }
        reports.push_back(cell->first);
        csv += cell->second + "\n";
    }
    write_atomic(out / "runs.csv", csv);
    write_atomic(out / "summary.md", summary_markdown(cfg, reports));
    return reports;
}

}  // namespace

std::string ExperimentConfig::dense_path() const {
    return dense_checkpoint.empty() ? (fs::path(out_dir) / "checkpoints" / "dense.ckpt").string() : dense_checkpoint;
}

void ExperimentConfig::validate() const {
    try {
        model.validate();
    } catch (const std::invalid_argument & e) {
        throw ConfigError(e.what());
    }
    if (model.vocab != kByteVocab) {
        throw ConfigError("config: vocab must be " + std::to_string(kByteVocab) + " for byte-level tokens");
    }
    if (corpus_path.empty()) {
        throw ConfigError("config: corpus path is required");
    }
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
        throw ConfigError("config: holdout_fraction must lie in (0, 1)");
    }
    if (seeds.empty()) {
        throw ConfigError("config: at least one calibration seed is required");
    }
    if (n_samples == 0 || seq_len < 2 || seq_len > model.seq_len) {
        throw ConfigError("config: need n_samples > 0 and 2 <= calibration seq_len <= model seq_len");
    }
    pattern.validate();
    if (granularities.empty() || strategies.empty() || losses.empty() || lrs.empty() || epochs.empty()) {
        throw ConfigError("config: every grid axis needs at least one value");
    }
    for (const Granularity & g : granularities) {
        if (g.kind == Granularity::Kind::blocks && (g.k < 1 || g.k > model.n_blocks)) {
            throw ConfigError("config: " + g.to_string() + " exceeds n_blocks " + std::to_string(model.n_blocks));
        }
    }
    for (double lr : lrs) {
        if (!(lr > 0.0) || !std::isfinite(lr)) {
            throw ConfigError("config: learning rates must be positive");
        }
    }
    if (opt.batch_size == 0 || train.batch_size == 0) {
        throw ConfigError("config: batch sizes must be positive");
    }
    if (ridge < 0.0) {
        throw ConfigError("config: ridge must be >= 0");
    }
}

ExperimentConfig config_from_json(const std::string & text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error & e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ExperimentConfig cfg;
    check_keys(j, "", {"model", "corpus", "holdout_fraction", "eval_windows", "train", "calibration", "prune",
                       "reconstruct", "output"});
    get(j, "corpus", cfg.corpus_path);
    get(j, "holdout_fraction", cfg.holdout_fraction);
    get(j, "eval_windows", cfg.eval_windows);
    if (j.contains("model")) {
        const json & m = j["model"];
        check_keys(m, "model", {"n_blocks", "d_model", "n_heads", "d_ff", "seq_len", "norm", "tie_lm_head"});
        get(m, "n_blocks", cfg.model.n_blocks);
        get(m, "d_model", cfg.model.d_model);
        get(m, "n_heads", cfg.model.n_heads);
        get(m, "d_ff", cfg.model.d_ff);
        get(m, "seq_len", cfg.model.seq_len);
        get(m, "tie_lm_head", cfg.model.tie_lm_head);
        if (m.contains("norm")) {
            std::string n;
            get(m, "norm", n);
            try {
                cfg.model.norm_kind = parse_norm_kind(n);
            } catch (const std::invalid_argument & e) {
                throw ConfigError(e.what());
            }
        }
    }
    cfg.seq_len = cfg.model.seq_len;
    if (j.contains("train")) {
        const json & t = j["train"];
        check_keys(t, "train",
                   {"max_steps", "batch_size", "lr", "warmup_frac", "weight_decay", "seed", "eval_every", "target_ppl"});
        get(t, "max_steps", cfg.train.max_steps);
        get(t, "batch_size", cfg.train.batch_size);
        get(t, "lr", cfg.train.lr);
        get(t, "warmup_frac", cfg.train.warmup_frac);
        get(t, "weight_decay", cfg.train.weight_decay);
        get(t, "seed", cfg.train.seed);
        get(t, "eval_every", cfg.train.eval_every);
        get(t, "target_ppl", cfg.train.target_ppl);
    }
    if (j.contains("calibration")) {
        const json & c = j["calibration"];
        check_keys(c, "calibration", {"n_samples", "seq_len", "seeds"});
        get(c, "n_samples", cfg.n_samples);
        get(c, "seq_len", cfg.seq_len);
        get(c, "seeds", cfg.seeds);
    }
    if (j.contains("prune")) {
        const json & p = j["prune"];
        check_keys(p, "prune", {"criterion", "pattern", "damping", "block_size"});
        if (p.contains("criterion")) {
            std::string s;
            get(p, "criterion", s);
            cfg.criterion = parse_criterion(s);
        }
        if (p.contains("pattern")) {
            std::string s;
            get(p, "pattern", s);
            cfg.pattern = SparsityPattern::parse(s);
        }
        if (p.contains("damping") && !p["damping"].is_null()) {
            double d = 0.0;
            get(p, "damping", d);
            cfg.sparsegpt.damping = d;
        }
        get(p, "block_size", cfg.sparsegpt.block_size);
    }
    if (j.contains("reconstruct")) {
        const json & r = j["reconstruct"];
        check_keys(r, "reconstruct",
                   {"granularities", "strategies", "losses", "lrs", "epochs", "batch_size", "warmup_frac", "beta1",
                    "beta2", "eps", "weight_decay", "train_norm_params", "per_matrix_solver", "ridge",
                    "include_retrain"});
        get_list(r, "granularities", cfg.granularities, parse_granularity);
        get_list(r, "strategies", cfg.strategies, parse_strategy);
        get_list(r, "losses", cfg.losses, parse_loss);
        get(r, "lrs", cfg.lrs);
        get(r, "epochs", cfg.epochs);
        get(r, "batch_size", cfg.opt.batch_size);
        get(r, "warmup_frac", cfg.opt.warmup_frac);
        get(r, "beta1", cfg.opt.beta1);
        get(r, "beta2", cfg.opt.beta2);
        get(r, "eps", cfg.opt.eps);
        get(r, "weight_decay", cfg.opt.weight_decay);
        get(r, "train_norm_params", cfg.train_norm_params);
        get(r, "ridge", cfg.ridge);
        get(r, "include_retrain", cfg.include_retrain);
        if (r.contains("per_matrix_solver")) {
            std::string s;
            get(r, "per_matrix_solver", s);
            if (s != "gradient" && s != "analytic") {
                throw ConfigError("config: per_matrix_solver must be 'gradient' or 'analytic'");
            }
            cfg.per_matrix_solver = s == "analytic" ? PerMatrixSolver::analytic : PerMatrixSolver::gradient;
        }
    }
    if (j.contains("output")) {
        const json & o = j["output"];
        check_keys(o, "output", {"dir", "dense_checkpoint", "save_run_checkpoints"});
        get(o, "dir", cfg.out_dir);
        get(o, "dense_checkpoint", cfg.dense_checkpoint);
        get(o, "save_run_checkpoints", cfg.save_run_checkpoints);
    }
    return cfg;
}

ExperimentConfig load_config(const std::string & path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("config: cannot open " + path);
    }
    return config_from_json(std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>()));
}

std::string config_to_json(const ExperimentConfig & cfg) {
    auto names = [](const auto & xs) {
        std::vector<std::string> out;
        for (const auto & x : xs) {
            if constexpr (std::is_same_v<std::decay_t<decltype(x)>, Granularity>) {
                out.push_back(x.to_string());
            } else {
                out.push_back(to_string(x));
            }
        }
        return out;
    };
    json j;
    j["model"] = {{"n_blocks", cfg.model.n_blocks}, {"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},   {"d_ff", cfg.model.d_ff},
                  {"seq_len", cfg.model.seq_len},   {"norm", to_string(cfg.model.norm_kind)},
                  {"tie_lm_head", cfg.model.tie_lm_head}};
    j["corpus"] = cfg.corpus_path;
    j["holdout_fraction"] = cfg.holdout_fraction;
    j["eval_windows"] = cfg.eval_windows;
    j["train"] = {{"max_steps", cfg.train.max_steps},     {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},                   {"warmup_frac", cfg.train.warmup_frac},
                  {"weight_decay", cfg.train.weight_decay}, {"seed", cfg.train.seed},
                  {"eval_every", cfg.train.eval_every},   {"target_ppl", cfg.train.target_ppl}};
    j["calibration"] = {{"n_samples", cfg.n_samples}, {"seq_len", cfg.seq_len}, {"seeds", cfg.seeds}};
    j["prune"] = {{"criterion", to_string(cfg.criterion)},
                  {"pattern", cfg.pattern.to_string()},
                  {"damping", cfg.sparsegpt.damping ? json(*cfg.sparsegpt.damping) : json(nullptr)},
                  {"block_size", cfg.sparsegpt.block_size}};
    j["reconstruct"] = {{"granularities", names(cfg.granularities)},
                        {"strategies", names(cfg.strategies)},
                        {"losses", names(cfg.losses)},
                        {"lrs", cfg.lrs},
                        {"epochs", cfg.epochs},
                        {"batch_size", cfg.opt.batch_size},
                        {"warmup_frac", cfg.opt.warmup_frac},
                        {"beta1", cfg.opt.beta1},
                        {"beta2", cfg.opt.beta2},
                        {"eps", cfg.opt.eps},
                        {"weight_decay", cfg.opt.weight_decay},
                        {"train_norm_params", cfg.train_norm_params},
                        {"per_matrix_solver", solver_name(cfg.per_matrix_solver)},
                        {"ridge", cfg.ridge},
                        {"include_retrain", cfg.include_retrain}};
    j["output"] = {{"dir", cfg.out_dir},
                   {"dense_checkpoint", cfg.dense_checkpoint},
                   {"save_run_checkpoints", cfg.save_run_checkpoints}};
    return j.dump(2) + "\n";
}

DenseTrainResult cmd_train_dense(const ExperimentConfig & cfg) {
    cfg.validate();
    if (!fs::exists(cfg.corpus_path)) {
        throw ConfigError("train-dense: corpus " + cfg.corpus_path + " not found");
    }
    const Corpus corpus = Corpus::from_file(cfg.corpus_path, cfg.holdout_fraction);
    const TokenMatrix holdout = holdout_windows(corpus, cfg.model.seq_len, cfg.eval_windows);
    const DenseTrainConfig & tc = cfg.train;

    GptModel model = GptModel::init(cfg.model, tc.seed);
    std::vector<Tensor *> tensors;
    for (Param & p : model.params()) {
        tensors.push_back(&p.dense);
        p.dense.requires_grad = true;
    }
    OptimConfig opt;
    opt.lr = tc.lr;
    opt.warmup_frac = tc.warmup_frac;
    opt.weight_decay = tc.weight_decay;
    AdamW adam(opt, tensors, std::vector<const Tensor *>(tensors.size(), nullptr));
    const Binder bind = dense_trainer(model);
    std::mt19937_64 rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);

    DenseTrainResult res;
    const std::size_t seq = cfg.model.seq_len;
    double interval_sum = 0.0;
    std::size_t interval_n = 0;
    for (std::size_t step = 0; step < tc.max_steps; ++step) {
        const TokenMatrix batch = train_batch(corpus, tc.batch_size, seq, rng);
        std::vector<int> targets(batch.ids.size(), -1);
        for (std::size_t r = 0; r < batch.rows; ++r) {
            for (std::size_t t = 0; t + 1 < seq; ++t) {
                targets[r * seq + t] = batch.ids[r * seq + t + 1];
            }
        }
        for (Tensor * t : tensors) {
            t->clear_grad();
        }
        Graph g;
        Var h = embed(g, model, batch, bind);
        for (std::size_t s = 0; s < 2 * cfg.model.n_blocks; ++s) {
            h = run_stage(g, model, s, h, seq, bind);
        }
        Var loss = g.cross_entropy(lm_logits(g, model, h, bind), targets);
        const double lv = loss.value().data[0];
        if (!std::isfinite(lv)) {
            throw NumericalError("train-dense: non-finite loss at step " + std::to_string(step) + "; lower the lr");
        }
        g.backward(loss);
        // Global-norm clipping at 1.
        double sq = 0.0;
        for (Tensor * t : tensors) {
            for (double v : t->grad) {
                sq += v * v;
            }
        }
        const double norm = std::sqrt(sq);
        if (norm > 1.0) {
            for (Tensor * t : tensors) {
                for (double & v : t->grad) {
                    v /= norm;
                }
            }
        }
        adam.step(scheduled_lr(opt, step, tc.max_steps));
        res.steps = step + 1;
        interval_sum += lv;
        ++interval_n;
        const bool last = step + 1 == tc.max_steps;
        if ((tc.eval_every && (step + 1) % tc.eval_every == 0) || last) {
            res.train_loss.push_back(interval_sum / static_cast<double>(interval_n));
            interval_sum = 0.0;
            interval_n = 0;
            if (tc.target_ppl > 0.0 && !last) {
                if (perplexity(model, holdout, WeightSet::dense) <= tc.target_ppl) {
                    break;
                }
            }
        }
    }
    for (Tensor * t : tensors) {
        t->requires_grad = false;
        t->clear_grad();
    }
    model.reset_pruning();
    res.holdout_ppl = perplexity(model, holdout, WeightSet::dense);
    res.unigram_ppl = unigram_perplexity(corpus, holdout);
    res.checkpoint = cfg.dense_path();
    fs::create_directories(fs::path(res.checkpoint).parent_path());
    save_checkpoint(model, res.checkpoint);
    return res;
}

SweepResult cmd_sweep(const ExperimentConfig & cfg, const SweepOptions & opts) {
    cfg.validate();
    const SweepContext ctx = plan_sweep(cfg);
    const fs::path out(cfg.out_dir);
    fs::create_directories(out / "runs");
    write_atomic(out / "config.json", config_to_json(cfg));

    SweepResult res;
    // Everything below is loaded lazily so a finished sweep does no work.
    std::optional<GptModel> dense;
    std::optional<Corpus> corpus;
    std::optional<TokenMatrix> holdout;
    double ppl_dense = 0.0;
    std::uint64_t cached_seed = 0;
    std::optional<CalibrationSet> calib;
    std::optional<GptModel> pruned;
    double ppl_pruned = 0.0;

    for (const Cell & c : ctx.cells) {
        const fs::path file = out / "runs" / c.file;
        if (read_cell(file, c.key)) {
            ++res.skipped;
            continue;
        }
        if (opts.max_new_cells && res.executed >= opts.max_new_cells) {
            return res;
        }
        if (!dense) {
            dense = load_checkpoint(cfg.dense_path());
            if (!(dense->config() == cfg.model)) {
                throw ConfigError("sweep: checkpoint model config differs from the experiment config");
            }
            corpus = Corpus::from_file(cfg.corpus_path, cfg.holdout_fraction);
            holdout = holdout_windows(*corpus, cfg.model.seq_len, cfg.eval_windows);
            ppl_dense = perplexity(*dense, *holdout, WeightSet::dense);
        }
        if (!pruned || cached_seed != c.fp.seed) {
            cached_seed = c.fp.seed;
            calib = sample_calibration(*corpus, cfg.n_samples, cfg.seq_len, c.fp.seed);
            pruned = *dense;
            prune_model(*pruned, calib->tokens, PruneOptions{cfg.criterion, cfg.pattern, cfg.sparsegpt});
            ppl_pruned = perplexity(*pruned, *holdout, WeightSet::pruned);
        }

        GptModel model = *pruned;
        OptimConfig opt = cfg.opt;
        opt.lr = c.fp.lr;
        opt.epochs = c.fp.epochs;
        opt.seed = c.fp.seed;
        std::string status = "ok";
        std::size_t peak = 0;
        std::vector<TraceRow> trace;
        double ppl_recon = NAN;
        try {
            if (c.retrain) {
                const std::vector<double> losses = retrain_full(model, calib->tokens, opt);
                for (std::size_t e = 0; e < losses.size(); ++e) {
                    trace.push_back({0, "model", e, losses[e], opt.lr});
                }
            } else {
                PipelineConfig pc;
                pc.granularity = c.granularity;
                pc.strategy = c.strategy;
                pc.loss = c.loss;
                pc.opt = opt;
                pc.train_norm_params = cfg.train_norm_params;
                pc.per_matrix_solver = cfg.per_matrix_solver;
                pc.ridge = cfg.ridge;
                trace = run_pipeline(model, calib->tokens, pc).trace;
                peak = estimate_peak_memory(cfg.model, c.granularity, opt.batch_size, cfg.seq_len,
                                            cfg.train_norm_params)
                           .peak_bytes;
            }
            model.check_masks();
            ppl_recon = perplexity(model, *holdout, WeightSet::pruned);
        } catch (const NumericalError & e) {
            status = std::string("failed: ") + e.what();
        }
        RecoveryReport report = make_report(c.fp, ppl_dense, ppl_pruned, ppl_recon);
        if (!std::isfinite(ppl_recon)) {
            report.recovery.reset();
        }
        std::ostringstream tr;
        write_trace_csv(tr, trace);
        write_atomic(out / "runs" / (c.file.substr(0, c.file.size() - 4) + ".trace.csv"), tr.str());
        if (cfg.save_run_checkpoints) {
            fs::create_directories(out / "checkpoints");
            save_checkpoint(model, (out / "checkpoints" / (c.file.substr(0, c.file.size() - 4) + ".ckpt")).string());
        }
        write_atomic(file, std::string(kRunHeader) + "\n" + run_row(report, c.key, peak, status) + "\n");
        ++res.executed;
        if (opts.verbose) {
            std::cerr << c.fp.key() << " ppl=" << ppl_recon << " recovery="
                      << (report.recovery ? fmt_double(*report.recovery) : "undefined") << " [" << status << "]\n";
        }
    }
    res.reports = assemble(cfg, ctx, true);
    res.complete = true;
    res.summary_path = (out / "summary.md").string();
    return res;
}

std::vector<RecoveryReport> cmd_report(const ExperimentConfig & cfg) {
    cfg.validate();
    return assemble(cfg, plan_sweep(cfg), false);
}

std::vector<GranularityRanking> rank_granularities(const std::vector<RecoveryReport> & reports) {
    // granularity -> cell -> per-seed recoveries
    std::map<std::string, std::map<std::string, std::vector<double>>> groups;
    std::vector<std::string> order;
    for (const RecoveryReport & r : reports) {
        const RunFingerprint & f = r.config;
        if (std::find(order.begin(), order.end(), f.granularity) == order.end()) {
            order.push_back(f.granularity);
        }
        if (!r.recovery) {
            continue;
        }
        const std::string cell = f.strategy + "/" + f.loss + " lr=" + fmt_double(f.lr) + " ep=" + std::to_string(f.epochs);
        groups[f.granularity][cell].push_back(*r.recovery);
    }
    std::vector<GranularityRanking> out;
    for (const std::string & g : order) {
        const auto it = groups.find(g);
        if (it == groups.end()) {
            continue;
        }
        GranularityRanking best{g, "", -INFINITY, 0};
        for (const auto & [cell, vals] : it->second) {
            const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
            if (mean > best.mean_recovery) {
                best = {g, cell, mean, vals.size()};
            }
        }
        out.push_back(best);
    }
    std::stable_sort(out.begin(), out.end(), [](const GranularityRanking & a, const GranularityRanking & b) {
        return a.mean_recovery > b.mean_recovery;
    });
    return out;
}

}  // namespace recon
