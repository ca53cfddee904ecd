// SPDX-License-Identifier: Apache-2.0

#include "helpers.h"

#include "recon/model.h"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace recon;
using namespace recon::test;

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.d_ff = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("embedding and LM head carry no mask, every block matrix does") {
    const GptModel m = tiny_model(1);
    CHECK_FALSE(m.param(m.tok_embed()).prunable());
    CHECK_FALSE(m.param(m.pos_embed()).prunable());
    CHECK_FALSE(m.param(m.lm_head()).prunable());
    CHECK(m.prunable_params().size() == 6 * m.config().n_blocks);
    for (std::size_t i : m.prunable_params()) {
        CHECK(m.param(i).mask.shape == m.param(i).dense.shape);
    }
    CHECK(m.param(m.matrix_param(0, MatrixKind::w1)).dense.shape == Shape{16, 8});
    CHECK(m.param(m.matrix_param(0, MatrixKind::w2)).dense.shape == Shape{8, 16});
}

TEST_CASE("tied LM head shares the token embedding") {
    ModelConfig c = tiny_config();
    c.tie_lm_head = true;
    const GptModel m = GptModel::init(c, 2);
    CHECK(m.lm_head() == m.tok_embed());
}

TEST_CASE("all-ones masks give bit-identical dense and pruned taps") {
    for (NormKind nk : {NormKind::layernorm, NormKind::rmsnorm}) {
        const GptModel m = tiny_model(3, 2, nk);
        const TokenMatrix tok = random_tokens(5, 8, 4);
        const ForwardTaps d = forward_with_taps(m, tok, WeightSet::dense, {true, true});
        const ForwardTaps p = forward_with_taps(m, tok, WeightSet::pruned, {true, true});
        REQUIRE(d.residual.size() == 5);
        for (std::size_t i = 0; i < d.residual.size(); ++i) {
            CHECK(bit_equal(d.residual[i], p.residual[i]));
        }
        CHECK(bit_equal(d.logits, p.logits));
        CHECK(d.logits.shape == Shape{40, 258});
    }
}

TEST_CASE("final tap is the hidden state entering the LM head") {
    const GptModel m = tiny_model(5, 1);
    const TokenMatrix tok = random_tokens(2, 8, 6);
    const ForwardTaps t = forward_with_taps(m, tok, WeightSet::dense);
    Graph g;
    Var logits = lm_logits(g, m, g.input(t.residual.back()), bind_weights(m, WeightSet::dense));
    CHECK(bit_equal(logits.value(), t.logits));
}

TEST_CASE("zeroing an MLP matrix changes exactly the taps at and after its unit") {
    GptModel m = tiny_model(7, 2);
    const TokenMatrix tok = random_tokens(3, 8, 8);
    const ForwardTaps before = forward_with_taps(m, tok, WeightSet::pruned);
    Param & w2 = m.param(m.matrix_param(1, MatrixKind::w2));  // stage 3, tap 4
    std::fill(w2.pruned.data.begin(), w2.pruned.data.end(), 0.0);
    const ForwardTaps after = forward_with_taps(m, tok, WeightSet::pruned);
    for (std::size_t i = 0; i < before.residual.size(); ++i) {
        CAPTURE(i);
        CHECK(bit_equal(before.residual[i], after.residual[i]) == (i < 4));
    }
}

TEST_CASE("token ids outside the vocabulary are rejected") {
    const GptModel m = tiny_model(9);
    TokenMatrix tok = random_tokens(1, 8, 1);
    tok.ids[3] = 258;
    CHECK_THROWS_AS(forward_with_taps(m, tok, WeightSet::dense), std::out_of_range);
}

TEST_CASE("taps do not depend on how rows are chunked") {
    const GptModel m = tiny_model(10);
    const TokenMatrix tok = random_tokens(5, 8, 2);
    const ForwardTaps all = forward_with_taps(m, tok, WeightSet::dense);
    const ForwardTaps tail = forward_with_taps(m, tok.slice_rows(2, 4), WeightSet::dense);
    for (std::size_t i = 0; i < all.residual.size(); ++i) {
        const Tensor & a = all.residual[i];
        const std::vector<double> part(a.data.begin() + 16 * 8, a.data.begin() + 32 * 8);
        CHECK(part == tail.residual[i].data);
    }
}

TEST_CASE("run_stages reproduces the forward taps") {
    const GptModel m = tiny_model(12);
    const TokenMatrix tok = random_tokens(4, 8, 3);
    const ForwardTaps t = forward_with_taps(m, tok, WeightSet::dense, {true, false});
    const StageRun run = run_stages(m, t.residual[1], 8, 1, 4, WeightSet::dense, true);
    for (std::size_t s = 1; s < 4; ++s) {
        CHECK(bit_equal(run.residual[s - 1], t.residual[s + 1]));
    }
    CHECK(bit_equal(run.matrix_inputs[0].hidden, t.matrix_inputs[0].hidden));
    CHECK(bit_equal(run.matrix_inputs[1].context, t.matrix_inputs[1].context));
    CHECK(run.matrix_inputs[0].attn_in.data.empty());
    CHECK_THROWS_AS(run_stages(m, t.residual[0], 8, 2, 5, WeightSet::dense), std::out_of_range);
    CHECK_THROWS_AS(run_stages(m, t.residual[0], 7, 0, 1, WeightSet::dense), ShapeError);
}

TEST_CASE("split unit counts") {
    const GptModel m4 = GptModel::init([] {
        ModelConfig c = tiny_config(4);
        return c;
    }(), 1);
    CHECK(split(m4, Granularity::half_block()).size() == 8);
    const auto b2 = split(m4, Granularity::blocks(2));
    REQUIRE(b2.size() == 2);
    CHECK(b2[0].stage_begin == 0);
    CHECK(b2[0].stage_end == 4);
    CHECK(b2[1].stage_end == 8);
    CHECK(split(m4, Granularity::blocks(3)).size() == 2);
    CHECK_THROWS_AS(split(m4, Granularity::blocks(5)), std::invalid_argument);

    const GptModel m24 = GptModel::skeleton(tiny_config(24));
    const auto pm = split(m24, Granularity::per_matrix());
    std::size_t enumerated = 0;
    for (std::size_t b = 0; b < 24; ++b) {
        for (MatrixKind k : kMatrixKinds) {
            const auto it = std::find_if(pm.begin(), pm.end(), [&](const ReconUnit & u) {
                return u.input.index == b && u.input.matrix == k;
            });
            enumerated += it != pm.end();
        }
    }
    CHECK(pm.size() == 144);
    CHECK(enumerated == 144);

    const auto fd = split(m4, Granularity::full_decoder());
    REQUIRE(fd.size() == 1);
    CHECK(fd[0].freeze_embedding);
    CHECK(fd[0].exclude_lm_head);
    CHECK(fd[0].stage_end == 8);
}

TEST_CASE("splits cover every prunable matrix exactly once, in depth order") {
    const GptModel m = GptModel::skeleton(tiny_config(4));
    const std::vector<std::size_t> prunable = m.prunable_params();
    for (const Granularity & g : {Granularity::per_matrix(), Granularity::half_block(), Granularity::blocks(1),
                                  Granularity::blocks(2), Granularity::blocks(3), Granularity::full_decoder()}) {
        CAPTURE(g.to_string());
        for (bool norms : {false, true}) {
            std::multiset<std::size_t> seen;
            std::size_t last_stage = 0;
            for (const ReconUnit & u : split(m, g, norms)) {
                CHECK(u.stage_begin >= last_stage);
                last_stage = u.stage_begin;
                for (std::size_t p : u.params) {
                    seen.insert(p);
                }
            }
            for (std::size_t p : prunable) {
                CHECK(seen.count(p) == 1);
            }
            for (std::size_t p : seen) {
                CHECK(seen.count(p) == 1);
                if (!norms) {
                    CHECK(m.param(p).prunable());
                }
            }
        }
    }
}

TEST_CASE("granularity names round-trip") {
    for (const char * s : {"per-matrix", "half-block", "blocks-1", "blocks-12", "full-decoder"}) {
        CHECK(Granularity::parse(s).to_string() == s);
    }
    CHECK_THROWS_AS(Granularity::parse("blocks-0"), std::invalid_argument);
    CHECK_THROWS_AS(Granularity::parse("block"), std::invalid_argument);
}

TEST_CASE("check_masks catches nonzero pruned entries") {
    GptModel m = tiny_model(13);
    random_prune(m, 1);
    CHECK_NOTHROW(m.check_masks());
    Param & p = m.param(m.prunable_params().front());
    const auto it = std::find(p.mask.data.begin(), p.mask.data.end(), 0.0);
    p.pruned.data[static_cast<std::size_t>(it - p.mask.data.begin())] = 1e-30;
    CHECK_THROWS_AS(m.check_masks(), std::logic_error);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    for (bool tie : {false, true}) {
        ModelConfig c = tiny_config(2, tie ? NormKind::rmsnorm : NormKind::layernorm);
        c.tie_lm_head = tie;
        GptModel m = GptModel::init(c, 4);
        random_prune(m, 5);
        m.param(m.prunable_params()[2]).pruned.data[0] = -0.0;
        const auto path = std::filesystem::temp_directory_path() / ("recon_ckpt_" + std::to_string(tie) + ".ckpt");
        save_checkpoint(m, path.string());
        const GptModel r = load_checkpoint(path.string());
        CHECK(r.config() == m.config());
        REQUIRE(r.params().size() == m.params().size());
        for (std::size_t i = 0; i < m.params().size(); ++i) {
            CHECK(r.param(i).name == m.param(i).name);
            CHECK(bit_equal(r.param(i).dense, m.param(i).dense));
            CHECK(bit_equal(r.param(i).pruned, m.param(i).pruned));
            CHECK(bit_equal(r.param(i).mask, m.param(i).mask));
        }
        std::filesystem::remove(path);
    }
}

TEST_CASE("corrupt checkpoints are rejected") {
    const auto path = std::filesystem::temp_directory_path() / "recon_bad.ckpt";
    {
        std::ofstream os(path);
        os << "RECONLAB-CHECKPOINT 1\n[config]\nn_blocks = 2\n";
    }
    CHECK_THROWS(load_checkpoint(path.string()));
    CHECK_THROWS(load_checkpoint("/nonexistent/recon.ckpt"));
    std::filesystem::remove(path);
}

TEST_CASE("init is deterministic in the seed") {
    const GptModel a = GptModel::init(tiny_config(), 42);
    const GptModel b = GptModel::init(tiny_config(), 42);
    const GptModel c = GptModel::init(tiny_config(), 43);
    CHECK(bit_equal(a.param(a.tok_embed()).dense, b.param(b.tok_embed()).dense));
    CHECK_FALSE(bit_equal(a.param(a.tok_embed()).dense, c.param(c.tok_embed()).dense));
}

TEST_CASE("model gradients match finite differences") {
    GptModel m = tiny_model(14);
    const TokenMatrix tok = random_tokens(2, 8, 15);
    std::vector<int> targets(tok.ids.size(), -1);
    for (std::size_t i = 0; i + 1 < tok.ids.size(); ++i) {
        if ((i + 1) % 8 != 0) {
            targets[i] = tok.ids[i + 1];
        }
    }
    std::vector<Tensor *> leaves;
    for (Param & p : m.params()) {
        leaves.push_back(&p.dense);
    }
    auto r = fd_check(leaves, [&](Graph & g) {
        Binder bind = [&](Graph & gg, std::size_t i) { return gg.param(m.param(i).dense); };
        Var h = embed(g, m, tok, bind);
        for (std::size_t s = 0; s < 4; ++s) {
            h = run_stage(g, m, s, h, 8, bind);
        }
        return g.cross_entropy(lm_logits(g, m, h, bind), targets);
    }, 100, 3);
    CHECK(r.checked == 100);
    CHECK(r.max_rel <= 1e-5);
}
