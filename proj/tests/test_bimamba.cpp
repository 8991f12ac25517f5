#include <cmath>

#include "doctest.h"
#include "genemamba/bimamba.hpp"
#include "genemamba/error.hpp"
#include "genemamba/random.hpp"

using namespace genemamba;

namespace {

ModelConfig small_config(std::size_t layers = 2) {
    ModelConfig c;
    c.vocab_size = 30;
    c.d_model = 8;
    c.n_layers = layers;
    c.d_state = 4;
    c.max_len = 32;
    return c;
}

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<TokenId> t;
    for (std::size_t i = 0; i < n; ++i) t.push_back(static_cast<TokenId>(2 + rng.below(vocab - 2)));
    return t;
}

Mat random_hidden(Rng& rng, Eigen::Index n, Eigen::Index d) {
    Mat m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("reverse_valid keeps padding in place") {
    const auto batch = SequenceBatch::from_sequences({make_sequence({5, 6, 7}, 4), make_sequence({}, 4), make_sequence({2, 3, 4, 9}, 4)});
    const auto rev = reverse_valid(batch);
    CHECK(rev.tokens(0, 0) == 7);
    CHECK(rev.tokens(0, 1) == 6);
    CHECK(rev.tokens(0, 2) == 5);
    CHECK(rev.tokens(0, 3) == Vocabulary::kPad);
    CHECK(rev.tokens.row(1) == batch.tokens.row(1));
    CHECK(rev.tokens(2, 0) == 9);
    CHECK(rev.mask == batch.mask);
    const auto twice = reverse_valid(rev);
    CHECK(twice.tokens == batch.tokens);

    Rng rng(1);
    const Mat h = random_hidden(rng, 6, 3);
    CHECK(reverse_valid(reverse_valid(h, 4), 4) == h);
    CHECK(reverse_valid(h, 4).bottomRows(2) == h.bottomRows(2));

    auto bad = batch;
    bad.mask(0, 1) = false;
    CHECK_THROWS_AS(reverse_valid(bad), InputError);
}

TEST_CASE("forced gates select one branch exactly") {
    const auto model = ModelParams::init(small_config(1), 3);
    Rng rng(2);
    const Mat x = random_hidden(rng, 7, 8);
    auto block = model.blocks[0];
    block.gate_w.setZero();

    block.gate_b.setConstant(40.0);
    BlockTrace on;
    block_forward(block, x, 1e-6, nullptr, &on);
    CHECK((on.gate.array() == 1.0).all());
    CHECK(on.mixed == on.forward_branch);

    block.gate_b.setConstant(-800.0);
    BlockTrace off;
    block_forward(block, x, 1e-6, nullptr, &off);
    CHECK((off.gate.array() == 0.0).all());
    CHECK(off.mixed == off.backward_branch);
}

TEST_CASE("length-one sequences make the gate irrelevant") {
    auto model = ModelParams::init(small_config(1), 4);
    Rng rng(3);
    const Mat x = random_hidden(rng, 1, 8);
    BlockTrace a;
    block_forward(model.blocks[0], x, 1e-6, nullptr, &a);
    CHECK(a.forward_branch == a.backward_branch);
    model.blocks[0].gate_b.setConstant(3.0);
    BlockTrace b;
    block_forward(model.blocks[0], x, 1e-6, nullptr, &b);
    CHECK((a.output - b.output).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((a.mixed - a.forward_branch).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("gate values lie strictly inside (0, 1) and mixing is convex") {
    const auto model = ModelParams::init(small_config(1), 5);
    Rng rng(4);
    const Mat x = random_hidden(rng, 9, 8);
    BlockTrace t;
    block_forward(model.blocks[0], x, 1e-6, nullptr, &t);
    CHECK((t.gate.array() > 0.0).all());
    CHECK((t.gate.array() < 1.0).all());
    const Mat lo = t.forward_branch.cwiseMin(t.backward_branch);
    const Mat hi = t.forward_branch.cwiseMax(t.backward_branch);
    CHECK(((t.mixed - lo).array() >= -1e-15).all());
    CHECK(((hi - t.mixed).array() >= -1e-15).all());
}

TEST_CASE("direction symmetry of the shared-weight branches") {
    const auto model = ModelParams::init(small_config(1), 6);
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto n = static_cast<Eigen::Index>(1 + rng.below(12));
        const Mat x = random_hidden(rng, n, 8);
        BlockTrace on_s, on_rev;
        block_forward(model.blocks[0], x, 1e-6, nullptr, &on_s);
        block_forward(model.blocks[0], reverse_valid(x, static_cast<std::size_t>(n)), 1e-6, nullptr, &on_rev);
        CHECK((on_rev.forward_branch - reverse_valid(on_s.backward_branch, static_cast<std::size_t>(n))).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("stack_forward") {
    CHECK_THROWS_AS(ModelParams::init(small_config(0), 1), ConfigError);

    const auto model = ModelParams::init(small_config(2), 7);
    Rng rng(6);
    const auto toks = random_tokens(rng, 10, 30);
    const auto batch = SequenceBatch::from_sequences({make_sequence(toks, 12), make_sequence({2, 3}, 12)});
    const auto a = stack_forward(model, batch);
    const auto b = stack_forward(model, batch, 2);
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
    CHECK(a[1].bottomRows(10).cwiseAbs().maxCoeff() == 0.0);

    // Appending padding leaves valid positions untouched.
    const auto longer = SequenceBatch::from_sequences({make_sequence(toks, 20), make_sequence({2, 3}, 20)});
    const auto c = stack_forward(model, longer);
    CHECK((c[0].topRows(10) - a[0].topRows(10)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((c[1].topRows(2) - a[1].topRows(2)).cwiseAbs().maxCoeff() <= 1e-12);

    auto bad = batch;
    bad.tokens(0, 0) = 99;
    CHECK_THROWS_AS(stack_forward(model, bad), InputError);
}

TEST_CASE("logits head") {
    auto cfg = small_config(1);
    auto model = ModelParams::init(cfg, 8);
    const Mat zero = Mat::Zero(3, 8);
    const Mat l = logits(model, zero);
    CHECK(l.cwiseAbs().maxCoeff() == 0.0);

    cfg.tied_head = true;
    auto tied = ModelParams::init(cfg, 8);
    Rng rng(7);
    const Mat h = random_hidden(rng, 4, 8);
    CHECK((logits(tied, h) - h * tied.embedding.transpose()).cwiseAbs().maxCoeff() == 0.0);

    const Mat lh = logits(model, h);
    for (Eigen::Index r = 0; r < lh.rows(); ++r) {
        const Vec row = lh.row(r).transpose();
        const double m = row.maxCoeff();
        const Vec p = (row.array() - m).exp().matrix();
        CHECK(std::abs((p / p.sum()).sum() - 1.0) <= 1e-12);
    }
}

TEST_CASE("cell embeddings") {
    const auto model = ModelParams::init(small_config(2), 9);
    Rng rng(8);
    auto toks = random_tokens(rng, 6, 30);
    toks.insert(toks.begin(), Vocabulary::kCls);
    const auto batch = SequenceBatch::from_sequences({make_sequence(toks, 8), make_sequence({5}, 8)});
    const auto hidden = stack_forward(model, batch);
    const Mat mean = cell_embedding(model, batch, PoolMode::Mean);
    CHECK((mean.row(1) - hidden[1].row(0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((mean.row(0) - hidden[0].topRows(7).colwise().mean()).cwiseAbs().maxCoeff() < 1e-14);

    const auto longer = SequenceBatch::from_sequences({make_sequence(toks, 16), make_sequence({5}, 16)});
    CHECK((cell_embedding(model, longer, PoolMode::Mean) - mean).cwiseAbs().maxCoeff() <= 1e-12);

    const auto cls_only = SequenceBatch::from_sequences({make_sequence(toks, 8)});
    CHECK((cell_embedding(model, cls_only, PoolMode::Cls).row(0) - hidden[0].row(0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(cell_embedding(model, batch, PoolMode::Cls), InputError);
}

TEST_CASE("parameter visitor covers the model") {
    auto cfg = small_config(2);
    const auto model = ModelParams::init(cfg, 1);
    std::size_t tensors = 0;
    model.visit([&](const std::string&, const auto&) { ++tensors; });
    CHECK(tensors == 1 + 2 * 13 + 3);
    const std::size_t E = cfg.inner();
    const std::size_t per_block = 8 + 2 * E * 8 + E * 4 + E + E * E + E + 2 * 4 * E + E * 4 + E + 8 * E + 8 * 16 + 8;
    CHECK(model.parameter_count() == 30 * 8 + 2 * per_block + 8 + 30 * 8 + 30);
}
