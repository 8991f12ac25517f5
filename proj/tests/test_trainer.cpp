#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "genemamba/error.hpp"
#include "genemamba/random.hpp"
#include "genemamba/synthetic.hpp"
#include "genemamba/trainer.hpp"

using namespace genemamba;

namespace {

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TrainConfig small_train(std::size_t vocab, std::size_t max_len) {
    TrainConfig c;
    c.model.vocab_size = vocab;
    c.model.max_len = max_len;
    c.model.d_model = 8;
    c.model.n_layers = 1;
    c.model.d_state = 4;
    c.batch_size = 4;
    c.learning_rate = 1e-2;
    c.seed = 3;
    return c;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
    const auto ra = tensor_refs(a);
    const auto rb = tensor_refs(b);
    if (ra.size() != rb.size()) return false;
    for (std::size_t i = 0; i < ra.size(); ++i)
        if (ra[i].size() != rb[i].size() || !(ra[i].array() == rb[i].array()).all()) return false;
    return true;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() : path(std::filesystem::temp_directory_path() / ("gm_trainer_" + std::to_string(::getpid()))) {
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("adam and clipping") {
    Vec p = Vec::Constant(3, 1.0);
    Vec g(3);
    g << 0.5, -2.0, 0.0;
    std::vector<TensorRef> params{TensorRef(p.data(), 3)};
    std::vector<ConstTensorRef> grads{ConstTensorRef(g.data(), 3)};
    auto st = adam_init({ConstTensorRef(p.data(), 3)});
    adam_step(params, grads, st, 0.1, {});
    // First bias-corrected step moves each coordinate by lr * sign(g).
    CHECK(p(0) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p(1) == doctest::Approx(1.1).epsilon(1e-6));
    CHECK(p(2) == 1.0);
    CHECK(st.step == 1);

    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        Vec a(7), b(3);
        for (auto& x : a) x = rng.normal() * 10;
        for (auto& x : b) x = rng.normal() * 10;
        std::vector<TensorRef> gs{TensorRef(a.data(), 7), TensorRef(b.data(), 3)};
        const double bound = rng.uniform(0.01, 5.0);
        const double before = clip_global_norm(gs, bound);
        const double after = global_norm({ConstTensorRef(a.data(), 7), ConstTensorRef(b.data(), 3)});
        CHECK(after <= bound);
        if (before > bound) CHECK(after == doctest::Approx(bound).epsilon(1e-12));
    }
    Vec small = Vec::Constant(2, 0.1);
    std::vector<TensorRef> sg{TensorRef(small.data(), 2)};
    clip_global_norm(sg, 10.0);
    CHECK(small(0) == 0.1);
}

TEST_CASE("config file parsing") {
    const auto c = parse_train_config("# comment\nlearning_rate = 0.5\nbatch_size=3\n d_model = 12 \ntied_head = true\n");
    CHECK(c.learning_rate == 0.5);
    CHECK(c.batch_size == 3);
    CHECK(c.model.d_model == 12);
    CHECK(c.model.tied_head);
    CHECK(parse_train_config(format_train_config(c)).learning_rate == c.learning_rate);
    CHECK_THROWS_AS(parse_train_config("nonsense = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("batch_size = x\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("just words\n"), ConfigError);
    TrainConfig bad;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.tau = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip and rejection") {
    TempDir dir;
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.d_model = 6;
    cfg.n_layers = 2;
    cfg.d_state = 3;
    cfg.max_len = 10;
    const auto model = ModelParams::init(cfg, 4);
    const auto p1 = dir.file("a.ckpt");
    const auto p2 = dir.file("b.ckpt");
    save_checkpoint(model, p1);
    const auto back = load_checkpoint(p1, &cfg);
    CHECK(same_params(model, back));
    save_checkpoint(back, p2);
    CHECK(read_bytes(p1) == read_bytes(p2));

    auto other = cfg;
    other.d_model = 8;
    CHECK_THROWS_AS(load_checkpoint(p1, &other), StateError);

    const auto bytes = read_bytes(p1);
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        std::ofstream(p2, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(cut));
        CHECK_THROWS_AS(load_checkpoint(p2), StateError);
    }
    auto bumped = bytes;
    bumped[4] = 9;
    std::ofstream(p2, std::ios::binary | std::ios::trunc).write(bumped.data(), static_cast<std::streamsize>(bumped.size()));
    CHECK_THROWS_WITH_AS(load_checkpoint(p2), doctest::Contains("version"), StateError);
    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.ckpt")), StateError);
}

TEST_CASE("training loop") {
    const auto corpus = synth::memorization_corpus(12, 24, 8, 5);
    const PathwaySet none;
    auto cfg = small_train(24, 8);
    cfg.max_steps = 6;

    SUBCASE("zero learning rate leaves parameters untouched") {
        cfg.learning_rate = 0.0;
        const auto init = ModelParams::init(cfg.model, derive_seed(cfg.seed, 0));
        const auto r = train(cfg, corpus.data, none);
        CHECK(same_params(init, r.state.model));
        CHECK(r.log.size() == 6);
    }

    SUBCASE("loss decreases and runs repeat exactly") {
        cfg.max_steps = 80;
        std::ostringstream m1, m2;
        TrainOptions o1, o2;
        o1.metrics = &m1;
        o2.metrics = &m2;
        const auto a = train(cfg, corpus.data, none, o1);
        const auto b = train(cfg, corpus.data, none, o2);
        CHECK(m1.str() == m2.str());
        CHECK(same_params(a.state.model, b.state.model));
        double first = 0, last = 0;
        for (std::size_t i = 0; i < 3; ++i) first += a.log[i].total;
        for (std::size_t i = a.log.size() - 3; i < a.log.size(); ++i) last += a.log[i].total;
        CHECK(last < first);
        CHECK(m1.str().rfind("step=1 l_lang=", 0) == 0);

        cfg.threads = 3;
        const auto c = train(cfg, corpus.data, none);
        CHECK(same_params(a.state.model, c.state.model));
    }

    SUBCASE("resume equals an uninterrupted run") {
        TempDir dir;
        cfg.max_steps = 10;
        cfg.checkpoint_every = 5;
        const auto full = train(cfg, corpus.data, none);

        auto half = cfg;
        half.max_steps = 5;
        TrainOptions opt;
        opt.checkpoint_path = dir.file("half.ckpt");
        train(half, corpus.data, none, opt);
        const auto state = load_train_state(opt.checkpoint_path);
        CHECK(state.step == 5);
        TrainOptions resume;
        resume.resume = &state;
        const auto rest = train(cfg, corpus.data, none, resume);
        CHECK(rest.log.size() == 5);
        CHECK(rest.log.front().step == 6);
        CHECK(same_params(full.state.model, rest.state.model));
        CHECK(rest.log.back().total == full.log.back().total);
    }

    SUBCASE("checkpoint files are deterministic") {
        TempDir dir;
        TrainOptions o1, o2;
        o1.checkpoint_path = dir.file("x.ckpt");
        o2.checkpoint_path = dir.file("y.ckpt");
        train(cfg, corpus.data, none, o1);
        train(cfg, corpus.data, none, o2);
        CHECK(read_bytes(o1.checkpoint_path) == read_bytes(o2.checkpoint_path));
    }

    SUBCASE("non-finite values abort and keep the last checkpoint") {
        TempDir dir;
        TrainOptions opt;
        opt.checkpoint_path = dir.file("n.ckpt");
        cfg.max_steps = 2;
        train(cfg, corpus.data, none, opt);
        const auto good = read_bytes(opt.checkpoint_path);
        auto state = load_train_state(opt.checkpoint_path);
        state.model.final_norm(0) = std::numeric_limits<real>::quiet_NaN();
        opt.resume = &state;
        cfg.max_steps = 4;
        CHECK_THROWS_AS(train(cfg, corpus.data, none, opt), NumericError);
        CHECK(read_bytes(opt.checkpoint_path) == good);
    }

    SUBCASE("mismatched resume is rejected") {
        const auto r = train(cfg, corpus.data, none);
        auto wider = cfg;
        wider.model.d_model = 10;
        TrainOptions opt;
        opt.resume = &r.state;
        CHECK_THROWS_AS(train(wider, corpus.data, none, opt), StateError);
    }

    TokenizedDataset empty;
    CHECK_THROWS_AS(train(cfg, empty, none), InputError);
}

TEST_CASE("classification metrics") {
    const auto perfect = classification_metrics({0, 1, 2, 1}, {0, 1, 2, 1});
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.macro_f1 == 1.0);
    // class 0: tp 1 fp 1 fn 0 -> 2/3; class 1: tp 1 fp 0 fn 1 -> 2/3
    const auto m = classification_metrics({0, 1, 1}, {0, 0, 1});
    CHECK(m.accuracy == doctest::Approx(2.0 / 3));
    CHECK(m.macro_f1 == doctest::Approx(2.0 / 3));
    const auto wrong = classification_metrics({0, 0}, {1, 1});
    CHECK(wrong.accuracy == 0.0);
    CHECK(wrong.macro_f1 == 0.0);
}

TEST_CASE("stratified split") {
    std::vector<CellMeta> labels;
    for (int i = 0; i < 30; ++i) labels.push_back({i % 3 == 0 ? "a" : "b", "x", ""});
    labels.push_back({"lonely", "x", ""});
    const auto s = stratified_split(labels, 0.1, 1);
    CHECK(s.train.size() + s.test.size() == labels.size());
    CHECK(s.test.size() == 3);  // 1 of 10 "a", 2 of 20 "b"
    REQUIRE(s.warnings.size() == 1);
    CHECK(s.warnings[0].find("lonely") != std::string::npos);
    CHECK(std::find(s.train.begin(), s.train.end(), 30) != s.train.end());
    const auto again = stratified_split(labels, 0.1, 1);
    CHECK(again.test == s.test);

    labels[0].partition = "test";
    for (std::size_t i = 1; i < labels.size(); ++i) labels[i].partition = "train";
    const auto p = stratified_split(labels, 0.1, 1);
    CHECK(p.test == std::vector<std::size_t>{0});
    labels[3].partition = "holdout";
    CHECK_THROWS_AS(stratified_split(labels, 0.1, 1), DataError);
}

TEST_CASE("classifier fine-tuning") {
    auto corpus = synth::class_corpus(3, 20, 40, 10, 3, 2);
    ModelConfig mc;
    mc.vocab_size = 40;
    mc.d_model = 8;
    mc.n_layers = 1;
    mc.d_state = 4;
    mc.max_len = 10;
    const auto model = ModelParams::init(mc, 6);
    ClassifierConfig cc;
    cc.hidden = 16;
    cc.epochs = 15;
    cc.batch_size = 8;
    cc.learning_rate = 5e-3;
    cc.seed = 1;
    const auto r = finetune_classifier(model, corpus.data, cc);
    CHECK(r.head.classes == std::vector<std::string>{"c0", "c1", "c2"});
    CHECK(r.split.test.size() == 6);
    CHECK(r.test_metrics.accuracy >= 0.95);
    CHECK(r.train_metrics.accuracy >= 0.95);

    cc.threads = 2;
    const auto r2 = finetune_classifier(model, corpus.data, cc);
    CHECK(same_params(r.backbone, r2.backbone));
    CHECK(r.test_predictions == r2.test_predictions);

    TempDir dir;
    save_classifier(r.backbone, r.head, dir.file("clf.ckpt"));
    const auto [bb, head] = load_classifier(dir.file("clf.ckpt"));
    CHECK(head.classes == r.head.classes);
    CHECK(predict_classes(bb, head, corpus.data.cells) == predict_classes(r.backbone, r.head, corpus.data.cells));

    auto single = corpus.data;
    for (auto& l : *single.labels) l.cell_type = "same";
    CHECK_THROWS_AS(finetune_classifier(model, single, cc), InputError);

    auto no_cls = corpus.data;
    no_cls.cells[0].tokens[0] = 5;
    CHECK_THROWS_AS(finetune_classifier(model, no_cls, cc), InputError);
}
