#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "genemamba/error.hpp"
#include "genemamba/evalsuite.hpp"
#include "genemamba/random.hpp"
#include "genemamba/synthetic.hpp"
#include "genemamba/trainer.hpp"
#include "oracles.hpp"

using namespace genemamba;

namespace {

std::vector<TokenId> random_tokens(Rng& rng, std::size_t max_len, std::uint64_t alphabet) {
    std::vector<TokenId> t(rng.below(max_len + 1));
    for (auto& x : t) x = static_cast<TokenId>(rng.below(alphabet));
    return t;
}

Labels random_labels(Rng& rng, std::size_t n, std::uint64_t k) {
    Labels l(n);
    for (auto& x : l) x = rng.below(k);
    return l;
}

std::vector<int> as_int(const Labels& l) { return {l.begin(), l.end()}; }

std::vector<std::vector<double>> rows(const Embeddings& x) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) out[r].push_back(x(r, c));
    return out;
}

Embeddings random_points(Rng& rng, Eigen::Index n, Eigen::Index d) {
    Embeddings x(n, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("exact match and edit distances") {
    CHECK(exact_match({2, 3, 4}, {2, 3, 4}) == 1);
    CHECK(exact_match({2, 3, 4}, {2, 3, 5}) == 0);
    CHECK(em_avg({{{1, 2}, {1, 2}}, {{1, 2}, {2, 1}}}) == 0.5);

    // kitten -> sitting as token ids
    const std::vector<TokenId> kitten = {'k', 'i', 't', 't', 'e', 'n'};
    const std::vector<TokenId> sitting = {'s', 'i', 't', 't', 'i', 'n', 'g'};
    CHECK(levenshtein(kitten, sitting) == 3);
    CHECK(levenshtein(kitten, {}) == 6);
    CHECK(levenshtein({}, {}) == 0);
    CHECK(nld({}, {}) == 1.0);
    CHECK(nld(kitten, sitting) == doctest::Approx(1.0 - 3.0 / 7.0));

    Rng rng(1);
    for (int i = 0; i < 300; ++i) {
        const auto a = random_tokens(rng, 10, 4), b = random_tokens(rng, 10, 4), c = random_tokens(rng, 10, 4);
        const auto ab = levenshtein(a, b);
        CHECK(ab == oracle::levenshtein(a, b));
        CHECK(ab == levenshtein(b, a));
        CHECK(levenshtein(a, c) <= ab + levenshtein(b, c));
        const double n = nld(a, b);
        CHECK(n >= 0.0);
        CHECK(n <= 1.0);
        CHECK((n == 1.0) == (a == b));
    }
}

TEST_CASE("bleu") {
    const std::vector<TokenId> ref = {2, 3, 4, 5, 6, 7};
    CHECK(bleu(ref, ref) == 1.0);
    CHECK(bleu({8, 9, 10, 11}, ref) == 0.0);
    CHECK(bleu({}, ref) == 0.0);
    CHECK(bleu({2, 3, 4}, ref, 1) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
    CHECK(bleu({2, 3}, ref, 4) == 0.0);  // no 3-grams at all

    Rng rng(2);
    for (int i = 0; i < 300; ++i) {
        const auto a = random_tokens(rng, 12, 3), b = random_tokens(rng, 12, 3);
        const std::size_t n = 1 + rng.below(4);
        const double v = bleu(a, b, n);
        CHECK(std::abs(v - oracle::bleu(a, b, n)) <= 1e-12);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        if (a.size() >= 4) CHECK((bleu(a, a) == 1.0));
    }
}

TEST_CASE("spearman and ranks") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(average_ranks({3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
    CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);

    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> a(20), b(20);
        for (auto& x : a) x = double(rng.below(8));
        for (auto& x : b) x = rng.normal();
        CHECK(std::abs(spearman(a, b) - oracle::spearman(a, b)) <= 1e-12);
    }

    const auto [in, out] = rank_scores({5, 6, 7}, {6, 5, 9});
    CHECK(in == std::vector<double>{3, 2, 1});
    CHECK(out == std::vector<double>{2, 3, 0});
}

TEST_CASE("partition agreement") {
    CHECK(ari({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
    CHECK(nmi({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
    CHECK(ari({0, 0, 0, 0}, {0, 1, 2, 3}) == doctest::Approx(oracle::ari_pairs({0, 0, 0, 0}, {0, 1, 2, 3})));

    // Six points, hand entropy.
    const Labels t = {0, 0, 0, 1, 1, 1}, p = {0, 0, 1, 1, 2, 2};
    const double hy = std::log(2.0);
    const double hc = std::log(3.0);
    const double i = (2.0 / 6) * std::log((2.0 / 6) / (0.5 / 3)) * 2 + 2 * (1.0 / 6) * std::log((1.0 / 6) / (0.5 / 3));
    CHECK(std::abs(nmi(t, p) - 2 * i / (hy + hc)) <= 1e-12);

    Rng rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng.below(11);
        const auto a = random_labels(rng, n, 1 + rng.below(4));
        const auto b = random_labels(rng, n, 1 + rng.below(4));
        const double r = ari(a, b), m = nmi(a, b);
        CHECK(std::abs(r - oracle::ari_pairs(as_int(a), as_int(b))) <= 1e-10);
        CHECK(std::abs(m - oracle::nmi(as_int(a), as_int(b))) <= 1e-10);
        CHECK(r <= 1.0 + 1e-12);
        CHECK(r >= -1.0);
        CHECK(m >= 0.0);
        CHECK(m <= 1.0);
        // Relabeling either side changes nothing.
        Labels relabeled = a;
        for (auto& x : relabeled) x = 7 - x;
        CHECK(std::abs(ari(relabeled, b) - r) <= 1e-12);
        CHECK(std::abs(nmi(relabeled, b) - m) <= 1e-12);
    }
}

TEST_CASE("silhouette and ASW") {
    Embeddings x(6, 2);
    x << 0, 0, 0.1, 0, 0, 0.1, 10, 10, 10.1, 10, 10, 10.1;
    const Labels l = {0, 0, 0, 1, 1, 1};
    CHECK(asw_cell(x, l) > 0.99);
    CHECK(std::abs(silhouette(x, l) - oracle::silhouette(rows(x), as_int(l))) <= 1e-12);
    CHECK_THROWS_AS(silhouette(x, Labels(6, 0)), InputError);

    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto n = static_cast<Eigen::Index>(3 + rng.below(10));
        const Embeddings p = random_points(rng, n, 1 + Eigen::Index(rng.below(3)));
        Labels lab = random_labels(rng, std::size_t(n), 2 + rng.below(3));
        lab[0] = 0;
        lab[1] = 1;
        const double s = silhouette(p, lab);
        CHECK(std::abs(s - oracle::silhouette(rows(p), as_int(lab))) <= 1e-10);
        CHECK(asw_cell(p, lab) >= 0.0);
        CHECK(asw_cell(p, lab) <= 1.0);
        CHECK(asw_batch(p, lab) >= 0.0);
        CHECK(asw_batch(p, lab) <= 1.0);
    }
}

TEST_CASE("graph connectivity") {
    // One type split into two distant halves.
    Embeddings x(8, 1);
    x << 0, 0.1, 0.2, 0.3, 100, 100.1, 100.2, 100.3;
    CHECK(graph_conn(x, Labels(8, 0), 2) == 0.5);
    CHECK(graph_conn(x, Labels(8, 0), 4) == 1.0);
    Labels two = {0, 0, 0, 0, 1, 1, 1, 1};
    CHECK(graph_conn(x, two, 1) == 0.5);  // each type breaks into two pairs
    CHECK(graph_conn(x, two, 2) == 1.0);
    CHECK(graph_conn(x, {0, 0, 0, 0, 1, 1, 1, 2}, 3) == 1.0);

    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        const auto n = static_cast<Eigen::Index>(1 + rng.below(12));
        const Embeddings p = random_points(rng, n, 2);
        const auto lab = random_labels(rng, std::size_t(n), 1 + rng.below(3));
        double prev = 0.0;
        for (std::size_t k = 1; k <= 5; ++k) {
            const double g = graph_conn(p, lab, k);
            CHECK(std::abs(g - oracle::graph_conn(rows(p), as_int(lab), k)) <= 1e-12);
            CHECK(g >= prev);
            CHECK(g <= 1.0);
            prev = g;
        }
    }
}

TEST_CASE("composite scores") {
    CHECK(avg_bio(1, 1, 1) == 1.0);
    CHECK(avg_bio(0.6, 0.7, 0.8) == doctest::Approx(0.7));
    CHECK(avg_batch(0.9, 0.7) == doctest::Approx(0.8));
}

TEST_CASE("louvain recovers separated groups") {
    Rng rng(7);
    Embeddings x(45, 3);
    for (Eigen::Index i = 0; i < 45; ++i)
        for (Eigen::Index c = 0; c < 3; ++c) x(i, c) = rng.normal() * 0.1 + (c == i / 15 ? 20.0 : 0.0);
    Labels truth(45);
    for (std::size_t i = 0; i < 45; ++i) truth[i] = i / 15;
    const auto clusters = louvain_clusters(x, 10);
    CHECK(ari(truth, clusters) == 1.0);
    CHECK(clusters == louvain_clusters(x, 10, 3));

    std::vector<std::string> types, batches;
    for (std::size_t i = 0; i < 45; ++i) {
        types.push_back("t" + std::to_string(i / 15));
        batches.push_back(i % 2 ? "a" : "b");
    }
    const auto report = integration_report(x, types, batches, 10);
    CHECK(report.get("ari") == 1.0);
    CHECK(*report.get("avg_bio") > 0.9);
    CHECK(report.get("avg_batch").has_value());
    CHECK(report.params.at("clustering") == "louvain");
    CHECK(integration_report(x, types, batches, 10, &types).params.at("clustering") == "provided");
}

TEST_CASE("pair similarity and divergences") {
    Embeddings x(4, 3);
    x << 1, 2, 3, 1, 2, 3, -1, 0, 2, 5, -1, 0;
    const std::vector<LabeledPair> pairs = {{0, 1, true}, {0, 2, false}, {1, 3, false}};
    const auto s = pair_similarity_report(x, pairs);
    REQUIRE(s.pos_cosine.size() == 1);
    CHECK(s.pos_cosine[0] == doctest::Approx(1.0));
    CHECK(s.pos_pearson[0] == doctest::Approx(1.0));
    CHECK(s.neg_cosine.size() == 2);

    const auto same = distribution_distances({0.1, 0.5, -0.3}, {0.1, 0.5, -0.3});
    CHECK(same.euclidean == 0.0);
    CHECK(same.kl == 0.0);
    CHECK(same.js == 0.0);

    // [0.5, 0.5] against [1, 0] on two bins with smoothing e.
    const double e = 1e-9;
    const auto d = distribution_distances({-0.5, 0.5}, {-0.5, -0.5}, 2, e);
    const double q0 = (2 + e) / (2 + 2 * e), q1 = e / (2 + 2 * e);
    const double kl = 0.5 * std::log(0.5 / q0) + 0.5 * std::log(0.5 / q1);
    const double m0 = (0.5 + q0) / 2, m1 = (0.5 + q1) / 2;
    const double js = 0.5 * (0.5 * std::log(0.5 / m0) + 0.5 * std::log(0.5 / m1)) +
                      0.5 * (q0 * std::log(q0 / m0) + q1 * std::log(q1 / m1));
    CHECK(std::abs(d.kl - kl) <= 1e-12);
    CHECK(std::abs(d.js - js) <= 1e-12);
    CHECK(std::abs(d.euclidean - std::sqrt((0.5 - q0) * (0.5 - q0) + (0.5 - q1) * (0.5 - q1))) <= 1e-15);

    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> a(1 + rng.below(30)), b(1 + rng.below(30));
        for (auto& v : a) v = rng.uniform(-1, 1);
        for (auto& v : b) v = rng.uniform(-1, 1);
        const auto r = distribution_distances(a, b);
        CHECK(r.js <= std::log(2.0) + 1e-12);
        CHECK(r.js >= 0.0);
        CHECK(r.kl >= -1e-12);
    }
    CHECK_THROWS_AS(distribution_distances({}, {0.1}), InputError);

    PathwaySet pw;
    pw.add(2, "a");
    pw.add(3, "a");
    pw.add(4, "b");
    const auto lp = pathway_pairs({2, 3, 4, 5}, pw);
    REQUIRE(lp.size() == 3);
    CHECK(lp[0].positive);
    CHECK_FALSE(lp[1].positive);
}

TEST_CASE("topology adjacency") {
    // Two tight pairs far apart: distances 1 within, ~10 across.
    Embeddings x(4, 2);
    x << 0, 0, 1, 0, 10, 0, 11, 0;
    const auto a = topology_adjacency(x);
    // Off-diagonal mean = 2 * (1 + 10 + 11 + 9 + 10 + 1) / 12 = 7.
    CHECK(a(0, 1) == 1);
    CHECK(a(2, 3) == 1);
    CHECK(a(0, 2) == 0);
    CHECK(a(1, 2) == 0);
    CHECK(a(0, 0) == 0);
    CHECK(jaccard_distance(a, a) == 0.0);
    Adjacency other = Adjacency::Zero(4, 4);
    other(0, 2) = other(2, 0) = 1;
    CHECK(jaccard_distance(a, other) == 1.0);
    CHECK(jaccard_distance(Adjacency::Zero(4, 4), Adjacency::Zero(4, 4)) == 0.0);
}

TEST_CASE("metric report") {
    MetricReport r;
    r.dataset = "toy";
    r.add("ari", 0.5);
    r.add("ld", 3.0);
    CHECK_THROWS_AS(r.add("nmi", 1.5), NumericError);
    CHECK_THROWS_AS(r.add("ari", NAN), NumericError);
    CHECK(r.text() == "metric=ari value=0.5\nmetric=ld value=3\n");
    CHECK(r.json().find("\"ari\": 0.5") != std::string::npos);
}

TEST_CASE("embedding and plot files") {
    const auto dir = std::filesystem::temp_directory_path() / "gm_eval_files";
    std::filesystem::create_directories(dir);
    Embeddings x(3, 2);
    x << 1.5, -2, 0.25, 3, 7, 8;
    const auto path = (dir / "e.bin").string();
    write_embeddings(path, {"c0", "c1", "c2"}, x);
    const auto [ids, back] = read_embeddings(path);
    CHECK(ids == std::vector<std::string>{"c0", "c1", "c2"});
    CHECK(back == x);
    CHECK(std::filesystem::file_size(path) == 16 + 3 * (4 + 2) + 3 * 2 * 4);
    std::filesystem::resize_file(path, 30);
    CHECK_THROWS_AS(read_embeddings(path), DataError);

    ReconstructionSummary s = summarize({score_reconstruction({1, 2, 3, 4}, {1, 3, 2, 9})});
    write_venn((dir / "v.tsv").string(), s);
    write_rank_pairs((dir / "r.tsv").string(), {{1, 2, 3, 4}}, {{1, 3, 2, 9}});
    std::ifstream in(dir / "r.tsv");
    std::string header, line;
    std::getline(in, header);
    std::getline(in, line);
    CHECK(line == "0\t2\t1\t2");
    std::filesystem::remove_all(dir);
}

TEST_CASE("reconstruction scoring") {
    const auto same = score_reconstruction({1, 5, 6, 7, 8}, {1, 5, 6, 7, 8});
    CHECK(same.exact == 1);
    CHECK(same.ld == 0);
    CHECK(same.bleu == 1.0);
    CHECK(same.spearman == doctest::Approx(1.0));
    const auto swapped = score_reconstruction({1, 5, 6, 7, 8}, {1, 6, 5, 7, 20});
    CHECK(swapped.exact == 0);
    CHECK(swapped.ld == 3);
    CHECK(swapped.shared == 3);
    CHECK(swapped.input_only == 1);
    CHECK(swapped.output_only == 1);
    const auto sum = summarize({same, swapped});
    CHECK(sum.em == 0.5);
    CHECK(sum.ld == 1.5);
}

TEST_CASE("reconstruction on a memorized corpus") {
    const auto corpus = synth::memorization_corpus(4, 30, 8, 11);
    TrainConfig cfg;
    cfg.model.vocab_size = 30;
    cfg.model.max_len = 8;
    cfg.model.d_model = 16;
    cfg.model.n_layers = 1;
    cfg.model.d_state = 4;
    cfg.batch_size = 4;
    cfg.max_steps = 300;
    cfg.learning_rate = 2e-2;
    cfg.gamma = 0.0;
    const auto model = train(cfg, corpus.data, PathwaySet{}).state.model;

    const auto outputs = reconstruct_all(model, corpus.data.cells);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        CHECK(outputs[i] == corpus.data.cells[i].valid());
        // Fixed point.
        CHECK(reconstruct(model, outputs[i]) == outputs[i]);
        CHECK(outputs[i].size() == corpus.data.cells[i].valid_len);
    }
    CHECK(reconstruct_all(model, corpus.data.cells, DecodeMode::TeacherForced, 3) == outputs);

    const auto free = reconstruct(model, corpus.data.cells[0].valid(), DecodeMode::FreeRunning);
    CHECK(free.size() == 8);
    CHECK(free[0] == Vocabulary::kCls);
    std::vector<TokenId> sorted(free.begin() + 1, free.end());
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());

    // An untrained model still emits distinct genes of the right length.
    const auto raw = ModelParams::init(cfg.model, 1);
    const auto r = reconstruct(raw, corpus.data.cells[1].valid());
    CHECK(r.size() == 8);
    CHECK(reconstruct(raw, {}).empty());
}
