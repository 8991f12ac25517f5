#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "genemamba/error.hpp"
#include "genemamba/random.hpp"
#include "genemamba/tdigest.hpp"
#include "oracles.hpp"

using genemamba::TDigest;

TEST_CASE("construction enforces the minimum compression") {
    CHECK(TDigest(100).centroids().empty());
    CHECK(TDigest(100).total_weight() == 0.0);
    CHECK_NOTHROW(TDigest(20));
    CHECK_THROWS_AS(TDigest(5), genemamba::ConfigError);
}

TEST_CASE("small inputs are exact") {
    TDigest td;
    for (double v : {1.0, 2.0, 3.0}) td.insert(v);
    CHECK(td.quantile(0.5) == 2.0);

    TDigest even;
    for (double v : {2.0, 4.0, 6.0}) even.insert(v);
    CHECK(even.quantile(0.5) == 4.0);
    CHECK(even.quantile(0.0) == 2.0);
    CHECK(even.quantile(1.0) == 6.0);

    TDigest one;
    one.insert(7.25);
    for (double q : {0.0, 0.1, 0.5, 0.99, 1.0}) CHECK(one.quantile(q) == 7.25);
}

TEST_CASE("quantiles match the sorted-array oracle whenever n <= compression") {
    genemamba::Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(100);
        TDigest td(100);
        std::vector<double> v;
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse grid so duplicates occur.
            const double x = std::floor(rng.uniform(0, 20)) / 4.0;
            v.push_back(x);
            td.insert(x);
        }
        for (double q : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) CHECK(td.quantile(q) == doctest::Approx(oracle::sorted_quantile(v, q)).epsilon(1e-14));
    }
}

TEST_CASE("uniform median within tolerance of the exact median") {
    genemamba::Rng rng(3);
    TDigest td;
    std::vector<double> v;
    for (int i = 0; i < 10000; ++i) {
        v.push_back(rng.uniform());
        td.insert(v.back());
    }
    CHECK(std::abs(td.quantile(0.5) - oracle::median(v)) <= 0.02);
    CHECK(std::abs(td.quantile(0.5) - 0.5) <= 0.02);
}

TEST_CASE("exponential median near ln 2") {
    genemamba::Rng rng(5);
    TDigest td;
    std::vector<double> v;
    for (int i = 0; i < 1000; ++i) {
        v.push_back(rng.exponential());
        td.insert(v.back());
    }
    CHECK(std::abs(td.quantile(0.5) - oracle::median(v)) <= 0.05);
    CHECK(std::abs(td.quantile(0.5) - std::numbers::ln2) <= 0.05);
}

TEST_CASE("merge pools two sketches") {
    genemamba::Rng rng(17);
    TDigest x, y;
    std::vector<double> pooled;
    for (int i = 0; i < 4000; ++i) {
        const double a = rng.normal();
        const double b = 1.0 + 2.0 * rng.uniform();
        x.insert(a);
        y.insert(b);
        pooled.push_back(a);
        pooled.push_back(b);
    }
    const TDigest xy = genemamba::td_merge(x, y);
    const TDigest yx = genemamba::td_merge(y, x);
    CHECK(xy.total_weight() == 8000.0);
    CHECK(std::abs(oracle::rank_fraction(pooled, xy.quantile(0.5)) - 0.5) <= 0.01);
    CHECK(std::abs(oracle::rank_fraction(pooled, yx.quantile(0.5)) - 0.5) <= 0.01);
    CHECK(xy.quantile(0.5) == doctest::Approx(yx.quantile(0.5)).epsilon(1e-3));

    const TDigest empty;
    const TDigest ex = genemamba::td_merge(empty, x);
    for (double q : {0.1, 0.5, 0.9}) CHECK(ex.quantile(q) == doctest::Approx(x.quantile(q)).epsilon(1e-12));

    CHECK_THROWS_AS(genemamba::td_merge(TDigest(50), TDigest(100)), genemamba::ConfigError);
}

TEST_CASE("errors") {
    TDigest td;
    CHECK_THROWS_AS(td.quantile(0.5), genemamba::StateError);
    CHECK_THROWS_AS(td.insert(NAN), genemamba::InputError);
    CHECK_THROWS_AS(td.insert(INFINITY), genemamba::InputError);
    td.insert(1.0);
    CHECK_THROWS_AS(td.quantile(1.5), genemamba::InputError);
    CHECK_THROWS_AS(td.quantile(-0.1), genemamba::InputError);
}

TEST_CASE("property: invariants and monotone quantiles on random sketches") {
    genemamba::Rng rng(23);
    for (int trial = 0; trial < 30; ++trial) {
        const double compression = 20 + double(rng.below(200));
        TDigest td(compression);
        const std::size_t n = 1 + rng.below(20000);
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = trial % 2 ? rng.exponential() : std::round(rng.normal() * 10);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            td.insert(v);
        }
        const auto& cs = td.centroids();
        double weight = 0;
        for (std::size_t i = 0; i < cs.size(); ++i) {
            weight += cs[i].weight;
            if (i > 0) CHECK(cs[i - 1].mean < cs[i].mean);
        }
        CHECK(weight == td.total_weight());
        CHECK(double(cs.size()) <= std::ceil(compression) + 10);
        double prev = -INFINITY;
        for (int k = 0; k <= 200; ++k) {
            const double q = td.quantile(k / 200.0);
            CHECK(q >= prev);
            CHECK(q >= lo);
            CHECK(q <= hi);
            prev = q;
        }
    }
}

TEST_CASE("property: median is robust to insertion order") {
    genemamba::Rng rng(29);
    std::vector<double> v;
    for (int i = 0; i < 20000; ++i) v.push_back(rng.exponential(0.5));
    TDigest a;
    for (double x : v) a.insert(x);
    for (int perm = 0; perm < 5; ++perm) {
        rng.shuffle(v);
        TDigest b;
        for (double x : v) b.insert(x);
        CHECK(std::abs(oracle::rank_fraction(v, a.quantile(0.5)) - oracle::rank_fraction(v, b.quantile(0.5))) <= 0.01);
    }
}

TEST_CASE("serialization is little-endian and round-trips") {
    TDigest td(64);
    genemamba::Rng rng(31);
    for (int i = 0; i < 5000; ++i) td.insert(rng.normal());
    std::stringstream ss;
    td.serialize(ss);
    const std::string bytes = ss.str();
    CHECK(bytes.size() == 16 + 16 * td.centroids().size());
    double compression = 0;
    std::memcpy(&compression, bytes.data(), 8);
    CHECK(compression == 64.0);
    const TDigest back = TDigest::deserialize(ss);
    CHECK(back.centroids() == td.centroids());
    CHECK(back.total_weight() == td.total_weight());
    CHECK(back.quantile(0.5) == doctest::Approx(td.quantile(0.5)).epsilon(1e-12));

    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(TDigest::deserialize(truncated), genemamba::DataError);
}
