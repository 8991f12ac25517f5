#pragma once

// Brute-force reference implementations used only by the tests. They are
// written independently of the library code paths they check.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

namespace oracle {

// Linear interpolation at position q * (n - 1) of the sorted sample.
inline double sorted_quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    const double t = pos - double(lo);
    return (1.0 - t) * v[lo] + t * v[hi];
}

// Textbook median: middle element or mean of the two middle elements.
inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * v[n / 2 - 1] + 0.5 * v[n / 2];
}

// Fraction of the sample strictly below x plus half the ties (mid-rank / n).
inline double rank_fraction(const std::vector<double>& v, double x) {
    double below = 0, equal = 0;
    for (double e : v) {
        if (e < x) ++below;
        else if (e == x) ++equal;
    }
    return (below + 0.5 * equal) / double(v.size());
}

// Recursive Levenshtein via full DP table.
template <typename T>
std::size_t levenshtein(const std::vector<T>& a, const std::vector<T>& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    return d[a.size()][b.size()];
}

// Rand-index style pair enumeration for ARI.
inline double ari_pairs(const std::vector<int>& x, const std::vector<int>& y) {
    const std::size_t n = x.size();
    double both = 0, same_x = 0, same_y = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool sx = x[i] == x[j], sy = y[i] == y[j];
            both += sx && sy;
            same_x += sx;
            same_y += sy;
            pairs += 1;
        }
    const double expected = same_x * same_y / pairs;
    const double maximum = 0.5 * (same_x + same_y);
    if (maximum == expected) return 1.0;
    return (both - expected) / (maximum - expected);
}

// NMI = 2 I / (H(X) + H(Y)) from explicit probability tables.
inline double nmi(const std::vector<int>& x, const std::vector<int>& y) {
    const double n = double(x.size());
    std::map<int, double> px, py;
    std::map<std::pair<int, int>, double> pxy;
    for (std::size_t i = 0; i < x.size(); ++i) {
        px[x[i]] += 1;
        py[y[i]] += 1;
        pxy[{x[i], y[i]}] += 1;
    }
    for (auto* table : {&px, &py})
        for (auto& [k, p] : *table) p /= n;
    for (auto& [k, p] : pxy) p /= n;
    double hx = 0, hy = 0, mi = 0;
    for (auto& [k, p] : px) hx -= p * std::log(p);
    for (auto& [k, p] : py) hy -= p * std::log(p);
    for (auto& [k, p] : pxy) mi += p * std::log(p / (px[k.first] * py[k.second]));
    if (hx + hy == 0) return 1.0;
    return 2 * mi / (hx + hy);
}

// Mean silhouette over points, singleton clusters scoring 0.
inline double silhouette(const std::vector<std::vector<double>>& pts, const std::vector<int>& labels) {
    auto dist = [&](std::size_t i, std::size_t j) {
        double s = 0;
        for (std::size_t k = 0; k < pts[i].size(); ++k) s += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
        return std::sqrt(s);
    };
    std::set<int> clusters(labels.begin(), labels.end());
    double total = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        std::map<int, std::pair<double, int>> acc;
        for (std::size_t j = 0; j < pts.size(); ++j)
            if (j != i) {
                acc[labels[j]].first += dist(i, j);
                acc[labels[j]].second += 1;
            }
        if (acc[labels[i]].second == 0) continue;
        const double a = acc[labels[i]].first / acc[labels[i]].second;
        double b = INFINITY;
        for (int c : clusters)
            if (c != labels[i] && acc[c].second > 0) b = std::min(b, acc[c].first / acc[c].second);
        total += (b - a) / std::max(a, b);
    }
    return total / double(pts.size());
}

// Average-rank Spearman: rank both, then Pearson.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, eq = 0;
        for (double w : v) {
            less += w < v[i];
            eq += w == v[i];
        }
        r[i] = less + (eq + 1) / 2;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i] / n;
        mb += b[i] / n;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson(average_ranks(a), average_ranks(b));
}

// Union-find component sizes.
inline std::size_t largest_component(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (auto [a, b] : edges) parent[find(a)] = find(b);
    std::map<std::size_t, std::size_t> size;
    for (std::size_t i = 0; i < n; ++i) ++size[find(i)];
    std::size_t best = 0;
    for (auto& [k, s] : size) best = std::max(best, s);
    return best;
}

// BLEU by position scanning: each candidate n-gram occurrence contributes
// min(count_c, count_r) / count_c, which sums to the clipped count.
template <typename T>
double bleu(const std::vector<T>& cand, const std::vector<T>& ref, std::size_t max_n) {
    if (cand.empty()) return 0.0;
    auto same = [](const std::vector<T>& x, std::size_t i, const std::vector<T>& y, std::size_t j, std::size_t n) {
        for (std::size_t k = 0; k < n; ++k)
            if (x[i + k] != y[j + k]) return false;
        return true;
    };
    double product = 1.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        if (cand.size() < n) return 0.0;
        double clipped = 0.0;
        for (std::size_t i = 0; i + n <= cand.size(); ++i) {
            double in_c = 0, in_r = 0;
            for (std::size_t j = 0; j + n <= cand.size(); ++j) in_c += same(cand, i, cand, j, n);
            for (std::size_t j = 0; j + n <= ref.size(); ++j) in_r += same(cand, i, ref, j, n);
            clipped += std::min(in_c, in_r) / in_c;
        }
        product *= std::pow(clipped / double(cand.size() - n + 1), 1.0 / double(max_n));
    }
    const double c = double(cand.size()), r = double(ref.size());
    return (c > r ? 1.0 : std::exp(1.0 - r / c)) * product;
}

// GraphConn from explicit sorting of all distances per cell.
inline double graph_conn(const std::vector<std::vector<double>>& pts, const std::vector<int>& labels, std::size_t k) {
    std::set<int> types(labels.begin(), labels.end());
    double total = 0;
    for (int t : types) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < pts.size(); ++i)
            if (labels[i] == t) idx.push_back(i);
        const std::size_t kk = std::min(k, idx.size() - 1);
        std::vector<std::pair<std::size_t, std::size_t>> edges;
        for (std::size_t a = 0; a < idx.size(); ++a) {
            std::vector<std::pair<double, std::size_t>> d;
            for (std::size_t b = 0; b < idx.size(); ++b) {
                if (a == b) continue;
                double s = 0;
                for (std::size_t c = 0; c < pts[0].size(); ++c)
                    s += (pts[idx[a]][c] - pts[idx[b]][c]) * (pts[idx[a]][c] - pts[idx[b]][c]);
                d.emplace_back(s, b);
            }
            std::sort(d.begin(), d.end());
            for (std::size_t r = 0; r < kk; ++r) edges.emplace_back(a, d[r].second);
        }
        total += double(largest_component(idx.size(), edges)) / double(idx.size());
    }
    return total / double(types.size());
}

}  // namespace oracle
