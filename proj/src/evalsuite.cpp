#include "genemamba/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "genemamba/binary_io.hpp"
#include "genemamba/error.hpp"
#include "genemamba/parallel.hpp"

namespace genemamba {

namespace {

std::vector<TokenId> genes_only(const std::vector<TokenId>& tokens) {
    std::vector<TokenId> out;
    for (auto t : tokens)
        if (t >= Vocabulary::kFirstGene) out.push_back(t);
    return out;
}

TokenId pick(const Eigen::Ref<const Vec>& row, const std::unordered_set<TokenId>& emitted) {
    TokenId best = 0;
    bool found = false;
    real best_v = 0;
    for (Eigen::Index t = Vocabulary::kFirstGene; t < row.size(); ++t) {
        const auto tok = static_cast<TokenId>(t);
        if (emitted.count(tok)) continue;
        if (!found || row(t) > best_v) {
            best = tok;
            best_v = row(t);
            found = true;
        }
    }
    if (!found) throw InputError("no gene token left to emit");
    return best;
}

std::size_t count_labels(const Labels& l) {
    return l.empty() ? 0 : *std::max_element(l.begin(), l.end()) + 1;
}

double choose2(double n) { return n * (n - 1) / 2; }

Eigen::MatrixXd distances(const Embeddings& x) {
    const Eigen::Index n = x.rows();
    Eigen::MatrixXd d(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d(i, i) = 0.0;
        for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (x.row(i) - x.row(j)).norm();
    }
    return d;
}

std::size_t largest_component(std::size_t n, const std::vector<std::vector<std::size_t>>& neighbors) {
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    for (std::size_t i = 0; i < n; ++i)
        for (auto j : neighbors[i]) parent[find(i)] = find(j);
    std::vector<std::size_t> size(n, 0);
    std::size_t best = 0;
    for (std::size_t i = 0; i < n; ++i) best = std::max(best, ++size[find(i)]);
    return best;
}

struct Range {
    double lo, hi;
};

std::optional<Range> declared_range(const std::string& name) {
    static const std::map<std::string, Range> ranges = {
        {"ari", {-1, 1}},       {"nmi", {0, 1}},       {"asw_cell", {0, 1}}, {"asw_batch", {0, 1}},
        {"graph_conn", {0, 1}}, {"avg_bio", {-1, 1}},  {"avg_batch", {0, 1}}, {"em", {0, 1}},
        {"ld", {0, INFINITY}},  {"nld", {0, 1}},       {"bleu", {0, 1}},     {"spearman", {-1, 1}},
    };
    auto it = ranges.find(name);
    if (it == ranges.end()) return std::nullopt;
    return it->second;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

Labels encode_labels(const std::vector<std::string>& labels) {
    std::unordered_map<std::string, std::size_t> ids;
    Labels out;
    out.reserve(labels.size());
    for (const auto& l : labels) out.push_back(ids.emplace(l, ids.size()).first->second);
    return out;
}

// --- reconstruction ------------------------------------------------------------

std::vector<TokenId> reconstruct(const ModelParams& model, const std::vector<TokenId>& input, DecodeMode mode) {
    if (input.empty()) return {};
    std::vector<TokenId> out{input[0]};
    std::unordered_set<TokenId> emitted{input[0]};
    if (mode == DecodeMode::TeacherForced) {
        const Mat l = logits(model, forward_sequence(model, input));
        for (std::size_t j = 1; j < input.size(); ++j) {
            const auto tok = pick(l.row(static_cast<Eigen::Index>(j - 1)).transpose(), emitted);
            out.push_back(tok);
            emitted.insert(tok);
        }
    } else {
        while (out.size() < input.size()) {
            const Mat h = forward_sequence(model, out);
            const Mat l = logits(model, h.bottomRows(1));
            const auto tok = pick(l.row(0).transpose(), emitted);
            out.push_back(tok);
            emitted.insert(tok);
        }
    }
    return out;
}

std::vector<std::vector<TokenId>> reconstruct_all(const ModelParams& model, const std::vector<TokenSequence>& cells,
                                                  DecodeMode mode, std::size_t threads) {
    std::vector<std::vector<TokenId>> out(cells.size());
    parallel_for(cells.size(), threads, [&](std::size_t i) { out[i] = reconstruct(model, cells[i].valid(), mode); });
    return out;
}

int exact_match(const std::vector<TokenId>& a, const std::vector<TokenId>& b) { return a == b ? 1 : 0; }

double em_avg(const std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>>& pairs) {
    if (pairs.empty()) throw InputError("em_avg of no pairs");
    double s = 0;
    for (const auto& [a, b] : pairs) s += exact_match(a, b);
    return s / double(pairs.size());
}

std::size_t levenshtein(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double nld(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    const std::size_t m = std::max(a.size(), b.size());
    if (m == 0) return 1.0;
    return 1.0 - double(levenshtein(a, b)) / double(m);
}

double bleu(const std::vector<TokenId>& candidate, const std::vector<TokenId>& reference, std::size_t max_n) {
    if (max_n == 0) throw ConfigError("bleu needs max_n >= 1");
    if (candidate.empty()) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        if (candidate.size() < n) return 0.0;
        std::map<std::vector<TokenId>, std::size_t> ref_counts, cand_counts;
        for (std::size_t i = 0; i + n <= reference.size(); ++i)
            ++ref_counts[std::vector<TokenId>(reference.begin() + i, reference.begin() + i + n)];
        for (std::size_t i = 0; i + n <= candidate.size(); ++i)
            ++cand_counts[std::vector<TokenId>(candidate.begin() + i, candidate.begin() + i + n)];
        std::size_t clipped = 0;
        for (const auto& [gram, c] : cand_counts) {
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) clipped += std::min(c, it->second);
        }
        if (clipped == 0) return 0.0;
        log_sum += std::log(double(clipped) / double(candidate.size() - n + 1)) / double(max_n);
    }
    const double c = double(candidate.size());
    const double r = double(reference.size());
    const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
    return bp * std::exp(log_sum);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (double(i) + double(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InputError("pearson: length mismatch");
    if (a.empty()) throw InputError("pearson of empty vectors");
    const double ma = mean(a), mb = mean(b);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson(average_ranks(a), average_ranks(b));
}

std::pair<std::vector<double>, std::vector<double>> rank_scores(const std::vector<TokenId>& input,
                                                                const std::vector<TokenId>& output) {
    const double n = double(input.size());
    std::unordered_map<TokenId, std::size_t> out_pos;
    for (std::size_t i = 0; i < output.size(); ++i) out_pos.emplace(output[i], i);
    std::vector<double> in_s, out_s;
    for (std::size_t i = 0; i < input.size(); ++i) {
        in_s.push_back(n - double(i));
        auto it = out_pos.find(input[i]);
        out_s.push_back(it == out_pos.end() ? 0.0 : n - double(it->second));
    }
    return {in_s, out_s};
}

CellReconstruction score_reconstruction(const std::vector<TokenId>& input, const std::vector<TokenId>& output) {
    const auto in = genes_only(input);
    const auto out = genes_only(output);
    CellReconstruction r;
    r.exact = exact_match(in, out);
    r.ld = levenshtein(in, out);
    r.nld = nld(in, out);
    r.bleu = bleu(out, in);
    if (!in.empty()) {
        const auto [a, b] = rank_scores(in, out);
        r.spearman = spearman(a, b);
    }
    const std::unordered_set<TokenId> in_set(in.begin(), in.end());
    const std::unordered_set<TokenId> out_set(out.begin(), out.end());
    for (auto g : in_set) (out_set.count(g) ? r.shared : r.input_only) += 1;
    for (auto g : out_set) r.output_only += in_set.count(g) ? 0 : 1;
    return r;
}

ReconstructionSummary summarize(std::vector<CellReconstruction> cells) {
    ReconstructionSummary s;
    s.cells = std::move(cells);
    if (s.cells.empty()) return s;
    for (const auto& c : s.cells) {
        s.em += c.exact;
        s.ld += double(c.ld);
        s.nld += c.nld;
        s.bleu += c.bleu;
        s.spearman += c.spearman;
        s.shared += c.shared;
        s.input_only += c.input_only;
        s.output_only += c.output_only;
    }
    const double n = double(s.cells.size());
    s.em /= n;
    s.ld /= n;
    s.nld /= n;
    s.bleu /= n;
    s.spearman /= n;
    return s;
}

// --- clustering metrics ------------------------------------------------------------

double ari(const Labels& truth, const Labels& predicted) {
    if (truth.size() != predicted.size()) throw InputError("ari: label vectors differ in length");
    const std::size_t nt = count_labels(truth), np = count_labels(predicted);
    Eigen::MatrixXd table = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nt), static_cast<Eigen::Index>(np));
    for (std::size_t i = 0; i < truth.size(); ++i)
        table(static_cast<Eigen::Index>(truth[i]), static_cast<Eigen::Index>(predicted[i])) += 1;
    double index = 0, a = 0, b = 0;
    for (Eigen::Index i = 0; i < table.size(); ++i) index += choose2(table.data()[i]);
    for (Eigen::Index i = 0; i < table.rows(); ++i) a += choose2(table.row(i).sum());
    for (Eigen::Index j = 0; j < table.cols(); ++j) b += choose2(table.col(j).sum());
    const double total = choose2(double(truth.size()));
    if (total == 0) return 1.0;
    const double expected = a * b / total;
    const double maximum = (a + b) / 2;
    if (maximum == expected) return 1.0;
    return (index - expected) / (maximum - expected);
}

double nmi(const Labels& truth, const Labels& predicted) {
    if (truth.size() != predicted.size()) throw InputError("nmi: label vectors differ in length");
    if (truth.empty()) throw InputError("nmi of empty labelings");
    const double n = double(truth.size());
    const std::size_t nt = count_labels(truth), np = count_labels(predicted);
    // Integer counts keep single-cluster entropies exactly zero.
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nt), static_cast<Eigen::Index>(np));
    for (std::size_t i = 0; i < truth.size(); ++i)
        c(static_cast<Eigen::Index>(truth[i]), static_cast<Eigen::Index>(predicted[i])) += 1;
    const Eigen::VectorXd cx = c.rowwise().sum();
    const Eigen::VectorXd cy = c.colwise().sum().transpose();
    auto entropy = [n](const Eigen::VectorXd& counts) {
        double h = 0;
        for (Eigen::Index i = 0; i < counts.size(); ++i)
            if (counts(i) > 0) h -= counts(i) / n * std::log(counts(i) / n);
        return h;
    };
    const double hx = entropy(cx), hy = entropy(cy);
    double mi = 0;
    for (Eigen::Index i = 0; i < c.rows(); ++i)
        for (Eigen::Index j = 0; j < c.cols(); ++j)
            if (c(i, j) > 0) mi += c(i, j) / n * std::log(c(i, j) * n / (cx(i) * cy(j)));
    if (hx + hy == 0) return 1.0;
    return std::clamp(2 * mi / (hx + hy), 0.0, 1.0);
}

double silhouette(const Embeddings& x, const Labels& labels) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (labels.size() != n) throw InputError("silhouette: one label per row required");
    const std::size_t k = count_labels(labels);
    std::vector<std::size_t> sizes(k, 0);
    for (auto l : labels) ++sizes[l];
    if (std::count_if(sizes.begin(), sizes.end(), [](std::size_t s) { return s > 0; }) < 2)
        throw InputError("silhouette needs at least two distinct labels");
    const Eigen::MatrixXd d = distances(x);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (sizes[labels[i]] < 2) continue;
        std::vector<double> sum(k, 0.0);
        for (std::size_t j = 0; j < n; ++j) sum[labels[j]] += d(Eigen::Index(i), Eigen::Index(j));
        const double a = sum[labels[i]] / double(sizes[labels[i]] - 1);
        double b = INFINITY;
        for (std::size_t c = 0; c < k; ++c)
            if (c != labels[i] && sizes[c] > 0) b = std::min(b, sum[c] / double(sizes[c]));
        const double m = std::max(a, b);
        if (m > 0) total += (b - a) / m;
    }
    return total / double(n);
}

double asw_cell(const Embeddings& x, const Labels& cell_types) { return (silhouette(x, cell_types) + 1.0) / 2.0; }

double asw_batch(const Embeddings& x, const Labels& batches) { return 1.0 - std::abs(silhouette(x, batches)); }

std::vector<std::vector<std::size_t>> knn(const Embeddings& x, std::size_t k, std::size_t threads) {
    const auto n = static_cast<std::size_t>(x.rows());
    k = std::min(k, n == 0 ? 0 : n - 1);
    std::vector<std::vector<std::size_t>> out(n);
    parallel_for(n, threads, [&](std::size_t i) {
        std::vector<std::pair<double, std::size_t>> cand;
        cand.reserve(n - 1);
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) cand.emplace_back((x.row(Eigen::Index(i)) - x.row(Eigen::Index(j))).squaredNorm(), j);
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
        for (std::size_t r = 0; r < k; ++r) out[i].push_back(cand[r].second);
    });
    return out;
}

double graph_conn(const Embeddings& x, const Labels& cell_types, std::size_t k) {
    if (static_cast<std::size_t>(x.rows()) != cell_types.size()) throw InputError("graph_conn: one label per row required");
    if (cell_types.empty()) throw InputError("graph_conn of no cells");
    if (k == 0) throw ConfigError("graph_conn needs k >= 1");
    std::map<std::size_t, std::vector<std::size_t>> by_type;
    for (std::size_t i = 0; i < cell_types.size(); ++i) by_type[cell_types[i]].push_back(i);
    double total = 0.0;
    for (const auto& [type, idx] : by_type) {
        if (idx.size() == 1) {
            total += 1.0;
            continue;
        }
        Embeddings sub(static_cast<Eigen::Index>(idx.size()), x.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) sub.row(Eigen::Index(r)) = x.row(Eigen::Index(idx[r]));
        total += double(largest_component(idx.size(), knn(sub, k))) / double(idx.size());
    }
    return total / double(by_type.size());
}

double avg_bio(double ari_v, double nmi_v, double asw_cell_v) { return (ari_v + nmi_v + asw_cell_v) / 3.0; }

double avg_batch(double asw_batch_v, double graph_conn_v) { return (asw_batch_v + graph_conn_v) / 2.0; }

Labels louvain_clusters(const Embeddings& x, std::size_t k, std::size_t threads) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (n == 0) return {};
    // Symmetric weighted adjacency; the diagonal holds internal weight of
    // aggregated nodes counted in both directions.
    std::vector<std::map<std::size_t, double>> adj(n);
    const auto nn = knn(x, k, threads);
    for (std::size_t i = 0; i < n; ++i)
        for (auto j : nn[i]) adj[i][j] = adj[j][i] = 1.0;

    Labels membership(n);
    std::iota(membership.begin(), membership.end(), std::size_t{0});
    for (;;) {
        const std::size_t m = adj.size();
        std::vector<double> degree(m, 0.0);
        double m2 = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            for (const auto& [j, w] : adj[i]) degree[i] += w;
            m2 += degree[i];
        }
        if (m2 == 0.0) break;
        std::vector<std::size_t> comm(m);
        std::iota(comm.begin(), comm.end(), std::size_t{0});
        std::vector<double> tot = degree;
        bool any_move = false;
        for (bool moved = true; moved;) {
            moved = false;
            for (std::size_t i = 0; i < m; ++i) {
                std::map<std::size_t, double> links;
                for (const auto& [j, w] : adj[i])
                    if (j != i) links[comm[j]] += w;
                const std::size_t old = comm[i];
                tot[old] -= degree[i];
                auto gain = [&](std::size_t c) {
                    auto it = links.find(c);
                    return (it == links.end() ? 0.0 : it->second) - tot[c] * degree[i] / m2;
                };
                std::size_t best = old;
                double best_gain = gain(old);
                for (const auto& [c, w] : links) {
                    const double g = gain(c);
                    if (g > best_gain + 1e-12) {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += degree[i];
                comm[i] = best;
                if (best != old) moved = any_move = true;
            }
        }
        if (!any_move) break;
        std::map<std::size_t, std::size_t> renumber;
        for (auto c : comm) renumber.emplace(c, renumber.size());
        std::vector<std::map<std::size_t, double>> next(renumber.size());
        for (std::size_t i = 0; i < m; ++i)
            for (const auto& [j, w] : adj[i]) next[renumber[comm[i]]][renumber[comm[j]]] += w;
        for (auto& l : membership) l = renumber[comm[l]];
        adj = std::move(next);
    }
    // Dense ids in order of first appearance.
    std::map<std::size_t, std::size_t> ids;
    for (auto& l : membership) l = ids.emplace(l, ids.size()).first->second;
    return membership;
}

// --- gene pairs ------------------------------------------------------------------

GeneStates gene_state_embeddings(const ModelParams& model, const std::vector<TokenSequence>& cells,
                                 std::size_t threads) {
    std::vector<Mat> hidden(cells.size());
    parallel_for(cells.size(), threads, [&](std::size_t i) { hidden[i] = forward_sequence(model, cells[i].valid()); });
    std::map<TokenId, std::pair<Eigen::VectorXd, std::size_t>> acc;
    const auto d = static_cast<Eigen::Index>(model.config.d_model);
    for (std::size_t i = 0; i < cells.size(); ++i)
        for (std::size_t t = 0; t < cells[i].valid_len; ++t) {
            const auto tok = cells[i].tokens[t];
            if (tok < Vocabulary::kFirstGene) continue;
            auto& [sum, count] = acc.try_emplace(tok, Eigen::VectorXd::Zero(d), 0).first->second;
            sum += hidden[i].row(Eigen::Index(t)).transpose().cast<double>();
            ++count;
        }
    GeneStates out;
    out.embeddings.resize(static_cast<Eigen::Index>(acc.size()), d);
    Eigen::Index r = 0;
    for (const auto& [tok, sc] : acc) {
        out.genes.push_back(tok);
        out.embeddings.row(r++) = sc.first.transpose() / double(sc.second);
    }
    return out;
}

std::vector<LabeledPair> pathway_pairs(const std::vector<TokenId>& genes, const PathwaySet& pathways) {
    std::vector<std::size_t> annotated;
    for (std::size_t i = 0; i < genes.size(); ++i)
        if (!pathways.pathways_of(genes[i]).empty()) annotated.push_back(i);
    std::vector<LabeledPair> out;
    for (std::size_t x = 0; x < annotated.size(); ++x)
        for (std::size_t y = x + 1; y < annotated.size(); ++y)
            out.push_back({annotated[x], annotated[y], pathways.positive(genes[annotated[x]], genes[annotated[y]])});
    return out;
}

PairScores pair_similarity_report(const Embeddings& x, const std::vector<LabeledPair>& pairs) {
    PairScores s;
    for (const auto& p : pairs) {
        if (p.a >= static_cast<std::size_t>(x.rows()) || p.b >= static_cast<std::size_t>(x.rows()))
            throw InputError("pair index outside the embedding table");
        const Eigen::VectorXd a = x.row(Eigen::Index(p.a)).transpose();
        const Eigen::VectorXd b = x.row(Eigen::Index(p.b)).transpose();
        const double denom = a.norm() * b.norm();
        const double cos = denom > 0 ? std::clamp(a.dot(b) / denom, -1.0, 1.0) : 0.0;
        const double r = pearson(std::vector<double>(a.data(), a.data() + a.size()),
                                 std::vector<double>(b.data(), b.data() + b.size()));
        (p.positive ? s.pos_cosine : s.neg_cosine).push_back(cos);
        (p.positive ? s.pos_pearson : s.neg_pearson).push_back(r);
    }
    return s;
}

Histogram histogram(const std::vector<double>& scores, std::size_t bins, double lo, double hi, double smoothing) {
    if (scores.empty()) throw InputError("histogram of an empty score set");
    if (bins == 0 || !(hi > lo) || !(smoothing >= 0.0)) throw ConfigError("invalid histogram parameters");
    Histogram h{lo, hi, std::vector<double>(bins, 0.0)};
    for (double v : scores) {
        if (!std::isfinite(v)) throw NumericError("non-finite score in histogram");
        const double pos = (std::clamp(v, lo, hi) - lo) / (hi - lo) * double(bins);
        h.mass[std::min(bins - 1, static_cast<std::size_t>(pos))] += 1.0;
    }
    const double total = double(scores.size()) + smoothing * double(bins);
    for (auto& m : h.mass) m = (m + smoothing) / total;
    return h;
}

Divergences distribution_distances(const std::vector<double>& pos, const std::vector<double>& neg, std::size_t bins,
                                   double smoothing) {
    const auto p = histogram(pos, bins, -1.0, 1.0, smoothing).mass;
    const auto q = histogram(neg, bins, -1.0, 1.0, smoothing).mass;
    Divergences d;
    double kl_pm = 0, kl_qm = 0;
    for (std::size_t i = 0; i < bins; ++i) {
        d.euclidean += (p[i] - q[i]) * (p[i] - q[i]);
        if (p[i] > 0) d.kl += p[i] * std::log(p[i] / q[i]);
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0) kl_pm += p[i] * std::log(p[i] / m);
        if (q[i] > 0) kl_qm += q[i] * std::log(q[i] / m);
    }
    d.euclidean = std::sqrt(d.euclidean);
    d.js = 0.5 * kl_pm + 0.5 * kl_qm;
    return d;
}

Adjacency topology_adjacency(const Embeddings& x) {
    const Eigen::Index n = x.rows();
    Adjacency a = Adjacency::Zero(n, n);
    if (n < 2) return a;
    const Eigen::MatrixXd d = distances(x);
    const double threshold = d.sum() / double(n * (n - 1));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (i != j && d(i, j) < threshold) a(i, j) = 1;
    return a;
}

double jaccard_distance(const Adjacency& a, const Adjacency& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw InputError("jaccard_distance: adjacency shapes differ");
    std::size_t inter = 0, uni = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = i + 1; j < a.cols(); ++j) {
            const bool ea = a(i, j) != 0, eb = b(i, j) != 0;
            inter += ea && eb;
            uni += ea || eb;
        }
    return uni == 0 ? 0.0 : 1.0 - double(inter) / double(uni);
}

// --- reports -----------------------------------------------------------------------

void MetricReport::add(const std::string& name, double value) {
    if (!std::isfinite(value) && !(name == "ld" && value == INFINITY))
        throw NumericError("metric '" + name + "' is not finite");
    if (auto r = declared_range(name); r && (value < r->lo - 1e-12 || value > r->hi + 1e-12))
        throw NumericError("metric '" + name + "' = " + fmt(value) + " is outside [" + fmt(r->lo) + ", " + fmt(r->hi) + "]");
    metrics.emplace_back(name, value);
}

std::optional<double> MetricReport::get(const std::string& name) const {
    for (const auto& [k, v] : metrics)
        if (k == name) return v;
    return std::nullopt;
}

std::string MetricReport::text() const {
    std::string out;
    for (const auto& [k, v] : metrics) out += "metric=" + k + " value=" + fmt(v) + "\n";
    return out;
}

std::string MetricReport::json() const {
    nlohmann::ordered_json j;
    j["dataset"] = dataset;
    j["model"] = model;
    j["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : metrics) j["metrics"][k] = v;
    j["params"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : params) j["params"][k] = v;
    return j.dump(2) + "\n";
}

MetricReport integration_report(const Embeddings& x, const std::vector<std::string>& cell_types,
                                const std::vector<std::string>& batches, std::size_t k,
                                const std::vector<std::string>* predicted, std::size_t threads) {
    if (static_cast<std::size_t>(x.rows()) != cell_types.size() || cell_types.size() != batches.size())
        throw InputError("integration metrics need one cell type and batch per embedding row");
    MetricReport r;
    const Labels types = encode_labels(cell_types);
    const Labels batch = encode_labels(batches);
    Labels clusters;
    if (predicted) {
        if (predicted->size() != cell_types.size()) throw InputError("predicted label count differs from cell count");
        clusters = encode_labels(*predicted);
        r.params["clustering"] = "provided";
    } else {
        clusters = louvain_clusters(x, k, threads);
        r.params["clustering"] = "louvain";
    }
    r.params["k"] = std::to_string(k);
    r.params["clusters"] = std::to_string(count_labels(clusters));
    const double a = ari(types, clusters);
    const double n = nmi(types, clusters);
    const double ac = asw_cell(x, types);
    r.add("ari", a);
    r.add("nmi", n);
    r.add("asw_cell", ac);
    const double gc = graph_conn(x, types, k);
    if (count_labels(batch) >= 2) {
        const double ab = asw_batch(x, batch);
        r.add("asw_batch", ab);
        r.add("graph_conn", gc);
        r.add("avg_bio", avg_bio(a, n, ac));
        r.add("avg_batch", avg_batch(ab, gc));
    } else {
        r.params["asw_batch"] = "skipped: single batch";
        r.add("graph_conn", gc);
        r.add("avg_bio", avg_bio(a, n, ac));
    }
    return r;
}

MetricReport reconstruction_report(const ReconstructionSummary& s) {
    MetricReport r;
    r.add("em", s.em);
    r.add("ld", s.ld);
    r.add("nld", s.nld);
    r.add("bleu", s.bleu);
    r.add("spearman", s.spearman);
    r.add("venn_shared", double(s.shared));
    r.add("venn_input_only", double(s.input_only));
    r.add("venn_output_only", double(s.output_only));
    r.params["cells"] = std::to_string(s.cells.size());
    r.params["ld"] = "mean over cells";
    return r;
}

MetricReport pair_report(const PairScores& scores, std::size_t bins, double smoothing) {
    if (scores.pos_cosine.empty() || scores.neg_cosine.empty())
        throw InputError("pair analysis needs both positive and negative pairs");
    MetricReport r;
    r.add("pos_pairs", double(scores.pos_cosine.size()));
    r.add("neg_pairs", double(scores.neg_cosine.size()));
    r.add("cosine_pos_mean", mean(scores.pos_cosine));
    r.add("cosine_neg_mean", mean(scores.neg_cosine));
    r.add("pearson_pos_mean", mean(scores.pos_pearson));
    r.add("pearson_neg_mean", mean(scores.neg_pearson));
    const auto dc = distribution_distances(scores.pos_cosine, scores.neg_cosine, bins, smoothing);
    const auto dp = distribution_distances(scores.pos_pearson, scores.neg_pearson, bins, smoothing);
    r.add("cosine_euclidean", dc.euclidean);
    r.add("cosine_kl", dc.kl);
    r.add("cosine_js", dc.js);
    r.add("pearson_euclidean", dp.euclidean);
    r.add("pearson_kl", dp.kl);
    r.add("pearson_js", dp.js);
    r.params["bins"] = std::to_string(bins);
    r.params["smoothing"] = fmt(smoothing);
    return r;
}

// --- files -------------------------------------------------------------------------

void write_embeddings(const std::string& path, const std::vector<std::string>& ids, const Embeddings& x) {
    if (ids.size() != static_cast<std::size_t>(x.rows())) throw InputError("one id per embedding row required");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path + "'");
    binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(x.rows()));
    binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(x.cols()));
    for (const auto& id : ids) binio::write_string(out, id);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) binio::write<float>(out, static_cast<float>(x(r, c)));
    if (!out) throw DataError("failed writing '" + path + "'");
}

std::pair<std::vector<std::string>, Embeddings> read_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open embedding file '" + path + "'");
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    const auto n = binio::read<std::uint64_t>(in);
    const auto d = binio::read<std::uint64_t>(in);
    if (n > size || (n > 0 && d > size / 4 / n)) throw DataError("embedding header of '" + path + "' exceeds the file size");
    std::vector<std::string> ids(n);
    for (auto& id : ids) id = binio::read_string(in);
    Embeddings x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = binio::read<float>(in);
    if (in.peek() != std::char_traits<char>::eof()) throw DataError("embedding file '" + path + "' has trailing bytes");
    return {std::move(ids), std::move(x)};
}

void write_histograms(const std::string& path, const Histogram& pos, const Histogram& neg) {
    if (pos.mass.size() != neg.mass.size()) throw InputError("histograms differ in bin count");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "bin_lo\tbin_hi\tpositive\tnegative\n";
    const double w = (pos.hi - pos.lo) / double(pos.mass.size());
    for (std::size_t i = 0; i < pos.mass.size(); ++i)
        out << fmt(pos.lo + w * double(i)) << '\t' << fmt(pos.lo + w * double(i + 1)) << '\t' << fmt(pos.mass[i]) << '\t'
            << fmt(neg.mass[i]) << '\n';
}

void write_rank_pairs(const std::string& path, const std::vector<std::vector<TokenId>>& inputs,
                      const std::vector<std::vector<TokenId>>& outputs) {
    if (inputs.size() != outputs.size()) throw InputError("input and output counts differ");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    // Ranks are 1-based; an output rank of 0 marks a gene that was never emitted.
    out << "cell\ttoken\tinput_rank\toutput_rank\n";
    for (std::size_t c = 0; c < inputs.size(); ++c) {
        const auto in = genes_only(inputs[c]);
        const auto o = genes_only(outputs[c]);
        for (std::size_t i = 0; i < in.size(); ++i) {
            const auto it = std::find(o.begin(), o.end(), in[i]);
            const std::size_t orank = it == o.end() ? 0 : std::size_t(it - o.begin()) + 1;
            out << c << '\t' << in[i] << '\t' << i + 1 << '\t' << orank << '\n';
        }
    }
}

void write_venn(const std::string& path, const ReconstructionSummary& s) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "set\tcount\ninput_only\t" << s.input_only << "\nshared\t" << s.shared << "\noutput_only\t" << s.output_only
        << '\n';
}

}  // namespace genemamba
