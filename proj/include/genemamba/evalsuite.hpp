#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "genemamba/bimamba.hpp"
#include "genemamba/objectives.hpp"

namespace genemamba {

using Embeddings = Eigen::MatrixXd;  // one row per cell or gene
using Labels = std::vector<std::size_t>;

// Maps arbitrary string labels to dense ids in first-seen order.
Labels encode_labels(const std::vector<std::string>& labels);

// --- gene rank reconstruction --------------------------------------------------

enum class DecodeMode {
    TeacherForced,  // one pass over the input; position t proposes token t + 1
    FreeRunning,    // re-run the model on the decoded prefix for every token
};

// Greedy decode of the same length as the input. A leading CLS is kept as is;
// otherwise the first input token seeds the output. Every later token is the
// arg max over gene tokens not yet emitted.
std::vector<TokenId> reconstruct(const ModelParams& model, const std::vector<TokenId>& input,
                                 DecodeMode mode = DecodeMode::TeacherForced);

std::vector<std::vector<TokenId>> reconstruct_all(const ModelParams& model, const std::vector<TokenSequence>& cells,
                                                  DecodeMode mode = DecodeMode::TeacherForced,
                                                  std::size_t threads = 1);

int exact_match(const std::vector<TokenId>& a, const std::vector<TokenId>& b);
double em_avg(const std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>>& pairs);

std::size_t levenshtein(const std::vector<TokenId>& a, const std::vector<TokenId>& b);
// 1 - LD / max(|a|, |b|); 1 when both are empty.
double nld(const std::vector<TokenId>& a, const std::vector<TokenId>& b);

// Clipped n-gram precisions, uniform weights, brevity penalty, no smoothing.
double bleu(const std::vector<TokenId>& candidate, const std::vector<TokenId>& reference, std::size_t max_n = 4);

std::vector<double> average_ranks(const std::vector<double>& v);
double pearson(const std::vector<double>& a, const std::vector<double>& b);  // 0 for a constant input
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Scores for the input genes: input rank score n - position, output score
// n - position when the gene was emitted and 0 otherwise.
std::pair<std::vector<double>, std::vector<double>> rank_scores(const std::vector<TokenId>& input,
                                                                const std::vector<TokenId>& output);

struct CellReconstruction {
    int exact = 0;
    std::size_t ld = 0;
    double nld = 0.0;
    double bleu = 0.0;
    double spearman = 0.0;
    std::size_t shared = 0;       // genes in both
    std::size_t input_only = 0;   // genes never emitted
    std::size_t output_only = 0;  // emitted genes absent from the input
};

// Gene tokens only: CLS and PAD are dropped before scoring.
CellReconstruction score_reconstruction(const std::vector<TokenId>& input, const std::vector<TokenId>& output);

struct ReconstructionSummary {
    std::vector<CellReconstruction> cells;
    double em = 0.0, ld = 0.0, nld = 0.0, bleu = 0.0, spearman = 0.0;
    std::size_t shared = 0, input_only = 0, output_only = 0;
};
ReconstructionSummary summarize(std::vector<CellReconstruction> cells);

// --- clustering and integration metrics ---------------------------------------

double ari(const Labels& truth, const Labels& predicted);
// 2 I(Y; C) / (H(Y) + H(C)), natural log; 1 when both entropies vanish.
double nmi(const Labels& truth, const Labels& predicted);

// Mean Euclidean silhouette in [-1, 1]. Cells of singleton clusters score 0.
double silhouette(const Embeddings& x, const Labels& labels);
double asw_cell(const Embeddings& x, const Labels& cell_types);  // (s + 1) / 2
double asw_batch(const Embeddings& x, const Labels& batches);    // 1 - |s|

// Indices of the k nearest rows (Euclidean, ties by index), self excluded.
std::vector<std::vector<std::size_t>> knn(const Embeddings& x, std::size_t k, std::size_t threads = 1);

// Mean over cell types of |largest component| / N_c of the symmetrized kNN
// graph built within each type, k capped at N_c - 1.
double graph_conn(const Embeddings& x, const Labels& cell_types, std::size_t k = 15);

double avg_bio(double ari, double nmi, double asw_cell);
double avg_batch(double asw_batch, double graph_conn);

// Louvain modularity communities (resolution 1) on the symmetrized kNN graph.
// Nodes are visited in index order, so the result is deterministic.
Labels louvain_clusters(const Embeddings& x, std::size_t k = 15, std::size_t threads = 1);

// --- gene pair analyses ----------------------------------------------------------

struct GeneStates {
    std::vector<TokenId> genes;
    Embeddings embeddings;
};

// Final hidden states mean-pooled per gene over all cells.
GeneStates gene_state_embeddings(const ModelParams& model, const std::vector<TokenSequence>& cells,
                                 std::size_t threads = 1);

struct LabeledPair {
    std::size_t a = 0;
    std::size_t b = 0;
    bool positive = false;
};

// Every unordered pair of annotated genes; positive when they share a pathway.
std::vector<LabeledPair> pathway_pairs(const std::vector<TokenId>& genes, const PathwaySet& pathways);

struct PairScores {
    std::vector<double> pos_cosine, neg_cosine, pos_pearson, neg_pearson;
};
PairScores pair_similarity_report(const Embeddings& x, const std::vector<LabeledPair>& pairs);

struct Histogram {
    double lo = -1.0;
    double hi = 1.0;
    std::vector<double> mass;  // normalized, smoothed
};
Histogram histogram(const std::vector<double>& scores, std::size_t bins = 50, double lo = -1.0, double hi = 1.0,
                    double smoothing = 1e-9);

struct Divergences {
    double euclidean = 0.0;
    double kl = 0.0;  // KL(pos || neg)
    double js = 0.0;  // natural log, at most ln 2
};
Divergences distribution_distances(const std::vector<double>& pos, const std::vector<double>& neg,
                                   std::size_t bins = 50, double smoothing = 1e-9);

using Adjacency = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// Edge (i, j), i != j, iff the Euclidean distance is below the mean
// off-diagonal distance.
Adjacency topology_adjacency(const Embeddings& x);
// Over edge sets; 0 when both graphs are empty.
double jaccard_distance(const Adjacency& a, const Adjacency& b);

// --- reports and files ---------------------------------------------------------------

struct MetricReport {
    std::string dataset;
    std::string model;
    std::vector<std::pair<std::string, double>> metrics;
    std::map<std::string, std::string> params;

    // Rejects values outside the metric's declared range.
    void add(const std::string& name, double value);
    std::optional<double> get(const std::string& name) const;
    std::string text() const;  // `metric=<name> value=<v>` lines
    std::string json() const;
};

MetricReport integration_report(const Embeddings& x, const std::vector<std::string>& cell_types,
                                const std::vector<std::string>& batches, std::size_t k = 15,
                                const std::vector<std::string>* predicted = nullptr, std::size_t threads = 1);
MetricReport reconstruction_report(const ReconstructionSummary& s);
MetricReport pair_report(const PairScores& scores, std::size_t bins = 50, double smoothing = 1e-9);

// Header u64 n, u64 d; n length-prefixed ids; n x d row-major f32.
void write_embeddings(const std::string& path, const std::vector<std::string>& ids, const Embeddings& x);
std::pair<std::vector<std::string>, Embeddings> read_embeddings(const std::string& path);

// Tab-separated plot data.
void write_histograms(const std::string& path, const Histogram& pos, const Histogram& neg);
void write_rank_pairs(const std::string& path, const std::vector<std::vector<TokenId>>& inputs,
                      const std::vector<std::vector<TokenId>>& outputs);
void write_venn(const std::string& path, const ReconstructionSummary& s);

}  // namespace genemamba
