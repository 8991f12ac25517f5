#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "genemamba/bimamba.hpp"

namespace genemamba {

// Gene token -> pathway membership. Two distinct genes form a positive pair
// when their pathway sets intersect.
class PathwaySet {
public:
    void add(TokenId gene, const std::string& pathway);
    bool positive(TokenId a, TokenId b) const;
    const std::vector<std::uint32_t>& pathways_of(TokenId gene) const;
    std::size_t pathway_count() const { return names_.size(); }
    std::size_t gene_count() const { return membership_.size(); }
    const std::vector<std::string>& pathway_names() const { return names_; }

private:
    std::map<TokenId, std::vector<std::uint32_t>> membership_;  // sorted pathway ids
    std::map<std::string, std::uint32_t> ids_;
    std::vector<std::string> names_;
};

// Lines `gene_id<TAB>pathway_id`. Genes missing from the vocabulary are
// skipped and counted in `skipped` when provided.
PathwaySet load_pathways(const std::string& path, const Vocabulary& vocab, std::size_t* skipped = nullptr);

struct LossConfig {
    double gamma = 0.1;
    double tau = 0.1;
    void validate() const;
};

struct NllResult {
    double loss = 0.0;
    std::size_t targets = 0;
    std::vector<Mat> d_logits;  // same shapes as the input logits
};

// Mean next-token negative log-likelihood. logits[i] is n_i x V for the
// valid prefix of sequence i; position t predicts tokens[i][t + 1].
NllResult next_gene_nll(const std::vector<Mat>& logits, const std::vector<std::vector<TokenId>>& tokens,
                        bool with_gradient = false);

// Cosine similarity matrix of the rows.
Mat pairwise_cosine(const Mat& embeddings);

struct InfoNceResult {
    double loss = 0.0;
    std::size_t positive_pairs = 0;  // ordered pairs
    bool degenerate = false;         // no positive pair: loss defined as 0
    Mat d_embeddings;
};

// Mean over ordered positive pairs (i, j) of
//   -log( exp(sim(i,j)/tau) / sum_{k != i} exp(sim(i,k)/tau) ).
// Row r of `embeddings` represents gene `genes[r]`.
InfoNceResult infonce_pathway(const Mat& embeddings, const std::vector<TokenId>& genes, const PathwaySet& pathways,
                              double tau, bool with_gradient = false);

double total_loss(double l_lang, double l_pathway, const LossConfig& cfg);

struct LossBreakdown {
    double l_lang = 0.0;
    double l_pathway = 0.0;
    double total = 0.0;
    std::size_t targets = 0;
    std::size_t positive_pairs = 0;
    bool pathway_degenerate = false;
};

// Distinct genes of a batch and their mean contextual state.
struct PooledGenes {
    std::vector<TokenId> genes;
    Mat embeddings;
};
PooledGenes pool_gene_states(const std::vector<std::vector<TokenId>>& tokens, const std::vector<Mat>& hidden);

LossBreakdown evaluate_loss(const ModelParams& model, const std::vector<TokenSequence>& batch, const PathwaySet& pathways,
                            const LossConfig& cfg, std::size_t threads = 1);

struct GradientResult {
    ModelParams grads;
    LossBreakdown loss;
};

// Gradient of the total loss with respect to every learnable tensor.
// Per-sequence contributions are reduced in sequence order, so the result is
// identical for any thread count.
GradientResult gradients(const ModelParams& model, const std::vector<TokenSequence>& batch, const PathwaySet& pathways,
                         const LossConfig& cfg, std::size_t threads = 1);

}  // namespace genemamba
