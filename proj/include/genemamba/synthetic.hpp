#pragma once

#include <cstdint>
#include <vector>

#include "genemamba/corpus.hpp"
#include "genemamba/objectives.hpp"

// Small generated corpora for tests, acceptance runs and demos.
namespace genemamba::synth {

// Counts matrix with cell types marked by strongly expressed signature genes
// and a per-batch depth shift. Genes are named g0..g{n-1}; cell metadata is
// attached (types t0.., batches b0..).
struct CountsSpec {
    std::size_t n_cells = 60;
    std::size_t n_genes = 40;
    std::size_t n_types = 3;
    std::size_t n_batches = 2;
    std::size_t signature_genes = 4;  // per type
    std::size_t expressed_genes = 20;  // per cell, signature included
    std::uint64_t seed = 0;
};
ExpressionMatrix typed_counts(const CountsSpec& spec);

// Uniform random counts, density in (0, 1].
ExpressionMatrix random_counts(std::size_t n_cells, std::size_t n_genes, double density, std::uint32_t max_count,
                               std::uint64_t seed);

// Vocabulary of `vocab_size` tokens (PAD, CLS, then genes g0..) with cells of
// `seq_len` tokens: CLS followed by distinct random genes.
struct TokenCorpus {
    Vocabulary vocab;
    TokenizedDataset data;
};
TokenCorpus memorization_corpus(std::size_t n_cells, std::size_t vocab_size, std::size_t seq_len, std::uint64_t seed);

// Cells whose top-ranked genes come from a class signature; the remaining
// positions are random non-signature genes. Labels carry type c<k> and
// alternating batches.
TokenCorpus class_corpus(std::size_t n_classes, std::size_t cells_per_class, std::size_t vocab_size,
                         std::size_t seq_len, std::size_t signature_len, std::uint64_t seed);

// Pathway genes come first in the vocabulary: pathway p owns genes
// [p * genes_per_pathway, (p + 1) * genes_per_pathway). Each cell draws
// `active_genes` genes from one pathway and fills the rest with random genes.
struct PathwayCorpus {
    TokenCorpus corpus;
    PathwaySet pathways;
    std::vector<std::vector<TokenId>> members;
};
PathwayCorpus pathway_corpus(std::size_t n_pathways, std::size_t genes_per_pathway, std::size_t background_genes,
                             std::size_t n_cells, std::size_t seq_len, std::size_t active_genes, std::uint64_t seed);

}  // namespace genemamba::synth
