#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/SparseCore>

#include "genemamba/tdigest.hpp"

namespace genemamba {

using TokenId = std::uint32_t;

struct CellMeta {
    std::string cell_type;
    std::string batch;
    std::string partition;  // "train", "test" or empty
    friend bool operator==(const CellMeta&, const CellMeta&) = default;
};

// Cells x genes expression matrix. Only strictly positive values are stored.
struct ExpressionMatrix {
    using Storage = Eigen::SparseMatrix<double, Eigen::RowMajor, std::int64_t>;

    Storage values;
    std::vector<std::string> gene_ids;
    std::optional<std::vector<CellMeta>> cell_meta;

    std::size_t n_cells() const { return static_cast<std::size_t>(values.rows()); }
    std::size_t n_genes() const { return static_cast<std::size_t>(values.cols()); }
    std::size_t expressed_genes(std::size_t cell) const;
};

struct Triplet {
    std::size_t cell;
    std::size_t gene;
    double value;
};

// Builds a matrix from triplets; rejects out-of-range indices, duplicate
// (cell, gene) entries, negative or non-finite values, and duplicate gene ids.
// Zero values are dropped.
ExpressionMatrix make_matrix(std::size_t n_cells, std::vector<std::string> gene_ids, const std::vector<Triplet>& entries);

// Text format:
//   cells <n> genes <m>
//   <m lines, one gene id each>
//   <cell> <gene> <count>   (zero-based, one triplet per line)
ExpressionMatrix load_matrix(const std::string& path);
void save_matrix(const ExpressionMatrix& m, const std::string& path);

// Tab-separated `cell_index  cell_type  batch  [partition]`; every cell must appear once.
std::vector<CellMeta> load_cell_meta(const std::string& path, std::size_t n_cells);

ExpressionMatrix filter_cells(const ExpressionMatrix& m, std::size_t min_genes);

// Scales each cell to sum to `target` and applies log1p.
ExpressionMatrix depth_normalize_log1p(const ExpressionMatrix& m, double target);

// Per-gene median of non-zero values; absent for genes never observed.
struct NormalizationFactors {
    std::vector<std::optional<double>> median;
};

// Sketches are built over fixed-size cell shards and merged in shard order,
// so the result does not depend on `threads`.
NormalizationFactors compute_gene_medians(const ExpressionMatrix& m,
                                          double compression = TDigest::kDefaultCompression,
                                          std::size_t threads = 1);

// value / cell total / gene median, for every stored entry.
ExpressionMatrix normalize_by_gene_median(const ExpressionMatrix& m, const NormalizationFactors& f);

class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kCls = 1;
    static constexpr TokenId kFirstGene = 2;

    Vocabulary() = default;
    explicit Vocabulary(const std::vector<std::string>& gene_ids);

    std::optional<TokenId> lookup(const std::string& gene_id) const;
    const std::string& gene_id(TokenId token) const;
    std::size_t size() const { return genes_.size() + kFirstGene; }
    const std::vector<std::string>& genes() const { return genes_; }
    std::uint64_t fingerprint() const;

    // One gene id per line, in token order.
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.genes_ == b.genes_; }

private:
    std::vector<std::string> genes_;
    std::unordered_map<std::string, TokenId> index_;
};

Vocabulary build_vocab(const std::vector<std::string>& gene_ids);

// Fixed-length token list; positions at or beyond valid_len hold PAD.
struct TokenSequence {
    std::vector<TokenId> tokens;
    std::size_t valid_len = 0;

    std::vector<TokenId> valid() const { return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(valid_len)}; }
    bool has_cls() const { return valid_len > 0 && tokens[0] == Vocabulary::kCls; }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

TokenSequence make_sequence(const std::vector<TokenId>& valid, std::size_t max_len);

// Genes of one cell by descending value, ties by ascending token id, cut to
// max_len tokens (including the CLS token when prepend_cls is set).
TokenSequence rank_tokenize(const ExpressionMatrix& normalized, std::size_t cell, const Vocabulary& vocab,
                            std::size_t max_len, bool prepend_cls = false);

struct TokenizedDataset {
    std::uint64_t vocab_hash = 0;
    std::uint32_t max_len = 0;
    std::vector<TokenSequence> cells;
    std::optional<std::vector<CellMeta>> labels;

    friend bool operator==(const TokenizedDataset&, const TokenizedDataset&) = default;
};

// Binary layout (little-endian): u64 vocab hash, u32 max_len, u64 n_cells;
// per cell u32 valid_len followed by valid_len u32 token ids; then u8 label
// flag and, when set, per cell three length-prefixed strings (type, batch,
// partition).
void save_dataset(const TokenizedDataset& ds, const std::string& path);
TokenizedDataset load_dataset(const std::string& path);

struct PipelineConfig {
    std::size_t min_genes = 200;
    double target_depth = 1e4;
    std::size_t max_len = 2048;
    double compression = TDigest::kDefaultCompression;
    bool prepend_cls = true;
    std::size_t threads = 1;
};

struct PipelineResult {
    Vocabulary vocab;
    NormalizationFactors factors;
    TokenizedDataset dataset;
    std::vector<std::size_t> kept_cells;  // indices into the input matrix
};

// filter -> depth normalize + log1p -> gene medians -> median scaling -> rank tokens.
PipelineResult run_pipeline(const ExpressionMatrix& raw, const PipelineConfig& cfg);

}  // namespace genemamba
