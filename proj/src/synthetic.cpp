#include "genemamba/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "genemamba/error.hpp"
#include "genemamba/random.hpp"

namespace genemamba::synth {

namespace {

std::vector<std::string> gene_names(std::size_t n) {
    std::vector<std::string> names;
    names.reserve(n);
    for (std::size_t g = 0; g < n; ++g) names.push_back("g" + std::to_string(g));
    return names;
}

// k distinct values from pool, in random order.
std::vector<TokenId> sample(Rng& rng, std::vector<TokenId> pool, std::size_t k) {
    if (k > pool.size()) throw ConfigError("cannot sample " + std::to_string(k) + " of " + std::to_string(pool.size()));
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    pool.resize(k);
    return pool;
}

std::vector<TokenId> token_range(TokenId first, TokenId last) {
    std::vector<TokenId> v(last - first);
    std::iota(v.begin(), v.end(), first);
    return v;
}

}  // namespace

ExpressionMatrix typed_counts(const CountsSpec& spec) {
    if (spec.n_types == 0 || spec.n_batches == 0) throw ConfigError("need at least one type and one batch");
    if (spec.n_types * spec.signature_genes > spec.n_genes || spec.expressed_genes > spec.n_genes ||
        spec.expressed_genes < spec.signature_genes)
        throw ConfigError("signature and expressed gene counts do not fit the gene count");
    Rng rng(spec.seed);
    std::vector<Triplet> entries;
    std::vector<CellMeta> meta;
    for (std::size_t c = 0; c < spec.n_cells; ++c) {
        const std::size_t type = c % spec.n_types;
        const std::size_t batch = (c / spec.n_types) % spec.n_batches;
        const double depth = 1.0 + 0.5 * double(batch);
        for (std::size_t s = 0; s < spec.signature_genes; ++s) {
            const std::size_t g = type * spec.signature_genes + s;
            entries.push_back({c, g, std::round(depth * (40.0 + 5.0 * double(spec.signature_genes - s) + rng.below(5)))});
        }
        std::vector<TokenId> others;
        for (std::size_t g = spec.n_types * spec.signature_genes; g < spec.n_genes; ++g) others.push_back(static_cast<TokenId>(g));
        for (auto g : sample(rng, others, std::min(others.size(), spec.expressed_genes - spec.signature_genes)))
            entries.push_back({c, g, std::round(depth * double(1 + rng.below(10)))});
        meta.push_back({"t" + std::to_string(type), "b" + std::to_string(batch), ""});
    }
    auto m = make_matrix(spec.n_cells, gene_names(spec.n_genes), entries);
    m.cell_meta = std::move(meta);
    return m;
}

ExpressionMatrix random_counts(std::size_t n_cells, std::size_t n_genes, double density, std::uint32_t max_count,
                               std::uint64_t seed) {
    if (!(density > 0.0 && density <= 1.0) || max_count == 0) throw ConfigError("invalid random matrix parameters");
    Rng rng(seed);
    std::vector<Triplet> entries;
    for (std::size_t c = 0; c < n_cells; ++c)
        for (std::size_t g = 0; g < n_genes; ++g)
            if (rng.uniform() < density) entries.push_back({c, g, double(1 + rng.below(max_count))});
    return make_matrix(n_cells, gene_names(n_genes), entries);
}

TokenCorpus memorization_corpus(std::size_t n_cells, std::size_t vocab_size, std::size_t seq_len, std::uint64_t seed) {
    if (vocab_size < Vocabulary::kFirstGene + 1 || seq_len < 2) throw ConfigError("corpus too small");
    TokenCorpus out{build_vocab(gene_names(vocab_size - Vocabulary::kFirstGene)), {}};
    out.data.vocab_hash = out.vocab.fingerprint();
    out.data.max_len = static_cast<std::uint32_t>(seq_len);
    Rng rng(seed);
    const auto genes = token_range(Vocabulary::kFirstGene, static_cast<TokenId>(vocab_size));
    for (std::size_t c = 0; c < n_cells; ++c) {
        auto toks = sample(rng, genes, seq_len - 1);
        toks.insert(toks.begin(), Vocabulary::kCls);
        out.data.cells.push_back(make_sequence(toks, seq_len));
    }
    return out;
}

TokenCorpus class_corpus(std::size_t n_classes, std::size_t cells_per_class, std::size_t vocab_size,
                         std::size_t seq_len, std::size_t signature_len, std::uint64_t seed) {
    const std::size_t n_genes = vocab_size - Vocabulary::kFirstGene;
    if (n_classes < 1 || signature_len == 0 || n_classes * signature_len + seq_len > n_genes + signature_len + 1)
        throw ConfigError("class corpus does not fit the vocabulary");
    TokenCorpus out{build_vocab(gene_names(n_genes)), {}};
    out.data.vocab_hash = out.vocab.fingerprint();
    out.data.max_len = static_cast<std::uint32_t>(seq_len);
    out.data.labels.emplace();
    Rng rng(seed);
    const auto sig_end = static_cast<TokenId>(Vocabulary::kFirstGene + n_classes * signature_len);
    const auto background = token_range(sig_end, static_cast<TokenId>(vocab_size));
    const std::size_t top = std::min(signature_len, seq_len - 1);
    for (std::size_t i = 0; i < cells_per_class; ++i)
        for (std::size_t k = 0; k < n_classes; ++k) {
            const auto first = static_cast<TokenId>(Vocabulary::kFirstGene + k * signature_len);
            auto toks = sample(rng, token_range(first, static_cast<TokenId>(first + signature_len)), top);
            auto rest = sample(rng, background, seq_len - 1 - top);
            toks.insert(toks.begin(), Vocabulary::kCls);
            toks.insert(toks.end(), rest.begin(), rest.end());
            out.data.cells.push_back(make_sequence(toks, seq_len));
            out.data.labels->push_back({"c" + std::to_string(k), "b" + std::to_string(i % 2), ""});
        }
    return out;
}

PathwayCorpus pathway_corpus(std::size_t n_pathways, std::size_t genes_per_pathway, std::size_t background_genes,
                             std::size_t n_cells, std::size_t seq_len, std::size_t active_genes, std::uint64_t seed) {
    const std::size_t n_genes = n_pathways * genes_per_pathway + background_genes;
    if (n_pathways == 0 || active_genes > genes_per_pathway || seq_len < active_genes + 1 || seq_len - 1 > n_genes)
        throw ConfigError("pathway corpus does not fit");
    PathwayCorpus out;
    auto& corpus = out.corpus;
    corpus.vocab = build_vocab(gene_names(n_genes));
    corpus.data.vocab_hash = corpus.vocab.fingerprint();
    corpus.data.max_len = static_cast<std::uint32_t>(seq_len);
    for (std::size_t p = 0; p < n_pathways; ++p) {
        const auto first = static_cast<TokenId>(Vocabulary::kFirstGene + p * genes_per_pathway);
        out.members.push_back(token_range(first, static_cast<TokenId>(first + genes_per_pathway)));
        for (auto g : out.members.back()) out.pathways.add(g, "P" + std::to_string(p));
    }
    Rng rng(seed);
    const auto all = token_range(Vocabulary::kFirstGene, static_cast<TokenId>(Vocabulary::kFirstGene + n_genes));
    for (std::size_t c = 0; c < n_cells; ++c) {
        const auto& members = out.members[rng.below(n_pathways)];
        auto toks = sample(rng, members, active_genes);
        std::vector<TokenId> rest;
        for (auto g : all)
            if (std::find(toks.begin(), toks.end(), g) == toks.end()) rest.push_back(g);
        auto fill = sample(rng, rest, seq_len - 1 - active_genes);
        toks.insert(toks.end(), fill.begin(), fill.end());
        // Mix the active genes into random ranks.
        rng.shuffle(toks);
        toks.insert(toks.begin(), Vocabulary::kCls);
        corpus.data.cells.push_back(make_sequence(toks, seq_len));
    }
    return out;
}

}  // namespace genemamba::synth
