#include "genemamba/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <unordered_set>

#include "genemamba/binary_io.hpp"
#include "genemamba/error.hpp"
#include "genemamba/parallel.hpp"

namespace genemamba {

namespace {

using Storage = ExpressionMatrix::Storage;

// Cells per median shard; fixed so results are independent of thread count.
constexpr std::size_t kShardCells = 4096;

template <typename Fn>
ExpressionMatrix map_rows(const ExpressionMatrix& m, Fn&& fn) {
    ExpressionMatrix out;
    out.gene_ids = m.gene_ids;
    out.cell_meta = m.cell_meta;
    out.values = m.values;
    for (Eigen::Index r = 0; r < out.values.outerSize(); ++r) fn(r, out.values);
    return out;
}

}  // namespace

std::size_t ExpressionMatrix::expressed_genes(std::size_t cell) const {
    std::size_t n = 0;
    for (Storage::InnerIterator it(values, static_cast<Eigen::Index>(cell)); it; ++it)
        if (it.value() > 0.0) ++n;
    return n;
}

ExpressionMatrix make_matrix(std::size_t n_cells, std::vector<std::string> gene_ids, const std::vector<Triplet>& entries) {
    std::unordered_set<std::string> seen;
    for (const auto& g : gene_ids)
        if (!seen.insert(g).second) throw DataError("duplicate gene id '" + g + "'");
    const std::size_t n_genes = gene_ids.size();

    std::vector<Eigen::Triplet<double, std::int64_t>> trips;
    trips.reserve(entries.size());
    std::set<std::pair<std::size_t, std::size_t>> keys;
    for (const auto& e : entries) {
        if (e.cell >= n_cells || e.gene >= n_genes)
            throw DataError("entry (" + std::to_string(e.cell) + "," + std::to_string(e.gene) + ") out of bounds");
        if (!std::isfinite(e.value) || e.value < 0.0)
            throw DataError("entry (" + std::to_string(e.cell) + "," + std::to_string(e.gene) + ") has invalid count");
        if (!keys.emplace(e.cell, e.gene).second)
            throw DataError("duplicate entry (" + std::to_string(e.cell) + "," + std::to_string(e.gene) + ")");
        if (e.value > 0.0)
            trips.emplace_back(static_cast<std::int64_t>(e.cell), static_cast<std::int64_t>(e.gene), e.value);
    }
    ExpressionMatrix m;
    m.values.resize(static_cast<Eigen::Index>(n_cells), static_cast<Eigen::Index>(n_genes));
    m.values.setFromTriplets(trips.begin(), trips.end());
    m.values.makeCompressed();
    m.gene_ids = std::move(gene_ids);
    return m;
}

ExpressionMatrix load_matrix(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open matrix file '" + path + "'");
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& what) -> DataError {
        return DataError(path + ":" + std::to_string(line_no) + ": " + what);
    };

    std::size_t n_cells = 0, n_genes = 0;
    {
        ++line_no;
        if (!std::getline(in, line)) throw fail("missing header");
        std::istringstream hs(line);
        std::string kc, kg, extra;
        if (!(hs >> kc >> n_cells >> kg >> n_genes) || kc != "cells" || kg != "genes" || (hs >> extra))
            throw fail("expected header 'cells <n> genes <m>'");
    }
    std::vector<std::string> genes;
    genes.reserve(n_genes);
    while (genes.size() < n_genes) {
        ++line_no;
        if (!std::getline(in, line)) throw fail("expected " + std::to_string(n_genes) + " gene ids");
        std::istringstream ls(line);
        std::string id, extra;
        if (!(ls >> id) || (ls >> extra)) throw fail("malformed gene id line");
        genes.push_back(id);
    }
    std::vector<Triplet> entries;
    std::set<std::pair<std::size_t, std::size_t>> keys;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        long long c = -1, g = -1;
        double v = 0.0;
        std::string extra;
        if (!(ls >> c >> g >> v) || (ls >> extra)) throw fail("malformed triplet line");
        if (c < 0 || g < 0 || static_cast<std::size_t>(c) >= n_cells || static_cast<std::size_t>(g) >= n_genes)
            throw fail("triplet index out of bounds");
        if (!std::isfinite(v) || v < 0.0) throw fail("invalid count");
        if (!keys.emplace(c, g).second) throw fail("duplicate triplet");
        entries.push_back({static_cast<std::size_t>(c), static_cast<std::size_t>(g), v});
    }
    return make_matrix(n_cells, std::move(genes), entries);
}

void save_matrix(const ExpressionMatrix& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write matrix file '" + path + "'");
    out << "cells " << m.n_cells() << " genes " << m.n_genes() << '\n';
    for (const auto& g : m.gene_ids) out << g << '\n';
    out << std::setprecision(17);
    for (Eigen::Index r = 0; r < m.values.outerSize(); ++r)
        for (Storage::InnerIterator it(m.values, r); it; ++it) out << r << ' ' << it.col() << ' ' << it.value() << '\n';
}

std::vector<CellMeta> load_cell_meta(const std::string& path, std::size_t n_cells) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open label file '" + path + "'");
    std::vector<std::optional<CellMeta>> rows(n_cells);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        if (fields.size() < 3 || fields.size() > 4)
            throw DataError(path + ":" + std::to_string(line_no) + ": expected 3 or 4 tab-separated fields");
        std::size_t idx = 0;
        try {
            idx = std::stoul(fields[0]);
        } catch (const std::exception&) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad cell index");
        }
        if (idx >= n_cells || rows[idx])
            throw DataError(path + ":" + std::to_string(line_no) + ": cell index out of range or repeated");
        rows[idx] = CellMeta{fields[1], fields[2], fields.size() == 4 ? fields[3] : std::string{}};
    }
    std::vector<CellMeta> out;
    out.reserve(n_cells);
    for (std::size_t i = 0; i < n_cells; ++i) {
        if (!rows[i]) throw DataError(path + ": no label for cell " + std::to_string(i));
        out.push_back(*rows[i]);
    }
    return out;
}

ExpressionMatrix filter_cells(const ExpressionMatrix& m, std::size_t min_genes) {
    if (min_genes < 1) throw ConfigError("min_genes must be >= 1");
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < m.n_cells(); ++c)
        if (m.expressed_genes(c) >= min_genes) keep.push_back(c);

    std::vector<Eigen::Triplet<double, std::int64_t>> trips;
    for (std::size_t i = 0; i < keep.size(); ++i)
        for (Storage::InnerIterator it(m.values, static_cast<Eigen::Index>(keep[i])); it; ++it)
            trips.emplace_back(static_cast<std::int64_t>(i), it.col(), it.value());
    ExpressionMatrix out;
    out.gene_ids = m.gene_ids;
    out.values.resize(static_cast<Eigen::Index>(keep.size()), m.values.cols());
    out.values.setFromTriplets(trips.begin(), trips.end());
    out.values.makeCompressed();
    if (m.cell_meta) {
        std::vector<CellMeta> meta;
        for (auto c : keep) meta.push_back((*m.cell_meta)[c]);
        out.cell_meta = std::move(meta);
    }
    return out;
}

ExpressionMatrix depth_normalize_log1p(const ExpressionMatrix& m, double target) {
    if (!(target > 0.0)) throw ConfigError("target depth must be positive");
    return map_rows(m, [&](Eigen::Index r, Storage& v) {
        double total = 0.0;
        for (Storage::InnerIterator it(v, r); it; ++it) total += it.value();
        if (!(total > 0.0)) throw InputError("cell " + std::to_string(r) + " has zero total count");
        const double scale = target / total;
        for (Storage::InnerIterator it(v, r); it; ++it) it.valueRef() = std::log1p(it.value() * scale);
    });
}

NormalizationFactors compute_gene_medians(const ExpressionMatrix& m, double compression, std::size_t threads) {
    if (m.n_cells() == 0 || m.n_genes() == 0) throw InputError("gene medians need a non-empty matrix");
    const std::size_t n_shards = (m.n_cells() + kShardCells - 1) / kShardCells;
    std::vector<std::vector<TDigest>> shards(n_shards);
    parallel_for(n_shards, threads, [&](std::size_t s) {
        std::vector<TDigest> sketches(m.n_genes(), TDigest(compression));
        const std::size_t end = std::min(m.n_cells(), (s + 1) * kShardCells);
        for (std::size_t c = s * kShardCells; c < end; ++c)
            for (Storage::InnerIterator it(m.values, static_cast<Eigen::Index>(c)); it; ++it)
                if (it.value() > 0.0) sketches[static_cast<std::size_t>(it.col())].insert(it.value());
        shards[s] = std::move(sketches);
    });
    NormalizationFactors f;
    f.median.resize(m.n_genes());
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        TDigest pooled(compression);
        for (const auto& shard : shards) pooled.merge(shard[g]);
        if (!pooled.empty()) f.median[g] = pooled.quantile(0.5);
    }
    return f;
}

ExpressionMatrix normalize_by_gene_median(const ExpressionMatrix& m, const NormalizationFactors& f) {
    if (f.median.size() != m.n_genes()) throw DataError("normalization factors do not match gene count");
    return map_rows(m, [&](Eigen::Index r, Storage& v) {
        double total = 0.0;
        for (Storage::InnerIterator it(v, r); it; ++it) total += it.value();
        for (Storage::InnerIterator it(v, r); it; ++it) {
            const auto& med = f.median[static_cast<std::size_t>(it.col())];
            if (!med || !(*med > 0.0))
                throw DataError("no normalization factor for expressed gene '" +
                                m.gene_ids[static_cast<std::size_t>(it.col())] + "'");
            it.valueRef() = (it.value() / total) / *med;
        }
    });
}

Vocabulary::Vocabulary(const std::vector<std::string>& gene_ids) : genes_(gene_ids) {
    for (std::size_t i = 0; i < genes_.size(); ++i)
        if (!index_.emplace(genes_[i], static_cast<TokenId>(i + kFirstGene)).second)
            throw DataError("duplicate gene id '" + genes_[i] + "' in vocabulary");
}

std::optional<TokenId> Vocabulary::lookup(const std::string& gene_id) const {
    auto it = index_.find(gene_id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

const std::string& Vocabulary::gene_id(TokenId token) const {
    static const std::string pad = "[PAD]", cls = "[CLS]";
    if (token == kPad) return pad;
    if (token == kCls) return cls;
    if (token - kFirstGene >= genes_.size()) throw InputError("token id " + std::to_string(token) + " outside vocabulary");
    return genes_[token - kFirstGene];
}

std::uint64_t Vocabulary::fingerprint() const {
    std::uint64_t h = binio::fnv1a("genemamba-vocab");
    for (const auto& g : genes_) h = binio::fnv1a(g + '\n', h);
    return h;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary '" + path + "'");
    for (const auto& g : genes_) out << g << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary '" + path + "'");
    std::vector<std::string> genes;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) genes.push_back(line);
    }
    return Vocabulary(genes);
}

Vocabulary build_vocab(const std::vector<std::string>& gene_ids) { return Vocabulary(gene_ids); }

TokenSequence make_sequence(const std::vector<TokenId>& valid, std::size_t max_len) {
    if (valid.size() > max_len) throw InputError("sequence longer than max_len");
    TokenSequence s;
    s.tokens.assign(max_len, Vocabulary::kPad);
    std::copy(valid.begin(), valid.end(), s.tokens.begin());
    s.valid_len = valid.size();
    return s;
}

TokenSequence rank_tokenize(const ExpressionMatrix& normalized, std::size_t cell, const Vocabulary& vocab,
                            std::size_t max_len, bool prepend_cls) {
    if (max_len < 1 || (prepend_cls && max_len < 2)) throw ConfigError("max_len too small");
    std::vector<std::pair<double, TokenId>> ranked;
    for (Storage::InnerIterator it(normalized.values, static_cast<Eigen::Index>(cell)); it; ++it) {
        if (!(it.value() > 0.0)) continue;
        const auto& gid = normalized.gene_ids[static_cast<std::size_t>(it.col())];
        auto tok = vocab.lookup(gid);
        if (!tok) throw DataError("gene '" + gid + "' missing from vocabulary");
        ranked.emplace_back(it.value(), *tok);
    }
    const std::size_t budget = max_len - (prepend_cls ? 1 : 0);
    const std::size_t keep = std::min(budget, ranked.size());
    auto by_rank = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(), by_rank);
    std::vector<TokenId> valid;
    valid.reserve(keep + 1);
    if (prepend_cls) valid.push_back(Vocabulary::kCls);
    for (std::size_t i = 0; i < keep; ++i) valid.push_back(ranked[i].second);
    return make_sequence(valid, max_len);
}

void save_dataset(const TokenizedDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write dataset '" + path + "'");
    binio::write<std::uint64_t>(out, ds.vocab_hash);
    binio::write<std::uint32_t>(out, ds.max_len);
    binio::write<std::uint64_t>(out, ds.cells.size());
    for (const auto& s : ds.cells) {
        binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(s.valid_len));
        for (std::size_t i = 0; i < s.valid_len; ++i) binio::write<std::uint32_t>(out, s.tokens[i]);
    }
    binio::write<std::uint8_t>(out, ds.labels ? 1 : 0);
    if (ds.labels) {
        if (ds.labels->size() != ds.cells.size()) throw DataError("label table size mismatch");
        for (const auto& m : *ds.labels) {
            binio::write_string(out, m.cell_type);
            binio::write_string(out, m.batch);
            binio::write_string(out, m.partition);
        }
    }
    if (!out) throw DataError("failed writing dataset '" + path + "'");
}

TokenizedDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset '" + path + "'");
    TokenizedDataset ds;
    ds.vocab_hash = binio::read<std::uint64_t>(in);
    ds.max_len = binio::read<std::uint32_t>(in);
    const auto n = binio::read<std::uint64_t>(in);
    if (n > (1ull << 34)) throw DataError("dataset header: implausible cell count");
    ds.cells.reserve(static_cast<std::size_t>(n));
    for (std::uint64_t c = 0; c < n; ++c) {
        const auto len = binio::read<std::uint32_t>(in);
        if (len > ds.max_len) throw DataError("dataset: sequence longer than max_len");
        std::vector<TokenId> valid(len);
        for (auto& t : valid) t = binio::read<std::uint32_t>(in);
        ds.cells.push_back(make_sequence(valid, ds.max_len));
    }
    const auto flag = binio::read<std::uint8_t>(in);
    if (flag > 1) throw DataError("dataset: bad label flag");
    if (flag == 1) {
        std::vector<CellMeta> labels;
        labels.reserve(ds.cells.size());
        for (std::size_t c = 0; c < ds.cells.size(); ++c) {
            CellMeta m;
            m.cell_type = binio::read_string(in);
            m.batch = binio::read_string(in);
            m.partition = binio::read_string(in);
            labels.push_back(std::move(m));
        }
        ds.labels = std::move(labels);
    }
    return ds;
}

PipelineResult run_pipeline(const ExpressionMatrix& raw, const PipelineConfig& cfg) {
    PipelineResult res;
    res.vocab = build_vocab(raw.gene_ids);
    for (std::size_t c = 0; c < raw.n_cells(); ++c)
        if (raw.expressed_genes(c) >= cfg.min_genes) res.kept_cells.push_back(c);

    const ExpressionMatrix filtered = filter_cells(raw, cfg.min_genes);
    res.dataset.vocab_hash = res.vocab.fingerprint();
    res.dataset.max_len = static_cast<std::uint32_t>(cfg.max_len);
    res.dataset.labels = filtered.cell_meta;
    if (filtered.n_cells() == 0) {
        res.factors.median.assign(raw.n_genes(), std::nullopt);
        return res;
    }
    const ExpressionMatrix logged = depth_normalize_log1p(filtered, cfg.target_depth);
    res.factors = compute_gene_medians(logged, cfg.compression, cfg.threads);
    const ExpressionMatrix normalized = normalize_by_gene_median(logged, res.factors);
    res.dataset.cells.resize(normalized.n_cells());
    parallel_for(normalized.n_cells(), cfg.threads, [&](std::size_t c) {
        res.dataset.cells[c] = rank_tokenize(normalized, c, res.vocab, cfg.max_len, cfg.prepend_cls);
    });
    return res;
}

}  // namespace genemamba
