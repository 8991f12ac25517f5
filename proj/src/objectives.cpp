#include "genemamba/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "genemamba/error.hpp"
#include "genemamba/parallel.hpp"

namespace genemamba {

namespace {

const std::vector<std::uint32_t> kNoPathways;

double log_sum_exp(const Eigen::Ref<const Vec>& v) {
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

std::vector<std::vector<TokenId>> valid_tokens(const std::vector<TokenSequence>& batch) {
    std::vector<std::vector<TokenId>> out;
    out.reserve(batch.size());
    for (const auto& s : batch) out.push_back(s.valid());
    return out;
}

void add_into(ModelParams& into, const ModelParams& from) {
    std::vector<const Mat*> src;
    std::vector<const Vec*> srcv;
    from.visit([&](const std::string&, const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, Mat>) src.push_back(&t);
        else srcv.push_back(&t);
    });
    std::size_t i = 0, j = 0;
    into.visit([&](const std::string&, auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, Mat>) t += *src[i++];
        else t += *srcv[j++];
    });
}

struct SequenceWork {
    ForwardCache cache;
    Mat logits;
};

}  // namespace

void PathwaySet::add(TokenId gene, const std::string& pathway) {
    auto [it, inserted] = ids_.emplace(pathway, static_cast<std::uint32_t>(names_.size()));
    if (inserted) names_.push_back(pathway);
    auto& list = membership_[gene];
    auto pos = std::lower_bound(list.begin(), list.end(), it->second);
    if (pos == list.end() || *pos != it->second) list.insert(pos, it->second);
}

const std::vector<std::uint32_t>& PathwaySet::pathways_of(TokenId gene) const {
    auto it = membership_.find(gene);
    return it == membership_.end() ? kNoPathways : it->second;
}

bool PathwaySet::positive(TokenId a, TokenId b) const {
    if (a == b) return false;
    const auto& pa = pathways_of(a);
    const auto& pb = pathways_of(b);
    std::size_t i = 0, j = 0;
    while (i < pa.size() && j < pb.size()) {
        if (pa[i] == pb[j]) return true;
        if (pa[i] < pb[j]) ++i;
        else ++j;
    }
    return false;
}

PathwaySet load_pathways(const std::string& path, const Vocabulary& vocab, std::size_t* skipped) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open pathway file '" + path + "'");
    PathwaySet set;
    std::string line;
    std::size_t line_no = 0, missing = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size() || line.find('\t', tab + 1) != std::string::npos)
            throw DataError(path + ":" + std::to_string(line_no) + ": expected 'gene_id<TAB>pathway_id'");
        const auto tok = vocab.lookup(line.substr(0, tab));
        if (!tok) {
            ++missing;
            continue;
        }
        set.add(*tok, line.substr(tab + 1));
    }
    if (skipped) *skipped = missing;
    return set;
}

void LossConfig::validate() const {
    if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive");
    if (!(gamma >= 0.0)) throw ConfigError("pathway weight gamma must be non-negative");
}

NllResult next_gene_nll(const std::vector<Mat>& logits, const std::vector<std::vector<TokenId>>& tokens, bool with_gradient) {
    if (logits.size() != tokens.size()) throw InputError("next_gene_nll: logits/tokens batch mismatch");
    NllResult r;
    for (const auto& t : tokens) r.targets += t.size() > 1 ? t.size() - 1 : 0;
    if (r.targets == 0) throw InputError("next_gene_nll: no position has a next token");
    const double inv_m = 1.0 / double(r.targets);
    double sum = 0.0;
    if (with_gradient) r.d_logits.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto n = static_cast<Eigen::Index>(tokens[i].size());
        if (logits[i].rows() < n) throw InputError("next_gene_nll: logits shorter than sequence");
        if (with_gradient) r.d_logits[i] = Mat::Zero(logits[i].rows(), logits[i].cols());
        for (Eigen::Index t = 0; t + 1 < n; ++t) {
            const auto target = static_cast<Eigen::Index>(tokens[i][static_cast<std::size_t>(t + 1)]);
            if (target >= logits[i].cols()) throw InputError("next_gene_nll: target outside vocabulary");
            const Vec row = logits[i].row(t).transpose();
            const double lse = log_sum_exp(row);
            sum += lse - row(target);
            if (with_gradient) {
                auto g = r.d_logits[i].row(t);
                g = ((row.array() - lse).exp() * inv_m).matrix().transpose();
                g(target) -= inv_m;
            }
        }
    }
    r.loss = sum * inv_m;
    return r;
}

Mat pairwise_cosine(const Mat& embeddings) {
    const Vec norms = embeddings.rowwise().norm();
    for (Eigen::Index i = 0; i < norms.size(); ++i)
        if (!(norms(i) > 0.0)) throw InputError("pairwise_cosine: zero-norm row " + std::to_string(i));
    const Mat unit = embeddings.array().colwise() / norms.array();
    Mat sim = unit * unit.transpose();
    sim.diagonal().setOnes();
    return sim;
}

InfoNceResult infonce_pathway(const Mat& embeddings, const std::vector<TokenId>& genes, const PathwaySet& pathways,
                              double tau, bool with_gradient) {
    if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive");
    if (static_cast<std::size_t>(embeddings.rows()) != genes.size())
        throw InputError("infonce_pathway: one embedding row per gene required");
    const Eigen::Index n = embeddings.rows();
    InfoNceResult r;
    r.d_embeddings = Mat::Zero(n, embeddings.cols());

    std::vector<std::size_t> positives_of(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (i != j && pathways.positive(genes[static_cast<std::size_t>(i)], genes[static_cast<std::size_t>(j)]))
                ++positives_of[static_cast<std::size_t>(i)];
    for (auto c : positives_of) r.positive_pairs += c;
    if (r.positive_pairs == 0) {
        r.degenerate = true;
        return r;
    }

    const Mat sim = pairwise_cosine(embeddings);
    const Mat scaled = sim / tau;
    const double inv_p = 1.0 / double(r.positive_pairs);
    Mat d_sim = Mat::Zero(n, n);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto count = positives_of[static_cast<std::size_t>(i)];
        if (count == 0) continue;
        Vec others(n - 1);
        for (Eigen::Index k = 0, o = 0; k < n; ++k)
            if (k != i) others(o++) = scaled(i, k);
        const double lse = log_sum_exp(others);
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i && pathways.positive(genes[static_cast<std::size_t>(i)], genes[static_cast<std::size_t>(j)])) {
                sum += lse - scaled(i, j);
                d_sim(i, j) -= inv_p / tau;
            }
        if (with_gradient)
            for (Eigen::Index k = 0; k < n; ++k)
                if (k != i) d_sim(i, k) += double(count) * std::exp(scaled(i, k) - lse) * inv_p / tau;
    }
    r.loss = sum * inv_p;

    if (with_gradient) {
        const Vec norms = embeddings.rowwise().norm();
        const Mat unit = embeddings.array().colwise() / norms.array();
        Mat sym = d_sim + d_sim.transpose();
        sym.diagonal().setZero();
        const Mat d_unit = sym * unit;
        const Vec radial = d_unit.cwiseProduct(unit).rowwise().sum();
        r.d_embeddings = (d_unit - (unit.array().colwise() * radial.array()).matrix()).array().colwise() / norms.array();
    }
    return r;
}

double total_loss(double l_lang, double l_pathway, const LossConfig& cfg) { return l_lang + cfg.gamma * l_pathway; }

PooledGenes pool_gene_states(const std::vector<std::vector<TokenId>>& tokens, const std::vector<Mat>& hidden) {
    std::map<TokenId, std::size_t> count;
    for (const auto& seq : tokens)
        for (auto t : seq)
            if (t >= Vocabulary::kFirstGene) ++count[t];
    PooledGenes out;
    std::unordered_map<TokenId, Eigen::Index> row;
    for (const auto& [g, c] : count) {
        row[g] = static_cast<Eigen::Index>(out.genes.size());
        out.genes.push_back(g);
    }
    const Eigen::Index d = hidden.empty() ? 0 : hidden.front().cols();
    out.embeddings = Mat::Zero(static_cast<Eigen::Index>(out.genes.size()), d);
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t t = 0; t < tokens[i].size(); ++t)
            if (tokens[i][t] >= Vocabulary::kFirstGene)
                out.embeddings.row(row[tokens[i][t]]) += hidden[i].row(static_cast<Eigen::Index>(t));
    for (std::size_t g = 0; g < out.genes.size(); ++g)
        out.embeddings.row(static_cast<Eigen::Index>(g)) /= double(count[out.genes[g]]);
    return out;
}

namespace {

struct BatchPass {
    std::vector<std::vector<TokenId>> tokens;
    std::vector<SequenceWork> work;
    NllResult nll;
    InfoNceResult pathway;
    PooledGenes pooled;
    LossBreakdown loss;
};

BatchPass run_batch(const ModelParams& model, const std::vector<TokenSequence>& batch, const PathwaySet& pathways,
                    const LossConfig& cfg, std::size_t threads, bool with_gradient) {
    cfg.validate();
    BatchPass p;
    p.tokens = valid_tokens(batch);
    p.work.resize(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t i) {
        const Mat h = forward_sequence(model, p.tokens[i], &p.work[i].cache);
        p.work[i].logits = logits(model, h);
    });
    std::vector<Mat> all_logits;
    std::vector<Mat> hidden;
    all_logits.reserve(batch.size());
    hidden.reserve(batch.size());
    for (auto& w : p.work) {
        all_logits.push_back(w.logits);
        hidden.push_back(w.cache.hidden);
    }
    p.nll = next_gene_nll(all_logits, p.tokens, with_gradient);
    p.loss.l_lang = p.nll.loss;
    p.loss.targets = p.nll.targets;
    if (cfg.gamma > 0.0) {
        p.pooled = pool_gene_states(p.tokens, hidden);
        p.pathway = infonce_pathway(p.pooled.embeddings, p.pooled.genes, pathways, cfg.tau, with_gradient);
        p.loss.l_pathway = p.pathway.loss;
        p.loss.positive_pairs = p.pathway.positive_pairs;
        p.loss.pathway_degenerate = p.pathway.degenerate;
    }
    p.loss.total = total_loss(p.loss.l_lang, p.loss.l_pathway, cfg);
    if (!std::isfinite(p.loss.total)) throw NumericError("non-finite loss");
    return p;
}

}  // namespace

LossBreakdown evaluate_loss(const ModelParams& model, const std::vector<TokenSequence>& batch, const PathwaySet& pathways,
                            const LossConfig& cfg, std::size_t threads) {
    return run_batch(model, batch, pathways, cfg, threads, false).loss;
}

GradientResult gradients(const ModelParams& model, const std::vector<TokenSequence>& batch, const PathwaySet& pathways,
                         const LossConfig& cfg, std::size_t threads) {
    BatchPass p = run_batch(model, batch, pathways, cfg, threads, true);

    // Pathway gradient, scattered back from pooled genes to token positions.
    std::vector<Mat> d_hidden(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) d_hidden[i] = Mat::Zero(p.work[i].cache.hidden.rows(), p.work[i].cache.hidden.cols());
    if (cfg.gamma > 0.0 && !p.pathway.degenerate) {
        std::unordered_map<TokenId, std::pair<Eigen::Index, std::size_t>> slot;
        for (std::size_t g = 0; g < p.pooled.genes.size(); ++g) slot[p.pooled.genes[g]] = {static_cast<Eigen::Index>(g), 0};
        for (const auto& seq : p.tokens)
            for (auto t : seq)
                if (t >= Vocabulary::kFirstGene) ++slot[t].second;
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (std::size_t t = 0; t < p.tokens[i].size(); ++t) {
                const auto tok = p.tokens[i][t];
                if (tok < Vocabulary::kFirstGene) continue;
                const auto& [row, count] = slot[tok];
                d_hidden[i].row(static_cast<Eigen::Index>(t)) += cfg.gamma * p.pathway.d_embeddings.row(row) / double(count);
            }
    }

    std::vector<ModelParams> partial(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t i) {
        ModelParams g = ModelParams::zeros(model.config);
        const Mat& dl = p.nll.d_logits[i];
        const Mat& h = p.work[i].cache.hidden;
        if (h.rows() > 0) {
            if (model.config.tied_head) g.embedding += dl.transpose() * h;
            else g.head_w += dl.transpose() * h;
            g.head_b += dl.colwise().sum().transpose();
            const Mat dh = d_hidden[i] + dl * model.head();
            backward_sequence(model, p.work[i].cache, dh, g);
        }
        partial[i] = std::move(g);
    });

    GradientResult out{ModelParams::zeros(model.config), p.loss};
    for (const auto& g : partial) add_into(out.grads, g);
    out.grads.visit([](const std::string& name, const auto& t) {
        if (!t.allFinite()) throw NumericError("non-finite gradient in '" + name + "'");
    });
    return out;
}

}  // namespace genemamba
