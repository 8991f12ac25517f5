#include "genemamba/bimamba.hpp"

#include <cmath>

#include "genemamba/error.hpp"
#include "genemamba/parallel.hpp"
#include "genemamba/random.hpp"

namespace genemamba {

namespace {

real silu(real x) { return x * ssm::sigmoid(x); }

real silu_grad(real x) {
    const real s = ssm::sigmoid(x);
    return s * (real(1) + x * (real(1) - s));
}

Mat apply(const Mat& m, real (*fn)(real)) { return m.unaryExpr(fn); }

Mat rms_scale(const Mat& x, double eps) {
    const Eigen::Index d = x.cols();
    return ((x.array().square().rowwise().sum() / real(d)) + real(eps)).sqrt().matrix();
}

// dL/dx for u = x / r * w with r = sqrt(mean(x^2) + eps); accumulates dL/dw.
Mat rms_norm_backward(const Mat& x, const Mat& r, const Vec& w, const Mat& du, Vec& dw) {
    const real d = real(x.cols());
    Mat xhat = x.array().colwise() / r.col(0).array();
    dw += (du.cwiseProduct(xhat)).colwise().sum().transpose();
    const Mat g = du.array().rowwise() * w.transpose().array();
    const Vec dot = g.cwiseProduct(x).rowwise().sum();
    Mat dx = g.array().colwise() / r.col(0).array();
    const Vec coef = dot.array() / (d * r.col(0).array().cube());
    dx -= (x.array().colwise() * coef.array()).matrix();
    return dx;
}

void mixer_backward(const BlockParams& b, const MixerCache& c, const Mat& d_out, BlockParams& g, Mat& d_input) {
    const Eigen::Index n = c.input.rows();
    const Eigen::Index E = b.conv_w.rows();
    const Eigen::Index K = b.conv_w.cols();

    g.out_proj += d_out.transpose() * c.gated;
    const Mat d_gated = d_out * b.out_proj;
    const Mat d_scan = d_gated.cwiseProduct(c.gate);
    const Mat d_gate_pre = d_gated.cwiseProduct(c.scan_out).cwiseProduct(apply(c.proj.rightCols(E), silu_grad));

    auto sg = ssm::selective_scan_backward<real>(b.ssm, c.conv_out, c.scan, d_scan);
    g.ssm.dt_w += sg.params.dt_w;
    g.ssm.dt_b += sg.params.dt_b;
    g.ssm.b_w += sg.params.b_w;
    g.ssm.c_w += sg.params.c_w;
    g.ssm.a_log += sg.params.a_log;
    g.ssm.skip += sg.params.skip;

    const Mat d_conv_pre = sg.inputs.cwiseProduct(apply(c.conv_pre, silu_grad));
    g.conv_b += d_conv_pre.colwise().sum().transpose();
    Mat d_proj(n, 2 * E);
    d_proj.rightCols(E) = d_gate_pre;
    d_proj.leftCols(E).setZero();
    for (Eigen::Index t = 0; t < n; ++t) {
        for (Eigen::Index k = 0; k < K; ++k) {
            const Eigen::Index src = t - (K - 1) + k;
            if (src < 0) continue;
            g.conv_w.col(k) += d_conv_pre.row(t).transpose().cwiseProduct(c.proj.row(src).head(E).transpose());
            d_proj.row(src).head(E) += d_conv_pre.row(t).cwiseProduct(b.conv_w.col(k).transpose());
        }
    }
    g.in_proj += d_proj.transpose() * c.input;
    d_input += d_proj * b.in_proj;
}

void block_backward(const BlockParams& b, const BlockCache& c, const Mat& d_output, BlockParams& g, Mat& d_input) {
    const Eigen::Index d = c.input.cols();
    const Eigen::Index n = c.input.rows();
    d_input += d_output;

    const Mat& z = c.gate;
    Mat d_fwd = d_output.cwiseProduct(z);
    Mat d_bwd = d_output.cwiseProduct((Mat::Ones(n, d) - z));
    const Mat d_z = d_output.cwiseProduct(c.forward_branch - c.backward_branch);
    const Mat d_zpre = d_z.array() * z.array() * (real(1) - z.array());
    Mat pair(n, 2 * d);
    pair << c.forward_branch, c.backward_branch;
    g.gate_w += d_zpre.transpose() * pair;
    g.gate_b += d_zpre.colwise().sum().transpose();
    const Mat d_pair = d_zpre * b.gate_w;
    d_fwd += d_pair.leftCols(d);
    d_bwd += d_pair.rightCols(d);

    Mat d_normed = Mat::Zero(n, d);
    mixer_backward(b, c.fwd, d_fwd, g, d_normed);
    Mat d_normed_rev = Mat::Zero(n, d);
    mixer_backward(b, c.bwd, reverse_valid(d_bwd, static_cast<std::size_t>(n)), g, d_normed_rev);
    d_normed += reverse_valid(d_normed_rev, static_cast<std::size_t>(n));

    d_input += rms_norm_backward(c.input, c.rms, b.norm, d_normed, g.norm);
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("model needs at least one Bi-Mamba layer");
    if (vocab_size <= Vocabulary::kFirstGene) throw ConfigError("vocabulary must contain at least one gene");
    if (d_model < 1 || d_state < 1 || conv_width < 1 || inner() < 1) throw ConfigError("model dimensions must be positive");
    if (max_len < 1) throw ConfigError("max_len must be positive");
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
    config.validate();
    const auto V = static_cast<Eigen::Index>(config.vocab_size);
    const auto d = static_cast<Eigen::Index>(config.d_model);
    const auto E = static_cast<Eigen::Index>(config.inner());
    const auto N = static_cast<Eigen::Index>(config.d_state);
    const auto K = static_cast<Eigen::Index>(config.conv_width);
    ModelParams p;
    p.config = config;
    p.embedding = Mat::Zero(V, d);
    p.blocks.resize(config.n_layers);
    for (auto& b : p.blocks) {
        b.norm = Vec::Zero(d);
        b.in_proj = Mat::Zero(2 * E, d);
        b.conv_w = Mat::Zero(E, K);
        b.conv_b = Vec::Zero(E);
        b.ssm = ssm::SelectiveParams<real>::zeros(E, N);
        b.out_proj = Mat::Zero(d, E);
        b.gate_w = Mat::Zero(d, 2 * d);
        b.gate_b = Vec::Zero(d);
    }
    p.final_norm = Vec::Zero(d);
    if (!config.tied_head) p.head_w = Mat::Zero(V, d);
    p.head_b = Vec::Zero(V);
    return p;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    ModelParams p = zeros(config);
    Rng rng(seed);
    auto normal = [&](Mat& m, double stddev) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = real(stddev * rng.normal());
    };
    const double d = double(config.d_model);
    const double E = double(config.inner());
    normal(p.embedding, 1.0);
    for (auto& b : p.blocks) {
        b.norm.setOnes();
        normal(b.in_proj, 1.0 / std::sqrt(d));
        for (Eigen::Index i = 0; i < b.conv_w.size(); ++i)
            b.conv_w.data()[i] = real(rng.uniform(-1.0, 1.0) / std::sqrt(double(config.conv_width)));
        normal(b.ssm.dt_w, 0.1 / std::sqrt(E));
        // Step sizes log-uniform in [1e-3, 1e-1]; the bias is the softplus inverse.
        for (Eigen::Index e = 0; e < b.ssm.dt_b.size(); ++e) {
            const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            b.ssm.dt_b(e) = real(dt + std::log(-std::expm1(-dt)));
        }
        normal(b.ssm.b_w, 1.0 / std::sqrt(E));
        normal(b.ssm.c_w, 1.0 / std::sqrt(E));
        for (Eigen::Index e = 0; e < b.ssm.a_log.rows(); ++e)
            for (Eigen::Index s = 0; s < b.ssm.a_log.cols(); ++s) b.ssm.a_log(e, s) = real(std::log(double(s + 1)));
        b.ssm.skip.setOnes();
        normal(b.out_proj, 1.0 / std::sqrt(E));
        normal(b.gate_w, 0.02);
    }
    p.final_norm.setOnes();
    if (!config.tied_head) normal(p.head_w, 1.0 / std::sqrt(d));
    return p;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
}

SequenceBatch SequenceBatch::from_sequences(const std::vector<TokenSequence>& seqs) {
    std::size_t L = 0;
    for (const auto& s : seqs) L = std::max(L, s.tokens.size());
    SequenceBatch b;
    b.tokens.setConstant(static_cast<Eigen::Index>(seqs.size()), static_cast<Eigen::Index>(L), Vocabulary::kPad);
    b.mask.setConstant(static_cast<Eigen::Index>(seqs.size()), static_cast<Eigen::Index>(L), false);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (seqs[i].valid_len > seqs[i].tokens.size()) throw InputError("sequence valid_len exceeds its length");
        for (std::size_t t = 0; t < seqs[i].valid_len; ++t) {
            b.tokens(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = seqs[i].tokens[t];
            b.mask(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = true;
        }
    }
    return b;
}

std::size_t SequenceBatch::valid_len(Eigen::Index row) const {
    Eigen::Index n = 0;
    while (n < length() && mask(row, n)) ++n;
    for (Eigen::Index t = n; t < length(); ++t)
        if (mask(row, t)) throw InputError("padding mask is not a prefix in row " + std::to_string(row));
    return static_cast<std::size_t>(n);
}

std::vector<TokenId> SequenceBatch::valid_tokens(Eigen::Index row) const {
    const auto n = valid_len(row);
    std::vector<TokenId> out(n);
    for (std::size_t t = 0; t < n; ++t) out[t] = tokens(row, static_cast<Eigen::Index>(t));
    return out;
}

SequenceBatch reverse_valid(const SequenceBatch& batch) {
    SequenceBatch out = batch;
    for (Eigen::Index r = 0; r < batch.rows(); ++r) {
        const auto n = static_cast<Eigen::Index>(batch.valid_len(r));
        for (Eigen::Index t = 0; t < n; ++t) out.tokens(r, t) = batch.tokens(r, n - 1 - t);
    }
    return out;
}

Mat reverse_valid(const Mat& states, std::size_t valid_len) {
    const auto n = static_cast<Eigen::Index>(valid_len);
    if (n > states.rows()) throw InputError("reverse_valid: valid length exceeds sequence length");
    Mat out = states;
    out.topRows(n) = states.topRows(n).colwise().reverse();
    return out;
}

Mat rms_norm(const Mat& x, const Vec& weight, double eps) {
    const Mat r = rms_scale(x, eps);
    return (x.array().colwise() / r.col(0).array()).rowwise() * weight.transpose().array();
}

Mat mixer_forward(const BlockParams& b, const Mat& input, MixerCache* cache) {
    const Eigen::Index n = input.rows();
    const Eigen::Index E = b.conv_w.rows();
    const Eigen::Index K = b.conv_w.cols();
    Mat proj = input * b.in_proj.transpose();

    // Causal depthwise convolution over the valid prefix; positions before
    // the start of the sequence contribute zero.
    Mat conv_pre = Mat::Zero(n, E);
    conv_pre.rowwise() += b.conv_b.transpose();
    for (Eigen::Index t = 0; t < n; ++t)
        for (Eigen::Index k = 0; k < K; ++k) {
            const Eigen::Index src = t - (K - 1) + k;
            if (src >= 0) conv_pre.row(t) += proj.row(src).head(E).cwiseProduct(b.conv_w.col(k).transpose());
        }
    Mat conv_out = apply(conv_pre, silu);

    ssm::ScanCache<real>* scan_cache = cache ? &cache->scan : nullptr;
    auto scan = ssm::selective_scan<real>(b.ssm, conv_out,
                                          ssm::ScanState<real>::zeros(E, b.ssm.state_dim()), scan_cache);
    Mat gate = apply(proj.rightCols(E), silu);
    Mat gated = scan.outputs.cwiseProduct(gate);
    Mat out = gated * b.out_proj.transpose();
    if (cache) {
        cache->input = input;
        cache->proj = std::move(proj);
        cache->conv_pre = std::move(conv_pre);
        cache->conv_out = std::move(conv_out);
        cache->scan_out = std::move(scan.outputs);
        cache->gate = std::move(gate);
        cache->gated = std::move(gated);
    }
    return out;
}

Mat block_forward(const BlockParams& b, const Mat& hidden, double eps, BlockCache* cache, BlockTrace* trace) {
    const Eigen::Index n = hidden.rows();
    const Eigen::Index d = hidden.cols();
    if (!hidden.allFinite()) throw NumericError("Bi-Mamba block: non-finite input");
    const Mat r = rms_scale(hidden, eps);
    const Mat normed = (hidden.array().colwise() / r.col(0).array()).rowwise() * b.norm.transpose().array();

    const Mat fwd = mixer_forward(b, normed, cache ? &cache->fwd : nullptr);
    const auto len = static_cast<std::size_t>(n);
    const Mat bwd = reverse_valid(mixer_forward(b, reverse_valid(normed, len), cache ? &cache->bwd : nullptr), len);

    Mat pair(n, 2 * d);
    pair << fwd, bwd;
    Mat zpre = pair * b.gate_w.transpose();
    zpre.rowwise() += b.gate_b.transpose();
    const Mat z = zpre.unaryExpr([](real v) { return ssm::sigmoid(v); });
    const Mat mixed = z.cwiseProduct(fwd) + (Mat::Ones(n, d) - z).cwiseProduct(bwd);
    Mat out = hidden + mixed;
    if (!out.allFinite()) throw NumericError("Bi-Mamba block: non-finite output");
    if (cache) {
        cache->input = hidden;
        cache->rms = r;
        cache->normed = normed;
        cache->forward_branch = fwd;
        cache->backward_branch = bwd;
        cache->gate = z;
    }
    if (trace) {
        trace->forward_branch = fwd;
        trace->backward_branch = bwd;
        trace->gate = z;
        trace->mixed = mixed;
        trace->output = out;
    }
    return out;
}

Mat forward_sequence(const ModelParams& model, const std::vector<TokenId>& tokens, ForwardCache* cache) {
    const auto& cfg = model.config;
    const auto n = static_cast<Eigen::Index>(tokens.size());
    Mat x(n, static_cast<Eigen::Index>(cfg.d_model));
    for (Eigen::Index t = 0; t < n; ++t) {
        const auto tok = tokens[static_cast<std::size_t>(t)];
        if (tok >= cfg.vocab_size) throw InputError("token id " + std::to_string(tok) + " outside vocabulary");
        x.row(t) = model.embedding.row(tok);
    }
    if (cache) {
        cache->tokens = tokens;
        cache->blocks.resize(model.blocks.size());
    }
    if (n == 0) {
        if (cache) {
            cache->pre_norm = x;
            cache->rms = Mat(0, 1);
            cache->hidden = x;
        }
        return x;
    }
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        try {
            x = block_forward(model.blocks[l], x, cfg.norm_eps, cache ? &cache->blocks[l] : nullptr);
        } catch (const NumericError& e) {
            throw NumericError("layer " + std::to_string(l) + ": " + e.what());
        }
    }
    const Mat r = rms_scale(x, cfg.norm_eps);
    Mat h = (x.array().colwise() / r.col(0).array()).rowwise() * model.final_norm.transpose().array();
    if (cache) {
        cache->pre_norm = std::move(x);
        cache->rms = r;
        cache->hidden = h;
    }
    return h;
}

void backward_sequence(const ModelParams& model, const ForwardCache& cache, const Mat& d_hidden, ModelParams& grads) {
    const Eigen::Index n = cache.pre_norm.rows();
    if (n == 0) return;
    Mat dx = rms_norm_backward(cache.pre_norm, cache.rms, model.final_norm, d_hidden, grads.final_norm);
    for (std::size_t l = model.blocks.size(); l-- > 0;) {
        Mat d_in = Mat::Zero(n, dx.cols());
        block_backward(model.blocks[l], cache.blocks[l], dx, grads.blocks[l], d_in);
        dx = std::move(d_in);
    }
    for (Eigen::Index t = 0; t < n; ++t) grads.embedding.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
}

std::vector<Mat> stack_forward(const ModelParams& model, const SequenceBatch& batch, std::size_t threads) {
    std::vector<Mat> out(static_cast<std::size_t>(batch.rows()));
    parallel_for(out.size(), threads, [&](std::size_t r) {
        const auto tokens = batch.valid_tokens(static_cast<Eigen::Index>(r));
        Mat full = Mat::Zero(batch.length(), static_cast<Eigen::Index>(model.config.d_model));
        full.topRows(static_cast<Eigen::Index>(tokens.size())) = forward_sequence(model, tokens);
        out[r] = std::move(full);
    });
    return out;
}

Mat logits(const ModelParams& model, const Mat& hidden) {
    Mat out = hidden * model.head().transpose();
    out.rowwise() += model.head_b.transpose();
    return out;
}

Mat cell_embedding(const ModelParams& model, const SequenceBatch& batch, PoolMode mode, std::size_t threads) {
    const auto B = batch.rows();
    Mat out = Mat::Zero(B, static_cast<Eigen::Index>(model.config.d_model));
    for (Eigen::Index r = 0; r < B; ++r) {
        const auto n = batch.valid_len(r);
        if (mode == PoolMode::Cls && (n == 0 || batch.tokens(r, 0) != Vocabulary::kCls))
            throw InputError("CLS pooling needs a CLS token at position 0 (row " + std::to_string(r) + ")");
        if (mode == PoolMode::Mean && n == 0) throw InputError("mean pooling of an empty sequence");
    }
    std::vector<Vec> rows(static_cast<std::size_t>(B));
    parallel_for(rows.size(), threads, [&](std::size_t r) {
        const Mat h = forward_sequence(model, batch.valid_tokens(static_cast<Eigen::Index>(r)));
        rows[r] = mode == PoolMode::Cls ? Vec(h.row(0).transpose()) : Vec(h.colwise().mean().transpose());
    });
    for (Eigen::Index r = 0; r < B; ++r) out.row(r) = rows[static_cast<std::size_t>(r)].transpose();
    return out;
}

}  // namespace genemamba
