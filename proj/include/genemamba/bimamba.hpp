#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "genemamba/corpus.hpp"
#include "genemamba/ssm.hpp"

namespace genemamba {

#ifdef GENEMAMBA_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Mat = ssm::Mat<real>;
using Vec = ssm::Vec<real>;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t d_inner = 0;  // 0 means 2 * d_model
    std::size_t d_state = 8;
    std::size_t conv_width = 4;
    std::size_t max_len = 2048;
    bool tied_head = false;
    double norm_eps = 1e-6;

    std::size_t inner() const { return d_inner == 0 ? 2 * d_model : d_inner; }
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One Bi-Mamba block. The mixer weights (in_proj, conv, ssm, out_proj) exist
// once and serve both the forward and the reversed pass.
struct BlockParams {
    Vec norm;     // d
    Mat in_proj;  // 2E x d: rows [0, E) feed the scan, rows [E, 2E) the output gate
    Mat conv_w;   // E x K, column K-1 multiplies the current position
    Vec conv_b;   // E
    ssm::SelectiveParams<real> ssm;
    Mat out_proj;  // d x E
    Mat gate_w;    // d x 2d, applied to [forward, backward]
    Vec gate_b;    // d

    template <typename Self, typename Fn>
    static void visit_impl(Self& self, const std::string& prefix, Fn&& fn) {
        fn(prefix + "norm", self.norm);
        fn(prefix + "in_proj", self.in_proj);
        fn(prefix + "conv_w", self.conv_w);
        fn(prefix + "conv_b", self.conv_b);
        fn(prefix + "ssm.dt_w", self.ssm.dt_w);
        fn(prefix + "ssm.dt_b", self.ssm.dt_b);
        fn(prefix + "ssm.b_w", self.ssm.b_w);
        fn(prefix + "ssm.c_w", self.ssm.c_w);
        fn(prefix + "ssm.a_log", self.ssm.a_log);
        fn(prefix + "ssm.skip", self.ssm.skip);
        fn(prefix + "out_proj", self.out_proj);
        fn(prefix + "gate_w", self.gate_w);
        fn(prefix + "gate_b", self.gate_b);
    }
};

struct ModelParams {
    ModelConfig config;
    Mat embedding;  // V x d
    std::vector<BlockParams> blocks;
    Vec final_norm;  // d
    Mat head_w;      // V x d, empty when tied to the embedding table
    Vec head_b;      // V

    static ModelParams zeros(const ModelConfig& config);
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);

    // Calls fn(name, tensor) for every learnable tensor in a fixed order.
    template <typename Fn>
    void visit(Fn&& fn) {
        visit_impl(*this, fn);
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        visit_impl(*this, fn);
    }

    std::size_t parameter_count() const;
    const Mat& head() const { return config.tied_head ? embedding : head_w; }

private:
    template <typename Self, typename Fn>
    static void visit_impl(Self& self, Fn& fn) {
        fn(std::string("embedding"), self.embedding);
        for (std::size_t i = 0; i < self.blocks.size(); ++i)
            BlockParams::visit_impl(self.blocks[i], "blocks." + std::to_string(i) + ".", fn);
        fn(std::string("final_norm"), self.final_norm);
        if (!self.config.tied_head) fn(std::string("head_w"), self.head_w);
        fn(std::string("head_b"), self.head_b);
    }
};

// Token ids with a validity mask; valid positions must form a prefix of each row.
struct SequenceBatch {
    Eigen::Matrix<TokenId, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tokens;
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask;

    static SequenceBatch from_sequences(const std::vector<TokenSequence>& seqs);
    Eigen::Index rows() const { return tokens.rows(); }
    Eigen::Index length() const { return tokens.cols(); }
    std::size_t valid_len(Eigen::Index row) const;  // throws InputError on a non-prefix mask
    std::vector<TokenId> valid_tokens(Eigen::Index row) const;
};

// Reverses the valid prefix of every row; padding stays in place.
SequenceBatch reverse_valid(const SequenceBatch& batch);
// Same for one sequence of hidden states (rows are positions).
Mat reverse_valid(const Mat& states, std::size_t valid_len);

Mat rms_norm(const Mat& x, const Vec& weight, double eps);

// Intermediates of one mixer pass (one direction).
struct MixerCache {
    Mat input;      // n x d
    Mat proj;       // n x 2E
    Mat conv_pre;   // n x E
    Mat conv_out;   // n x E, after SiLU
    ssm::ScanCache<real> scan;
    Mat scan_out;   // n x E
    Mat gate;       // n x E, SiLU of the gate half of proj
    Mat gated;      // n x E
};

Mat mixer_forward(const BlockParams& block, const Mat& input, MixerCache* cache = nullptr);

struct BlockCache {
    Mat input;
    Mat rms;  // n x 1 row scale
    Mat normed;
    MixerCache fwd, bwd;
    Mat forward_branch, backward_branch, gate;
};

// Per-block intermediate views for inspection.
struct BlockTrace {
    Mat forward_branch;   // h
    Mat backward_branch;  // h~, re-aligned to original positions
    Mat gate;             // z
    Mat mixed;            // z * h + (1 - z) * h~
    Mat output;           // input + mixed
};

// Bi-Mamba block on the valid prefix of one sequence (n x d).
Mat block_forward(const BlockParams& block, const Mat& hidden, double eps, BlockCache* cache = nullptr,
                  BlockTrace* trace = nullptr);

struct ForwardCache {
    std::vector<TokenId> tokens;
    std::vector<BlockCache> blocks;
    Mat pre_norm;  // n x d, output of the last block
    Mat rms;
    Mat hidden;    // n x d, final normalized states
};

// Embedding lookup, every block, final normalization; valid positions only.
Mat forward_sequence(const ModelParams& model, const std::vector<TokenId>& tokens, ForwardCache* cache = nullptr);

// Accumulates parameter gradients for dL/dhidden into `grads`.
void backward_sequence(const ModelParams& model, const ForwardCache& cache, const Mat& d_hidden, ModelParams& grads);

// B sequences of L x d hidden states; padded positions are zero.
std::vector<Mat> stack_forward(const ModelParams& model, const SequenceBatch& batch, std::size_t threads = 1);

// Affine token head, no softmax. hidden is n x d, result n x V.
Mat logits(const ModelParams& model, const Mat& hidden);

enum class PoolMode { Cls, Mean };

// B x d cell representations.
Mat cell_embedding(const ModelParams& model, const SequenceBatch& batch, PoolMode mode, std::size_t threads = 1);

}  // namespace genemamba
