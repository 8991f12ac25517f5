#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "genemamba/bimamba.hpp"
#include "genemamba/objectives.hpp"

namespace genemamba {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First and second moments, one flat vector per tensor in visit order.
struct AdamState {
    std::vector<Vec> m;
    std::vector<Vec> v;
    std::uint64_t step = 0;
};

using TensorRef = Eigen::Map<Vec>;
using ConstTensorRef = Eigen::Map<const Vec>;

std::vector<TensorRef> tensor_refs(ModelParams& model);
std::vector<ConstTensorRef> tensor_refs(const ModelParams& model);

AdamState adam_init(const std::vector<ConstTensorRef>& params);
void adam_step(std::vector<TensorRef>& params, const std::vector<ConstTensorRef>& grads, AdamState& state,
               double learning_rate, const AdamConfig& cfg);

double global_norm(const std::vector<ConstTensorRef>& grads);

// Rescales grads so that their global norm is at most max_norm. Returns the
// norm before clipping. max_norm <= 0 disables clipping.
double clip_global_norm(std::vector<TensorRef>& grads, double max_norm);

struct TrainConfig {
    ModelConfig model;  // vocab_size and max_len are filled from the data
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // 0: epochs * ceil(cells / batch_size)
    std::uint64_t seed = 0;
    double gamma = 0.1;
    double tau = 0.1;
    double clip_norm = 1.0;
    AdamConfig adam;
    std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
    std::size_t threads = 1;

    LossConfig loss() const { return {gamma, tau}; }
    std::size_t total_steps(std::size_t n_cells) const;
    void validate() const;
};

// Flat `key = value` text, `#` starts a comment. Unknown keys are errors.
TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
TrainConfig load_train_config(const std::string& path, TrainConfig base = {});
std::string format_train_config(const TrainConfig& cfg);

// Generic checkpoint container.
//
// Layout (little-endian): "GMCK", u32 version, u32 entry count, entries as
// (string key, string value); u32 tensor count, tensors as (string name,
// u32 rank, rank x u64 extent, f64 row-major data).
struct NamedTensor {
    std::string name;
    std::uint32_t rank = 2;
    Eigen::MatrixXd value;  // rank 1 tensors are stored as a column
};

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    std::map<std::string, std::string> meta;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

// Written to a temporary file and renamed into place.
void write_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

void store_model(Checkpoint& ck, const ModelParams& model);
ModelConfig stored_model_config(const Checkpoint& ck);
ModelParams restore_model(const Checkpoint& ck, const ModelConfig* expected = nullptr);

void save_checkpoint(const ModelParams& model, const std::string& path);
// Rejects a checkpoint whose architecture differs from `expected` when given.
ModelParams load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

struct StepRecord {
    std::uint64_t step = 0;
    double l_lang = 0.0;
    double l_pathway = 0.0;
    double total = 0.0;
};

// `step=<n> l_lang=<v> l_pathway=<v> total=<v>`
std::string format_step(const StepRecord& r);

struct TrainState {
    ModelParams model;
    AdamState adam;
    std::uint64_t step = 0;
};

struct TrainOptions {
    std::string checkpoint_path;  // empty: no files written
    std::ostream* metrics = nullptr;
    const TrainState* resume = nullptr;
    std::uint64_t vocab_hash = 0;
};

struct TrainResult {
    TrainState state;
    std::vector<StepRecord> log;
};

void save_train_state(const TrainState& state, const TrainConfig& cfg, std::uint64_t vocab_hash,
                      const std::string& path);
TrainState load_train_state(const std::string& path);

// Pretraining with the total loss. The batch order of every epoch is a
// function of (seed, epoch), so a resumed run replays the same batches.
TrainResult train(const TrainConfig& cfg, const TokenizedDataset& data, const PathwaySet& pathways,
                  const TrainOptions& options = {});

// --- classifier head ---------------------------------------------------------

struct ClassMetrics {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::size_t count = 0;
};

// Macro-F1 averages over every class that occurs in truth or prediction.
ClassMetrics classification_metrics(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    std::vector<std::string> warnings;
};

// Uses the partition column when any cell carries one; otherwise a
// per-class split holding out test_fraction of each class.
Split stratified_split(const std::vector<CellMeta>& labels, double test_fraction, std::uint64_t seed);

struct ClassifierHead {
    std::vector<std::string> classes;
    Mat w1;  // hidden x d
    Vec b1;
    Mat w2;  // classes x hidden
    Vec b2;

    static ClassifierHead init(std::size_t d_model, std::size_t hidden, std::vector<std::string> classes,
                               std::uint64_t seed);
    Vec forward(const Vec& embedding) const;
};

struct ClassifierConfig {
    std::size_t hidden = 64;
    double learning_rate = 1e-3;
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    bool finetune_backbone = true;
    double test_fraction = 0.1;
    double clip_norm = 1.0;
    AdamConfig adam;
    std::size_t threads = 1;
    void validate() const;
};

struct FinetuneResult {
    ModelParams backbone;
    ClassifierHead head;
    Split split;
    ClassMetrics train_metrics;
    ClassMetrics test_metrics;
    std::vector<std::size_t> test_predictions;  // aligned with split.test
};

// Cross-entropy on the CLS state through a two-layer perceptron. Every cell
// must start with the CLS token.
FinetuneResult finetune_classifier(const ModelParams& model, const TokenizedDataset& data,
                                   const ClassifierConfig& cfg);

std::vector<std::size_t> predict_classes(const ModelParams& backbone, const ClassifierHead& head,
                                         const std::vector<TokenSequence>& cells, std::size_t threads = 1);

void save_classifier(const ModelParams& backbone, const ClassifierHead& head, const std::string& path);
std::pair<ModelParams, ClassifierHead> load_classifier(const std::string& path);

}  // namespace genemamba
