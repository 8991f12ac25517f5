#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "genemamba/corpus.hpp"
#include "genemamba/error.hpp"
#include "genemamba/evalsuite.hpp"
#include "genemamba/synthetic.hpp"
#include "genemamba/trainer.hpp"

namespace genemamba::cli {

namespace {

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

struct Common {
    std::uint64_t seed = 0;
    std::size_t threads = default_threads();
    std::string config;
};

struct TokenizeArgs {
    std::string matrix, out, labels;
    PipelineConfig pipeline;
};

struct TrainArgs {
    std::string data, out, vocab, pathways, metrics, resume;
    TrainConfig cfg;
};

struct FinetuneArgs {
    std::string checkpoint, data, out, predictions, report, json;
    ClassifierConfig cfg;
};

struct EmbedArgs {
    std::string checkpoint, data, out, pool = "cls";
};

struct ReconstructArgs {
    std::string checkpoint, data, out, vocab, decode = "teacher";
    std::size_t limit = 0;
};

struct EvalArgs {
    std::string suite, checkpoint, data, embeddings, vocab, pathways, out, json, plot_prefix, decode = "teacher";
    std::size_t k = 15;
    std::size_t bins = 50;
    std::size_t limit = 0;
};

struct SynthArgs {
    std::string out, labels_out, pathways_out;
    synth::CountsSpec spec;
};

struct Args {
    Common common;
    TokenizeArgs tokenize;
    TrainArgs train;
    FinetuneArgs finetune;
    EmbedArgs embed;
    ReconstructArgs reconstruct;
    EvalArgs eval;
    SynthArgs synth;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();
    sub->add_option("--threads", c.threads, "Worker threads; results do not depend on it")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sub->add_option("--config", c.config, "key = value file; keys are flag names, flags given here win");
}

void build(CLI::App& app, Args& a) {
    app.require_subcommand(1);

    auto* tok = app.add_subcommand("tokenize", "Normalize a counts matrix and write rank-ordered token sequences");
    auto& t = a.tokenize;
    tok->add_option("--matrix", t.matrix, "Counts matrix (text triplet format)")->required();
    tok->add_option("--out", t.out, "Dataset output; the vocabulary goes to <out>.vocab")->required();
    tok->add_option("--labels", t.labels, "Cell metadata TSV: index, type, batch[, partition]");
    tok->add_option("--min-genes", t.pipeline.min_genes, "Drop cells expressing fewer genes")->capture_default_str();
    tok->add_option("--target-depth", t.pipeline.target_depth, "Per-cell depth before log1p")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    tok->add_option("--max-len", t.pipeline.max_len, "Tokens per cell, CLS included")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    tok->add_option("--compression", t.pipeline.compression, "t-digest compression for gene medians")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    tok->add_option("--cls", t.pipeline.prepend_cls, "Prepend the CLS token (true/false)")->capture_default_str();
    add_common(tok, a.common);

    auto* tr = app.add_subcommand("train", "Pretrain the bidirectional model");
    auto& r = a.train;
    auto& c = r.cfg;
    tr->add_option("--data", r.data, "Tokenized dataset")->required();
    tr->add_option("--out", r.out, "Checkpoint output")->required();
    tr->add_option("--vocab", r.vocab, "Vocabulary (default <data>.vocab)");
    tr->add_option("--pathways", r.pathways, "gene<TAB>pathway annotations for the contrastive term");
    tr->add_option("--metrics", r.metrics, "Per-step loss log");
    tr->add_option("--resume", r.resume, "Checkpoint to continue from");
    tr->add_option("--learning-rate", c.learning_rate)->check(CLI::PositiveNumber)->capture_default_str();
    tr->add_option("--batch-size", c.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    tr->add_option("--epochs", c.epochs)->capture_default_str();
    tr->add_option("--max-steps", c.max_steps, "0: epochs over the data")->capture_default_str();
    tr->add_option("--gamma", c.gamma, "Weight of the pathway term")->capture_default_str();
    tr->add_option("--tau", c.tau, "Contrastive temperature")->check(CLI::PositiveNumber)->capture_default_str();
    tr->add_option("--clip-norm", c.clip_norm, "Global gradient norm bound")->capture_default_str();
    tr->add_option("--beta1", c.adam.beta1)->capture_default_str();
    tr->add_option("--beta2", c.adam.beta2)->capture_default_str();
    tr->add_option("--adam-eps", c.adam.eps)->capture_default_str();
    tr->add_option("--checkpoint-every", c.checkpoint_every, "0: final checkpoint only")->capture_default_str();
    tr->add_option("--d-model", c.model.d_model)->capture_default_str();
    tr->add_option("--n-layers", c.model.n_layers)->capture_default_str();
    tr->add_option("--d-inner", c.model.d_inner, "0: twice d-model")->capture_default_str();
    tr->add_option("--d-state", c.model.d_state)->capture_default_str();
    tr->add_option("--conv-width", c.model.conv_width)->capture_default_str();
    tr->add_option("--tied-head", c.model.tied_head, "Share the output head with the embedding (true/false)")
        ->capture_default_str();
    tr->add_option("--norm-eps", c.model.norm_eps)->capture_default_str();
    add_common(tr, a.common);

    auto* ft = app.add_subcommand("finetune", "Train a cell-type classifier on the CLS state");
    auto& f = a.finetune;
    ft->add_option("--checkpoint", f.checkpoint, "Pretrained checkpoint")->required();
    ft->add_option("--data", f.data, "Labeled tokenized dataset")->required();
    ft->add_option("--out", f.out, "Classifier output")->required();
    ft->add_option("--predictions", f.predictions, "Held-out predictions TSV");
    ft->add_option("--report", f.report, "Metric report (text)");
    ft->add_option("--json", f.json, "Metric report (JSON)");
    ft->add_option("--hidden", f.cfg.hidden)->check(CLI::PositiveNumber)->capture_default_str();
    ft->add_option("--learning-rate", f.cfg.learning_rate)->check(CLI::PositiveNumber)->capture_default_str();
    ft->add_option("--epochs", f.cfg.epochs)->capture_default_str();
    ft->add_option("--batch-size", f.cfg.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    ft->add_option("--test-fraction", f.cfg.test_fraction, "Held-out share per class")->capture_default_str();
    ft->add_option("--clip-norm", f.cfg.clip_norm)->capture_default_str();
    ft->add_option("--finetune-backbone", f.cfg.finetune_backbone, "Update the backbone too (true/false)")
        ->capture_default_str();
    add_common(ft, a.common);

    auto* em = app.add_subcommand("embed", "Write one embedding per cell");
    auto& e = a.embed;
    em->add_option("--checkpoint", e.checkpoint, "Pretrained or classifier checkpoint")->required();
    em->add_option("--data", e.data, "Tokenized dataset")->required();
    em->add_option("--out", e.out, "Embedding file")->required();
    em->add_option("--pool", e.pool, "cls or mean")->check(CLI::IsMember({"cls", "mean"}))->capture_default_str();
    add_common(em, a.common);

    auto* rc = app.add_subcommand("reconstruct", "Greedy decode of every cell's gene ranking");
    auto& rr = a.reconstruct;
    rc->add_option("--checkpoint", rr.checkpoint)->required();
    rc->add_option("--data", rr.data)->required();
    rc->add_option("--out", rr.out, "TSV: cell, input genes, decoded genes")->required();
    rc->add_option("--vocab", rr.vocab, "Print gene ids from this vocabulary (default <data>.vocab when present)");
    rc->add_option("--decode", rr.decode, "teacher (one pass) or free (re-run on the prefix)")
        ->check(CLI::IsMember({"teacher", "free"}))
        ->capture_default_str();
    rc->add_option("--limit", rr.limit, "Decode only the first N cells (0: all)")->capture_default_str();
    add_common(rc, a.common);

    auto* ev = app.add_subcommand("eval", "Compute an evaluation suite and write a report");
    auto& v = a.eval;
    ev->add_option("--suite", v.suite, "integration, reconstruct or pairs")
        ->required()
        ->check(CLI::IsMember({"integration", "reconstruct", "pairs"}));
    ev->add_option("--data", v.data, "Tokenized dataset")->required();
    ev->add_option("--checkpoint", v.checkpoint, "Model (reconstruct, pairs)");
    ev->add_option("--embeddings", v.embeddings, "Cell embeddings (integration)");
    ev->add_option("--vocab", v.vocab, "Vocabulary for the pathway file (default <data>.vocab)");
    ev->add_option("--pathways", v.pathways, "gene<TAB>pathway annotations (pairs)");
    ev->add_option("--out", v.out, "Report (text)");
    ev->add_option("--json", v.json, "Report (JSON)");
    ev->add_option("--plot-prefix", v.plot_prefix, "Write plot data files with this prefix");
    ev->add_option("--k", v.k, "Neighbours for the kNN graph")->check(CLI::PositiveNumber)->capture_default_str();
    ev->add_option("--bins", v.bins, "Histogram bins on [-1, 1]")->check(CLI::PositiveNumber)->capture_default_str();
    ev->add_option("--decode", v.decode, "teacher or free")
        ->check(CLI::IsMember({"teacher", "free"}))
        ->capture_default_str();
    ev->add_option("--limit", v.limit, "Reconstruct only the first N cells (0: all)")->capture_default_str();
    add_common(ev, a.common);

    auto* sy = app.add_subcommand("synth", "Write a small synthetic counts matrix with labels and pathways");
    auto& s = a.synth;
    sy->add_option("--out", s.out, "Counts matrix output")->required();
    sy->add_option("--labels-out", s.labels_out, "Cell metadata TSV output");
    sy->add_option("--pathways-out", s.pathways_out, "Signature genes of each type as pathways");
    sy->add_option("--cells", s.spec.n_cells)->check(CLI::PositiveNumber)->capture_default_str();
    sy->add_option("--genes", s.spec.n_genes)->check(CLI::PositiveNumber)->capture_default_str();
    sy->add_option("--types", s.spec.n_types)->check(CLI::PositiveNumber)->capture_default_str();
    sy->add_option("--batches", s.spec.n_batches)->check(CLI::PositiveNumber)->capture_default_str();
    sy->add_option("--signature-genes", s.spec.signature_genes)->capture_default_str();
    sy->add_option("--expressed-genes", s.spec.expressed_genes)->capture_default_str();
    add_common(sy, a.common);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

bool given(const std::vector<std::string>& args, const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

// Splices `key = value` lines from --config into the argument list ahead of
// the user's flags, skipping keys the command line already sets.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
    auto sub_it = std::find_if(args.begin(), args.end(), [](const std::string& a) { return !a.empty() && a[0] != '-'; });
    if (sub_it == args.end()) return args;
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands({}))
        if (s->get_name() == *sub_it) sub = s;
    if (!sub) return args;

    std::string path;
    for (auto it = sub_it; it != args.end(); ++it) {
        if (*it == "--config" && std::next(it) != args.end()) path = *std::next(it);
        if (it->rfind("--config=", 0) == 0) path = it->substr(9);
    }
    if (path.empty()) return args;

    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::vector<std::string> extra;
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(no) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::replace(key.begin(), key.end(), '_', '-');
        const std::string flag = "--" + key;
        if (key == "config" || !sub->get_option_no_throw(flag))
            throw ConfigError(path + ":" + std::to_string(no) + ": unknown key '" + key + "' for " + sub->get_name());
        if (given(args, flag)) continue;
        extra.push_back(flag);
        extra.push_back(trim(line.substr(eq + 1)));
    }
    args.insert(std::next(sub_it), extra.begin(), extra.end());
    return args;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << text;
    if (!out) throw InputError("write failed for '" + path + "'");
}

std::string base_name(const std::string& path) { return std::filesystem::path(path).filename().string(); }

std::string vocab_path(const std::string& given_path, const std::string& data) {
    return given_path.empty() ? data + ".vocab" : given_path;
}

// Accepts both pretraining and classifier checkpoints; the vocabulary hash,
// when stored, must match the dataset's.
ModelParams load_backbone(const std::string& path, const TokenizedDataset& data) {
    const Checkpoint ck = read_checkpoint(path);
    if (auto it = ck.meta.find("vocab_hash"); it != ck.meta.end() && it->second != std::to_string(data.vocab_hash))
        throw DataError("checkpoint '" + path + "' was trained on a different vocabulary");
    ModelParams model = restore_model(ck);
    if (model.config.max_len < data.max_len)
        throw DataError("dataset sequences are longer than the model's max_len");
    return model;
}

void emit(std::ostream& out, const MetricReport& report, const std::string& text_path, const std::string& json_path) {
    out << report.text();
    if (!text_path.empty()) write_text(text_path, report.text());
    if (!json_path.empty()) write_text(json_path, report.json());
}

int cmd_tokenize(const Args& a, std::ostream& out) {
    const auto& t = a.tokenize;
    ExpressionMatrix raw = load_matrix(t.matrix);
    if (!t.labels.empty()) raw.cell_meta = load_cell_meta(t.labels, raw.n_cells());
    PipelineConfig cfg = t.pipeline;
    cfg.threads = a.common.threads;
    const PipelineResult res = run_pipeline(raw, cfg);
    save_dataset(res.dataset, t.out);
    res.vocab.save(t.out + ".vocab");

    std::vector<std::size_t> lengths;
    for (const auto& cell : res.dataset.cells) lengths.push_back(cell.valid_len);
    std::sort(lengths.begin(), lengths.end());
    double median = 0.0;
    if (!lengths.empty()) {
        const std::size_t n = lengths.size();
        median = n % 2 ? double(lengths[n / 2]) : 0.5 * double(lengths[n / 2 - 1] + lengths[n / 2]);
    }
    out << "cells_kept=" << res.dataset.cells.size() << " cells_total=" << raw.n_cells()
        << " vocab_size=" << res.vocab.size() << " median_length=" << median << "\n";
    return 0;
}

int cmd_train(const Args& a, std::ostream& out) {
    const auto& r = a.train;
    const TokenizedDataset data = load_dataset(r.data);
    const Vocabulary vocab = Vocabulary::load(vocab_path(r.vocab, r.data));
    if (vocab.fingerprint() != data.vocab_hash) throw DataError("vocabulary does not match the dataset");

    TrainConfig cfg = r.cfg;
    cfg.seed = a.common.seed;
    cfg.threads = a.common.threads;
    cfg.model.vocab_size = vocab.size();
    cfg.model.max_len = data.max_len;

    PathwaySet pathways;
    if (!r.pathways.empty()) {
        std::size_t skipped = 0;
        pathways = load_pathways(r.pathways, vocab, &skipped);
        if (skipped) out << "pathway_genes_skipped=" << skipped << "\n";
    }

    std::optional<TrainState> resume;
    if (!r.resume.empty()) resume = load_train_state(r.resume);

    std::ofstream metrics;
    if (!r.metrics.empty()) {
        metrics.open(r.metrics, std::ios::binary);
        if (!metrics) throw InputError("cannot write '" + r.metrics + "'");
    }
    TrainOptions opts;
    opts.checkpoint_path = r.out;
    opts.metrics = r.metrics.empty() ? nullptr : &metrics;
    opts.resume = resume ? &*resume : nullptr;
    opts.vocab_hash = data.vocab_hash;
    const TrainResult res = train(cfg, data, pathways, opts);
    if (!res.log.empty()) out << format_step(res.log.back()) << "\n";
    out << "checkpoint=" << r.out << "\n";
    return 0;
}

int cmd_finetune(const Args& a, std::ostream& out) {
    const auto& f = a.finetune;
    const TokenizedDataset data = load_dataset(f.data);
    const ModelParams backbone = load_backbone(f.checkpoint, data);
    ClassifierConfig cfg = f.cfg;
    cfg.seed = a.common.seed;
    cfg.threads = a.common.threads;
    const FinetuneResult res = finetune_classifier(backbone, data, cfg);
    save_classifier(res.backbone, res.head, f.out);

    for (const auto& w : res.split.warnings) out << "warning: " << w << "\n";
    MetricReport report;
    report.dataset = base_name(f.data);
    report.model = base_name(f.checkpoint);
    report.params["hidden"] = std::to_string(cfg.hidden);
    report.params["test_fraction"] = std::to_string(cfg.test_fraction);
    report.add("train_accuracy", res.train_metrics.accuracy);
    report.add("train_macro_f1", res.train_metrics.macro_f1);
    if (res.test_metrics.count > 0) {
        report.add("test_accuracy", res.test_metrics.accuracy);
        report.add("test_macro_f1", res.test_metrics.macro_f1);
    }
    emit(out, report, f.report, f.json);

    if (!f.predictions.empty()) {
        std::string text = "cell\ttruth\tpredicted\n";
        for (std::size_t i = 0; i < res.split.test.size(); ++i) {
            const std::size_t cell = res.split.test[i];
            text += std::to_string(cell) + "\t" + (*data.labels)[cell].cell_type + "\t" +
                    res.head.classes[res.test_predictions[i]] + "\n";
        }
        write_text(f.predictions, text);
    }
    return 0;
}

int cmd_embed(const Args& a, std::ostream& out) {
    const auto& e = a.embed;
    const TokenizedDataset data = load_dataset(e.data);
    const ModelParams model = load_backbone(e.checkpoint, data);
    const auto batch = SequenceBatch::from_sequences(data.cells);
    const Mat emb = cell_embedding(model, batch, e.pool == "cls" ? PoolMode::Cls : PoolMode::Mean, a.common.threads);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < data.cells.size(); ++i) ids.push_back("cell" + std::to_string(i));
    write_embeddings(e.out, ids, emb.cast<double>());
    out << "cells=" << emb.rows() << " dim=" << emb.cols() << "\n";
    return 0;
}

std::vector<TokenSequence> first_cells(const TokenizedDataset& data, std::size_t limit) {
    const std::size_t n = limit == 0 ? data.cells.size() : std::min(limit, data.cells.size());
    return {data.cells.begin(), data.cells.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::string render(const std::vector<TokenId>& tokens, const Vocabulary* vocab) {
    std::string s;
    for (auto t : tokens) {
        if (!s.empty()) s += ' ';
        if (t == Vocabulary::kCls) s += "[CLS]";
        else if (t == Vocabulary::kPad) s += "[PAD]";
        else s += vocab ? vocab->gene_id(t) : std::to_string(t);
    }
    return s;
}

int cmd_reconstruct(const Args& a, std::ostream& out) {
    const auto& r = a.reconstruct;
    const TokenizedDataset data = load_dataset(r.data);
    const ModelParams model = load_backbone(r.checkpoint, data);
    std::optional<Vocabulary> vocab;
    const std::string vpath = vocab_path(r.vocab, r.data);
    if (!r.vocab.empty() || std::filesystem::exists(vpath)) {
        vocab = Vocabulary::load(vpath);
        if (vocab->fingerprint() != data.vocab_hash) throw DataError("vocabulary does not match the dataset");
    }
    const auto cells = first_cells(data, r.limit);
    const auto outputs = reconstruct_all(model, cells, r.decode == "free" ? DecodeMode::FreeRunning : DecodeMode::TeacherForced,
                                         a.common.threads);
    std::string text = "cell\tinput\toutput\n";
    for (std::size_t i = 0; i < cells.size(); ++i)
        text += std::to_string(i) + "\t" + render(cells[i].valid(), vocab ? &*vocab : nullptr) + "\t" +
                render(outputs[i], vocab ? &*vocab : nullptr) + "\n";
    write_text(r.out, text);
    out << "cells=" << cells.size() << "\n";
    return 0;
}

std::vector<std::string> column(const std::vector<CellMeta>& meta, std::string CellMeta::*field) {
    std::vector<std::string> v;
    for (const auto& m : meta) v.push_back(m.*field);
    return v;
}

int cmd_eval(const Args& a, std::ostream& out) {
    const auto& v = a.eval;
    const TokenizedDataset data = load_dataset(v.data);
    MetricReport report;

    if (v.suite == "integration") {
        if (v.embeddings.empty()) throw InputError("--suite integration needs --embeddings");
        if (!data.labels) throw InputError("dataset has no cell labels");
        const auto [ids, x] = read_embeddings(v.embeddings);
        if (static_cast<std::size_t>(x.rows()) != data.cells.size())
            throw DataError("embedding rows do not match the dataset's cells");
        report = integration_report(x, column(*data.labels, &CellMeta::cell_type), column(*data.labels, &CellMeta::batch),
                                    v.k, nullptr, a.common.threads);
        report.model = base_name(v.embeddings);
    } else {
        if (v.checkpoint.empty()) throw InputError("--suite " + v.suite + " needs --checkpoint");
        const ModelParams model = load_backbone(v.checkpoint, data);
        report.model = base_name(v.checkpoint);
        if (v.suite == "reconstruct") {
            const auto cells = first_cells(data, v.limit);
            const auto mode = v.decode == "free" ? DecodeMode::FreeRunning : DecodeMode::TeacherForced;
            const auto outputs = reconstruct_all(model, cells, mode, a.common.threads);
            std::vector<CellReconstruction> scored;
            std::vector<std::vector<TokenId>> inputs;
            for (std::size_t i = 0; i < cells.size(); ++i) {
                inputs.push_back(cells[i].valid());
                scored.push_back(score_reconstruction(inputs.back(), outputs[i]));
            }
            const ReconstructionSummary summary = summarize(std::move(scored));
            const std::string model_name = report.model;
            report = reconstruction_report(summary);
            report.model = model_name;
            report.params["decode"] = v.decode;
            report.params["cells"] = std::to_string(cells.size());
            if (!v.plot_prefix.empty()) {
                write_rank_pairs(v.plot_prefix + ".ranks.tsv", inputs, outputs);
                write_venn(v.plot_prefix + ".venn.tsv", summary);
            }
        } else {
            if (v.pathways.empty()) throw InputError("--suite pairs needs --pathways");
            const Vocabulary vocab = Vocabulary::load(vocab_path(v.vocab, v.data));
            if (vocab.fingerprint() != data.vocab_hash) throw DataError("vocabulary does not match the dataset");
            const PathwaySet pathways = load_pathways(v.pathways, vocab);
            const GeneStates states = gene_state_embeddings(model, data.cells, a.common.threads);
            const auto pairs = pathway_pairs(states.genes, pathways);
            const PairScores scores = pair_similarity_report(states.embeddings, pairs);
            const std::string model_name = report.model;
            report = pair_report(scores, v.bins);
            report.model = model_name;
            report.params["bins"] = std::to_string(v.bins);
            if (!v.plot_prefix.empty()) {
                write_histograms(v.plot_prefix + ".cosine_hist.tsv", histogram(scores.pos_cosine, v.bins),
                                 histogram(scores.neg_cosine, v.bins));
                write_histograms(v.plot_prefix + ".pearson_hist.tsv", histogram(scores.pos_pearson, v.bins),
                                 histogram(scores.neg_pearson, v.bins));
            }
        }
    }
    report.dataset = base_name(v.data);
    report.params["suite"] = v.suite;
    emit(out, report, v.out, v.json);
    return 0;
}

int cmd_synth(const Args& a, std::ostream& out) {
    const auto& s = a.synth;
    synth::CountsSpec spec = s.spec;
    spec.seed = a.common.seed;
    const ExpressionMatrix m = synth::typed_counts(spec);
    save_matrix(m, s.out);
    if (!s.labels_out.empty()) {
        std::string text;
        for (std::size_t c = 0; c < m.n_cells(); ++c)
            text += std::to_string(c) + "\t" + (*m.cell_meta)[c].cell_type + "\t" + (*m.cell_meta)[c].batch + "\n";
        write_text(s.labels_out, text);
    }
    if (!s.pathways_out.empty()) {
        std::string text;
        for (std::size_t t = 0; t < spec.n_types; ++t)
            for (std::size_t g = 0; g < spec.signature_genes; ++g)
                text += m.gene_ids[t * spec.signature_genes + g] + "\tP" + std::to_string(t) + "\n";
        write_text(s.pathways_out, text);
    }
    out << "cells=" << m.n_cells() << " genes=" << m.n_genes() << "\n";
    return 0;
}

}  // namespace

std::vector<std::string> subcommands() {
    Args a;
    CLI::App app;
    build(app, a);
    std::vector<std::string> names;
    for (const auto* s : app.get_subcommands({})) names.push_back(s->get_name());
    return names;
}

std::vector<std::string> flags(const std::string& subcommand) {
    Args a;
    CLI::App app;
    build(app, a);
    std::vector<std::string> out;
    for (const auto* opt : app.get_subcommand(subcommand)->get_options())
        for (const auto& n : opt->get_lnames()) out.push_back("--" + n);
    return out;
}

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Args a;
    CLI::App app{"Rank-token single-cell foundation model toolkit", "genemamba"};
    build(app, a);
    try {
        std::vector<std::string> argv = expand_config(app, args);
        std::reverse(argv.begin(), argv.end());
        try {
            app.parse(argv);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e, out, err);
            return code == 0 ? 0 : 1;
        }
        if (app.got_subcommand("tokenize")) return cmd_tokenize(a, out);
        if (app.got_subcommand("train")) return cmd_train(a, out);
        if (app.got_subcommand("finetune")) return cmd_finetune(a, out);
        if (app.got_subcommand("embed")) return cmd_embed(a, out);
        if (app.got_subcommand("reconstruct")) return cmd_reconstruct(a, out);
        if (app.got_subcommand("eval")) return cmd_eval(a, out);
        if (app.got_subcommand("synth")) return cmd_synth(a, out);
        return 1;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace genemamba::cli
