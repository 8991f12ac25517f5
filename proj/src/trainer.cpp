#include "genemamba/trainer.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "genemamba/binary_io.hpp"
#include "genemamba/error.hpp"
#include "genemamba/parallel.hpp"
#include "genemamba/random.hpp"

namespace genemamba {

namespace {

constexpr char kMagic[4] = {'G', 'M', 'C', 'K'};

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + text + "' for '" + key + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("invalid boolean '" + text + "' for '" + key + "'");
}

std::vector<ConstTensorRef> const_refs(const std::vector<TensorRef>& refs) {
    std::vector<ConstTensorRef> out;
    out.reserve(refs.size());
    for (const auto& r : refs) out.emplace_back(r.data(), r.size());
    return out;
}

const std::string& meta_value(const Checkpoint& ck, const std::string& key) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw StateError("checkpoint lacks '" + key + "'");
    return it->second;
}

template <typename T>
T meta_number(const Checkpoint& ck, const std::string& key) {
    try {
        return parse_number<T>(key, meta_value(ck, key));
    } catch (const ConfigError& e) {
        throw StateError(std::string("checkpoint: ") + e.what());
    }
}

template <typename Tensor>
NamedTensor to_named(const std::string& name, const Tensor& t) {
    NamedTensor n{name, 2, {}};
    if constexpr (Tensor::ColsAtCompileTime == 1) {
        n.rank = 1;
        n.value = t.template cast<double>();
    } else {
        n.value = t.template cast<double>();
    }
    return n;
}

template <typename Tensor>
void from_named(const NamedTensor& n, Tensor& t) {
    const bool vector = Tensor::ColsAtCompileTime == 1;
    if ((vector && n.rank != 1) || (!vector && n.rank != 2) || n.value.rows() != t.rows() || n.value.cols() != t.cols())
        throw StateError("checkpoint tensor '" + n.name + "' has shape " + std::to_string(n.value.rows()) + "x" +
                         std::to_string(n.value.cols()) + ", expected " + std::to_string(t.rows()) + "x" +
                         std::to_string(t.cols()));
    t = n.value.cast<real>();
}

std::vector<std::string> tensor_names(const ModelParams& model) {
    std::vector<std::string> names;
    model.visit([&](const std::string& name, const auto&) { names.push_back(name); });
    return names;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(seed, 1), epoch));
    rng.shuffle(order);
    return order;
}

void describe_mismatch(const ModelConfig& got, const ModelConfig& want) {
    auto check = [](const char* field, auto a, auto b) {
        if (a != b) {
            std::ostringstream os;
            os << "checkpoint " << field << " is " << a << " but " << b << " was expected";
            throw StateError(os.str());
        }
    };
    check("vocab_size", got.vocab_size, want.vocab_size);
    check("d_model", got.d_model, want.d_model);
    check("n_layers", got.n_layers, want.n_layers);
    check("d_inner", got.inner(), want.inner());
    check("d_state", got.d_state, want.d_state);
    check("conv_width", got.conv_width, want.conv_width);
    check("max_len", got.max_len, want.max_len);
    check("tied_head", got.tied_head, want.tied_head);
    check("norm_eps", got.norm_eps, want.norm_eps);
}

}  // namespace

// --- optimizer ---------------------------------------------------------------

std::vector<TensorRef> tensor_refs(ModelParams& model) {
    std::vector<TensorRef> refs;
    model.visit([&](const std::string&, auto& t) { refs.emplace_back(t.data(), t.size()); });
    return refs;
}

std::vector<ConstTensorRef> tensor_refs(const ModelParams& model) {
    std::vector<ConstTensorRef> refs;
    model.visit([&](const std::string&, const auto& t) { refs.emplace_back(t.data(), t.size()); });
    return refs;
}

AdamState adam_init(const std::vector<ConstTensorRef>& params) {
    AdamState s;
    for (const auto& p : params) {
        s.m.push_back(Vec::Zero(p.size()));
        s.v.push_back(Vec::Zero(p.size()));
    }
    return s;
}

void adam_step(std::vector<TensorRef>& params, const std::vector<ConstTensorRef>& grads, AdamState& state,
               double learning_rate, const AdamConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw InputError("adam_step: parameter, gradient and state counts differ");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& g = grads[i];
        m = real(cfg.beta1) * m + real(1.0 - cfg.beta1) * g;
        v = real(cfg.beta2) * v + real(1.0 - cfg.beta2) * g.cwiseProduct(g);
        const auto m_hat = m.array() / real(c1);
        const auto v_hat = v.array() / real(c2);
        params[i].array() -= real(learning_rate) * m_hat / (v_hat.sqrt() + real(cfg.eps));
    }
}

double global_norm(const std::vector<ConstTensorRef>& grads) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.template cast<double>().squaredNorm();
    return std::sqrt(sq);
}

double clip_global_norm(std::vector<TensorRef>& grads, double max_norm) {
    const double norm = global_norm(const_refs(grads));
    if (max_norm <= 0.0 || norm <= max_norm) return norm;
    const real scale = real(max_norm / norm);
    for (auto& g : grads) g *= scale;
    // Rounding can leave the rescaled norm a few ulps above the bound.
    const real shrink = real(1) - 4 * std::numeric_limits<real>::epsilon();
    while (global_norm(const_refs(grads)) > max_norm)
        for (auto& g : grads) g *= shrink;
    return norm;
}

// --- configuration -----------------------------------------------------------

std::size_t TrainConfig::total_steps(std::size_t n_cells) const {
    if (max_steps > 0) return max_steps;
    const std::size_t per_epoch = (n_cells + batch_size - 1) / batch_size;
    return epochs * per_epoch;
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (epochs == 0 && max_steps == 0) throw ConfigError("either epochs or max_steps must be positive");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (threads == 0) throw ConfigError("threads must be >= 1");
    loss().validate();
}

TrainConfig parse_train_config(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    TrainConfig c = std::move(base);
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "learning_rate") c.learning_rate = parse_number<double>(key, val);
        else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, val);
        else if (key == "epochs") c.epochs = parse_number<std::size_t>(key, val);
        else if (key == "max_steps") c.max_steps = parse_number<std::size_t>(key, val);
        else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, val);
        else if (key == "gamma") c.gamma = parse_number<double>(key, val);
        else if (key == "tau") c.tau = parse_number<double>(key, val);
        else if (key == "clip_norm") c.clip_norm = parse_number<double>(key, val);
        else if (key == "beta1") c.adam.beta1 = parse_number<double>(key, val);
        else if (key == "beta2") c.adam.beta2 = parse_number<double>(key, val);
        else if (key == "adam_eps") c.adam.eps = parse_number<double>(key, val);
        else if (key == "checkpoint_every") c.checkpoint_every = parse_number<std::size_t>(key, val);
        else if (key == "threads") c.threads = parse_number<std::size_t>(key, val);
        else if (key == "d_model") c.model.d_model = parse_number<std::size_t>(key, val);
        else if (key == "n_layers") c.model.n_layers = parse_number<std::size_t>(key, val);
        else if (key == "d_inner") c.model.d_inner = parse_number<std::size_t>(key, val);
        else if (key == "d_state") c.model.d_state = parse_number<std::size_t>(key, val);
        else if (key == "conv_width") c.model.conv_width = parse_number<std::size_t>(key, val);
        else if (key == "tied_head") c.model.tied_head = parse_bool(key, val);
        else if (key == "norm_eps") c.model.norm_eps = parse_number<double>(key, val);
        else throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    return c;
}

TrainConfig load_train_config(const std::string& path, TrainConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_train_config(ss.str(), std::move(base));
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string format_train_config(const TrainConfig& c) {
    std::ostringstream os;
    os << "learning_rate = " << fmt_double(c.learning_rate) << '\n'
       << "batch_size = " << c.batch_size << '\n'
       << "epochs = " << c.epochs << '\n'
       << "max_steps = " << c.max_steps << '\n'
       << "seed = " << c.seed << '\n'
       << "gamma = " << fmt_double(c.gamma) << '\n'
       << "tau = " << fmt_double(c.tau) << '\n'
       << "clip_norm = " << fmt_double(c.clip_norm) << '\n'
       << "beta1 = " << fmt_double(c.adam.beta1) << '\n'
       << "beta2 = " << fmt_double(c.adam.beta2) << '\n'
       << "adam_eps = " << fmt_double(c.adam.eps) << '\n'
       << "checkpoint_every = " << c.checkpoint_every << '\n'
       << "threads = " << c.threads << '\n'
       << "d_model = " << c.model.d_model << '\n'
       << "n_layers = " << c.model.n_layers << '\n'
       << "d_inner = " << c.model.d_inner << '\n'
       << "d_state = " << c.model.d_state << '\n'
       << "conv_width = " << c.model.conv_width << '\n'
       << "tied_head = " << (c.model.tied_head ? "true" : "false") << '\n'
       << "norm_eps = " << fmt_double(c.model.norm_eps) << '\n';
    return os.str();
}

// --- checkpoints -------------------------------------------------------------

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void write_checkpoint(const Checkpoint& ck, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StateError("cannot write checkpoint '" + tmp + "'");
        out.write(kMagic, 4);
        binio::write<std::uint32_t>(out, Checkpoint::kVersion);
        binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(ck.meta.size()));
        for (const auto& [k, v] : ck.meta) {
            binio::write_string(out, k);
            binio::write_string(out, v);
        }
        binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
        for (const auto& t : ck.tensors) {
            binio::write_string(out, t.name);
            binio::write<std::uint32_t>(out, t.rank);
            binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
            if (t.rank == 2) binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
            for (Eigen::Index r = 0; r < t.value.rows(); ++r)
                for (Eigen::Index c = 0; c < t.value.cols(); ++c) binio::write<double>(out, t.value(r, c));
        }
        out.flush();
        if (!out) throw StateError("failed writing checkpoint '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw StateError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StateError("cannot open checkpoint '" + path + "'");
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || !std::equal(magic, magic + 4, kMagic)) throw StateError("'" + path + "' is not a checkpoint");
    Checkpoint ck;
    try {
        const auto version = binio::read<std::uint32_t>(in);
        if (version != Checkpoint::kVersion)
            throw StateError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(Checkpoint::kVersion) + ")");
        const auto n_meta = binio::read<std::uint32_t>(in);
        for (std::uint32_t i = 0; i < n_meta; ++i) {
            auto k = binio::read_string(in);
            ck.meta[std::move(k)] = binio::read_string(in);
        }
        const auto n_tensors = binio::read<std::uint32_t>(in);
        for (std::uint32_t i = 0; i < n_tensors; ++i) {
            NamedTensor t;
            t.name = binio::read_string(in);
            t.rank = binio::read<std::uint32_t>(in);
            if (t.rank != 1 && t.rank != 2) throw StateError("tensor '" + t.name + "' has unsupported rank");
            const auto rows = binio::read<std::uint64_t>(in);
            const auto cols = t.rank == 2 ? binio::read<std::uint64_t>(in) : 1;
            if (rows != 0 && cols > file_size / 8 / rows)
                throw StateError("tensor '" + t.name + "' is larger than the file");
            t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            for (Eigen::Index r = 0; r < t.value.rows(); ++r)
                for (Eigen::Index c = 0; c < t.value.cols(); ++c) t.value(r, c) = binio::read<double>(in);
            ck.tensors.push_back(std::move(t));
        }
    } catch (const DataError& e) {
        throw StateError("checkpoint '" + path + "' is truncated or corrupt: " + e.what());
    }
    if (in.peek() != std::char_traits<char>::eof()) throw StateError("checkpoint '" + path + "' has trailing bytes");
    return ck;
}

void store_model(Checkpoint& ck, const ModelParams& model) {
    const auto& c = model.config;
    ck.meta["model.vocab_size"] = std::to_string(c.vocab_size);
    ck.meta["model.d_model"] = std::to_string(c.d_model);
    ck.meta["model.n_layers"] = std::to_string(c.n_layers);
    ck.meta["model.d_inner"] = std::to_string(c.d_inner);
    ck.meta["model.d_state"] = std::to_string(c.d_state);
    ck.meta["model.conv_width"] = std::to_string(c.conv_width);
    ck.meta["model.max_len"] = std::to_string(c.max_len);
    ck.meta["model.tied_head"] = c.tied_head ? "1" : "0";
    ck.meta["model.norm_eps"] = fmt_double(c.norm_eps);
    model.visit([&](const std::string& name, const auto& t) { ck.tensors.push_back(to_named(name, t)); });
}

ModelConfig stored_model_config(const Checkpoint& ck) {
    ModelConfig c;
    c.vocab_size = meta_number<std::size_t>(ck, "model.vocab_size");
    c.d_model = meta_number<std::size_t>(ck, "model.d_model");
    c.n_layers = meta_number<std::size_t>(ck, "model.n_layers");
    c.d_inner = meta_number<std::size_t>(ck, "model.d_inner");
    c.d_state = meta_number<std::size_t>(ck, "model.d_state");
    c.conv_width = meta_number<std::size_t>(ck, "model.conv_width");
    c.max_len = meta_number<std::size_t>(ck, "model.max_len");
    c.tied_head = meta_value(ck, "model.tied_head") == "1";
    c.norm_eps = meta_number<double>(ck, "model.norm_eps");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw StateError(std::string("checkpoint model config is invalid: ") + e.what());
    }
    return c;
}

ModelParams restore_model(const Checkpoint& ck, const ModelConfig* expected) {
    const ModelConfig c = stored_model_config(ck);
    if (expected) describe_mismatch(c, *expected);
    ModelParams model = ModelParams::zeros(c);
    model.visit([&](const std::string& name, auto& t) {
        const NamedTensor* n = ck.find(name);
        if (!n) throw StateError("checkpoint is missing tensor '" + name + "'");
        from_named(*n, t);
    });
    return model;
}

void save_checkpoint(const ModelParams& model, const std::string& path) {
    Checkpoint ck;
    store_model(ck, model);
    write_checkpoint(ck, path);
}

ModelParams load_checkpoint(const std::string& path, const ModelConfig* expected) {
    return restore_model(read_checkpoint(path), expected);
}

// --- pretraining -------------------------------------------------------------

std::string format_step(const StepRecord& r) {
    return "step=" + std::to_string(r.step) + " l_lang=" + fmt_double(r.l_lang) + " l_pathway=" + fmt_double(r.l_pathway) +
           " total=" + fmt_double(r.total);
}

void save_train_state(const TrainState& state, const TrainConfig& cfg, std::uint64_t vocab_hash,
                      const std::string& path) {
    Checkpoint ck;
    store_model(ck, state.model);
    ck.meta["train.step"] = std::to_string(state.step);
    // The worker count does not change results, so checkpoints leave it out.
    TrainConfig recorded = cfg;
    recorded.threads = 1;
    ck.meta["train.config"] = format_train_config(recorded);
    ck.meta["vocab_hash"] = std::to_string(vocab_hash);
    ck.meta["adam.step"] = std::to_string(state.adam.step);
    const auto names = tensor_names(state.model);
    for (std::size_t i = 0; i < names.size() && i < state.adam.m.size(); ++i) {
        ck.tensors.push_back(to_named("adam.m." + names[i], state.adam.m[i]));
        ck.tensors.push_back(to_named("adam.v." + names[i], state.adam.v[i]));
    }
    write_checkpoint(ck, path);
}

TrainState load_train_state(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    TrainState s;
    s.model = restore_model(ck);
    s.adam = adam_init(tensor_refs(std::as_const(s.model)));
    if (ck.meta.count("train.step")) s.step = meta_number<std::uint64_t>(ck, "train.step");
    if (ck.meta.count("adam.step")) {
        s.adam.step = meta_number<std::uint64_t>(ck, "adam.step");
        const auto names = tensor_names(s.model);
        for (std::size_t i = 0; i < names.size(); ++i) {
            const NamedTensor* m = ck.find("adam.m." + names[i]);
            const NamedTensor* v = ck.find("adam.v." + names[i]);
            if (!m || !v) throw StateError("checkpoint is missing optimizer state for '" + names[i] + "'");
            from_named(*m, s.adam.m[i]);
            from_named(*v, s.adam.v[i]);
        }
    }
    return s;
}

TrainResult train(const TrainConfig& cfg, const TokenizedDataset& data, const PathwaySet& pathways,
                  const TrainOptions& options) {
    cfg.validate();
    if (data.cells.empty()) throw InputError("training data has no cells");
    cfg.model.validate();

    TrainResult result;
    TrainState& st = result.state;
    if (options.resume) {
        describe_mismatch(options.resume->model.config, cfg.model);
        st = *options.resume;
    } else {
        st.model = ModelParams::init(cfg.model, derive_seed(cfg.seed, 0));
        st.adam = adam_init(tensor_refs(std::as_const(st.model)));
    }

    const std::size_t n = data.cells.size();
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = cfg.total_steps(n);
    const LossConfig loss_cfg = cfg.loss();
    std::vector<std::size_t> order;
    std::uint64_t order_epoch = ~std::uint64_t{0};

    while (st.step < total) {
        const std::uint64_t epoch = st.step / per_epoch;
        const std::size_t slot = st.step % per_epoch;
        if (epoch != order_epoch) {
            order = epoch_order(cfg.seed, epoch, n);
            order_epoch = epoch;
        }
        std::vector<TokenSequence> batch;
        for (std::size_t i = slot * cfg.batch_size; i < std::min(n, (slot + 1) * cfg.batch_size); ++i)
            batch.push_back(data.cells[order[i]]);

        GradientResult g;
        try {
            g = gradients(st.model, batch, pathways, loss_cfg, cfg.threads);
            if (!std::isfinite(g.loss.total)) throw NumericError("non-finite loss");
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(st.step + 1) + ": " + e.what() +
                               (options.checkpoint_path.empty() ? "" : "; last good checkpoint kept"));
        }
        auto grads = tensor_refs(g.grads);
        clip_global_norm(grads, cfg.clip_norm);
        auto params = tensor_refs(st.model);
        adam_step(params, const_refs(grads), st.adam, cfg.learning_rate, cfg.adam);
        ++st.step;

        StepRecord rec{st.step, g.loss.l_lang, g.loss.l_pathway, g.loss.total};
        result.log.push_back(rec);
        if (options.metrics) *options.metrics << format_step(rec) << '\n' << std::flush;
        const bool last = st.step == total;
        if (!options.checkpoint_path.empty() && (last || (cfg.checkpoint_every && st.step % cfg.checkpoint_every == 0)))
            save_train_state(st, cfg, options.vocab_hash, options.checkpoint_path);
    }
    return result;
}

// --- classifier --------------------------------------------------------------

ClassMetrics classification_metrics(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted) {
    if (truth.size() != predicted.size()) throw InputError("classification_metrics: length mismatch");
    ClassMetrics m;
    m.count = truth.size();
    if (truth.empty()) return m;
    std::map<std::size_t, std::array<std::size_t, 3>> per_class;  // tp, fp, fn
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] == predicted[i]) {
            ++correct;
            ++per_class[truth[i]][0];
        } else {
            ++per_class[predicted[i]][1];
            ++per_class[truth[i]][2];
        }
    }
    m.accuracy = double(correct) / double(truth.size());
    double f1 = 0.0;
    for (const auto& [cls, c] : per_class) f1 += 2.0 * double(c[0]) / double(2 * c[0] + c[1] + c[2]);
    m.macro_f1 = f1 / double(per_class.size());
    return m;
}

Split stratified_split(const std::vector<CellMeta>& labels, double test_fraction, std::uint64_t seed) {
    Split s;
    const bool partitioned =
        std::any_of(labels.begin(), labels.end(), [](const CellMeta& m) { return !m.partition.empty(); });
    if (partitioned) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const auto& p = labels[i].partition;
            if (p == "train") s.train.push_back(i);
            else if (p == "test") s.test.push_back(i);
            else throw DataError("cell " + std::to_string(i) + " has partition '" + p + "' (expected train or test)");
        }
        return s;
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0, 1)");
    std::map<std::string, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i].cell_type].push_back(i);
    Rng rng(derive_seed(seed, 7));
    for (auto& [name, idx] : by_class) {
        if (idx.size() < 2) {
            s.warnings.push_back("class '" + name + "' has " + std::to_string(idx.size()) +
                                 " cell(s); kept on the training side");
            s.train.insert(s.train.end(), idx.begin(), idx.end());
            continue;
        }
        rng.shuffle(idx);
        const auto want = static_cast<std::size_t>(std::llround(test_fraction * double(idx.size())));
        const std::size_t n_test = std::clamp<std::size_t>(want, 1, idx.size() - 1);
        s.test.insert(s.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
        s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

ClassifierHead ClassifierHead::init(std::size_t d_model, std::size_t hidden, std::vector<std::string> classes,
                                    std::uint64_t seed) {
    if (classes.size() < 2) throw InputError("a classifier needs at least two classes");
    if (hidden == 0) throw ConfigError("classifier hidden size must be >= 1");
    ClassifierHead h;
    h.classes = std::move(classes);
    Rng rng(derive_seed(seed, 3));
    const auto H = static_cast<Eigen::Index>(hidden);
    const auto C = static_cast<Eigen::Index>(h.classes.size());
    const auto D = static_cast<Eigen::Index>(d_model);
    h.w1 = Mat(H, D);
    for (Eigen::Index i = 0; i < h.w1.size(); ++i) h.w1.data()[i] = real(rng.normal() / std::sqrt(double(D)));
    h.b1 = Vec::Zero(H);
    h.w2 = Mat(C, H);
    for (Eigen::Index i = 0; i < h.w2.size(); ++i) h.w2.data()[i] = real(rng.normal() / std::sqrt(double(H)));
    h.b2 = Vec::Zero(C);
    return h;
}

Vec ClassifierHead::forward(const Vec& embedding) const {
    const Vec a = (w1 * embedding + b1).cwiseMax(real(0));
    return w2 * a + b2;
}

void ClassifierConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("classifier learning rate must be positive");
    if (batch_size == 0 || epochs == 0) throw ConfigError("classifier batch size and epochs must be >= 1");
    if (hidden == 0) throw ConfigError("classifier hidden size must be >= 1");
    if (threads == 0) throw ConfigError("threads must be >= 1");
}

namespace {

std::vector<TensorRef> head_refs(ClassifierHead& h) {
    return {TensorRef(h.w1.data(), h.w1.size()), TensorRef(h.b1.data(), h.b1.size()),
            TensorRef(h.w2.data(), h.w2.size()), TensorRef(h.b2.data(), h.b2.size())};
}

ClassifierHead zeros_like(const ClassifierHead& h) {
    ClassifierHead z;
    z.w1 = Mat::Zero(h.w1.rows(), h.w1.cols());
    z.b1 = Vec::Zero(h.b1.size());
    z.w2 = Mat::Zero(h.w2.rows(), h.w2.cols());
    z.b2 = Vec::Zero(h.b2.size());
    return z;
}

void require_cls(const TokenSequence& s, std::size_t index) {
    if (s.valid_len == 0 || s.tokens[0] != Vocabulary::kCls)
        throw InputError("cell " + std::to_string(index) + " does not start with the CLS token");
}

struct CellGrad {
    ModelParams backbone;
    ClassifierHead head;
    double loss = 0.0;
};

CellGrad cell_gradient(const ModelParams& model, const ClassifierHead& head, const TokenSequence& cell,
                       std::size_t label, double weight, bool backbone) {
    CellGrad g;
    g.head = zeros_like(head);
    ForwardCache cache;
    const Mat h = forward_sequence(model, cell.valid(), backbone ? &cache : nullptr);
    const Vec e = h.row(0).transpose();
    const Vec a = head.w1 * e + head.b1;
    const Vec r = a.cwiseMax(real(0));
    const Vec z = head.w2 * r + head.b2;
    const real m = z.maxCoeff();
    const Vec p = (z.array() - m).exp().matrix();
    const real sum = p.sum();
    g.loss = weight * -(double(z(static_cast<Eigen::Index>(label)) - m) - std::log(double(sum)));
    Vec dz = p / sum;
    dz(static_cast<Eigen::Index>(label)) -= real(1);
    dz *= real(weight);
    g.head.w2 = dz * r.transpose();
    g.head.b2 = dz;
    const Vec da = ((head.w2.transpose() * dz).array() * (a.array() > real(0)).template cast<real>()).matrix();
    g.head.w1 = da * e.transpose();
    g.head.b1 = da;
    if (backbone) {
        g.backbone = ModelParams::zeros(model.config);
        Mat dh = Mat::Zero(h.rows(), h.cols());
        dh.row(0) = (head.w1.transpose() * da).transpose();
        backward_sequence(model, cache, dh, g.backbone);
    }
    return g;
}

std::size_t argmax(const Vec& v) {
    Eigen::Index best = 0;
    v.maxCoeff(&best);
    return static_cast<std::size_t>(best);
}

}  // namespace

std::vector<std::size_t> predict_classes(const ModelParams& backbone, const ClassifierHead& head,
                                         const std::vector<TokenSequence>& cells, std::size_t threads) {
    std::vector<std::size_t> out(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) require_cls(cells[i], i);
    parallel_for(cells.size(), threads, [&](std::size_t i) {
        const Mat h = forward_sequence(backbone, cells[i].valid());
        out[i] = argmax(head.forward(h.row(0).transpose()));
    });
    return out;
}

FinetuneResult finetune_classifier(const ModelParams& model, const TokenizedDataset& data,
                                   const ClassifierConfig& cfg) {
    cfg.validate();
    if (!data.labels) throw InputError("fine-tuning needs cell labels");
    const auto& labels = *data.labels;
    if (labels.size() != data.cells.size()) throw InputError("label count does not match cell count");
    for (std::size_t i = 0; i < data.cells.size(); ++i) {
        require_cls(data.cells[i], i);
        if (labels[i].cell_type.empty()) throw InputError("cell " + std::to_string(i) + " has no cell type");
    }

    std::vector<std::string> classes;
    for (const auto& l : labels) classes.push_back(l.cell_type);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) throw InputError("fine-tuning needs at least two cell types, found " + std::to_string(classes.size()));
    std::vector<std::size_t> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        y[i] = static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), labels[i].cell_type) - classes.begin());

    FinetuneResult res;
    res.split = stratified_split(labels, cfg.test_fraction, cfg.seed);
    if (res.split.train.empty()) throw InputError("training split is empty");
    res.backbone = model;
    res.head = ClassifierHead::init(model.config.d_model, cfg.hidden, classes, cfg.seed);

    AdamState head_adam = adam_init(const_refs(head_refs(res.head)));
    AdamState body_adam;
    if (cfg.finetune_backbone) body_adam = adam_init(tensor_refs(std::as_const(res.backbone)));

    auto order = res.split.train;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(derive_seed(cfg.seed, 5), epoch));
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double weight = 1.0 / double(end - start);
            std::vector<CellGrad> parts(end - start);
            parallel_for(end - start, cfg.threads, [&](std::size_t k) {
                const std::size_t i = order[start + k];
                parts[k] = cell_gradient(res.backbone, res.head, data.cells[i], y[i], weight, cfg.finetune_backbone);
            });
            ClassifierHead hg = zeros_like(res.head);
            ModelParams bg;
            if (cfg.finetune_backbone) bg = ModelParams::zeros(model.config);
            for (auto& p : parts) {
                hg.w1 += p.head.w1;
                hg.b1 += p.head.b1;
                hg.w2 += p.head.w2;
                hg.b2 += p.head.b2;
                if (cfg.finetune_backbone) {
                    auto dst = tensor_refs(bg);
                    auto src = tensor_refs(std::as_const(p.backbone));
                    for (std::size_t t = 0; t < dst.size(); ++t) dst[t] += src[t];
                }
            }
            std::vector<TensorRef> grads = head_refs(hg);
            if (cfg.finetune_backbone)
                for (auto& r : tensor_refs(bg)) grads.push_back(r);
            for (const auto& g : grads)
                if (!g.allFinite()) throw NumericError("non-finite gradient during fine-tuning");
            clip_global_norm(grads, cfg.clip_norm);

            auto all = const_refs(grads);
            auto hp = head_refs(res.head);
            adam_step(hp, {all.begin(), all.begin() + 4}, head_adam, cfg.learning_rate, cfg.adam);
            if (cfg.finetune_backbone) {
                auto bp = tensor_refs(res.backbone);
                adam_step(bp, {all.begin() + 4, all.end()}, body_adam, cfg.learning_rate, cfg.adam);
            }
        }
    }

    auto evaluate = [&](const std::vector<std::size_t>& idx, std::vector<std::size_t>* preds) {
        std::vector<TokenSequence> cells;
        std::vector<std::size_t> truth;
        for (auto i : idx) {
            cells.push_back(data.cells[i]);
            truth.push_back(y[i]);
        }
        auto p = predict_classes(res.backbone, res.head, cells, cfg.threads);
        const auto m = classification_metrics(truth, p);
        if (preds) *preds = std::move(p);
        return m;
    };
    res.train_metrics = evaluate(res.split.train, nullptr);
    res.test_metrics = evaluate(res.split.test, &res.test_predictions);
    return res;
}

void save_classifier(const ModelParams& backbone, const ClassifierHead& head, const std::string& path) {
    Checkpoint ck;
    store_model(ck, backbone);
    ck.meta["classifier.classes"] = std::to_string(head.classes.size());
    for (std::size_t i = 0; i < head.classes.size(); ++i) ck.meta["classifier.class." + std::to_string(i)] = head.classes[i];
    ck.tensors.push_back(to_named("classifier.w1", head.w1));
    ck.tensors.push_back(to_named("classifier.b1", head.b1));
    ck.tensors.push_back(to_named("classifier.w2", head.w2));
    ck.tensors.push_back(to_named("classifier.b2", head.b2));
    write_checkpoint(ck, path);
}

std::pair<ModelParams, ClassifierHead> load_classifier(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    ModelParams backbone = restore_model(ck);
    ClassifierHead head;
    const auto n = meta_number<std::size_t>(ck, "classifier.classes");
    for (std::size_t i = 0; i < n; ++i) head.classes.push_back(meta_value(ck, "classifier.class." + std::to_string(i)));
    auto get = [&](const std::string& name) -> const NamedTensor& {
        const NamedTensor* t = ck.find(name);
        if (!t) throw StateError("checkpoint is missing tensor '" + name + "'");
        return *t;
    };
    const auto& w1 = get("classifier.w1");
    const auto& w2 = get("classifier.w2");
    head.w1 = w1.value.cast<real>();
    head.b1 = get("classifier.b1").value.col(0).cast<real>();
    head.w2 = w2.value.cast<real>();
    head.b2 = get("classifier.b2").value.col(0).cast<real>();
    if (head.w1.cols() != static_cast<Eigen::Index>(backbone.config.d_model) || head.b1.size() != head.w1.rows() ||
        head.w2.cols() != head.w1.rows() || head.w2.rows() != static_cast<Eigen::Index>(n) || head.b2.size() != head.w2.rows())
        throw StateError("classifier tensors have inconsistent shapes");
    return {std::move(backbone), std::move(head)};
}

}  // namespace genemamba
