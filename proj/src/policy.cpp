#include "ktr/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <stdexcept>

#include "ktr/rng.hpp"

namespace ktr::policy {

using diff::Graph;
using diff::NodeId;
using diff::Tensor;
using nlohmann::json;

namespace {

std::atomic<std::uint64_t> g_forward_passes{0};

constexpr double kNormEps = 1e-6;
constexpr char kMagic[8] = {'V', 'K', 'T', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::size_t derived_vocab_size(std::size_t frame_vocab) { return Vocabulary(frame_vocab).size(); }

}  // namespace

void ModelConfig::validate() const {
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw std::invalid_argument("model.embed_dim must be a positive multiple of model.heads");
    }
    if (layers == 0) throw std::invalid_argument("model.layers must be >= 1");
    if (mlp_hidden == 0) throw std::invalid_argument("model.mlp_hidden must be >= 1");
    if (frames < 2 || slots < 1) throw std::invalid_argument("model.frames must be >= 2 and model.slots >= 1");
    if (max_response_len == 0) throw std::invalid_argument("model.max_response_len must be >= 1");
    if (max_seq_len <= frames * slots + 1) {
        throw std::invalid_argument("model.max_seq_len too small for the frame pseudo-tokens");
    }
    if (!(init_std > 0.0)) throw std::invalid_argument("model.init_std must be positive");
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"embed_dim", c.embed_dim},   {"layers", c.layers},
             {"heads", c.heads},           {"mlp_hidden", c.mlp_hidden},
             {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
             {"max_response_len", c.max_response_len},
             {"frames", c.frames},         {"slots", c.slots},
             {"init_std", c.init_std},     {"init_seed", c.init_seed}};
}

void from_json(const json& j, ModelConfig& c) {
    ModelConfig d;
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.max_response_len = j.value("max_response_len", d.max_response_len);
    c.frames = j.value("frames", d.frames);
    c.slots = j.value("slots", d.slots);
    c.init_std = j.value("init_std", d.init_std);
    c.init_seed = j.value("init_seed", d.init_seed);
}

// ---------------------------------------------------------------------------

PolicyModel::PolicyModel(ModelConfig config, std::size_t frame_vocab)
    : config_(std::move(config)), vocab_(frame_vocab) {
    if (config_.vocab_size == 0) {
        config_.vocab_size = derived_vocab_size(frame_vocab);
    }
    if (config_.vocab_size != vocab_.size()) {
        throw std::invalid_argument("model.vocab_size " + std::to_string(config_.vocab_size) +
                                    " does not match the token layout (" + std::to_string(vocab_.size()) + ")");
    }
    config_.validate();

    const auto d = config_.embed_dim;
    const auto h = config_.mlp_hidden;
    const auto V = config_.vocab_size;
    Rng rng(derive_seed(config_.init_seed, "policy-init"));
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.layers));

    auto add = [&](std::string name, std::vector<std::size_t> shape, double std_dev, double fill = 0.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.storage()) {
            v = std_dev > 0.0 ? std_dev * rng.normal() : fill;
        }
        names_.push_back(std::move(name));
        params_.push_back(std::move(t));
    };

    const double s = config_.init_std;
    add("tok_emb", {V, d}, s);
    add("pos_emb", {config_.max_seq_len, d}, s);
    add("segment_emb", {config_.frames + 1, d}, s);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const auto p = "layer" + std::to_string(l) + ".";
        add(p + "attn_norm", {d}, 0.0, 1.0);
        add(p + "wq", {d, d}, s);
        add(p + "wk", {d, d}, s);
        add(p + "wv", {d, d}, s);
        add(p + "wo", {d, d}, s * residual_scale);
        add(p + "mlp_norm", {d}, 0.0, 1.0);
        add(p + "w1", {d, h}, s);
        add(p + "b1", {h}, 0.0);
        add(p + "w2", {h, d}, s * residual_scale);
        add(p + "b2", {d}, 0.0);
    }
    add("final_norm", {d}, 0.0, 1.0);
    add("head_w", {d, V}, s);
    add("head_b", {V}, 0.0);
}

std::size_t PolicyModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

std::vector<std::size_t> PolicyModel::final_layer_parameters() const {
    return {params_.size() - 2, params_.size() - 1};
}

void PolicyModel::apply_gradient(const diff::GradientVector& grad, double learning_rate) {
    if (grad.per_parameter.size() != params_.size()) {
        throw std::invalid_argument("gradient does not match the model's parameter list");
    }
    for (std::size_t p = 0; p < params_.size(); ++p) {
        auto data = params_[p].data();
        const auto& g = grad.per_parameter[p];
        if (g.size() != data.size()) {
            throw std::invalid_argument("gradient size mismatch for " + names_[p]);
        }
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] -= learning_rate * g[i];
        }
    }
}

// ---------------------------------------------------------------------------

ParamNodes register_parameters(Graph& graph, const PolicyModel& model) {
    ParamNodes nodes;
    nodes.reserve(model.parameters().size());
    for (const auto& p : model.parameters()) {
        nodes.push_back(graph.parameter_view(p));
    }
    return nodes;
}

ResponseNodes build_response_graph(Graph& graph, const PolicyModel& model, const ParamNodes& params,
                                   const env::VideoClip& video, std::span<const TokenId> prompt,
                                   std::span<const TokenId> response, bool predict_next) {
    const auto& cfg = model.config();
    const auto& vocab = model.vocab();
    if (video.frame_count() != cfg.frames || video.slot_count() != cfg.slots) {
        throw std::invalid_argument("video shape does not match the model's frame encoder");
    }
    if (!predict_next && response.empty()) {
        throw std::invalid_argument("teacher-forced scoring needs a non-empty response");
    }
    for (const auto& frame : video.frames) {
        for (const auto s : frame) {
            if (!vocab.is_symbol(s)) throw std::invalid_argument("frame symbol out of range");
        }
    }
    for (const auto t : prompt) {
        if (!vocab.contains(t)) throw std::invalid_argument("unknown prompt token id " + std::to_string(t));
    }
    for (const auto t : response) {
        if (!vocab.contains(t)) throw std::invalid_argument("unknown response token id " + std::to_string(t));
    }

    const auto frame_tokens = cfg.frames * cfg.slots;
    const auto context = frame_tokens + prompt.size();
    const auto response_inputs = predict_next ? response.size() : response.size() - 1;
    const auto seq_len = context + response_inputs;
    if (seq_len > cfg.max_seq_len) {
        throw std::length_error("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
    }

    std::vector<std::size_t> ids;
    std::vector<std::size_t> segments;
    std::vector<std::size_t> positions(seq_len);
    ids.reserve(seq_len);
    segments.reserve(seq_len);
    for (std::size_t f = 0; f < cfg.frames; ++f) {
        for (const auto s : video.frames[f]) {
            ids.push_back(s);
            segments.push_back(f);
        }
    }
    for (const auto t : prompt) {
        ids.push_back(t);
        segments.push_back(cfg.frames);
    }
    for (std::size_t i = 0; i < response_inputs; ++i) {
        ids.push_back(response[i]);
        segments.push_back(cfg.frames);
    }
    for (std::size_t i = 0; i < seq_len; ++i) positions[i] = i;

    g_forward_passes.fetch_add(1, std::memory_order_relaxed);

    std::size_t next = 0;
    auto param = [&]() { return params.at(next++); };
    const NodeId tok_emb = param();
    const NodeId pos_emb = param();
    const NodeId seg_emb = param();

    NodeId x = graph.add(graph.gather_rows(tok_emb, std::move(ids)), graph.gather_rows(pos_emb, std::move(positions)));
    x = graph.add(x, graph.gather_rows(seg_emb, std::move(segments)));

    const auto d = cfg.embed_dim;
    const auto head_dim = d / cfg.heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const NodeId attn_norm = param();
        const NodeId wq = param();
        const NodeId wk = param();
        const NodeId wv = param();
        const NodeId wo = param();
        const NodeId mlp_norm = param();
        const NodeId w1 = param();
        const NodeId b1 = param();
        const NodeId w2 = param();
        const NodeId b2 = param();

        const NodeId h = graph.mul_row(graph.rms_norm_rows(x, kNormEps), attn_norm);
        const NodeId q = graph.matmul(h, wq);
        const NodeId k = graph.matmul(h, wk);
        const NodeId v = graph.matmul(h, wv);
        std::vector<NodeId> heads;
        heads.reserve(cfg.heads);
        for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
            const auto b = hd * head_dim;
            const auto e = b + head_dim;
            const NodeId scores = graph.scale(graph.matmul_nt(graph.slice_cols(q, b, e), graph.slice_cols(k, b, e)), attn_scale);
            heads.push_back(graph.matmul(graph.causal_softmax_rows(scores), graph.slice_cols(v, b, e)));
        }
        const NodeId attn = heads.size() == 1 ? heads.front() : graph.concat_cols(std::move(heads));
        x = graph.add(x, graph.matmul(attn, wo));

        const NodeId h2 = graph.mul_row(graph.rms_norm_rows(x, kNormEps), mlp_norm);
        const NodeId hidden = graph.relu(graph.add_row(graph.matmul(h2, w1), b1));
        x = graph.add(x, graph.add_row(graph.matmul(hidden, w2), b2));
    }
    const NodeId final_norm = param();
    const NodeId head_w = param();
    const NodeId head_b = param();

    const NodeId xf = graph.mul_row(graph.rms_norm_rows(x, kNormEps), final_norm);
    const NodeId rows = graph.slice_rows(xf, context - 1, seq_len);
    const NodeId logits = graph.add_row(graph.matmul(rows, head_w), head_b);
    const NodeId log_probs = graph.log_softmax_rows(logits);

    ResponseNodes out{logits, log_probs, logits};
    if (!predict_next) {
        std::vector<std::size_t> targets(response.begin(), response.end());
        out.token_log_probs = graph.pick_per_row(log_probs, std::move(targets));
    }
    return out;
}

Tensor forward_logits(const PolicyModel& model, const env::VideoClip& video, std::span<const TokenId> prompt,
                      std::span<const TokenId> prefix) {
    Graph graph;
    const auto params = register_parameters(graph, model);
    const auto nodes = build_response_graph(graph, model, params, video, prompt, prefix, true);
    return graph.value(nodes.logits);
}

ScoredResponse score_response(const PolicyModel& model, const env::VideoClip& video,
                              std::span<const TokenId> prompt, std::span<const TokenId> response) {
    Graph graph;
    const auto params = register_parameters(graph, model);
    const auto nodes = build_response_graph(graph, model, params, video, prompt, response, false);
    const auto& lp = graph.value(nodes.token_log_probs);
    return {graph.value(nodes.logits), {lp.data().begin(), lp.data().end()}};
}

Rollout sample_rollout(const PolicyModel& model, const env::Task& task, double temperature, bool greedy,
                       std::uint64_t seed, std::uint64_t id) {
    if (!greedy && !(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    const auto& cfg = model.config();
    const auto& vocab = model.vocab();
    const auto V = cfg.vocab_size;
    const auto context = cfg.frames * cfg.slots + task.prompt.size();
    if (context >= cfg.max_seq_len) throw std::length_error("prompt leaves no room for a response");
    const auto max_len = std::min(cfg.max_response_len, cfg.max_seq_len + 1 - context);

    Rollout r;
    r.id = id;
    r.task = task;
    r.sample_seed = seed;
    Rng rng(seed);
    std::vector<double> logit_rows;
    while (r.tokens.size() < max_len) {
        const auto logits = forward_logits(model, task.video, task.prompt, r.tokens);
        const auto row = logits.data().subspan((logits.rows() - 1) * V, V);
        const auto lp = diff::log_softmax(row);
        std::size_t choice = 0;
        if (greedy) {
            for (std::size_t v = 1; v < V; ++v) {
                if (row[v] > row[choice]) choice = v;
            }
        } else {
            std::vector<double> scaled(row.begin(), row.end());
            for (auto& z : scaled) z /= temperature;
            const auto p = diff::softmax(scaled);
            const double u = rng.uniform();
            double acc = 0.0;
            choice = V - 1;
            for (std::size_t v = 0; v < V; ++v) {
                acc += p[v];
                if (u < acc) {
                    choice = v;
                    break;
                }
            }
        }
        r.tokens.push_back(static_cast<TokenId>(choice));
        r.old_log_probs.push_back(lp[choice]);
        logit_rows.insert(logit_rows.end(), row.begin(), row.end());
        if (choice == vocab.eos()) break;
    }
    r.logits = Tensor({r.tokens.size(), V}, std::move(logit_rows));
    r.reward = env::reward(r.tokens, task, vocab);
    return r;
}

std::vector<Rollout> sample_rollouts(const PolicyModel& model, const env::Task& task, const SampleOptions& options,
                                     std::uint64_t seed, std::uint64_t first_id) {
    if (options.group_size < 2) throw std::invalid_argument("group size must be >= 2");
    if (!options.greedy && !(options.temperature > 0.0)) throw std::invalid_argument("temperature must be positive");

    std::vector<Rollout> rollouts(options.group_size);
    std::vector<std::exception_ptr> errors(options.group_size);
    const auto count = static_cast<std::int64_t>(options.group_size);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t gi = 0; gi < count; ++gi) {
        const auto g = static_cast<std::size_t>(gi);
        try {
            rollouts[g] = sample_rollout(model, task, options.temperature, options.greedy, derive_seed(seed, g), first_id + g);
        } catch (...) {
            errors[g] = std::current_exception();
        }
    }
    // exceptions can't cross the omp region
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return rollouts;
}

std::uint64_t forward_pass_count() { return g_forward_passes.load(std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <class T>
void write_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(bytes), std::end(bytes));
    }
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
    unsigned char bytes[sizeof(T)];
    in.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint truncated");
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(bytes), std::end(bytes));
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

void save_checkpoint(const PolicyModel& model, std::ostream& out) {
    json header;
    header["config"] = model.config();
    header["frame_vocab"] = model.vocab().frame_vocab();
    json manifest = json::array();
    for (std::size_t p = 0; p < model.parameters().size(); ++p) {
        manifest.push_back({{"name", model.parameter_names()[p]}, {"shape", model.parameters()[p].shape()}});
    }
    header["parameters"] = manifest;
    const auto text = header.dump();

    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(out, kCheckpointVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : model.parameters()) {
        for (const double v : p.data()) {
            write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        }
    }
    if (!out) throw std::runtime_error("failed writing checkpoint");
}

PolicyModel load_checkpoint(std::istream& in) {
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a checkpoint file");
    }
    const auto version = read_le<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = read_le<std::uint64_t>(in);
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw std::runtime_error("checkpoint header truncated");
    const auto header = json::parse(text);

    PolicyModel model(header.at("config").get<ModelConfig>(), header.at("frame_vocab").get<std::size_t>());
    const auto& manifest = header.at("parameters");
    if (manifest.size() != model.parameters().size()) {
        throw std::runtime_error("checkpoint parameter manifest does not match the model layout");
    }
    for (std::size_t p = 0; p < manifest.size(); ++p) {
        if (manifest[p].at("name").get<std::string>() != model.parameter_names()[p] ||
            manifest[p].at("shape").get<std::vector<std::size_t>>() != model.parameters()[p].shape()) {
            throw std::runtime_error("checkpoint parameter " + std::to_string(p) + " does not match the model layout");
        }
        for (auto& v : model.parameters()[p].storage()) {
            v = std::bit_cast<double>(read_le<std::uint64_t>(in));
        }
    }
    return model;
}

void save_checkpoint(const PolicyModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    save_checkpoint(model, out);
}

PolicyModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return load_checkpoint(in);
}

}  // namespace ktr::policy
