#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ktr/harness.hpp"
#include "ktr/rng.hpp"

namespace ktr::harness {

using nlohmann::json;

namespace {

// Reads one JSON object section, type-checking every field and rejecting
// keys it never asked for.
class Section {
  public:
    Section(const json& root, std::string name) : name_(std::move(name)) {
        if (!root.contains(name_)) return;
        node_ = &root.at(name_);
        if (!node_->is_object()) throw ConfigError(name_, "expected an object");
    }

    void read(const char* key, std::size_t& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number_integer() || v->get<std::int64_t>() < 0) fail(key, "expected a non-negative integer");
            out = v->get<std::size_t>();
        }
    }
    void read(const char* key, std::uint64_t& out, int) {
        if (const auto* v = find(key)) {
            if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
                fail(key, "expected a non-negative integer");
            }
            out = v->get<std::uint64_t>();
        }
    }
    void read(const char* key, double& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number()) fail(key, "expected a number");
            out = v->get<double>();
        }
    }
    template <class Parse, class T>
    void read_enum(const char* key, T& out, Parse parse) {
        if (const auto* v = find(key)) {
            if (!v->is_string()) fail(key, "expected a string");
            try {
                out = parse(v->get<std::string>());
            } catch (const std::exception& e) {
                fail(key, e.what());
            }
        }
    }
    const json* find(const char* key) {
        seen_.insert(key);
        if (node_ == nullptr || !node_->contains(key)) return nullptr;
        return &node_->at(key);
    }
    [[noreturn]] void fail(const char* key, const std::string& msg) const { throw ConfigError(name_ + "." + key, msg); }
    void finish() const {
        if (node_ == nullptr) return;
        for (const auto& [k, _] : node_->items()) {
            if (!seen_.count(k)) throw ConfigError(name_ + "." + k, "unknown field");
        }
    }

  private:
    std::string name_;
    const json* node_ = nullptr;
    std::set<std::string> seen_;
};

void require(bool ok, const char* field, const std::string& msg) {
    if (!ok) throw ConfigError(field, msg);
}

}  // namespace

ExperimentConfig default_config() {
    ExperimentConfig c;
    c.warmup.steps = 600;
    c.warmup.gold_fraction = 0.5;
    return c;
}

void ExperimentConfig::validate() const {
    require(env.frames >= 2, "env.frames", "must be >= 2");
    require(env.slots >= 1, "env.slots", "must be >= 1");
    require(env.frame_vocab >= 4, "env.frame_vocab", "must be >= 4");
    require(env.max_resamples >= 1, "env.max_resamples", "must be >= 1");
    double mix_total = 0.0;
    for (const double w : family_mix) {
        require(std::isfinite(w) && w >= 0.0, "env.family_mix", "weights must be finite and non-negative");
        mix_total += w;
    }
    require(mix_total > 0.0, "env.family_mix", "at least one weight must be positive");

    require(model.embed_dim >= 1, "model.embed_dim", "must be >= 1");
    require(model.heads >= 1, "model.heads", "must be >= 1");
    require(model.embed_dim % model.heads == 0, "model.embed_dim", "must be divisible by model.heads");
    require(model.layers >= 1, "model.layers", "must be >= 1");
    require(model.mlp_hidden >= 1, "model.mlp_hidden", "must be >= 1");
    require(model.max_response_len >= 1, "model.max_response_len", "must be >= 1");
    require(model.init_std > 0.0, "model.init_std", "must be > 0");
    const auto context = env.frames * env.slots + 3;
    require(model.max_seq_len > context, "model.max_seq_len",
            "must exceed the frame + prompt context (" + std::to_string(context) + " tokens)");

    require(rl.group_size >= 2, "rl.group_size", "must be >= 2");
    require(rl.tasks_per_step >= 1, "rl.tasks_per_step", "must be >= 1");
    require(rl.clip_epsilon > 0.0 && rl.clip_epsilon < 1.0, "rl.clip_epsilon", "must lie in (0, 1)");
    require(rl.kl_beta >= 0.0, "rl.beta", "must be >= 0");
    require(rl.learning_rate >= 0.0, "rl.learning_rate", "must be >= 0");
    require(rl.advantage_epsilon > 0.0, "rl.advantage_epsilon", "must be > 0");
    require(rl.temperature > 0.0, "rl.temperature", "must be > 0");

    require(selection.ratio > 0.0 && selection.ratio <= 1.0, "selection.ratio", "must lie in (0, 1]");
    require(selection.entropy || selection.visual || selection.temporal, "selection.signals",
            "at least one of E, V, T must be enabled");
    require(selection.exponential_temperature > 0.0, "selection.exponential_temperature", "must be > 0");
    require(selection.sigmoid_slope > 0.0, "selection.sigmoid_slope", "must be > 0");

    require(warmup.batch >= 1, "warmup.batch", "must be >= 1");
    require(warmup.learning_rate >= 0.0, "warmup.learning_rate", "must be >= 0");
    require(warmup.think_min <= warmup.think_max, "warmup.think_min", "must not exceed warmup.think_max");
    require(warmup.think_max + 4 <= model.max_response_len, "warmup.think_max",
            "template response would exceed model.max_response_len");
    require(warmup.gold_fraction >= 0.0 && warmup.gold_fraction <= 1.0, "warmup.gold_fraction", "must lie in [0, 1]");

    require(run.eval_size >= 1, "run.eval_size", "must be >= 1");
    require(run.dump_interval >= 1, "run.dump_interval", "must be >= 1");
}

policy::ModelConfig ExperimentConfig::resolved_model() const {
    auto m = model;
    m.frames = env.frames;
    m.slots = env.slots;
    m.vocab_size = Vocabulary(env.frame_vocab).size();
    m.init_seed = derive_seed(run.master_seed, "model-init");
    return m;
}

rl::TrainSettings ExperimentConfig::train_settings() const {
    rl::TrainSettings s;
    s.rl = rl;
    s.selection = selection;
    s.attribution = attribution;
    s.method = method;
    return s;
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["env"] = {{"frames", c.env.frames},
                {"slots", c.env.slots},
                {"frame_vocab", c.env.frame_vocab},
                {"max_resamples", c.env.max_resamples},
                {"family_mix", c.family_mix}};
    j["model"] = {{"embed_dim", c.model.embed_dim},
                  {"layers", c.model.layers},
                  {"heads", c.model.heads},
                  {"mlp_hidden", c.model.mlp_hidden},
                  {"max_seq_len", c.model.max_seq_len},
                  {"max_response_len", c.model.max_response_len},
                  {"init_std", c.model.init_std}};
    j["rl"] = {{"method", rl::method_name(c.method)},
               {"group_size", c.rl.group_size},
               {"tasks_per_step", c.rl.tasks_per_step},
               {"clip_epsilon", c.rl.clip_epsilon},
               {"beta", c.rl.kl_beta},
               {"learning_rate", c.rl.learning_rate},
               {"advantage_epsilon", c.rl.advantage_epsilon},
               {"temperature", c.rl.temperature}};
    j["selection"] = {{"ratio", c.selection.ratio},
                      {"signals", c.selection.signals()},
                      {"weighting", select::weighting_name(c.selection.mode)},
                      {"exponential_temperature", c.selection.exponential_temperature},
                      {"sigmoid_slope", c.selection.sigmoid_slope},
                      {"sigmoid_center", c.selection.sigmoid_center}};
    j["attribution"] = {{"metric", attr::metric_name(c.attribution.metric)},
                        {"visual_kind", env::visual_perturbation_name(c.attribution.kinds.visual)},
                        {"temporal_kind", env::temporal_perturbation_name(c.attribution.kinds.temporal)}};
    j["warmup"] = {{"steps", c.warmup.steps},
                   {"batch", c.warmup.batch},
                   {"learning_rate", c.warmup.learning_rate},
                   {"think_min", c.warmup.think_min},
                   {"think_max", c.warmup.think_max},
                   {"gold_fraction", c.warmup.gold_fraction}};
    j["run"] = {{"steps", c.run.steps},
                {"master_seed", c.run.master_seed},
                {"eval_seed", c.run.eval_seed},
                {"eval_size", c.run.eval_size},
                {"eval_interval", c.run.eval_interval},
                {"diagnostics_interval", c.run.diagnostics_interval},
                {"dump_interval", c.run.dump_interval},
                {"checkpoint_interval", c.run.checkpoint_interval}};
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
    static const std::set<std::string> sections{"env", "model", "rl", "selection", "attribution", "warmup", "run"};
    for (const auto& [k, _] : j.items()) {
        if (!sections.count(k)) throw ConfigError(k, "unknown section");
    }
    auto c = default_config();

    Section env(j, "env");
    env.read("frames", c.env.frames);
    env.read("slots", c.env.slots);
    env.read("frame_vocab", c.env.frame_vocab);
    env.read("max_resamples", c.env.max_resamples);
    if (const auto* v = env.find("family_mix")) {
        if (!v->is_array() || v->size() != 3) env.fail("family_mix", "expected an array of three weights");
        for (std::size_t i = 0; i < 3; ++i) {
            if (!v->at(i).is_number()) env.fail("family_mix", "expected numbers");
            c.family_mix[i] = v->at(i).get<double>();
        }
    }
    env.finish();

    Section model(j, "model");
    model.read("embed_dim", c.model.embed_dim);
    model.read("layers", c.model.layers);
    model.read("heads", c.model.heads);
    model.read("mlp_hidden", c.model.mlp_hidden);
    model.read("max_seq_len", c.model.max_seq_len);
    model.read("max_response_len", c.model.max_response_len);
    model.read("init_std", c.model.init_std);
    model.finish();

    Section rl(j, "rl");
    rl.read_enum("method", c.method, [](const std::string& s) { return rl::parse_method(s); });
    rl.read("group_size", c.rl.group_size);
    rl.read("tasks_per_step", c.rl.tasks_per_step);
    rl.read("clip_epsilon", c.rl.clip_epsilon);
    rl.read("beta", c.rl.kl_beta);
    rl.read("learning_rate", c.rl.learning_rate);
    rl.read("advantage_epsilon", c.rl.advantage_epsilon);
    rl.read("temperature", c.rl.temperature);
    rl.finish();

    Section sel(j, "selection");
    sel.read("ratio", c.selection.ratio);
    if (const auto* v = sel.find("signals")) {
        if (!v->is_string()) sel.fail("signals", "expected a string over E, V, T");
        try {
            c.selection.set_signals(v->get<std::string>());
        } catch (const std::exception& e) {
            sel.fail("signals", e.what());
        }
    }
    sel.read_enum("weighting", c.selection.mode, [](const std::string& s) { return select::parse_weighting(s); });
    sel.read("exponential_temperature", c.selection.exponential_temperature);
    sel.read("sigmoid_slope", c.selection.sigmoid_slope);
    sel.read("sigmoid_center", c.selection.sigmoid_center);
    sel.finish();

    Section at(j, "attribution");
    at.read_enum("metric", c.attribution.metric, [](const std::string& s) { return attr::parse_metric(s); });
    at.read_enum("visual_kind", c.attribution.kinds.visual,
                 [](const std::string& s) { return env::parse_visual_perturbation(s); });
    at.read_enum("temporal_kind", c.attribution.kinds.temporal,
                 [](const std::string& s) { return env::parse_temporal_perturbation(s); });
    at.finish();

    Section wu(j, "warmup");
    wu.read("steps", c.warmup.steps);
    wu.read("batch", c.warmup.batch);
    wu.read("learning_rate", c.warmup.learning_rate);
    wu.read("think_min", c.warmup.think_min);
    wu.read("think_max", c.warmup.think_max);
    wu.read("gold_fraction", c.warmup.gold_fraction);
    wu.finish();

    Section run(j, "run");
    run.read("steps", c.run.steps);
    run.read("master_seed", c.run.master_seed, 0);
    run.read("eval_seed", c.run.eval_seed, 0);
    run.read("eval_size", c.run.eval_size);
    run.read("eval_interval", c.run.eval_interval);
    run.read("diagnostics_interval", c.run.diagnostics_interval);
    run.read("dump_interval", c.run.dump_interval);
    run.read("checkpoint_interval", c.run.checkpoint_interval);
    run.finish();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
    }
    return config_from_json(j);
}

void apply_override(json& j, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError(std::string(assignment), "override must look like section.field=value");
    }
    const std::string path(assignment.substr(0, eq));
    const std::string raw(assignment.substr(eq + 1));
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    std::string pointer = "/";
    for (const char ch : path) pointer += ch == '.' ? '/' : ch;
    j[json::json_pointer(pointer)] = value;
}

env::Family task_family(std::uint64_t index, const std::array<double, 3>& mix, std::uint64_t seed) {
    if (mix[0] == mix[1] && mix[1] == mix[2]) return env::family_for_index(index);
    const double total = mix[0] + mix[1] + mix[2];
    double u = Rng(derive_seed(seed, index)).uniform() * total;
    for (std::size_t f = 0; f < 2; ++f) {
        if (u < mix[f]) return static_cast<env::Family>(f);
        u -= mix[f];
    }
    return env::Family::Static;
}

std::vector<env::Task> eval_tasks(const ExperimentConfig& c) {
    std::vector<env::Task> tasks;
    tasks.reserve(c.run.eval_size);
    for (std::size_t i = 0; i < c.run.eval_size; ++i) {
        tasks.push_back(env::generate_task(derive_seed(c.run.eval_seed, i), env::family_for_index(i), c.env));
    }
    return tasks;
}

fs::path resolve_run_dir(const fs::path& dir) {
    if (dir.is_absolute()) return dir;
    if (const char* root = std::getenv(kRunsRootEnv); root != nullptr && *root != '\0') return fs::path(root) / dir;
    return dir;
}

}  // namespace ktr::harness
