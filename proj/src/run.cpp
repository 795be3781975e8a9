#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "ktr/diagnostics.hpp"
#include "ktr/harness.hpp"
#include "ktr/rng.hpp"

#ifndef KTR_BUILD_ID
#define KTR_BUILD_ID "unknown"
#endif

namespace ktr::harness {

using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Line-oriented, single-owner JSONL writer flushed after every record.
class JsonlWriter {
  public:
    explicit JsonlWriter(const fs::path& path) : out_(path, std::ios::binary | std::ios::app) {
        if (!out_) throw std::runtime_error("cannot open " + path.string());
    }
    void write(const std::string& line) {
        out_ << line << '\n';
        out_.flush();
    }
    void write(const json& j) { write(j.dump()); }

  private:
    std::ofstream out_;
};

json eval_record(std::size_t step, const rl::EvalReport& e) {
    return {{"step", step},
            {"mean-reward", e.mean_reward},
            {"visual", e.visual_accuracy},
            {"temporal", e.temporal_accuracy},
            {"static", e.static_accuracy},
            {"tasks", e.tasks}};
}

bool directory_usable(const fs::path& dir) {
    if (!fs::exists(dir)) return true;
    return fs::is_directory(dir) && fs::is_empty(dir);
}

}  // namespace

int cmd_train(const ExperimentConfig& config, const fs::path& out_dir, std::ostream& log, const TrainOptions& options) {
    try {
        config.validate();
    } catch (const ConfigError& e) {
        log << "invalid config: " << e.what() << '\n';
        return kExitBadConfig;
    }
    if (!directory_usable(out_dir)) {
        log << "output directory " << out_dir << " exists and is not empty\n";
        return kExitBadConfig;
    }
    fs::create_directories(out_dir / "checkpoints");

    const auto cfg_json = config_to_json(config);
    const auto cfg_text = cfg_json.dump();
    write_json_file(out_dir / "manifest.json",
                    {{"format", "videoktr-run"},
                     {"format-version", 1},
                     {"build", KTR_BUILD_ID},
                     {"config-hash", hex64(fnv1a64(cfg_text))},
                     {"method", rl::method_name(config.method)}});
    write_json_file(out_dir / "config.json", cfg_json);

    const auto seed = config.run.master_seed;
    policy::PolicyModel model(config.resolved_model(), config.env.frame_vocab);
    if (config.warmup.steps > 0) {
        const double ce = rl::supervised_warmup(model, config.env, config.warmup, derive_seed(seed, "warmup"));
        if (!options.quiet) log << "warm-up: " << config.warmup.steps << " steps, last loss " << ce << '\n';
    }
    policy::save_checkpoint(model, (out_dir / "checkpoints" / "initial.ckpt").string());
    if (config.run.steps == 0) return kExitOk;

    const policy::PolicyModel reference = model;
    const auto evals = eval_tasks(config);
    {
        std::ofstream tasks_out(out_dir / "eval_tasks.jsonl", std::ios::binary);
        env::write_tasks_jsonl(tasks_out, evals);
    }

    JsonlWriter metrics(out_dir / "metrics.jsonl");
    JsonlWriter eval_log(out_dir / "eval.jsonl");
    JsonlWriter attribution(out_dir / "attribution.jsonl");
    JsonlWriter masks(out_dir / "masks.jsonl");
    JsonlWriter grads(out_dir / "grad_stats.jsonl");

    eval_log.write(eval_record(0, rl::evaluate(model, evals)));

    const auto settings = config.train_settings();
    const auto task_seed = derive_seed(seed, "train-tasks");
    const auto family_seed = derive_seed(seed, "family-mix");
    const auto step_seed = derive_seed(seed, "step");
    const auto tps = config.rl.tasks_per_step;
    int status = kExitOk;

    for (std::size_t step = 0; step < config.run.steps; ++step) {
        std::vector<env::Task> tasks;
        tasks.reserve(tps);
        for (std::size_t j = 0; j < tps; ++j) {
            const std::uint64_t index = static_cast<std::uint64_t>(step) * tps + j;
            tasks.push_back(env::generate_task(derive_seed(task_seed, index),
                                               task_family(index, config.family_mix, family_seed), config.env));
        }
        const bool diag_step = config.run.diagnostics_interval > 0 && step % config.run.diagnostics_interval == 0;
        std::optional<policy::PolicyModel> snapshot;
        if (diag_step) snapshot = model;

        const auto s_seed = derive_seed(step_seed, step);
        std::vector<rl::GroupBatch> groups;
        const auto report = rl::train_step(model, reference, tasks, settings, s_seed, step, &groups);

        json m{{"step", step},
               {"mean-reward", report.mean_reward},
               {"loss", report.aborted ? json(nullptr) : json(report.loss)},
               {"kl", report.aborted ? json(nullptr) : json(report.kl)},
               {"mask-density", report.mask_density},
               {"grad-norm", report.aborted ? json(nullptr) : json(report.grad_norm)},
               {"seed", s_seed}};
        if (report.aborted) m["aborted"] = report.abort_reason;
        metrics.write(m);
        if (report.aborted) {
            log << "step " << step << ": non-finite loss, aborting (" << report.abort_reason << ")\n";
            status = kExitNonFinite;
            break;
        }

        if (step % config.run.dump_interval == 0) {
            for (const auto& g : groups) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (!g.profiles.empty()) attribution.write(attr::profile_to_json(g.profiles[i]));
                    masks.write(select::mask_to_json(g.rollouts[i].id, g.masks[i], g.rollouts[i].tokens));
                }
            }
        }
        if (diag_step) {
            auto d = diag::decompose_gradients(*snapshot, groups, config.rl);
            d.step = step;
            grads.write(diag::to_json(d));
        }
        const bool last = step + 1 == config.run.steps;
        if ((config.run.eval_interval > 0 && (step + 1) % config.run.eval_interval == 0) || last) {
            const auto e = rl::evaluate(model, evals);
            eval_log.write(eval_record(step + 1, e));
            if (!options.quiet) {
                log << "step " << (step + 1) << "  train reward " << report.mean_reward << "  eval " << e.mean_reward
                    << "  density " << report.mask_density << '\n';
            }
        }
        if (config.run.checkpoint_interval > 0 && (step + 1) % config.run.checkpoint_interval == 0 && !last) {
            policy::save_checkpoint(model, (out_dir / "checkpoints" / ("step-" + std::to_string(step + 1) + ".ckpt")).string());
        }
    }

    policy::save_checkpoint(model, (out_dir / "checkpoints" / "final.ckpt").string());
    std::ostringstream report_log;
    cmd_report(out_dir, report_log);
    if (!options.quiet) log << report_log.str();
    return status;
}

// ---------------------------------------------------------------------------

std::vector<Variant> ablation_variants(std::string_view axis) {
    std::vector<Variant> out;
    if (axis == "signals") {
        for (const char* s : {"E", "V", "T", "EV", "ET", "VT", "EVT"}) {
            out.push_back({s, {"rl.method=\"ktr\"", std::string("selection.signals=\"") + s + "\""}});
        }
        out.push_back({"vanilla", {"rl.method=\"grpo\""}});
    } else if (axis == "ratio") {
        for (const char* r : {"0.1", "0.2", "0.3", "0.4", "0.5"}) {
            out.push_back({std::string("r") + r, {std::string("selection.ratio=") + r}});
        }
    } else if (axis == "weighting") {
        for (std::size_t i = 0; i < select::kWeightingModeCount; ++i) {
            const std::string name(select::weighting_name(static_cast<select::WeightingMode>(i)));
            out.push_back({name, {"selection.weighting=\"" + name + "\""}});
        }
    } else if (axis == "distance") {
        for (std::size_t i = 0; i < attr::kDistanceMetricCount; ++i) {
            const std::string name(attr::metric_name(static_cast<attr::DistanceMetric>(i)));
            out.push_back({name, {"attribution.metric=\"" + name + "\""}});
        }
    } else if (axis == "perturbation") {
        // Visual kinds under the default temporal kind, then temporal kinds
        // under the default visual kind.
        for (const auto v : {env::VisualPerturbation::MaskAll, env::VisualPerturbation::MaskHalf,
                             env::VisualPerturbation::ReplaceUnrelated}) {
            const std::string name(env::visual_perturbation_name(v));
            out.push_back({"visual-" + name, {"attribution.visual_kind=\"" + name + "\"",
                                              "attribution.temporal_kind=\"SHUFFLE_RANDOM\""}});
        }
        for (const auto t : {env::TemporalPerturbation::ShuffleRandom, env::TemporalPerturbation::Reverse,
                             env::TemporalPerturbation::SegmentalShuffle}) {
            const std::string name(env::temporal_perturbation_name(t));
            out.push_back({"temporal-" + name, {"attribution.visual_kind=\"MASK_ALL\"",
                                                "attribution.temporal_kind=\"" + name + "\""}});
        }
    } else {
        throw std::invalid_argument("unknown ablation axis '" + std::string(axis) +
                                    "' (expected signals, ratio, weighting, distance, perturbation)");
    }
    return out;
}

int cmd_ablate(std::string_view axis, const json& base_config, const fs::path& out_dir, std::ostream& log) {
    std::vector<Variant> variants;
    try {
        variants = ablation_variants(axis);
    } catch (const std::invalid_argument& e) {
        log << e.what() << '\n';
        return kExitBadConfig;
    }
    try {
        (void)config_from_json(base_config).validate();
    } catch (const ConfigError& e) {
        log << "invalid base config: " << e.what() << '\n';
        return kExitBadConfig;
    }
    if (!directory_usable(out_dir)) {
        log << "output directory " << out_dir << " exists and is not empty\n";
        return kExitBadConfig;
    }
    fs::create_directories(out_dir);

    std::ofstream csv(out_dir / "comparison.csv", std::ios::binary);
    csv << "variant,exit_code,method,signals,ratio,weighting,metric,visual_kind,temporal_kind,"
           "initial_eval_reward,final_eval_reward,mean_train_reward,mean_loss,mean_loss_variance,mean_mask_density,"
           "mean_cos_ktr_full,mean_cos_rest_full\n";
    int worst = kExitOk;
    for (const auto& v : variants) {
        json child = base_config;
        ExperimentConfig cfg;
        try {
            for (const auto& o : v.overrides) apply_override(child, o);
            cfg = config_from_json(child);
        } catch (const ConfigError& e) {
            log << v.name << ": invalid config: " << e.what() << '\n';
            return kExitBadConfig;
        }
        log << "[" << axis << "] " << v.name << '\n';
        TrainOptions opts;
        opts.quiet = true;
        const auto dir = out_dir / v.name;
        const int code = cmd_train(cfg, dir, log, opts);
        worst = std::max(worst, code);

        json summary = json::object();
        if (std::ifstream in(dir / "report" / "summary.json"); in) summary = json::parse(in);
        auto num = [&](const char* key) -> std::string {
            if (!summary.contains(key) || summary[key].is_null()) return "";
            return summary[key].dump();
        };
        csv << v.name << ',' << code << ',' << rl::method_name(cfg.method) << ',' << cfg.selection.signals() << ','
            << json(cfg.selection.ratio).dump() << ',' << select::weighting_name(cfg.selection.mode) << ','
            << attr::metric_name(cfg.attribution.metric) << ','
            << env::visual_perturbation_name(cfg.attribution.kinds.visual) << ','
            << env::temporal_perturbation_name(cfg.attribution.kinds.temporal) << ',' << num("initial-eval-reward")
            << ',' << num("final-eval-reward") << ',' << num("mean-reward") << ',' << num("mean-loss") << ','
            << num("mean-loss-variance") << ',' << num("mask-density") << ',' << num("mean-cos-ktr-full") << ','
            << num("mean-cos-rest-full") << '\n';
        csv.flush();
    }
    return worst;
}

}  // namespace ktr::harness
