// videoktr: train / ablate / report / selftest.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ktr/harness.hpp"
#include "ktr/rng.hpp"

namespace h = ktr::harness;
using nlohmann::json;

namespace {

// Base config document: defaults, then the optional file, then --set overrides.
json load_document(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = h::config_to_json(h::default_config());
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw h::ConfigError("--config", "cannot open " + path);
        json file;
        try {
            file = json::parse(in);
        } catch (const json::parse_error& e) {
            throw h::ConfigError("--config", std::string("invalid JSON: ") + e.what());
        }
        if (!file.is_object()) throw h::ConfigError("<root>", "expected a JSON object");
        doc.merge_patch(file);
    }
    for (const auto& o : overrides) h::apply_override(doc, o);
    return doc;
}

std::string default_run_name(const json& doc) {
    return "run-" + std::to_string(ktr::fnv1a64(doc.dump()) % 1000000007ULL);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Token-level modality-aware RL laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;

    auto* train = app.add_subcommand("train", "Run one training experiment");
    train->add_option("-c,--config", config_path, "Experiment config (JSON)");
    train->add_option("-o,--out", out_dir, "Run directory (relative paths resolve under $VIDEOKTR_RUNS)");
    train->add_option("-s,--set", overrides, "Override a field, e.g. rl.beta=0.0");
    bool dump_config = false;
    train->add_flag("--print-config", dump_config, "Print the resolved config and exit");

    std::string axis;
    auto* ablate = app.add_subcommand("ablate", "Sweep one ablation axis");
    ablate->add_option("axis", axis, "signals | ratio | weighting | distance | perturbation")->required();
    ablate->add_option("-c,--config", config_path, "Base config (JSON)");
    ablate->add_option("-o,--out", out_dir, "Output directory");
    ablate->add_option("-s,--set", overrides, "Override a base-config field");

    std::string run_dir;
    auto* report = app.add_subcommand("report", "Regenerate the report bundle of a run directory");
    report->add_option("run_dir", run_dir, "Run directory")->required();

    double fault = 0.0;
    auto* selftest = app.add_subcommand("selftest", "Run the analytic oracles");
    selftest->add_option("--inject-gradient-fault", fault, "Corrupt one analytic gradient entry")->group("");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train || *ablate) {
            json doc;
            try {
                doc = load_document(config_path, overrides);
                if (*train) {
                    const auto cfg = h::config_from_json(doc);
                    if (dump_config) {
                        std::cout << h::config_to_json(cfg).dump(2) << '\n';
                        return h::kExitOk;
                    }
                }
            } catch (const h::ConfigError& e) {
                std::cerr << "invalid config: " << e.what() << '\n';
                return h::kExitBadConfig;
            }
            if (*train) {
                const auto dir = h::resolve_run_dir(out_dir.empty() ? default_run_name(doc) : out_dir);
                std::cerr << "run directory: " << dir.string() << '\n';
                return h::cmd_train(h::config_from_json(doc), dir, std::cerr);
            }
            const auto dir = h::resolve_run_dir(out_dir.empty() ? "ablate-" + axis : out_dir);
            std::cerr << "ablation directory: " << dir.string() << '\n';
            return h::cmd_ablate(axis, doc, dir, std::cerr);
        }
        if (*report) return h::cmd_report(h::resolve_run_dir(run_dir), std::cerr);
        if (*selftest) return h::cmd_selftest(std::cout, {fault});
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return h::kExitFailure;
    }
    return h::kExitFailure;
}
