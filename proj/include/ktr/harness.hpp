#pragma once

// Experiment configuration, run directories, and the train / ablate /
// report / selftest commands.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ktr/attribution.hpp"
#include "ktr/ktr_rl.hpp"
#include "ktr/policy.hpp"
#include "ktr/selection.hpp"
#include "ktr/synthenv.hpp"

namespace ktr::harness {

namespace fs = std::filesystem;

/// Environment variable naming the root for relative run directories.
inline constexpr const char* kRunsRootEnv = "VIDEOKTR_RUNS";

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitBadConfig = 2;
inline constexpr int kExitNonFinite = 3;

/// A configuration problem tied to one dotted field path.
class ConfigError : public std::runtime_error {
  public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

  private:
    std::string field_;
};

struct RunSettings {
    std::size_t steps = 500;
    std::uint64_t master_seed = 1;
    std::uint64_t eval_seed = 20250101;
    std::size_t eval_size = 150;
    std::size_t eval_interval = 50;
    std::size_t diagnostics_interval = 10;
    std::size_t dump_interval = 1;
    std::size_t checkpoint_interval = 0;  // 0: initial and final only
    friend bool operator==(const RunSettings&, const RunSettings&) = default;
};

struct ExperimentConfig {
    env::EnvConfig env;
    /// Relative weights of the VISUAL, TEMPORAL, STATIC families in the training stream.
    std::array<double, 3> family_mix{1.0, 1.0, 1.0};
    policy::ModelConfig model;
    rl::RLConfig rl;
    rl::Method method = rl::Method::Ktr;
    select::SelectionConfig selection;
    attr::AttributionConfig attribution;
    rl::WarmupConfig warmup;
    RunSettings run;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    rl::TrainSettings train_settings() const;
    /// Model config with the vocabulary size and init seed filled in.
    policy::ModelConfig resolved_model() const;
    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Defaults tuned for this environment (see README).
ExperimentConfig default_config();

nlohmann::json config_to_json(const ExperimentConfig& c);
/// Strict parse: unknown keys and mistyped values raise ConfigError.
/// Missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const fs::path& path);

/// Applies "section.field=value"; value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& j, std::string_view assignment);

/// Family of the index-th training task under the configured mix.
env::Family task_family(std::uint64_t index, const std::array<double, 3>& mix, std::uint64_t seed);

/// Deterministic evaluation set (shared by every run with the same eval seed).
std::vector<env::Task> eval_tasks(const ExperimentConfig& c);

/// Resolves a run directory against $VIDEOKTR_RUNS when relative.
fs::path resolve_run_dir(const fs::path& dir);

struct TrainOptions {
    bool quiet = false;
};

int cmd_train(const ExperimentConfig& config, const fs::path& out_dir, std::ostream& log,
              const TrainOptions& options = {});

/// Child variants of one ablation axis: (name, dotted overrides).
struct Variant {
    std::string name;
    std::vector<std::string> overrides;
};
std::vector<Variant> ablation_variants(std::string_view axis);
inline constexpr std::array<std::string_view, 5> kAblationAxes{"signals", "ratio", "weighting", "distance",
                                                               "perturbation"};

int cmd_ablate(std::string_view axis, const nlohmann::json& base_config, const fs::path& out_dir, std::ostream& log);

int cmd_report(const fs::path& run_dir, std::ostream& log);

struct SelftestOptions {
    /// Adds a fixed error to one analytic gradient entry (exercises failure reporting).
    double gradient_fault = 0.0;
};
int cmd_selftest(std::ostream& log, const SelftestOptions& options = {});

}  // namespace ktr::harness
