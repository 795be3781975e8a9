#pragma once

// Group-relative clipped surrogate with a per-token update mask, reference
// KL penalty, and the single-epoch training step.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ktr/attribution.hpp"
#include "ktr/graph.hpp"
#include "ktr/policy.hpp"
#include "ktr/selection.hpp"
#include "ktr/synthenv.hpp"

namespace ktr::rl {

enum class Method : std::uint8_t { Ktr, Grpo };
std::string_view method_name(Method method);
Method parse_method(std::string_view name);

struct RLConfig {
    std::size_t group_size = 8;
    std::size_t tasks_per_step = 4;
    double clip_epsilon = 0.2;
    double kl_beta = 0.4;
    double learning_rate = 0.02;  // SGD step; 0.05 already spikes the KL on the default env
    double advantage_epsilon = 1e-6;
    double temperature = 1.0;

    void validate() const;
    friend bool operator==(const RLConfig&, const RLConfig&) = default;
};

/// (R_i - mean) / (population std + eps); all zeros when every reward is equal.
std::vector<double> normalize_advantages(std::span<const double> rewards, double eps);

inline constexpr double kRatioExponentLimit = 30.0;

/// exp(new - old) with the exponent clamped to +-30 (each clamp bumps the warning counter).
double likelihood_ratio(double new_log_prob, double old_log_prob);
std::uint64_t ratio_clamp_warnings();

/// min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)
double surrogate_term(double ratio, double advantage, double epsilon);

/// Per-token KL estimator exp(d) - d - 1 with d = ref - new.
double kl_estimate(double new_log_prob, double ref_log_prob);

struct GroupBatch {
    std::vector<policy::Rollout> rollouts;
    std::vector<double> advantages;
    std::vector<std::vector<double>> weights;         // m_{i,t} (binary) or soft w_{i,t}
    std::vector<std::vector<double>> ref_log_probs;   // empty when beta == 0
    std::vector<attr::AttributionProfile> profiles;   // empty for vanilla GRPO
    std::vector<select::TokenMask> masks;

    std::size_t size() const { return rollouts.size(); }
};

struct ObjectiveNodes {
    diff::NodeId loss;       // -(surrogate - beta * KL)
    diff::NodeId surrogate;  // masked objective value
    diff::NodeId kl;         // averaged KL (unscaled by beta)
    /// Per-token surrogate contributions -(1/(G|o_i|)) * min(...), unmasked, for diagnostics.
    std::vector<std::vector<diff::NodeId>> token_losses;
};

/// Builds the negated masked objective on `graph` for one group.
ObjectiveNodes ktr_objective(diff::Graph& graph, const policy::PolicyModel& model,
                             const policy::ParamNodes& params, const GroupBatch& batch, const RLConfig& config,
                             bool with_token_losses = false);

/// Unmasked group objective from plain arrays of current log-probs (reference route).
double grpo_objective(const GroupBatch& batch, std::span<const std::vector<double>> new_log_probs,
                      double clip_epsilon);
/// Masked group objective from plain arrays (beta = 0).
double masked_objective(const GroupBatch& batch, std::span<const std::vector<double>> new_log_probs,
                        double clip_epsilon);

struct StepReport {
    std::size_t step = 0;
    double loss = 0.0;
    double surrogate = 0.0;
    double kl = 0.0;
    double mean_reward = 0.0;
    double mask_density = 0.0;
    double grad_norm = 0.0;
    double wall_seconds = 0.0;
    bool aborted = false;
    std::string abort_reason;
};

struct TrainSettings {
    RLConfig rl;
    select::SelectionConfig selection;
    attr::AttributionConfig attribution;
    Method method = Method::Ktr;
};

/// Builds the group for one task: samples under the current (old) policy,
/// attributes, selects, normalizes advantages, and scores the reference.
GroupBatch prepare_group(const policy::PolicyModel& model, const policy::PolicyModel& reference,
                         const env::Task& task, const TrainSettings& settings, std::uint64_t seed,
                         std::uint64_t first_rollout_id);

/// Mean gradient of the loss over groups, and the mean loss / surrogate / KL.
struct BatchGradient {
    diff::GradientVector gradient;
    double loss = 0.0;
    double surrogate = 0.0;
    double kl = 0.0;
};
BatchGradient batch_gradient(const policy::PolicyModel& model, std::span<const GroupBatch> groups,
                             const RLConfig& config);

/// One optimization step over `tasks`. On a non-finite loss the model is
/// left unchanged and the report is marked aborted.
StepReport train_step(policy::PolicyModel& model, const policy::PolicyModel& reference,
                      std::span<const env::Task> tasks, const TrainSettings& settings, std::uint64_t seed,
                      std::size_t step, std::vector<GroupBatch>* groups_out = nullptr);

// ---------------------------------------------------------------------------
// Supervised format warm-up (the starting checkpoint for RL).

struct WarmupConfig {
    std::size_t steps = 0;
    std::size_t batch = 16;
    double learning_rate = 3e-3;  // Adam step size
    std::size_t think_min = 1;
    std::size_t think_max = 1;
    /// Fraction of warm-up targets that carry the gold answer; the rest carry
    /// a uniformly random answer token of the right type.
    double gold_fraction = 0.0;

    void validate() const;
    friend bool operator==(const WarmupConfig&, const WarmupConfig&) = default;
};

std::vector<TokenId> template_response(const Vocabulary& vocab, TokenId answer, std::size_t think_tokens,
                                       std::uint64_t seed);

/// Teacher-forced cross-entropy on template responses, optimized with Adam
/// (RL itself uses plain SGD). Returns the mean token loss of the last step.
double supervised_warmup(policy::PolicyModel& model, const env::EnvConfig& env, const WarmupConfig& config,
                         std::uint64_t seed);

// ---------------------------------------------------------------------------

struct EvalReport {
    double mean_reward = 0.0;
    double visual_accuracy = 0.0;
    double temporal_accuracy = 0.0;
    double static_accuracy = 0.0;
    std::size_t tasks = 0;
};

/// Greedy decoding accuracy over a fixed task set.
EvalReport evaluate(const policy::PolicyModel& model, std::span<const env::Task> tasks);

}  // namespace ktr::rl
