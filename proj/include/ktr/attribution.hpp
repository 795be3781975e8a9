#pragma once

// Per-token attribution: visual and temporal counterfactual shifts, plus
// predictive entropy.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ktr/policy.hpp"
#include "ktr/synthenv.hpp"

namespace ktr::attr {

enum class DistanceMetric : std::uint8_t { LogprobDiff, L1, L2, KL, JS, Cosine, Hellinger };
inline constexpr std::size_t kDistanceMetricCount = 7;

std::string_view metric_name(DistanceMetric metric);
DistanceMetric parse_metric(std::string_view name);

inline constexpr std::size_t kNoTarget = std::numeric_limits<std::size_t>::max();

/// Distance between two probability vectors. LOGPROB_DIFF needs `target`.
/// KL floors q at 1e-12; JS uses the mixture; COSINE is 1 - cos; HELLINGER is
/// sqrt(1 - sum sqrt(p q)) clamped at 0.
double probability_distance(std::span<const double> p, std::span<const double> q, DistanceMetric metric,
                            std::size_t target = kNoTarget);

/// Same, starting from logits (softmax applied first).
double distribution_distance(std::span<const double> p_logits, std::span<const double> q_logits,
                             DistanceMetric metric, std::size_t target = kNoTarget);

/// Shannon entropy (nats) of softmax(logits), clamped to [0, ln V].
double entropy(std::span<const double> logits);

/// Row-wise metric between reference and perturbed logits, targeting tokens[i].
std::vector<double> token_scores(const diff::Tensor& reference_logits, const diff::Tensor& perturbed_logits,
                                 std::span<const TokenId> tokens, DistanceMetric metric);

/// Scores a rollout against an arbitrary perturbed clip with one teacher-forced pass.
std::vector<double> scores_against(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                   const env::VideoClip& perturbed, DistanceMetric metric);

std::vector<double> visual_scores(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                  env::VisualPerturbation kind, DistanceMetric metric, std::uint64_t seed);
std::vector<double> temporal_scores(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                    env::TemporalPerturbation kind, DistanceMetric metric, std::uint64_t seed);
std::vector<double> entropy_scores(const policy::Rollout& rollout);

struct AttributionConfig {
    DistanceMetric metric = DistanceMetric::LogprobDiff;
    env::PerturbationKind kinds;
    friend bool operator==(const AttributionConfig&, const AttributionConfig&) = default;
};

struct AttributionProfile {
    std::uint64_t rollout_id = 0;
    std::vector<double> visual;
    std::vector<double> temporal;
    std::vector<double> entropy;
    DistanceMetric metric = DistanceMetric::LogprobDiff;
    env::PerturbationKind kinds;

    std::size_t length() const { return entropy.size(); }
};

/// All three signals for one rollout: two extra teacher-forced passes.
AttributionProfile compute_profile(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                   const AttributionConfig& config, std::uint64_t seed);

/// One JSONL record: {rollout-id, visual, temporal, entropy, metric, perturbation-kinds}.
std::string profile_to_json(const AttributionProfile& profile);
AttributionProfile profile_from_json(std::string_view line);

}  // namespace ktr::attr
