#include "ktr/attribution.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "ktr/rng.hpp"

namespace ktr::attr {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kDistanceMetricCount> kMetricNames{
    "LOGPROB_DIFF", "L1", "L2", "KL", "JS", "COSINE", "HELLINGER"};

constexpr double kProbabilityFloor = 1e-12;

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            acc += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kProbabilityFloor)));
        }
    }
    return std::max(acc, 0.0);
}

}  // namespace

std::string_view metric_name(DistanceMetric metric) { return kMetricNames.at(static_cast<std::size_t>(metric)); }

DistanceMetric parse_metric(std::string_view name) {
    for (std::size_t i = 0; i < kMetricNames.size(); ++i) {
        if (kMetricNames[i] == name) return static_cast<DistanceMetric>(i);
    }
    throw std::invalid_argument("unknown distance metric '" + std::string(name) + "'");
}

double probability_distance(std::span<const double> p, std::span<const double> q, DistanceMetric metric,
                            std::size_t target) {
    if (p.size() != q.size() || p.empty()) {
        throw std::invalid_argument("distance: distributions must have equal, non-zero length");
    }
    switch (metric) {
        case DistanceMetric::LogprobDiff: {
            if (target >= p.size()) throw std::invalid_argument("LOGPROB_DIFF needs a target index");
            return std::abs(std::log(std::max(p[target], kProbabilityFloor)) -
                            std::log(std::max(q[target], kProbabilityFloor)));
        }
        case DistanceMetric::L1: {
            double acc = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
            return acc;
        }
        case DistanceMetric::L2: {
            double acc = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - q[i]) * (p[i] - q[i]);
            return std::sqrt(acc);
        }
        case DistanceMetric::KL:
            return kl_divergence(p, q);
        case DistanceMetric::JS: {
            std::vector<double> m(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
            return std::max(0.0, 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m));
        }
        case DistanceMetric::Cosine: {
            // 1 - cos(p, q) written as half the squared distance between unit
            // vectors, which is exactly 0 when p == q.
            double pp = 0.0;
            double qq = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                pp += p[i] * p[i];
                qq += q[i] * q[i];
            }
            if (pp == 0.0 || qq == 0.0) return 0.0;
            const double np = std::sqrt(pp);
            const double nq = std::sqrt(qq);
            double acc = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double d = p[i] / np - q[i] / nq;
                acc += d * d;
            }
            return std::clamp(0.5 * acc, 0.0, 2.0);
        }
        case DistanceMetric::Hellinger: {
            // For normalized p, q: 1 - sum sqrt(p q) == 0.5 * sum (sqrt p - sqrt q)^2.
            double acc = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double d = std::sqrt(p[i]) - std::sqrt(q[i]);
                acc += d * d;
            }
            return std::clamp(std::sqrt(0.5 * acc), 0.0, 1.0);
        }
    }
    return 0.0;
}

double distribution_distance(std::span<const double> p_logits, std::span<const double> q_logits,
                             DistanceMetric metric, std::size_t target) {
    if (p_logits.size() != q_logits.size()) {
        throw std::invalid_argument("distance: logit vectors differ in length");
    }
    if (metric == DistanceMetric::LogprobDiff) {
        if (target >= p_logits.size()) throw std::invalid_argument("LOGPROB_DIFF needs a target index");
        const auto lp = diff::log_softmax(p_logits);
        const auto lq = diff::log_softmax(q_logits);
        return std::abs(lp[target] - lq[target]);
    }
    return probability_distance(diff::softmax(p_logits), diff::softmax(q_logits), metric, target);
}

double entropy(std::span<const double> logits) {
    const auto lp = diff::log_softmax(logits);
    double h = 0.0;
    for (const double l : lp) {
        h -= std::exp(l) * l;
    }
    return std::clamp(h, 0.0, std::log(static_cast<double>(logits.size())));
}

std::vector<double> token_scores(const diff::Tensor& reference_logits, const diff::Tensor& perturbed_logits,
                                 std::span<const TokenId> tokens, DistanceMetric metric) {
    if (reference_logits.shape() != perturbed_logits.shape() || reference_logits.rows() != tokens.size()) {
        throw std::invalid_argument("attribution: logit shapes " + reference_logits.shape_string() + " and " +
                                    perturbed_logits.shape_string() + " do not match " +
                                    std::to_string(tokens.size()) + " tokens");
    }
    const auto V = reference_logits.cols();
    std::vector<double> scores(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        scores[i] = distribution_distance(reference_logits.data().subspan(i * V, V),
                                          perturbed_logits.data().subspan(i * V, V), metric, tokens[i]);
    }
    return scores;
}

std::vector<double> scores_against(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                   const env::VideoClip& perturbed, DistanceMetric metric) {
    const auto scored = policy::score_response(model, perturbed, rollout.task.prompt, rollout.tokens);
    return token_scores(rollout.logits, scored.logits, rollout.tokens, metric);
}

std::vector<double> visual_scores(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                  env::VisualPerturbation kind, DistanceMetric metric, std::uint64_t seed) {
    const auto masked = env::perturb_visual(rollout.task.video, kind, seed, model.vocab().frame_vocab());
    return scores_against(model, rollout, masked, metric);
}

std::vector<double> temporal_scores(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                    env::TemporalPerturbation kind, DistanceMetric metric, std::uint64_t seed) {
    const auto shuffled = env::perturb_temporal(rollout.task.video, kind, seed);
    return scores_against(model, rollout, shuffled, metric);
}

std::vector<double> entropy_scores(const policy::Rollout& rollout) {
    const auto V = rollout.logits.cols();
    std::vector<double> out(rollout.length());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = entropy(rollout.logits.data().subspan(i * V, V));
    }
    return out;
}

AttributionProfile compute_profile(const policy::PolicyModel& model, const policy::Rollout& rollout,
                                   const AttributionConfig& config, std::uint64_t seed) {
    AttributionProfile profile;
    profile.rollout_id = rollout.id;
    profile.metric = config.metric;
    profile.kinds = config.kinds;
    profile.visual = visual_scores(model, rollout, config.kinds.visual, config.metric, derive_seed(seed, "visual"));
    profile.temporal =
        temporal_scores(model, rollout, config.kinds.temporal, config.metric, derive_seed(seed, "temporal"));
    profile.entropy = entropy_scores(rollout);
    return profile;
}

std::string profile_to_json(const AttributionProfile& profile) {
    json j;
    j["rollout-id"] = profile.rollout_id;
    j["visual"] = profile.visual;
    j["temporal"] = profile.temporal;
    j["entropy"] = profile.entropy;
    j["metric"] = metric_name(profile.metric);
    j["perturbation-kinds"] = {{"visual", env::visual_perturbation_name(profile.kinds.visual)},
                               {"temporal", env::temporal_perturbation_name(profile.kinds.temporal)}};
    return j.dump();
}

AttributionProfile profile_from_json(std::string_view line) {
    const auto j = json::parse(line);
    AttributionProfile p;
    p.rollout_id = j.at("rollout-id").get<std::uint64_t>();
    p.visual = j.at("visual").get<std::vector<double>>();
    p.temporal = j.at("temporal").get<std::vector<double>>();
    p.entropy = j.at("entropy").get<std::vector<double>>();
    p.metric = parse_metric(j.at("metric").get<std::string>());
    const auto& kinds = j.at("perturbation-kinds");
    p.kinds.visual = env::parse_visual_perturbation(kinds.at("visual").get<std::string>());
    p.kinds.temporal = env::parse_temporal_perturbation(kinds.at("temporal").get<std::string>());
    return p;
}

}  // namespace ktr::attr
