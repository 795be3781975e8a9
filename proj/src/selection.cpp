#include "ktr/selection.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace ktr::select {

using nlohmann::json;

namespace {
constexpr std::array<std::string_view, kWeightingModeCount> kModeNames{"BINARY_TOPK", "SOFTMAX", "SIGMOID", "LINEAR",
                                                                       "EXPONENTIAL"};
}

std::string_view weighting_name(WeightingMode mode) { return kModeNames.at(static_cast<std::size_t>(mode)); }

WeightingMode parse_weighting(std::string_view name) {
    for (std::size_t i = 0; i < kModeNames.size(); ++i) {
        if (kModeNames[i] == name) return static_cast<WeightingMode>(i);
    }
    throw std::invalid_argument("unknown weighting mode '" + std::string(name) + "'");
}

void SelectionConfig::validate() const {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("selection.ratio must lie in (0, 1]");
    if (!entropy && !visual && !temporal) throw std::invalid_argument("selection needs at least one signal");
    if (!(exponential_temperature > 0.0)) throw std::invalid_argument("selection.exponential_temperature must be > 0");
    if (!(sigmoid_slope > 0.0)) throw std::invalid_argument("selection.sigmoid_slope must be > 0");
}

std::string SelectionConfig::signals() const {
    std::string s;
    if (entropy) s += 'E';
    if (visual) s += 'V';
    if (temporal) s += 'T';
    return s;
}

void SelectionConfig::set_signals(std::string_view subset) {
    entropy = visual = temporal = false;
    for (const char c : subset) {
        switch (c) {
            case 'E': entropy = true; break;
            case 'V': visual = true; break;
            case 'T': temporal = true; break;
            default: throw std::invalid_argument("signal subset may only contain E, V, T");
        }
    }
}

std::size_t selection_size(std::size_t length, double ratio) {
    if (length == 0) return 0;
    const double raw = ratio * static_cast<double>(length);
    auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::clamp<std::size_t>(k, 1, length);
}

std::vector<std::size_t> top_fraction(std::span<const double> scores, double ratio) {
    if (scores.empty()) throw std::invalid_argument("top_fraction: empty score array");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("top_fraction: ratio must lie in (0, 1]");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(selection_size(scores.size(), ratio));
    std::sort(order.begin(), order.end());
    return order;
}

std::size_t TokenMask::popcount() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

double TokenMask::density() const {
    return bits.empty() ? 0.0 : static_cast<double>(popcount()) / static_cast<double>(bits.size());
}

TokenMask build_mask(const attr::AttributionProfile& profile, const SelectionConfig& config) {
    config.validate();
    const auto T = profile.length();
    if (T == 0 || profile.visual.size() != T || profile.temporal.size() != T) {
        throw std::invalid_argument("build_mask: attribution arrays must share a positive length");
    }
    TokenMask mask;
    mask.bits.assign(T, 0);
    if (config.visual) mask.visual = top_fraction(profile.visual, config.ratio);
    if (config.temporal) mask.temporal = top_fraction(profile.temporal, config.ratio);
    if (config.entropy) mask.entropy = top_fraction(profile.entropy, config.ratio);
    for (const auto* set : {&mask.visual, &mask.temporal, &mask.entropy}) {
        for (const auto i : *set) mask.bits[i] = 1;
    }
    return mask;
}

TokenMask full_mask(std::size_t length) {
    TokenMask mask;
    mask.bits.assign(length, 1);
    return mask;
}

std::vector<double> combined_scores(const attr::AttributionProfile& profile, const SelectionConfig& config) {
    const auto T = profile.length();
    std::vector<double> combined(T, 0.0);
    bool informative = false;
    auto fold = [&](const std::vector<double>& s) {
        if (s.size() != T) throw std::invalid_argument("combined_scores: length mismatch");
        const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
        if (!(*hi > *lo)) return;
        informative = true;
        for (std::size_t t = 0; t < T; ++t) {
            combined[t] = std::max(combined[t], (s[t] - *lo) / (*hi - *lo));
        }
    };
    if (config.entropy) fold(profile.entropy);
    if (config.visual) fold(profile.visual);
    if (config.temporal) fold(profile.temporal);
    if (!informative) return {};
    return combined;
}

std::vector<double> weights_from_combined(std::span<const double> c, const SelectionConfig& config) {
    const auto T = c.size();
    std::vector<double> w(T, 0.0);
    if (T == 0) return w;
    switch (config.mode) {
        case WeightingMode::BinaryTopK:
            throw std::invalid_argument("weights_from_combined: BINARY_TOPK has no soft mapping");
        case WeightingMode::Softmax: {
            if (T == 1) {
                w[0] = 1.0;
                break;
            }
            const auto p = diff::softmax(c);
            for (std::size_t t = 0; t < T; ++t) w[t] = std::clamp(p[t] * static_cast<double>(T), 0.0, 1.0);
            break;
        }
        case WeightingMode::Sigmoid: {
            double mx = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                w[t] = 1.0 / (1.0 + std::exp(-config.sigmoid_slope * (c[t] - config.sigmoid_center)));
                mx = std::max(mx, w[t]);
            }
            if (mx > 0.0) {
                for (auto& v : w) v /= mx;
            }
            break;
        }
        case WeightingMode::Linear:
            for (std::size_t t = 0; t < T; ++t) w[t] = std::clamp(c[t], 0.0, 1.0);
            break;
        case WeightingMode::Exponential: {
            const double mx = *std::max_element(c.begin(), c.end());
            for (std::size_t t = 0; t < T; ++t) w[t] = std::exp((c[t] - mx) / config.exponential_temperature);
            break;
        }
    }
    return w;
}

TokenWeights build_weights(const attr::AttributionProfile& profile, const SelectionConfig& config) {
    config.validate();
    TokenWeights out;
    if (config.mode == WeightingMode::BinaryTopK) {
        const auto mask = build_mask(profile, config);
        out.weights.assign(mask.bits.begin(), mask.bits.end());
        return out;
    }
    const auto combined = combined_scores(profile, config);
    if (combined.empty()) {
        out.weights.assign(profile.length(), 1.0);
        return out;
    }
    out.weights = weights_from_combined(combined, config);
    return out;
}

std::vector<std::pair<std::uint8_t, std::size_t>> run_length_encode(std::span<const std::uint8_t> bits) {
    std::vector<std::pair<std::uint8_t, std::size_t>> runs;
    for (const auto b : bits) {
        if (!runs.empty() && runs.back().first == b) {
            ++runs.back().second;
        } else {
            runs.emplace_back(b, 1);
        }
    }
    return runs;
}

std::vector<std::uint8_t> run_length_decode(std::span<const std::pair<std::uint8_t, std::size_t>> runs) {
    std::vector<std::uint8_t> bits;
    for (const auto& [b, n] : runs) bits.insert(bits.end(), n, b);
    return bits;
}

std::string mask_to_json(std::uint64_t rollout_id, const TokenMask& mask, std::span<const TokenId> tokens) {
    json j;
    j["rollout-id"] = rollout_id;
    json runs = json::array();
    for (const auto& [b, n] : run_length_encode(mask.bits)) runs.push_back({b, n});
    j["bits"] = runs;
    j["sets"] = {{"visual", mask.visual}, {"temporal", mask.temporal}, {"entropy", mask.entropy}};
    j["tokens"] = std::vector<TokenId>(tokens.begin(), tokens.end());
    return j.dump();
}

MaskRecord mask_from_json(std::string_view line) {
    const auto j = json::parse(line);
    MaskRecord rec;
    rec.rollout_id = j.at("rollout-id").get<std::uint64_t>();
    std::vector<std::pair<std::uint8_t, std::size_t>> runs;
    for (const auto& r : j.at("bits")) runs.emplace_back(r.at(0).get<std::uint8_t>(), r.at(1).get<std::size_t>());
    rec.mask.bits = run_length_decode(runs);
    const auto& sets = j.at("sets");
    rec.mask.visual = sets.at("visual").get<std::vector<std::size_t>>();
    rec.mask.temporal = sets.at("temporal").get<std::vector<std::size_t>>();
    rec.mask.entropy = sets.at("entropy").get<std::vector<std::size_t>>();
    if (j.contains("tokens")) rec.tokens = j.at("tokens").get<std::vector<TokenId>>();
    return rec;
}

}  // namespace ktr::select
