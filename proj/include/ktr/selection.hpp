#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ktr/attribution.hpp"

namespace ktr::select {

enum class WeightingMode : std::uint8_t { BinaryTopK, Softmax, Sigmoid, Linear, Exponential };
inline constexpr std::size_t kWeightingModeCount = 5;

std::string_view weighting_name(WeightingMode mode);
WeightingMode parse_weighting(std::string_view name);

struct SelectionConfig {
    double ratio = 0.20;
    bool entropy = true;
    bool visual = true;
    bool temporal = true;
    WeightingMode mode = WeightingMode::BinaryTopK;
    double exponential_temperature = 0.25;
    double sigmoid_slope = 10.0;
    double sigmoid_center = 0.5;

    void validate() const;
    /// Enabled signals as a subset string over "EVT" (e.g. "EV").
    std::string signals() const;
    void set_signals(std::string_view subset);
    friend bool operator==(const SelectionConfig&, const SelectionConfig&) = default;
};

/// ceil(r * T) clamped to [1, T], robust to representation error in r * T.
std::size_t selection_size(std::size_t length, double ratio);

/// Indices of the ceil(r*T) highest scores, ties broken toward lower index,
/// returned in ascending order.
std::vector<std::size_t> top_fraction(std::span<const double> scores, double ratio);

struct TokenMask {
    std::vector<std::uint8_t> bits;
    std::vector<std::size_t> visual;
    std::vector<std::size_t> temporal;
    std::vector<std::size_t> entropy;

    std::size_t length() const { return bits.size(); }
    std::size_t popcount() const;
    double density() const;
};

struct TokenWeights {
    std::vector<double> weights;
};

TokenMask build_mask(const attr::AttributionProfile& profile, const SelectionConfig& config);
/// All-ones mask (vanilla GRPO).
TokenMask full_mask(std::size_t length);

/// Soft weights from the combined score (BINARY_TOPK returns the mask bits).
TokenWeights build_weights(const attr::AttributionProfile& profile, const SelectionConfig& config);
/// Max over enabled signals of the min-max normalized score. Constant signals
/// contribute 0; returns an empty vector when every enabled signal is constant.
std::vector<double> combined_scores(const attr::AttributionProfile& profile, const SelectionConfig& config);
/// Maps combined scores in [0,1] to weights for a soft mode.
std::vector<double> weights_from_combined(std::span<const double> combined, const SelectionConfig& config);

/// Run-length encoding as [bit, run] pairs.
std::vector<std::pair<std::uint8_t, std::size_t>> run_length_encode(std::span<const std::uint8_t> bits);
std::vector<std::uint8_t> run_length_decode(std::span<const std::pair<std::uint8_t, std::size_t>> runs);

/// One JSONL record: {rollout-id, bits (run-length encoded), sets{visual,temporal,entropy}, tokens}.
std::string mask_to_json(std::uint64_t rollout_id, const TokenMask& mask, std::span<const TokenId> tokens);

struct MaskRecord {
    std::uint64_t rollout_id = 0;
    TokenMask mask;
    std::vector<TokenId> tokens;
};
MaskRecord mask_from_json(std::string_view line);

}  // namespace ktr::select
