#pragma once

// Final-layer gradient decomposition, loss variance, updated-token positions,
// signal overlap, and token-category breakdowns.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ktr/ktr_rl.hpp"
#include "ktr/selection.hpp"
#include "ktr/vocab.hpp"

namespace ktr::diag {

/// Norms below this make a cosine undefined.
inline constexpr double kNormFloor = 1e-12;

/// cos(a, b), or nullopt when either norm is below kNormFloor.
std::optional<double> cosine(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

struct GradDecomposition {
    std::size_t step = 0;
    double full_norm = 0.0;
    double ktr_norm = 0.0;
    double rest_norm = 0.0;
    std::optional<double> cos_ktr_full;
    std::optional<double> cos_rest_full;
    /// Mean per-token ||g_t|| over selected / masked tokens (nullopt if the set is empty).
    std::optional<double> selected_token_norm;
    std::optional<double> masked_token_norm;
    std::size_t selected_tokens = 0;
    std::size_t masked_tokens = 0;
    /// max_j |g_KTR + g_rest - g_full|_j
    double additivity_error = 0.0;
};

nlohmann::json to_json(const GradDecomposition& d);
GradDecomposition grad_decomposition_from_json(const nlohmann::json& j);

/// Splits the beta = 0 surrogate gradient at the output head into selected
/// (mask bit 1) and masked-out token contributions. g_full comes from one
/// backward of the summed token losses; g_KTR and g_rest are sums of
/// per-token backwards on the same tape.
GradDecomposition decompose_gradients(const policy::PolicyModel& model, std::span<const rl::GroupBatch> groups,
                                      const rl::RLConfig& config);

/// Population variance of the trailing min(W, n) losses.
double loss_variance(std::span<const double> losses, std::size_t window = 20);
/// Variance of every full trailing window (one window over everything when n < W).
std::vector<double> rolling_loss_variance(std::span<const double> losses, std::size_t window = 20);
/// Mean of rolling_loss_variance; 0 for fewer than two losses.
double mean_loss_variance(std::span<const double> losses, std::size_t window = 20);

struct PositionHistogram {
    std::vector<std::uint64_t> selected;
    std::vector<std::uint64_t> total;

    std::size_t bins() const { return total.size(); }
    /// selected / total; 0 for bins that saw no tokens.
    double probability(std::size_t bin) const;
};

/// Relative position t/T binned into B equal-width bins: bin = floor(t * B / T).
PositionHistogram position_histogram(std::span<const select::TokenMask> masks, std::size_t bins);

struct OverlapStats {
    std::uint64_t exactly_one = 0;
    std::uint64_t exactly_two = 0;
    std::uint64_t all_three = 0;
    std::uint64_t union_size = 0;
    std::uint64_t tokens = 0;

    double density() const { return tokens ? static_cast<double>(union_size) / static_cast<double>(tokens) : 0.0; }
    OverlapStats& operator+=(const OverlapStats& o);
};

/// Counts over token positions [0, length) of membership in the three sets.
OverlapStats overlap_stats(std::span<const std::size_t> visual, std::span<const std::size_t> temporal,
                           std::span<const std::size_t> entropy, std::size_t length);
OverlapStats overlap_stats(const select::TokenMask& mask);

enum class Signal : std::uint8_t { Visual, Temporal, Entropy, Union };
inline constexpr std::size_t kSignalCount = 4;
std::string_view signal_name(Signal s);

struct CategoryStats {
    /// selected[signal][category]
    std::array<std::array<std::uint64_t, kTokenCategoryCount>, kSignalCount> selected{};
    std::array<std::uint64_t, kTokenCategoryCount> base{};

    std::uint64_t selected_total(Signal s) const;
    std::uint64_t base_total() const;
    /// Fraction of the signal's selected tokens in this category.
    double rate(Signal s, TokenCategory c) const;
    double base_rate(TokenCategory c) const;
};

/// Per-signal selection counts by vocabulary category; token ids outside the
/// vocabulary count as Other.
CategoryStats token_category_stats(std::span<const select::TokenMask> masks,
                                   std::span<const std::vector<TokenId>> tokens, const Vocabulary& vocab);

}  // namespace ktr::diag
