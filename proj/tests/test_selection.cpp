#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "ktr/rng.hpp"
#include "ktr/selection.hpp"

using namespace ktr;
using namespace ktr::select;

namespace {

// Brute force: sort (score desc, index asc), take the first k.
std::vector<std::size_t> sort_oracle(const std::vector<double>& s, double r) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
    const auto k = static_cast<std::size_t>(std::ceil(r * static_cast<double>(s.size()) - 1e-9));
    idx.resize(std::max<std::size_t>(1, k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

attr::AttributionProfile random_profile(Rng& rng, std::size_t T, int levels = 0) {
    attr::AttributionProfile p;
    auto draw = [&] {
        std::vector<double> v(T);
        for (auto& x : v) x = levels ? static_cast<double>(rng.below(levels)) : rng.uniform();
        return v;
    };
    p.visual = draw();
    p.temporal = draw();
    p.entropy = draw();
    return p;
}

}  // namespace

TEST(TopFraction, Examples) {
    EXPECT_EQ(top_fraction(std::vector<double>{0.9, 0.1, 0.5, 0.3, 0.7}, 0.2), std::vector<std::size_t>{0});
    EXPECT_EQ(top_fraction(std::vector<double>(5, 1.0), 0.4), (std::vector<std::size_t>{0, 1}));
    const std::vector<double> s{3, 1, 2};
    EXPECT_EQ(top_fraction(s, 1.0), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(TopFraction, MatchesSortOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t T = 1 + rng.below(40);
        std::vector<double> s(T);
        for (auto& x : s) x = static_cast<double>(rng.below(5));  // many ties
        const double r = 0.05 * static_cast<double>(1 + rng.below(20));
        EXPECT_EQ(top_fraction(s, r), sort_oracle(s, r)) << "T=" << T << " r=" << r;
    }
}

TEST(TopFraction, SizeIsCeil) {
    EXPECT_EQ(selection_size(5, 0.2), 1u);
    EXPECT_EQ(selection_size(10, 0.2), 2u);
    EXPECT_EQ(selection_size(11, 0.2), 3u);
    EXPECT_EQ(selection_size(1, 0.01), 1u);
    EXPECT_EQ(selection_size(3, 0.1 + 0.2), 1u);  // 0.30000000000000004 * 3 is not above 1 in intent
    EXPECT_EQ(selection_size(7, 1.0), 7u);
}

TEST(TopFraction, Errors) {
    EXPECT_THROW(top_fraction(std::vector<double>{}, 0.2), std::invalid_argument);
    EXPECT_THROW(top_fraction(std::vector<double>{1.0}, 0.0), std::invalid_argument);
    EXPECT_THROW(top_fraction(std::vector<double>{1.0}, 1.5), std::invalid_argument);
}

TEST(TopFraction, Monotonicity) {
    Rng rng(2);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t T = 2 + rng.below(20);
        std::vector<double> s(T);
        for (auto& x : s) x = static_cast<double>(rng.below(6));
        const double r = 0.1 * static_cast<double>(1 + rng.below(10));
        const auto before = top_fraction(s, r);
        for (const auto i : before) {
            auto raised = s;
            raised[i] += 0.5 + static_cast<double>(rng.below(3));
            const auto after = top_fraction(raised, r);
            EXPECT_TRUE(std::binary_search(after.begin(), after.end(), i));
        }
    }
}

TEST(BuildMask, UnionExample) {
    // Scores chosen so that with r = 0.4 and T = 5: S_vis = {0,2}, S_temp = {2,4}, S_ent = {1, 3}.
    attr::AttributionProfile p;
    p.visual = {5, 0, 4, 0, 0};
    p.temporal = {0, 0, 4, 0, 5};
    p.entropy = {0, 5, 0, 4, 0};
    SelectionConfig c;
    c.ratio = 0.4;
    const auto m = build_mask(p, c);
    EXPECT_EQ(m.visual, (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(m.temporal, (std::vector<std::size_t>{2, 4}));
    EXPECT_EQ(m.entropy, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{1, 1, 1, 1, 1}));

    c.set_signals("VT");
    const auto vt = build_mask(p, c);
    EXPECT_EQ(vt.bits, (std::vector<std::uint8_t>{1, 0, 1, 0, 1}));
    EXPECT_TRUE(vt.entropy.empty());
    EXPECT_EQ(vt.popcount(), 3u);
    EXPECT_DOUBLE_EQ(vt.density(), 0.6);
}

TEST(BuildMask, SingleSignalDegeneration) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = random_profile(rng, 1 + rng.below(30));
        SelectionConfig c;
        c.set_signals("E");
        const auto m = build_mask(p, c);
        std::vector<std::uint8_t> expect(p.length(), 0);
        for (const auto i : top_fraction(p.entropy, c.ratio)) expect[i] = 1;
        EXPECT_EQ(m.bits, expect);
    }
}

TEST(BuildMask, Invariants) {
    Rng rng(4);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t T = 1 + rng.below(48);
        const auto p = random_profile(rng, T, trial % 2 ? 4 : 0);
        SelectionConfig c;
        c.ratio = 0.05 * static_cast<double>(1 + rng.below(20));
        const auto m = build_mask(p, c);
        const auto k = selection_size(T, c.ratio);
        EXPECT_EQ(m.visual.size(), k);
        EXPECT_EQ(m.temporal.size(), k);
        EXPECT_EQ(m.entropy.size(), k);
        EXPECT_GE(m.popcount(), k);
        EXPECT_LE(m.popcount(), std::min(T, 3 * k));
        EXPECT_GE(m.popcount(), 1u);
        for (std::size_t t = 0; t < T; ++t) {
            const bool in = std::binary_search(m.visual.begin(), m.visual.end(), t) ||
                            std::binary_search(m.temporal.begin(), m.temporal.end(), t) ||
                            std::binary_search(m.entropy.begin(), m.entropy.end(), t);
            EXPECT_EQ(m.bits[t] == 1, in);
        }
        const auto again = build_mask(p, c);
        EXPECT_EQ(again.bits, m.bits);
        // Binary weights are the mask bits.
        const auto w = build_weights(p, c);
        ASSERT_EQ(w.weights.size(), T);
        for (std::size_t t = 0; t < T; ++t) EXPECT_EQ(w.weights[t], static_cast<double>(m.bits[t]));
    }
}

TEST(BuildMask, DensityBoundForLengthFive) {
    // T = 5, r = 0.2: one token per signal, so at most 3/5 of the response.
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        const auto m = build_mask(random_profile(rng, 5), SelectionConfig{});
        EXPECT_LE(m.density(), 0.6);
    }
}

TEST(BuildMask, LengthMismatchIsAnError) {
    attr::AttributionProfile p;
    p.visual = {1, 2};
    p.temporal = {1};
    p.entropy = {1, 2};
    EXPECT_THROW(build_mask(p, SelectionConfig{}), std::invalid_argument);
}

TEST(FullMask, AllOnes) {
    const auto m = full_mask(4);
    EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(m.density(), 1.0);
}

TEST(Weights, LinearIdentity) {
    SelectionConfig c;
    c.mode = WeightingMode::Linear;
    EXPECT_EQ(weights_from_combined(std::vector<double>{0, 0.5, 1}, c), (std::vector<double>{0, 0.5, 1}));
}

TEST(Weights, ExponentialExample) {
    SelectionConfig c;
    c.mode = WeightingMode::Exponential;
    c.exponential_temperature = 0.25;
    const auto w = weights_from_combined(std::vector<double>{0, 1}, c);
    EXPECT_NEAR(w[0], std::exp(-4.0), 1e-15);
    EXPECT_NEAR(w[0], 0.0183, 5e-5);
    EXPECT_EQ(w[1], 1.0);
}

TEST(Weights, SigmoidApproachesThreshold) {
    SelectionConfig c;
    c.mode = WeightingMode::Sigmoid;
    c.sigmoid_slope = 1e4;
    const auto w = weights_from_combined(std::vector<double>{0.0, 0.3, 0.49, 0.51, 0.8, 1.0}, c);
    const std::vector<double> step{0, 0, 0, 1, 1, 1};
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], step[i], 1e-10);
}

TEST(Weights, SoftmaxClipped) {
    SelectionConfig c;
    c.mode = WeightingMode::Softmax;
    const std::vector<double> comb{0.0, 0.5, 1.0};
    const auto w = weights_from_combined(comb, c);
    const double z = std::exp(0.0) + std::exp(0.5) + std::exp(1.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w[i], std::min(1.0, 3.0 * std::exp(comb[i]) / z), 1e-15);
}

TEST(Weights, RangeAndMaxOne) {
    Rng rng(6);
    for (std::size_t mode = 1; mode < kWeightingModeCount; ++mode) {
        for (int trial = 0; trial < 200; ++trial) {
            SelectionConfig c;
            c.mode = static_cast<WeightingMode>(mode);
            c.set_signals(std::vector<std::string>{"E", "V", "T", "EV", "ET", "VT", "EVT"}[rng.below(7)]);
            const auto p = random_profile(rng, 2 + rng.below(30), trial % 3 ? 0 : 3);
            const auto w = build_weights(p, c).weights;
            ASSERT_EQ(w.size(), p.length());
            double mx = 0.0;
            for (const double x : w) {
                EXPECT_GE(x, 0.0);
                EXPECT_LE(x, 1.0);
                mx = std::max(mx, x);
            }
            EXPECT_NEAR(mx, 1.0, 1e-12) << weighting_name(c.mode);
        }
    }
}

TEST(Weights, ConstantScoresGiveUniformOnes) {
    attr::AttributionProfile p;
    p.visual = p.temporal = p.entropy = std::vector<double>(6, 0.7);
    for (std::size_t mode = 1; mode < kWeightingModeCount; ++mode) {
        SelectionConfig c;
        c.mode = static_cast<WeightingMode>(mode);
        EXPECT_EQ(build_weights(p, c).weights, std::vector<double>(6, 1.0));
    }
}

TEST(Weights, CombinedIsMaxOfNormalized) {
    attr::AttributionProfile p;
    p.visual = {0, 10, 5};
    p.temporal = {2, 2, 2};  // constant: contributes 0
    p.entropy = {1, 0, 3};
    SelectionConfig c;
    const auto comb = combined_scores(p, c);
    EXPECT_EQ(comb, (std::vector<double>{1.0 / 3.0, 1.0, 1.0}));
    c.set_signals("T");
    EXPECT_TRUE(combined_scores(p, c).empty());
}

TEST(Config, SignalsAndValidation) {
    SelectionConfig c;
    EXPECT_EQ(c.signals(), "EVT");
    c.set_signals("TV");
    EXPECT_EQ(c.signals(), "VT");
    EXPECT_FALSE(c.entropy);
    EXPECT_THROW(c.set_signals("X"), std::invalid_argument);
    c.entropy = c.visual = c.temporal = false;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    SelectionConfig r;
    r.ratio = 0.0;
    EXPECT_THROW(r.validate(), std::invalid_argument);
    for (std::size_t m = 0; m < kWeightingModeCount; ++m) {
        EXPECT_EQ(parse_weighting(weighting_name(static_cast<WeightingMode>(m))), static_cast<WeightingMode>(m));
    }
}

TEST(Dump, RunLengthRoundTrip) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::uint8_t> bits(1 + rng.below(50));
        for (auto& b : bits) b = static_cast<std::uint8_t>(rng.below(2));
        const auto runs = run_length_encode(bits);
        for (std::size_t i = 1; i < runs.size(); ++i) EXPECT_NE(runs[i].first, runs[i - 1].first);
        EXPECT_EQ(run_length_decode(runs), bits);
    }
    const std::vector<std::uint8_t> ex{1, 1, 0, 1};
    EXPECT_EQ(run_length_encode(ex), (std::vector<std::pair<std::uint8_t, std::size_t>>{{1, 2}, {0, 1}, {1, 1}}));
}

TEST(Dump, JsonRoundTrip) {
    Rng rng(8);
    const auto p = random_profile(rng, 12);
    const auto m = build_mask(p, SelectionConfig{});
    std::vector<TokenId> toks(12);
    std::iota(toks.begin(), toks.end(), TokenId{3});
    const auto line = mask_to_json(42, m, toks);
    const auto rec = mask_from_json(line);
    EXPECT_EQ(rec.rollout_id, 42u);
    EXPECT_EQ(rec.mask.bits, m.bits);
    EXPECT_EQ(rec.mask.visual, m.visual);
    EXPECT_EQ(rec.mask.temporal, m.temporal);
    EXPECT_EQ(rec.mask.entropy, m.entropy);
    EXPECT_EQ(rec.tokens, toks);
}
