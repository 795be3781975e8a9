#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "ktr/diagnostics.hpp"
#include "ktr/fixtures.hpp"
#include "ktr/rng.hpp"

using namespace ktr;
using namespace ktr::diag;

namespace {

std::vector<double> random_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

select::TokenMask mask_from_bits(std::vector<std::uint8_t> bits) {
    select::TokenMask m;
    for (std::size_t t = 0; t < bits.size(); ++t) {
        if (bits[t]) m.entropy.push_back(t);
    }
    m.bits = std::move(bits);
    return m;
}

struct Tiny {
    env::EnvConfig env = fixtures::tiny_env();
    policy::PolicyModel model{fixtures::tiny_model_config(3), env.frame_vocab};
};

}  // namespace

TEST(Cosine, SelfAndNegation) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = random_vector(rng, 1 + rng.below(40));
        std::vector<double> neg(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
        EXPECT_NEAR(*cosine(x, x), 1.0, 1e-12);
        EXPECT_NEAR(*cosine(x, neg), -1.0, 1e-12);
    }
}

TEST(Cosine, KnownValuesAndFloor) {
    EXPECT_NEAR(*cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0, 1e-15);
    EXPECT_NEAR(*cosine(std::vector<double>{1, 1}, std::vector<double>{1, 0}), 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_FALSE(cosine(std::vector<double>{0, 0}, std::vector<double>{1, 0}).has_value());
    EXPECT_FALSE(cosine(std::vector<double>{1e-13, 0}, std::vector<double>{1, 0}).has_value());
    EXPECT_THROW(cosine(std::vector<double>{1}, std::vector<double>{1, 2}), std::invalid_argument);
    EXPECT_DOUBLE_EQ(l2_norm(std::vector<double>{3, 4}), 5.0);
}

TEST(Decomposition, AdditivityOnRandomMasks) {
    Tiny t;
    rl::RLConfig cfg;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto b = fixtures::random_batch(t.model, t.env, seed, 4, fixtures::MaskPattern::Random);
        const auto d = decompose_gradients(t.model, std::span(&b, 1), cfg);
        EXPECT_LT(d.additivity_error, 1e-10);
        EXPECT_GT(d.full_norm, 0.0);
        std::size_t total = 0, on = 0;
        for (const auto& m : b.masks) {
            total += m.bits.size();
            on += static_cast<std::size_t>(std::count(m.bits.begin(), m.bits.end(), 1));
        }
        EXPECT_EQ(d.selected_tokens, on);
        EXPECT_EQ(d.masked_tokens, total - on);
        if (d.cos_ktr_full) {
            EXPECT_GE(*d.cos_ktr_full, -1.0);
            EXPECT_LE(*d.cos_ktr_full, 1.0);
        }
    }
}

TEST(Decomposition, AllOnesMask) {
    Tiny t;
    rl::RLConfig cfg;
    const auto b = fixtures::random_batch(t.model, t.env, 3, 4, fixtures::MaskPattern::AllOnes);
    const auto d = decompose_gradients(t.model, std::span(&b, 1), cfg);
    EXPECT_EQ(d.rest_norm, 0.0);
    EXPECT_FALSE(d.cos_rest_full.has_value());
    EXPECT_FALSE(d.masked_token_norm.has_value());
    EXPECT_NEAR(*d.cos_ktr_full, 1.0, 1e-12);
    EXPECT_EQ(d.masked_tokens, 0u);
}

TEST(Decomposition, AllZeroMaskIsAllRest) {
    Tiny t;
    rl::RLConfig cfg;
    const auto b = fixtures::random_batch(t.model, t.env, 4, 4, fixtures::MaskPattern::AllZeros);
    const auto d = decompose_gradients(t.model, std::span(&b, 1), cfg);
    EXPECT_EQ(d.ktr_norm, 0.0);
    EXPECT_FALSE(d.cos_ktr_full.has_value());
    EXPECT_NEAR(*d.cos_rest_full, 1.0, 1e-12);
}

// g_full equals the head gradient of the unmasked beta=0 loss built independently.
TEST(Decomposition, FullGradientMatchesObjective) {
    Tiny t;
    rl::RLConfig cfg;
    cfg.kl_beta = 0.0;
    auto b = fixtures::random_batch(t.model, t.env, 5, 4, fixtures::MaskPattern::Random);
    const auto d = decompose_gradients(t.model, std::span(&b, 1), cfg);

    for (auto& w : b.weights) w.assign(w.size(), 1.0);
    diff::Graph g;
    const auto params = policy::register_parameters(g, t.model);
    const auto grad = g.backward(rl::ktr_objective(g, t.model, params, b, cfg).loss);
    double sq = 0.0;
    for (const auto p : t.model.final_layer_parameters()) {
        for (const double x : grad.per_parameter[p]) sq += x * x;
    }
    EXPECT_NEAR(d.full_norm, std::sqrt(sq), 1e-12 * std::max(1.0, d.full_norm));
}

TEST(Decomposition, Errors) {
    Tiny t;
    rl::RLConfig cfg;
    EXPECT_THROW(decompose_gradients(t.model, std::span<const rl::GroupBatch>{}, cfg), std::invalid_argument);
    auto b = fixtures::random_batch(t.model, t.env, 1, 4, fixtures::MaskPattern::AllOnes);
    b.masks.pop_back();
    EXPECT_THROW(decompose_gradients(t.model, std::span(&b, 1), cfg), std::invalid_argument);
}

TEST(Decomposition, JsonRoundTrip) {
    GradDecomposition d;
    d.step = 7;
    d.full_norm = 1.5;
    d.cos_ktr_full = 0.25;
    d.selected_token_norm = 2.0;
    d.selected_tokens = 3;
    d.masked_tokens = 0;
    d.additivity_error = 1e-17;
    const auto j = to_json(d);
    EXPECT_TRUE(j.at("cos-rest-full").is_null());
    const auto back = grad_decomposition_from_json(j);
    EXPECT_EQ(to_json(back).dump(), j.dump());
}

TEST(LossVariance, Examples) {
    EXPECT_EQ(loss_variance(std::vector<double>(30, 1.7)), 0.0);
    EXPECT_DOUBLE_EQ(loss_variance(std::vector<double>{0, 2}), 1.0);
    EXPECT_EQ(loss_variance(std::vector<double>{}), 0.0);
    // only the trailing window counts
    std::vector<double> xs(25, 0.0);
    for (std::size_t i = 0; i < 5; ++i) xs[i] = 100.0 * static_cast<double>(i);
    EXPECT_EQ(loss_variance(xs, 20), 0.0);
    EXPECT_THROW(loss_variance(xs, 1), std::invalid_argument);
}

TEST(LossVariance, RollingAgainstDirectComputation) {
    Rng rng(9);
    const auto xs = random_vector(rng, 57);
    const auto rolling = rolling_loss_variance(xs, 20);
    ASSERT_EQ(rolling.size(), 38u);
    for (std::size_t k = 0; k < rolling.size(); ++k) {
        long double m = 0, s = 0;
        for (std::size_t i = k; i < k + 20; ++i) m += xs[i];
        m /= 20;
        for (std::size_t i = k; i < k + 20; ++i) s += (xs[i] - m) * (xs[i] - m);
        EXPECT_NEAR(rolling[k], static_cast<double>(s / 20), 1e-12);
    }
    EXPECT_NEAR(rolling.back(), loss_variance(xs, 20), 1e-15);
    EXPECT_NEAR(mean_loss_variance(xs, 20), std::accumulate(rolling.begin(), rolling.end(), 0.0) / 38.0, 1e-15);
    EXPECT_EQ(rolling_loss_variance(std::vector<double>{1, 3, 5}, 20).size(), 1u);
    EXPECT_EQ(mean_loss_variance(std::vector<double>{4}, 20), 0.0);
}

TEST(PositionHistogram, Examples) {
    std::vector<select::TokenMask> ones{mask_from_bits(std::vector<std::uint8_t>(7, 1)),
                                        mask_from_bits(std::vector<std::uint8_t>(13, 1))};
    const auto h = position_histogram(ones, 4);
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(h.probability(b), 1.0);

    std::vector<std::uint8_t> first(10, 0);
    first[0] = 1;
    const std::vector<select::TokenMask> one{mask_from_bits(first)};
    const auto h2 = position_histogram(one, 10);
    EXPECT_EQ(h2.probability(0), 1.0);
    for (std::size_t b = 1; b < 10; ++b) EXPECT_EQ(h2.probability(b), 0.0);
    EXPECT_THROW(position_histogram(one, 0), std::invalid_argument);
}

TEST(PositionHistogram, CountsAndRange) {
    Rng rng(4);
    std::vector<select::TokenMask> masks;
    std::uint64_t tokens = 0, selected = 0;
    for (int r = 0; r < 40; ++r) {
        std::vector<std::uint8_t> bits(1 + rng.below(12));
        for (auto& b : bits) {
            b = static_cast<std::uint8_t>(rng.below(2));
            selected += b;
        }
        tokens += bits.size();
        masks.push_back(mask_from_bits(std::move(bits)));
    }
    const auto h = position_histogram(masks, 5);
    EXPECT_EQ(std::accumulate(h.total.begin(), h.total.end(), std::uint64_t{0}), tokens);
    EXPECT_EQ(std::accumulate(h.selected.begin(), h.selected.end(), std::uint64_t{0}), selected);
    for (std::size_t b = 0; b < h.bins(); ++b) {
        EXPECT_GE(h.probability(b), 0.0);
        EXPECT_LE(h.probability(b), 1.0);
    }
}

TEST(Overlap, Examples) {
    const std::vector<std::size_t> a{0}, b{1}, c{2};
    auto s = overlap_stats(a, b, c, 4);
    EXPECT_EQ(s.exactly_one, 3u);
    EXPECT_EQ(s.exactly_two + s.all_three, 0u);

    const std::vector<std::size_t> same{0, 1};
    s = overlap_stats(same, same, same, 4);
    EXPECT_EQ(s.all_three, 2u);
    EXPECT_EQ(s.exactly_one + s.exactly_two, 0u);

    const std::vector<std::size_t> v{0, 2}, t{2, 4}, e{1};
    s = overlap_stats(v, t, e, 6);
    EXPECT_EQ(s.exactly_one, 3u);
    EXPECT_EQ(s.exactly_two, 1u);
    EXPECT_EQ(s.all_three, 0u);
    EXPECT_EQ(s.union_size, 4u);
    EXPECT_NEAR(s.density(), 4.0 / 6.0, 1e-15);

    const std::vector<std::size_t> bad{6};
    EXPECT_THROW(overlap_stats(bad, t, e, 6), std::out_of_range);
}

TEST(Overlap, BruteForce) {
    Rng rng(12);
    OverlapStats acc;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(15);
        std::array<std::vector<std::size_t>, 3> sets;
        for (auto& s : sets) {
            for (std::size_t i = 0; i < n; ++i) {
                if (rng.below(3) == 0) s.push_back(i);
            }
        }
        const auto st = overlap_stats(sets[0], sets[1], sets[2], n);
        std::uint64_t one = 0, two = 0, three = 0;
        for (std::size_t i = 0; i < n; ++i) {
            int k = 0;
            for (const auto& s : sets) k += std::find(s.begin(), s.end(), i) != s.end();
            one += k == 1;
            two += k == 2;
            three += k == 3;
        }
        EXPECT_EQ(st.exactly_one, one);
        EXPECT_EQ(st.exactly_two, two);
        EXPECT_EQ(st.all_three, three);
        EXPECT_EQ(st.exactly_one + st.exactly_two + st.all_three, st.union_size);
        acc += st;
    }
    EXPECT_EQ(acc.exactly_one + acc.exactly_two + acc.all_three, acc.union_size);
}

TEST(Categories, SingleSymbolSelection) {
    const Vocabulary vocab(8);
    std::vector<std::uint8_t> bits{0, 1, 0};
    select::TokenMask m = mask_from_bits(bits);
    m.entropy.clear();
    m.visual = {1};
    const std::vector<select::TokenMask> masks{m};
    const std::vector<std::vector<TokenId>> toks{{vocab.think(), vocab.symbol(3), vocab.eos()}};
    const auto st = token_category_stats(masks, toks, vocab);
    EXPECT_EQ(st.rate(Signal::Visual, TokenCategory::FrameSymbol), 1.0);
    EXPECT_EQ(st.rate(Signal::Union, TokenCategory::FrameSymbol), 1.0);
    EXPECT_EQ(st.rate(Signal::Temporal, TokenCategory::FrameSymbol), 0.0);
    EXPECT_NEAR(st.base_rate(TokenCategory::Marker), 2.0 / 3.0, 1e-15);
}

TEST(Categories, UnknownIdIsOther) {
    const Vocabulary vocab(4);
    const std::vector<select::TokenMask> masks{mask_from_bits({1})};
    const std::vector<std::vector<TokenId>> toks{{9999}};
    const auto st = token_category_stats(masks, toks, vocab);
    EXPECT_EQ(st.rate(Signal::Union, TokenCategory::Other), 1.0);
    EXPECT_EQ(st.rate(Signal::Entropy, TokenCategory::Other), 1.0);
}

TEST(Categories, LengthMismatchThrows) {
    const Vocabulary vocab(4);
    const std::vector<select::TokenMask> masks{mask_from_bits({1, 0})};
    const std::vector<std::vector<TokenId>> toks{{1}};
    EXPECT_THROW(token_category_stats(masks, toks, vocab), std::invalid_argument);
}

// Uniform random masks: selected-token categories follow the base rates.
TEST(Categories, RandomMasksMatchBaseRatesChiSquared) {
    const Vocabulary vocab(8);
    Rng rng(2024);
    std::vector<select::TokenMask> masks;
    std::vector<std::vector<TokenId>> toks;
    for (int r = 0; r < 400; ++r) {
        const std::size_t n = 4 + rng.below(10);
        std::vector<TokenId> t(n);
        std::vector<std::uint8_t> bits(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = static_cast<TokenId>(rng.below(vocab.size()));
            bits[i] = static_cast<std::uint8_t>(rng.below(2));
        }
        toks.push_back(std::move(t));
        masks.push_back(mask_from_bits(std::move(bits)));
    }
    const auto st = token_category_stats(masks, toks, vocab);
    const double n = static_cast<double>(st.selected_total(Signal::Union));
    double chi2 = 0.0;
    int cells = 0;
    for (std::size_t c = 0; c < kTokenCategoryCount; ++c) {
        const double expected = n * st.base_rate(static_cast<TokenCategory>(c));
        if (expected == 0.0) continue;
        const double obs = static_cast<double>(st.selected[static_cast<std::size_t>(Signal::Union)][c]);
        chi2 += (obs - expected) * (obs - expected) / expected;
        ++cells;
    }
    ASSERT_GE(cells, 2);
    const boost::math::chi_squared dist(cells - 1);
    EXPECT_LT(chi2, boost::math::quantile(dist, 0.95));
}
