#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "ktr/fixtures.hpp"
#include "ktr/ktr_rl.hpp"
#include "ktr/rng.hpp"

using namespace ktr;
using namespace ktr::rl;

namespace {

struct Tiny {
    env::EnvConfig env = fixtures::tiny_env();
    policy::PolicyModel model{fixtures::tiny_model_config(3), env.frame_vocab};
};

// Group of G template responses of identical length (5 tokens) on one task.
GroupBatch template_batch(const policy::PolicyModel& model, const env::Task& task, std::size_t G, std::uint64_t seed) {
    Rng rng(seed);
    const auto& vocab = model.vocab();
    GroupBatch b;
    std::vector<double> rewards;
    for (std::size_t i = 0; i < G; ++i) {
        policy::Rollout r;
        r.id = i;
        r.task = task;
        const auto answer = i % 2 ? task.gold : static_cast<TokenId>(1 + rng.below(vocab.frame_vocab() - 1));
        r.tokens = template_response(vocab, answer, 1, rng.next());
        const auto sc = policy::score_response(model, task.video, task.prompt, r.tokens);
        r.logits = sc.logits;
        r.old_log_probs = sc.log_probs;
        for (auto& lp : r.old_log_probs) lp += 0.05 * (2.0 * rng.uniform() - 1.0);
        r.reward = env::reward(r.tokens, task, vocab);
        rewards.push_back(r.reward + 0.1 * rng.uniform());
        b.ref_log_probs.push_back(sc.log_probs);
        b.weights.emplace_back(r.length(), 1.0);
        b.rollouts.push_back(std::move(r));
    }
    b.advantages = normalize_advantages(rewards, 1e-6);
    return b;
}

double graph_loss(const policy::PolicyModel& model, const GroupBatch& b, const RLConfig& cfg) {
    diff::Graph g;
    const auto params = policy::register_parameters(g, model);
    return g.value(ktr_objective(g, model, params, b, cfg).loss).item();
}

diff::GradientVector graph_grad(const policy::PolicyModel& model, const GroupBatch& b, const RLConfig& cfg) {
    diff::Graph g;
    const auto params = policy::register_parameters(g, model);
    return g.backward(ktr_objective(g, model, params, b, cfg).loss);
}

std::vector<std::vector<double>> current_log_probs(const policy::PolicyModel& model, const GroupBatch& b) {
    std::vector<std::vector<double>> out;
    for (const auto& r : b.rollouts) out.push_back(policy::score_response(model, r.task.video, r.task.prompt, r.tokens).log_probs);
    return out;
}

std::size_t param_index(const policy::PolicyModel& m, const std::string& name) {
    const auto& n = m.parameter_names();
    return static_cast<std::size_t>(std::find(n.begin(), n.end(), name) - n.begin());
}

// Three frames of two slots over seven symbols, briefly warmed up so group
// rewards vary and the surrogate has a signal.
struct Warm {
    env::EnvConfig env;
    policy::PolicyModel model;
    Warm() : env(make_env()), model(fixtures::tiny_model_config(5), env.frame_vocab) {
        WarmupConfig w;
        w.steps = 300;
        w.batch = 8;
        w.gold_fraction = 0.5;
        supervised_warmup(model, env, w, 11);
    }
    static env::EnvConfig make_env() {
        auto e = fixtures::tiny_env();
        e.frame_vocab = 8;
        return e;
    }
    std::vector<env::Task> tasks(std::size_t n, std::uint64_t seed) const {
        std::vector<env::Task> out;
        for (std::size_t i = 0; i < n; ++i) out.push_back(env::generate_task(derive_seed(seed, i), env::family_for_index(i), env));
        return out;
    }
};

const Warm& warm() {
    static const Warm w;
    return w;
}

TrainSettings small_settings(Method method) {
    TrainSettings s;
    s.method = method;
    s.rl.group_size = 4;
    s.rl.tasks_per_step = 2;
    s.rl.learning_rate = 0.1;
    return s;
}

}  // namespace

TEST(Advantages, Examples) {
    const auto a = normalize_advantages(std::vector<double>{1, 1, 0, 0}, 1e-6);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], i < 2 ? 1.0 : -1.0, 1e-5);
    EXPECT_NEAR(a[0], 0.5 / (0.5 + 1e-6), 1e-15);
    EXPECT_EQ(normalize_advantages(std::vector<double>{1, 1, 1, 1}, 1e-6), std::vector<double>(4, 0.0));
    const auto b = normalize_advantages(std::vector<double>{1, 0}, 1e-6);
    EXPECT_NEAR(b[0], 1.0, 1e-5);
    EXPECT_NEAR(b[1], -1.0, 1e-5);
}

TEST(Advantages, ZeroMeanUnitStd) {
    Rng rng(1);
    auto moments = [](const std::vector<double>& v) {
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double var = 0.0;
        for (const double x : v) var += (x - mean) * (x - mean);
        return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
    };
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> r(2 + rng.below(15));
        for (auto& x : r) x = static_cast<double>(rng.below(2)) + 0.01 * rng.uniform();
        const double delta = 1e-6;
        const auto a = normalize_advantages(r, delta);
        const auto [rm, sigma] = moments(r);
        const auto [mean, sd] = moments(a);
        EXPECT_NEAR(mean, 0.0, 1e-14 / sigma);
        EXPECT_NEAR(sd, sigma / (sigma + delta), 1e-12);
        EXPECT_NEAR(sd, 1.0, delta / sigma + 1e-12);
    }
}

TEST(Ratio, Examples) {
    EXPECT_EQ(likelihood_ratio(-0.7, -0.7), 1.0);
    EXPECT_NEAR(likelihood_ratio(std::log(1.5) - 2.0, -2.0), 1.5, 1e-14);
    const auto before = ratio_clamp_warnings();
    EXPECT_EQ(likelihood_ratio(100.0, 0.0), std::exp(30.0));
    EXPECT_EQ(likelihood_ratio(-100.0, 0.0), std::exp(-30.0));
    EXPECT_EQ(ratio_clamp_warnings() - before, 2u);
}

TEST(Surrogate, Examples) {
    EXPECT_DOUBLE_EQ(surrogate_term(1.5, 1.0, 0.2), 1.2);
    EXPECT_DOUBLE_EQ(surrogate_term(0.5, -1.0, 0.2), -0.8);
    for (const double a : {-2.0, -0.3, 0.0, 0.7, 5.0}) EXPECT_EQ(surrogate_term(1.0, a, 0.2), a);
    EXPECT_DOUBLE_EQ(surrogate_term(0.5, 1.0, 0.2), 0.5);
    EXPECT_DOUBLE_EQ(surrogate_term(1.5, -1.0, 0.2), -1.5);
}

TEST(Kl, Estimator) {
    EXPECT_EQ(kl_estimate(-1.0, -1.0), 0.0);
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        const double n = -5.0 * rng.uniform(), r = -5.0 * rng.uniform();
        const double d = r - n;
        EXPECT_NEAR(kl_estimate(n, r), std::exp(d) - d - 1.0, 1e-14);
        EXPECT_GE(kl_estimate(n, r), 0.0);
    }
}

TEST(Objective, HandExample) {
    GroupBatch hand;
    hand.rollouts.resize(2);
    for (auto& r : hand.rollouts) {
        r.tokens = {0};
        r.old_log_probs = {-0.5};
    }
    hand.advantages = {1.0, -1.0};
    hand.weights = {{1.0}, {0.0}};
    const std::vector<std::vector<double>> same{{-0.5}, {-0.5}};
    EXPECT_DOUBLE_EQ(masked_objective(hand, same, 0.2), 0.5);
}

TEST(Objective, AllOnesEqualsGrpoOnRandomBatches) {
    const Tiny t;
    Rng rng(3);
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto b = fixtures::random_batch(t.model, t.env, derive_seed(9, s), 2 + s % 6, fixtures::MaskPattern::AllOnes, 0.3);
        std::vector<std::vector<double>> cur;
        for (const auto& r : b.rollouts) {
            auto lp = r.old_log_probs;
            for (auto& x : lp) x += 0.5 * (2.0 * rng.uniform() - 1.0);
            cur.push_back(lp);
        }
        EXPECT_NEAR(masked_objective(b, cur, 0.2), grpo_objective(b, cur, 0.2), 1e-12);
        RLConfig cfg;
        cfg.kl_beta = 0.0;
        EXPECT_NEAR(-graph_loss(t.model, b, cfg), grpo_objective(b, current_log_probs(t.model, b), 0.2), 1e-12);
    }
}

TEST(Objective, IndependentFormula) {
    // Direct transcription: (1/G) sum_i (1/|o_i|) sum_t m_it min(r A, clip(r) A).
    const Tiny t;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto b = fixtures::random_batch(t.model, t.env, derive_seed(10, s), 5, fixtures::MaskPattern::Random, 0.4);
        const auto cur = current_log_probs(t.model, b);
        double total = 0.0;
        for (std::size_t i = 0; i < b.size(); ++i) {
            double inner = 0.0;
            for (std::size_t k = 0; k < b.rollouts[i].length(); ++k) {
                const double r = std::exp(cur[i][k] - b.rollouts[i].old_log_probs[k]);
                const double A = b.advantages[i];
                inner += b.weights[i][k] * std::min(r * A, std::clamp(r, 0.8, 1.2) * A);
            }
            total += inner / static_cast<double>(b.rollouts[i].length());
        }
        total /= static_cast<double>(b.size());
        EXPECT_NEAR(masked_objective(b, cur, 0.2), total, 1e-12);
        RLConfig cfg;
        cfg.kl_beta = 0.0;
        EXPECT_NEAR(-graph_loss(t.model, b, cfg), total, 1e-12);
    }
}

TEST(Objective, ZeroMaskRolloutContributesOnlyKl) {
    const Tiny t;
    auto b = fixtures::random_batch(t.model, t.env, 77, 4, fixtures::MaskPattern::AllOnes);
    std::fill(b.weights[0].begin(), b.weights[0].end(), 0.0);
    RLConfig cfg;
    cfg.kl_beta = 0.4;
    diff::Graph g;
    const auto params = policy::register_parameters(g, t.model);
    const auto nodes = ktr_objective(g, t.model, params, b, cfg);

    auto without = b;
    without.rollouts.erase(without.rollouts.begin());
    without.advantages.erase(without.advantages.begin());
    without.weights.erase(without.weights.begin());
    const auto cur = current_log_probs(t.model, without);
    // Same 1/G normalizer: rescale the 3-rollout objective by 3/4.
    EXPECT_NEAR(g.value(nodes.surrogate).item(), 0.75 * masked_objective(without, cur, 0.2), 1e-12);

    auto ones = fixtures::random_batch(t.model, t.env, 77, 4, fixtures::MaskPattern::AllOnes);
    diff::Graph g2;
    const auto nodes2 = ktr_objective(g2, t.model, policy::register_parameters(g2, t.model), ones, cfg);
    EXPECT_EQ(g.value(nodes.kl).item(), g2.value(nodes2.kl).item());
    EXPECT_GT(g.value(nodes.kl).item(), 0.0);
}

TEST(Objective, AllZeroMaskIsAnError) {
    const Tiny t;
    const auto b = fixtures::random_batch(t.model, t.env, 5, 3, fixtures::MaskPattern::AllZeros);
    RLConfig cfg;
    EXPECT_THROW(graph_loss(t.model, b, cfg), std::invalid_argument);
}

TEST(Objective, LengthMismatchIsAnError) {
    const Tiny t;
    auto b = fixtures::random_batch(t.model, t.env, 5, 3, fixtures::MaskPattern::AllOnes);
    b.weights[1].push_back(1.0);
    RLConfig cfg;
    EXPECT_THROW(graph_loss(t.model, b, cfg), std::invalid_argument);
}

TEST(Objective, ReorderInvariance) {
    const Tiny t;
    Rng rng(4);
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto b = fixtures::random_batch(t.model, t.env, derive_seed(11, s), 5, fixtures::MaskPattern::Random);
        std::vector<std::size_t> perm(b.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(perm);
        GroupBatch p;
        for (const auto i : perm) {
            p.rollouts.push_back(b.rollouts[i]);
            p.advantages.push_back(b.advantages[i]);
            p.weights.push_back(b.weights[i]);
            p.ref_log_probs.push_back(b.ref_log_probs[i]);
            p.masks.push_back(b.masks[i]);
        }
        RLConfig cfg;
        EXPECT_NEAR(graph_loss(t.model, b, cfg), graph_loss(t.model, p, cfg), 1e-12);
        const auto ga = graph_grad(t.model, b, cfg).flatten();
        const auto gb = graph_grad(t.model, p, cfg).flatten();
        for (std::size_t k = 0; k < ga.size(); ++k) EXPECT_NEAR(ga[k], gb[k], 1e-12);
    }
}

TEST(Gradient, FiniteDifferenceRandomMasks) {
    const Tiny t;
    for (const double beta : {0.0, 0.4}) {
        for (std::uint64_t s = 0; s < 3; ++s) {
            const auto b = fixtures::random_batch(t.model, t.env, derive_seed(12, s), 3, fixtures::MaskPattern::Random);
            RLConfig cfg;
            cfg.kl_beta = beta;
            diff::Graph g;
            const auto params = policy::register_parameters(g, t.model);
            const auto nodes = ktr_objective(g, t.model, params, b, cfg);
            EXPECT_LT(diff::finite_difference_check(g, nodes.loss, 1e-5), 1e-4);
        }
    }
}

TEST(Gradient, SoftWeightsFiniteDifference) {
    const Tiny t;
    auto b = fixtures::random_batch(t.model, t.env, 13, 3, fixtures::MaskPattern::AllOnes);
    Rng rng(13);
    for (auto& w : b.weights) {
        for (auto& x : w) x = rng.uniform();
    }
    RLConfig cfg;
    diff::Graph g;
    const auto nodes = ktr_objective(g, t.model, policy::register_parameters(g, t.model), b, cfg);
    EXPECT_LT(diff::finite_difference_check(g, nodes.loss, 1e-5), 1e-4);
}

TEST(Gradient, MaskedOutTokensGiveExactZero) {
    // Equal-length responses: the last sequence position only feeds the logits
    // of the final token, so its position embedding reaches the loss through
    // that token alone.
    const Tiny t;
    const auto task = env::generate_task(4, env::Family::Visual, t.env);
    auto b = template_batch(t.model, task, 4, 21);
    const auto T = b.rollouts[0].length();
    const auto context = t.env.frames * t.env.slots + task.prompt.size();
    const auto last_row = context + T - 2;
    const auto pos = param_index(t.model, "pos_emb");
    const auto D = t.model.config().embed_dim;
    RLConfig cfg;
    cfg.kl_beta = 0.0;

    for (auto& w : b.weights) w.back() = 0.0;
    const auto masked = graph_grad(t.model, b, cfg);
    for (std::size_t k = 0; k < D; ++k) EXPECT_EQ(masked.per_parameter[pos][last_row * D + k], 0.0);

    for (auto& w : b.weights) w.back() = 1.0;
    const auto live = graph_grad(t.model, b, cfg);
    double mag = 0.0;
    for (std::size_t k = 0; k < D; ++k) mag += std::abs(live.per_parameter[pos][last_row * D + k]);
    EXPECT_GT(mag, 0.0);
}

TEST(Gradient, PerTokenLossesSumToSurrogate) {
    const Tiny t;
    const auto b = fixtures::random_batch(t.model, t.env, 14, 4, fixtures::MaskPattern::Random);
    RLConfig cfg;
    diff::Graph g;
    const auto nodes = ktr_objective(g, t.model, policy::register_parameters(g, t.model), b, cfg, true);
    double masked_sum = 0.0;
    ASSERT_EQ(nodes.token_losses.size(), b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
        ASSERT_EQ(nodes.token_losses[i].size(), b.rollouts[i].length());
        for (std::size_t k = 0; k < b.rollouts[i].length(); ++k) {
            masked_sum += b.weights[i][k] * g.value(nodes.token_losses[i][k]).item();
        }
    }
    EXPECT_NEAR(-masked_sum, g.value(nodes.surrogate).item(), 1e-12);
}

TEST(TrainStep, ZeroLearningRateLeavesModel) {
    auto model = warm().model;
    const auto reference = model;
    auto settings = small_settings(Method::Ktr);
    settings.rl.learning_rate = 0.0;
    const auto tasks = warm().tasks(6, 1);
    const auto report = train_step(model, reference, tasks, settings, 5, 0);
    EXPECT_FALSE(report.aborted);
    EXPECT_EQ(model, warm().model);
    EXPECT_TRUE(std::isfinite(report.loss));
    EXPECT_GT(report.grad_norm, 0.0);
}

TEST(TrainStep, AllOnesKtrMatchesGrpo) {
    const auto& w = warm();
    const auto reference = w.model;
    const auto tasks = w.tasks(6, 2);
    auto ktr = small_settings(Method::Ktr);
    ktr.rl.kl_beta = 0.0;
    ktr.selection.ratio = 1.0;
    auto grpo = small_settings(Method::Grpo);
    grpo.rl.kl_beta = 0.0;

    auto a = w.model, b = w.model;
    const auto ra = train_step(a, reference, tasks, ktr, 8, 3);
    const auto rb = train_step(b, reference, tasks, grpo, 8, 3);
    EXPECT_DOUBLE_EQ(ra.mask_density, 1.0);
    EXPECT_EQ(ra.loss, rb.loss);
    EXPECT_GT(ra.grad_norm, 0.0);
    EXPECT_EQ(a, b);
    EXPECT_FALSE(a == w.model);
}

TEST(TrainStep, DeterministicAndIds) {
    Tiny t;
    const auto reference = t.model;
    std::vector<env::Task> tasks{env::generate_task(1, env::Family::Visual, t.env),
                                 env::generate_task(2, env::Family::Static, t.env)};
    const auto settings = small_settings(Method::Ktr);
    auto a = t.model, b = t.model;
    std::vector<GroupBatch> ga;
    const auto ra = train_step(a, reference, tasks, settings, 9, 7, &ga);
    const auto rb = train_step(b, reference, tasks, settings, 9, 7);
    EXPECT_EQ(a, b);
    EXPECT_EQ(ra.loss, rb.loss);
    ASSERT_EQ(ga.size(), 2u);
    EXPECT_EQ(ga[0].rollouts[0].id, 7u * 2u * 4u);
    EXPECT_EQ(ga[1].rollouts[3].id, (7u * 2u + 1u) * 4u + 3u);
    for (const auto& g : ga) {
        EXPECT_EQ(g.profiles.size(), g.size());
        EXPECT_EQ(g.masks.size(), g.size());
        for (const auto& m : g.masks) EXPECT_GE(m.popcount(), 1u);
    }
}

TEST(TrainStep, NonFiniteForwardAbortsWithoutUpdate) {
    auto model = warm().model;
    const auto reference = model;
    model.parameters()[0][0] = NAN;
    const auto before = model.parameters();
    const auto report = train_step(model, reference, warm().tasks(2, 3), small_settings(Method::Ktr), 2, 0);
    EXPECT_TRUE(report.aborted);
    EXPECT_FALSE(report.abort_reason.empty());
    ASSERT_EQ(model.parameters().size(), before.size());
    for (std::size_t p = 1; p < before.size(); ++p) EXPECT_EQ(model.parameters()[p], before[p]);
    EXPECT_TRUE(std::isnan(model.parameters()[0][0]));
}

TEST(Config, Validation) {
    RLConfig c;
    EXPECT_NO_THROW(c.validate());
    c.group_size = 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = RLConfig{};
    c.clip_epsilon = 1.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = RLConfig{};
    c.kl_beta = -0.1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = RLConfig{};
    c.learning_rate = INFINITY;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = RLConfig{};
    c.advantage_epsilon = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(RLConfig{}.group_size, 8u);
    EXPECT_EQ(RLConfig{}.kl_beta, 0.4);
    EXPECT_EQ(RLConfig{}.temperature, 1.0);
    EXPECT_EQ(parse_method(method_name(Method::Grpo)), Method::Grpo);
    EXPECT_THROW(parse_method("ppo"), std::invalid_argument);
}

TEST(Warmup, TemplateShape) {
    const Vocabulary v(8);
    const auto r = template_response(v, v.digit(4), 1, 3);
    ASSERT_EQ(r.size(), 5u);
    EXPECT_EQ(r[0], v.think());
    EXPECT_EQ(v.category(r[1]), TokenCategory::Connective);
    EXPECT_EQ(r[2], v.answer_marker());
    EXPECT_EQ(r[3], v.digit(4));
    EXPECT_EQ(r[4], v.eos());
}

TEST(Warmup, LowersLossAndTeachesFormat) {
    auto env = Warm::make_env();
    policy::PolicyModel model(fixtures::tiny_model_config(3), env.frame_vocab);
    WarmupConfig w;
    w.steps = 300;
    w.batch = 8;
    w.gold_fraction = 1.0;
    const double loss = supervised_warmup(model, env, w, 3);
    EXPECT_LT(loss, 1.0);
    std::vector<env::Task> tasks;
    for (std::uint64_t i = 0; i < 30; ++i) tasks.push_back(env::generate_task(i, env::family_for_index(i), env));
    for (const auto& task : tasks) {
        const auto r = policy::sample_rollout(model, task, 1.0, true, 0);
        EXPECT_EQ(r.length(), 5u);
        EXPECT_EQ(r.tokens[2], model.vocab().answer_marker());
    }
    const auto report = evaluate(model, tasks);
    EXPECT_EQ(report.tasks, 30u);
    EXPECT_GE(report.mean_reward, 0.0);
    EXPECT_LE(report.mean_reward, 1.0);
}
