#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ktr/attribution.hpp"
#include "ktr/fixtures.hpp"
#include "ktr/harness.hpp"
#include "ktr/rng.hpp"

namespace ktr::harness {

namespace {

struct Check {
    const char* name;
    std::function<std::string()> run;  // empty string on success
};

std::string expect_near(double got, double want, double tol, const std::string& what) {
    if (std::abs(got - want) <= tol) return {};
    std::ostringstream s;
    s.precision(17);
    s << what << ": got " << got << ", expected " << want << " (tol " << tol << ")";
    return s.str();
}

std::string check_log_softmax() {
    const auto a = diff::log_softmax(std::vector<double>{2.0, 0.0});
    const double l1 = -std::log1p(std::exp(-2.0));
    if (auto e = expect_near(a[0], l1, 1e-12, "log_softmax([2,0])[0]"); !e.empty()) return e;
    if (auto e = expect_near(a[1], l1 - 2.0, 1e-12, "log_softmax([2,0])[1]"); !e.empty()) return e;
    const auto big = diff::log_softmax(std::vector<double>{1000.0, 0.0});
    if (!std::isfinite(big[1]) || std::abs(big[0]) > 1e-12) return "log_softmax([1000,0]) lost stability";
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(7), y(7);
        const double c = 200.0 * rng.uniform() - 100.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = 6.0 * rng.uniform() - 3.0;
            y[i] = x[i] + c;
        }
        const auto lx = diff::log_softmax(x);
        const auto ly = diff::log_softmax(y);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (std::abs(lx[i] - ly[i]) > 1e-10) return "log_softmax not shift invariant";
        }
    }
    return {};
}

std::string check_backward_analytic() {
    diff::Graph g;
    const auto p = g.parameter(diff::Tensor::vector({1.0, 2.0}));
    const auto grad = g.backward(g.dot(p, p));
    const auto& v = grad.per_parameter.at(0);
    if (v.size() != 2 || v[0] != 2.0 || v[1] != 4.0) return "d/dp dot(p,p) at [1,2] != [2,4]";
    return {};
}

std::string check_gradient(double fault) {
    const auto env = fixtures::tiny_env();
    policy::PolicyModel model(fixtures::tiny_model_config(5), env.frame_vocab);
    rl::RLConfig cfg;
    cfg.kl_beta = 0.4;
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto batch = fixtures::random_batch(model, env, derive_seed(31, s), 3, fixtures::MaskPattern::Random);
        diff::Graph g;
        const auto params = policy::register_parameters(g, model);
        const auto nodes = rl::ktr_objective(g, model, params, batch, cfg);
        worst = std::max(worst, diff::finite_difference_check(g, nodes.loss, 1e-5, fault));
    }
    if (worst < 1e-4) return {};
    std::ostringstream s;
    s << "masked objective: max relative error " << worst << " >= 1e-4";
    return s.str();
}

std::string check_objective_reduction() {
    const auto env = fixtures::tiny_env();
    policy::PolicyModel model(fixtures::tiny_model_config(7), env.frame_vocab);
    rl::RLConfig cfg;
    cfg.kl_beta = 0.0;
    Rng rng(5);
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto batch = fixtures::random_batch(model, env, derive_seed(41, s), 4, fixtures::MaskPattern::AllOnes, 0.3);
        std::vector<std::vector<double>> current;
        for (const auto& r : batch.rollouts) {
            std::vector<double> lp = r.old_log_probs;
            for (auto& x : lp) x += 0.4 * (2.0 * rng.uniform() - 1.0);
            current.push_back(std::move(lp));
        }
        const double eq1 = rl::grpo_objective(batch, current, cfg.clip_epsilon);
        const double eq2 = rl::masked_objective(batch, current, cfg.clip_epsilon);
        if (std::abs(eq1 - eq2) > 1e-12) return "all-ones masked objective differs from GRPO";
        diff::Graph g;
        const auto nodes = rl::ktr_objective(g, model, policy::register_parameters(g, model), batch, cfg);
        const auto scored = [&] {
            std::vector<std::vector<double>> out;
            for (const auto& r : batch.rollouts) {
                out.push_back(policy::score_response(model, r.task.video, r.task.prompt, r.tokens).log_probs);
            }
            return out;
        }();
        const double graph_value = -g.value(nodes.loss).item();
        if (auto e = expect_near(graph_value, rl::grpo_objective(batch, scored, cfg.clip_epsilon), 1e-12,
                                 "graph objective vs GRPO");
            !e.empty()) {
            return e;
        }
    }
    // Hand example: G=2, T=1, ratios 1, A={1,-1}, mask {1,0} -> 0.5.
    rl::GroupBatch hand;
    hand.rollouts.resize(2);
    for (auto& r : hand.rollouts) {
        r.tokens = {0};
        r.old_log_probs = {-0.5};
    }
    hand.advantages = {1.0, -1.0};
    hand.weights = {{1.0}, {0.0}};
    const std::vector<std::vector<double>> same{{-0.5}, {-0.5}};
    return expect_near(rl::masked_objective(hand, same, 0.2), 0.5, 1e-15, "hand-evaluated masked objective");
}

std::string check_attribution_zero() {
    const auto V = 4u;
    diff::Tensor a({3, V}, {0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 1.0, 1.0, -2.0, 0.5, 0.0, 3.0});
    const std::vector<TokenId> toks{2, 0, 3};
    for (std::size_t m = 0; m < attr::kDistanceMetricCount; ++m) {
        for (const double s : attr::token_scores(a, a, toks, static_cast<attr::DistanceMetric>(m))) {
            if (s != 0.0) return "identical logits gave a non-zero score";
        }
    }
    // Identity permutation on a real rollout: no change at all.
    const auto env = fixtures::tiny_env();
    policy::PolicyModel model(fixtures::tiny_model_config(9), env.frame_vocab);
    const auto task = env::generate_task(3, env::Family::Temporal, env);
    const auto rollout = policy::sample_rollout(model, task, 1.0, false, 77);
    const std::vector<std::size_t> identity{0, 1, 2};
    const auto same = env::permute_frames(task.video, identity);
    for (const double s : attr::scores_against(model, rollout, same, attr::DistanceMetric::LogprobDiff)) {
        if (s != 0.0) return "identity permutation gave a non-zero temporal score";
    }
    return {};
}

std::string check_attribution_closed_form() {
    diff::Tensor vis({1, 2}, {2.0, 0.0});
    diff::Tensor masked({1, 2}, {0.0, 0.0});
    const std::vector<TokenId> tok{0};
    const double want = std::abs(-std::log1p(std::exp(-2.0)) + std::log(2.0));
    const auto got = attr::token_scores(vis, masked, tok, attr::DistanceMetric::LogprobDiff);
    return expect_near(got.at(0), want, 1e-12, "z=[2,0] vs [0,0]");
}

std::string check_metric_identities() {
    const std::vector<double> p{1.0, 0.0}, q{0.5, 0.5};
    if (auto e = expect_near(attr::probability_distance(p, q, attr::DistanceMetric::Hellinger),
                             std::sqrt(1.0 - std::sqrt(0.5)), 1e-12, "Hellinger((1,0),(.5,.5))");
        !e.empty()) {
        return e;
    }
    if (auto e = expect_near(attr::probability_distance(p, q, attr::DistanceMetric::L1), 1.0, 1e-15, "L1"); !e.empty()) {
        return e;
    }
    Rng rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> x(5), y(5);
        for (auto& v : x) v = 4.0 * rng.uniform() - 2.0;
        for (auto& v : y) v = 4.0 * rng.uniform() - 2.0;
        for (std::size_t m = 0; m < attr::kDistanceMetricCount; ++m) {
            const auto metric = static_cast<attr::DistanceMetric>(m);
            if (attr::distribution_distance(x, x, metric, 1) > 1e-12) return "d(p,p) != 0";
        }
        const double js = attr::distribution_distance(x, y, attr::DistanceMetric::JS);
        const double js_rev = attr::distribution_distance(y, x, attr::DistanceMetric::JS);
        if (js > std::log(2.0) + 1e-12 || std::abs(js - js_rev) > 1e-12) return "JS not symmetric or above ln 2";
        const double h = attr::distribution_distance(x, y, attr::DistanceMetric::Hellinger);
        if (h < 0.0 || h > 1.0) return "Hellinger outside [0,1]";
    }
    return {};
}

std::string check_entropy() {
    if (auto e = expect_near(attr::entropy(std::vector<double>(4, 0.0)), std::log(4.0), 1e-12, "uniform entropy");
        !e.empty()) {
        return e;
    }
    const double h = attr::entropy(std::vector<double>{std::log(3.0), 0.0});
    if (auto e = expect_near(h, -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)), 1e-12, "H([ln3,0])"); !e.empty()) {
        return e;
    }
    Rng rng(29);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> z(6);
        for (auto& v : z) v = 20.0 * rng.uniform() - 10.0;
        const double v = attr::entropy(z);
        if (v < 0.0 || v > std::log(6.0)) return "entropy outside [0, ln V]";
    }
    return {};
}

std::string check_selection() {
    const std::vector<double> s{0.9, 0.1, 0.5, 0.3, 0.7};
    if (select::top_fraction(s, 0.2) != std::vector<std::size_t>{0}) return "top 20% of example scores != {0}";
    if (select::top_fraction(std::vector<double>(5, 1.0), 0.4) != std::vector<std::size_t>{0, 1}) {
        return "tie-break did not prefer lower indices";
    }
    return {};
}

}  // namespace

int cmd_selftest(std::ostream& log, const SelftestOptions& options) {
    const std::vector<Check> checks{
        {"log-softmax", check_log_softmax},
        {"backward-analytic", check_backward_analytic},
        {"gradient-finite-difference", [&] { return check_gradient(options.gradient_fault); }},
        {"objective-reduction", check_objective_reduction},
        {"attribution-zero-cases", check_attribution_zero},
        {"attribution-closed-form", check_attribution_closed_form},
        {"metric-identities", check_metric_identities},
        {"entropy-bounds", check_entropy},
        {"selection-contracts", check_selection},
    };
    const auto start = std::chrono::steady_clock::now();
    int failed = 0;
    for (const auto& c : checks) {
        std::string err;
        try {
            err = c.run();
        } catch (const std::exception& e) {
            err = std::string("threw: ") + e.what();
        }
        if (err.empty()) {
            log << "PASS " << c.name << '\n';
        } else {
            log << "FAIL " << c.name << ": " << err << '\n';
            ++failed;
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << (failed ? "selftest failed: " : "selftest passed: ") << (checks.size() - failed) << "/" << checks.size()
        << " checks in " << secs << " s\n";
    return failed ? kExitFailure : kExitOk;
}

}  // namespace ktr::harness
