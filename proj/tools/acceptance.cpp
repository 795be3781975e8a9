// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [--only 1,2,...] [--keep]
//
// Criteria 5, 7 and 8 share the six matched training runs; 6 trains its own
// model to the accuracy bar; 9 and 10 use small configs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "ktr/attribution.hpp"
#include "ktr/diagnostics.hpp"
#include "ktr/fixtures.hpp"
#include "ktr/harness.hpp"
#include "ktr/rng.hpp"

using namespace ktr;
namespace h = ktr::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<json> read_jsonl(const fs::path& p) {
    std::vector<json> out;
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

double mean(const std::vector<double>& xs) {
    return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_variance(const std::vector<double>& xs) {
    const double m = mean(xs);
    double s = 0.0;
    for (const double x : xs) s += (x - m) * (x - m);
    return s / static_cast<double>(xs.size() - 1);
}

// One-sided Welch test of mean(a) > mean(b); returns the p-value.
double welch_greater(const std::vector<double>& a, const std::vector<double>& b) {
    const double va = sample_variance(a) / static_cast<double>(a.size());
    const double vb = sample_variance(b) / static_cast<double>(b.size());
    const double se = std::sqrt(va + vb);
    if (se == 0.0) return mean(a) > mean(b) ? 0.0 : 1.0;
    const double t = (mean(a) - mean(b)) / se;
    const double df = (va + vb) * (va + vb) /
                      (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
    return boost::math::cdf(boost::math::complement(boost::math::students_t(df), t));
}

// ---------------------------------------------------------------------------
// 1-4: analytic oracles

Outcome attribution_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    auto check = [&](std::vector<double> ref, std::vector<double> pert, TokenId tok, attr::DistanceMetric m,
                     double want) {
        const auto n = ref.size();
        const diff::Tensor a({1, n}, std::move(ref));
        const diff::Tensor b({1, n}, std::move(pert));
        const std::vector<TokenId> t{tok};
        worst = std::max(worst, std::abs(attr::token_scores(a, b, t, m)[0] - want));
    };
    using M = attr::DistanceMetric;
    // softmax([2,0]) = (e^2, 1)/(e^2+1) against the uniform pair
    const double p0 = std::exp(2.0) / (std::exp(2.0) + 1.0);
    check({2, 0}, {0, 0}, 0, M::LogprobDiff, std::log(p0) - std::log(0.5));
    check({2, 0}, {0, 0}, 0, M::L1, 2.0 * (p0 - 0.5));
    check({2, 0}, {0, 0}, 0, M::L2, std::sqrt(2.0) * (p0 - 0.5));
    check({2, 0}, {0, 0}, 0, M::KL, p0 * std::log(2.0 * p0) + (1 - p0) * std::log(2.0 * (1 - p0)));
    check({2, 0}, {0, 0}, 0, M::Hellinger, std::sqrt(1.0 - std::sqrt(0.5 * p0) - std::sqrt(0.5 * (1 - p0))));
    check({2, 0}, {0, 0}, 0, M::Cosine, 1.0 - (0.5 * p0 + 0.5 * (1 - p0)) / (std::sqrt(0.5) * std::hypot(p0, 1 - p0)));
    // three tokens: log 3 against a one-hot-ish shift on the target
    check({std::log(2.0), 0, 0}, {0, 0, 0}, 0, M::LogprobDiff, std::log(0.5) - std::log(1.0 / 3.0));
    check({0, 0, 0}, {std::log(2.0), 0, 0}, 1, M::LogprobDiff, std::log(1.0 / 3.0) - std::log(0.25));
    // four tokens, JS between (1/2,1/2,0,0)-like and uniform, computed from the mixture
    {
        const std::vector<double> p{0.4, 0.3, 0.2, 0.1};
        std::vector<double> z(4);
        for (std::size_t i = 0; i < 4; ++i) z[i] = std::log(p[i]);
        double js = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            const double mix = 0.5 * (p[i] + 0.25);
            js += 0.5 * p[i] * std::log(p[i] / mix) + 0.5 * 0.25 * std::log(0.25 / mix);
        }
        check(z, {0, 0, 0, 0}, 2, M::JS, js);
        check(z, {0, 0, 0, 0}, 2, M::LogprobDiff, std::log(0.25) - std::log(0.2));
    }
    const double closed = attr::token_scores(diff::Tensor({1, 2}, {2, 0}), diff::Tensor({1, 2}, {0, 0}),
                                             std::vector<TokenId>{0}, M::LogprobDiff)[0];

    // identity perturbations on a real model are exactly zero
    bool zero = true;
    const auto env = fixtures::tiny_env();
    const policy::PolicyModel model(fixtures::tiny_model_config(9), env.frame_vocab);
    for (std::uint64_t s = 0; s < 6; ++s) {
        const auto task = env::generate_task(s, env::family_for_index(s), env);
        const auto r = policy::sample_rollout(model, task, 1.0, false, s);
        const std::vector<std::size_t> id{0, 1, 2};
        for (std::size_t m = 0; m < attr::kDistanceMetricCount; ++m) {
            for (const double x : attr::scores_against(model, r, env::permute_frames(task.video, id),
                                                       static_cast<attr::DistanceMetric>(m))) {
                zero = zero && x == 0.0;
            }
            for (const double x : attr::scores_against(model, r, task.video, static_cast<attr::DistanceMetric>(m))) {
                zero = zero && x == 0.0;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-10 && zero && secs < 1.0 && std::abs(closed - 0.5662) < 5e-5,
            fmt("z=[2,0] vs [0,0] -> %.4f; max closed-form error %.2e (tol 1e-10); identity exact zero: %s; %.3f s",
                closed, worst, zero ? "yes" : "no", secs)};
}

Outcome entropy_bounds() {
    Rng rng(2);
    std::size_t violations = 0;
    for (int i = 0; i < 10000; ++i) {
        const std::size_t V = 2 + rng.below(40);
        std::vector<double> z(V);
        const double scale = std::pow(10.0, 3.0 * rng.uniform() - 1.0);
        for (auto& x : z) x = scale * rng.normal();
        const double hz = attr::entropy(z);
        violations += !(hz >= 0.0 && hz <= std::log(static_cast<double>(V)));
    }
    double worst_uniform = 0.0;
    for (std::size_t V = 2; V <= 64; ++V) {
        const std::vector<double> z(V, rng.normal());
        worst_uniform = std::max(worst_uniform, std::abs(attr::entropy(z) - std::log(static_cast<double>(V))));
    }
    return {violations == 0 && worst_uniform <= 1e-12,
            fmt("10000 random logit vectors, %zu outside [0, ln V]; uniform max |H - ln V| = %.2e (tol 1e-12)",
                violations, worst_uniform)};
}

Outcome objective_reduction() {
    const auto env = fixtures::tiny_env();
    double worst = 0.0;
    Rng rng(3);
    for (std::uint64_t s = 0; s < 100; ++s) {
        const policy::PolicyModel model(fixtures::tiny_model_config(100 + s % 7), env.frame_vocab);
        const auto batch = fixtures::random_batch(model, env, derive_seed(51, s), 2 + s % 6,
                                                  fixtures::MaskPattern::AllOnes, 0.3);
        std::vector<std::vector<double>> current;
        for (const auto& r : batch.rollouts) {
            auto lp = r.old_log_probs;
            for (auto& x : lp) x += 0.5 * (2.0 * rng.uniform() - 1.0);
            current.push_back(std::move(lp));
        }
        worst = std::max(worst, std::abs(rl::grpo_objective(batch, current, 0.2) -
                                         rl::masked_objective(batch, current, 0.2)));
        // and through the differentiable route at the current parameters
        rl::RLConfig cfg;
        cfg.kl_beta = 0.0;
        diff::Graph g;
        const auto nodes = rl::ktr_objective(g, model, policy::register_parameters(g, model), batch, cfg);
        std::vector<std::vector<double>> scored;
        for (const auto& r : batch.rollouts) {
            scored.push_back(policy::score_response(model, r.task.video, r.task.prompt, r.tokens).log_probs);
        }
        worst = std::max(worst, std::abs(-g.value(nodes.loss).item() - rl::grpo_objective(batch, scored, 0.2)));
    }
    return {worst <= 1e-12, fmt("100 random batches, beta=0: max |masked(all-ones) - GRPO| = %.2e (tol 1e-12)", worst)};
}

Outcome gradient_correctness() {
    const auto env = fixtures::tiny_env();
    const policy::PolicyModel model(fixtures::tiny_model_config(5), env.frame_vocab);
    double worst = 0.0;
    bool masked_zero = true;
    for (std::uint64_t s = 0; s < 20; ++s) {
        rl::RLConfig cfg;
        cfg.kl_beta = s % 2 ? 0.4 : 0.0;
        auto batch = fixtures::random_batch(model, env, derive_seed(61, s), 3, fixtures::MaskPattern::Random);
        diff::Graph g;
        const auto params = policy::register_parameters(g, model);
        const auto nodes = rl::ktr_objective(g, model, params, batch, cfg);
        worst = std::max(worst, diff::finite_difference_check(g, nodes.loss, 1e-5));

        // Surrogate gradient must not see masked-out tokens: rewriting their
        // old log-probs leaves it bit-identical.
        cfg.kl_beta = 0.0;
        diff::Graph g1;
        const auto grad1 = g1.backward(rl::ktr_objective(g1, model, policy::register_parameters(g1, model), batch, cfg).loss);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (std::size_t t = 0; t < batch.weights[i].size(); ++t) {
                if (batch.weights[i][t] == 0.0) batch.rollouts[i].old_log_probs[t] -= 3.0;
            }
        }
        diff::Graph g2;
        const auto grad2 = g2.backward(rl::ktr_objective(g2, model, policy::register_parameters(g2, model), batch, cfg).loss);
        masked_zero = masked_zero && grad1.per_parameter == grad2.per_parameter;
    }
    return {worst <= 1e-4 && masked_zero,
            fmt("2-layer model, 20 random masks: max FD relative error %.2e (tol 1e-4); masked tokens contribute "
                "exactly zero: %s",
                worst, masked_zero ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// Shared training runs (criteria 5, 7, 8)

constexpr std::array<std::uint64_t, 3> kSeeds{1, 2, 3};
constexpr std::size_t kRunSteps = 500;

json matched_run_config(std::uint64_t seed, rl::Method method) {
    auto c = h::default_config();
    c.method = method;
    c.run.steps = kRunSteps;
    c.run.master_seed = seed;
    c.run.diagnostics_interval = 5;
    c.run.eval_interval = 50;
    return h::config_to_json(c);
}

fs::path run_dir(const fs::path& work, std::uint64_t seed, rl::Method method) {
    return work / "matched" / (std::string(rl::method_name(method)) + "-seed" + std::to_string(seed));
}

// Runs (or reuses, when a finished run with the same config exists) one matched run.
// Returns the training wall time, measured when the run was made; negative on failure.
double ensure_run(const fs::path& dir, const json& cfg) {
    const auto timing = dir / "acceptance_seconds.txt";
    if (fs::exists(dir / "report" / "summary.json") && fs::exists(dir / "checkpoints" / "final.ckpt") &&
        fs::exists(timing) && json::parse(slurp(dir / "config.json")) == cfg) {
        return std::stod(slurp(timing));
    }
    fs::remove_all(dir);
    std::ostringstream log;
    const auto t0 = std::chrono::steady_clock::now();
    const int code = h::cmd_train(h::config_from_json(cfg), dir, log, {true});
    const double secs = seconds_since(t0);
    std::cerr << "  trained " << dir.filename().string() << " in " << fmt("%.0f", secs) << " s (exit " << code
              << ")\n";
    if (code != h::kExitOk) return -1.0;
    std::ofstream(timing) << fmt("%.3f", secs) << '\n';
    return secs;
}

struct MatchedRuns {
    bool ok = true;
    double seconds = 0.0;  // summed training time, including runs reused from an earlier invocation
};

MatchedRuns matched_runs(const fs::path& work) {
    MatchedRuns m;
    for (const auto seed : kSeeds) {
        for (const auto method : {rl::Method::Ktr, rl::Method::Grpo}) {
            const double secs = ensure_run(run_dir(work, seed, method), matched_run_config(seed, method));
            if (secs < 0.0) m.ok = false;
            else m.seconds += secs;
        }
    }
    return m;
}

Outcome selection_contracts(const fs::path& work) {
    std::size_t rollouts = 0, size_violations = 0, union_violations = 0, density_violations = 0;
    double max_density = 0.0, total_density = 0.0;
    auto check_mask = [&](const select::TokenMask& m, double ratio, bool three_signals) {
        const auto want = select::selection_size(m.length(), ratio);
        const auto expect = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(m.length()) - 1e-9));
        for (const auto* set : {&m.visual, &m.temporal, &m.entropy}) {
            size_violations += set->size() != want || want != std::max<std::size_t>(1, expect);
        }
        const double d = m.density();
        union_violations += m.popcount() > m.visual.size() + m.temporal.size() + m.entropy.size();
        if (three_signals && ratio == 0.2) {
            density_violations += d > 0.6 + 1e-12;
            max_density = std::max(max_density, d);
            total_density += d;
            ++rollouts;
        }
    };
    // trained rollouts from the matched KTR runs
    std::size_t trained = 0;
    for (const auto seed : kSeeds) {
        for (const auto& rec : read_jsonl(run_dir(work, seed, rl::Method::Ktr) / "masks.jsonl")) {
            check_mask(select::mask_from_json(rec.dump()).mask, 0.2, true);
            ++trained;
        }
    }
    // random profiles over a spread of lengths and ratios
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
        attr::AttributionProfile p;
        const std::size_t T = 1 + rng.below(30);
        for (std::size_t t = 0; t < T; ++t) {
            p.visual.push_back(rng.uniform());
            p.temporal.push_back(rng.uniform());
            p.entropy.push_back(rng.uniform());
        }
        select::SelectionConfig cfg;
        cfg.ratio = std::array{0.1, 0.2, 0.3, 0.4, 0.5}[rng.below(5)];
        check_mask(select::build_mask(p, cfg), cfg.ratio, false);
    }
    const bool pass = trained > 0 && size_violations == 0 && union_violations == 0 && density_violations == 0;
    return {pass, fmt("%zu trained rollouts: max density %.3f, mean %.3f (<= 0.6 required; %zu over); "
                      "|S_x| != ceil(rT): %zu; union > sum of set sizes: %zu",
                      trained, max_density, rollouts ? total_density / rollouts : 0.0, density_violations,
                      size_violations, union_violations)};
}

Outcome gradient_alignment(const fs::path& work) {
    std::vector<double> cos_ktr, cos_rest, sel, masked;
    double max_add = 0.0;
    std::size_t steps = 0;
    for (const auto seed : kSeeds) {
        for (const auto& rec : read_jsonl(run_dir(work, seed, rl::Method::Ktr) / "grad_stats.jsonl")) {
            const auto d = diag::grad_decomposition_from_json(rec);
            ++steps;
            max_add = std::max(max_add, d.additivity_error);
            if (d.cos_ktr_full) cos_ktr.push_back(*d.cos_ktr_full);
            if (d.cos_rest_full) cos_rest.push_back(*d.cos_rest_full);
            if (d.selected_token_norm) sel.push_back(*d.selected_token_norm);
            if (d.masked_token_norm) masked.push_back(*d.masked_token_norm);
        }
    }
    const bool pass = steps >= 100 && mean(cos_ktr) > mean(cos_rest) && mean(sel) > mean(masked) && max_add <= 1e-10;
    return {pass, fmt("%zu diagnostic steps: cos(g_KTR,g_full) %.3f vs cos(g_rest,g_full) %.3f; token |g| selected "
                      "%.3g vs masked %.3g (x%.2f); max additivity error %.2e (tol 1e-10)",
                      steps, mean(cos_ktr), mean(cos_rest), mean(sel), mean(masked),
                      mean(masked) > 0 ? mean(sel) / mean(masked) : 0.0, max_add)};
}

Outcome training_dynamics(const fs::path& work, double seconds) {
    std::vector<double> var_ktr, var_grpo, eval_ktr, eval_grpo;
    for (const auto seed : kSeeds) {
        for (const auto method : {rl::Method::Ktr, rl::Method::Grpo}) {
            const auto s = json::parse(slurp(run_dir(work, seed, method) / "report" / "summary.json"));
            auto& v = method == rl::Method::Ktr ? var_ktr : var_grpo;
            auto& e = method == rl::Method::Ktr ? eval_ktr : eval_grpo;
            v.push_back(s.at("mean-loss-variance").get<double>());
            e.push_back(s.at("final-eval-reward").get<double>());
        }
    }
    const bool pass = mean(var_ktr) <= mean(var_grpo) && mean(eval_ktr) >= mean(eval_grpo) - 0.02 &&
                      seconds < 2.0 * 3600.0;
    return {pass, fmt("3 seeds x %zu steps: loss variance (W=20) KTR %.3g vs GRPO %.3g; final eval KTR %.3f vs GRPO "
                      "%.3f (>= -0.02 required); %.0f s",
                      kRunSteps, mean(var_ktr), mean(var_grpo), mean(eval_ktr), mean(eval_grpo), seconds)};
}

// ---------------------------------------------------------------------------
// 6: modality validation

constexpr double kAccuracyBar = 0.90;
constexpr std::size_t kEpisodesPerFamily = 200;

Outcome modality_validation(const fs::path& work) {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = h::default_config();
    cfg.run.eval_size = 300;
    const auto evals = h::eval_tasks(cfg);
    const auto ckpt = work / "modality" / "trained.ckpt";

    policy::PolicyModel model(cfg.resolved_model(), cfg.env.frame_vocab);
    double acc = 0.0;
    std::size_t steps = 0;
    if (fs::exists(ckpt)) {
        model = policy::load_checkpoint(ckpt.string());
        acc = rl::evaluate(model, evals).mean_reward;
    }
    // Gold-answer warm-up in chunks until the held-out accuracy clears the bar.
    rl::WarmupConfig w;
    w.steps = 100;
    w.batch = 32;
    w.learning_rate = 1e-3;
    w.gold_fraction = 1.0;
    while (acc < kAccuracyBar && steps < 10000) {
        rl::supervised_warmup(model, cfg.env, w, derive_seed(77, steps));
        steps += w.steps;
        acc = rl::evaluate(model, evals).mean_reward;
        std::cerr << "  modality warm-up " << steps << " steps: eval " << fmt("%.3f", acc) << '\n';
    }
    fs::create_directories(ckpt.parent_path());
    policy::save_checkpoint(model, ckpt.string());
    if (acc < kAccuracyBar) return {false, fmt("eval accuracy %.3f never reached %.2f", acc, kAccuracyBar)};

    // Answer-token shifts on fresh greedy episodes.
    std::array<std::vector<double>, 3> vis, tmp;
    const auto& vocab = model.vocab();
    for (std::size_t f = 0; f < 3; ++f) {
        const auto family = static_cast<env::Family>(f);
        for (std::size_t i = 0; vis[f].size() < kEpisodesPerFamily; ++i) {
            const auto task = env::generate_task(derive_seed(derive_seed(313, f), i), family, cfg.env);
            const auto r = policy::sample_rollout(model, task, 1.0, true, i);
            const auto marker = std::find(r.tokens.begin(), r.tokens.end(), vocab.answer_marker());
            if (marker == r.tokens.end() || marker + 1 == r.tokens.end()) continue;
            const auto pos = static_cast<std::size_t>(marker - r.tokens.begin()) + 1;
            vis[f].push_back(attr::visual_scores(model, r, cfg.attribution.kinds.visual, cfg.attribution.metric,
                                                 derive_seed(17, i))[pos]);
            tmp[f].push_back(attr::temporal_scores(model, r, cfg.attribution.kinds.temporal, cfg.attribution.metric,
                                                   derive_seed(19, i))[pos]);
        }
    }
    constexpr auto V = static_cast<std::size_t>(env::Family::Visual);
    constexpr auto T = static_cast<std::size_t>(env::Family::Temporal);
    constexpr auto S = static_cast<std::size_t>(env::Family::Static);
    const double p_temp = welch_greater(tmp[T], tmp[S]);
    const double p_vis = welch_greater(vis[V], vis[S]);
    const bool pass = p_temp < 0.01 && p_vis < 0.01;
    return {pass, fmt("eval %.3f after %zu extra steps; %zu episodes/family; temporal shift TEMPORAL %.3f vs STATIC "
                      "%.3f (p=%.1e); visual shift VISUAL %.3f vs STATIC %.3f (p=%.1e); %.0f s",
                      acc, steps, kEpisodesPerFamily, mean(tmp[T]), mean(tmp[S]), p_temp, mean(vis[V]),
                      mean(vis[S]), p_vis, seconds_since(t0))};
}

// ---------------------------------------------------------------------------
// 9, 10: harness shape and determinism

json small_config() {
    json j = h::config_to_json(h::default_config());
    j["env"]["frames"] = 3;
    j["env"]["slots"] = 2;
    j["env"]["frame_vocab"] = 8;
    j["model"] = {{"embed_dim", 16}, {"layers", 2}, {"heads", 2}, {"mlp_hidden", 16},
                  {"max_seq_len", 16}, {"max_response_len", 6}, {"init_std", 0.3}};
    j["rl"]["group_size"] = 4;
    j["rl"]["tasks_per_step"] = 2;
    j["warmup"]["steps"] = 100;
    j["warmup"]["batch"] = 8;
    j["run"]["steps"] = 4;
    j["run"]["eval_size"] = 12;
    j["run"]["eval_interval"] = 2;
    j["run"]["diagnostics_interval"] = 2;
    return j;
}

// Byte comparison of every file under two directories.
bool same_tree(const fs::path& a, const fs::path& b, std::string& first_diff) {
    std::set<std::string> names;
    for (const auto* root : {&a, &b}) {
        for (const auto& e : fs::recursive_directory_iterator(*root)) {
            if (e.is_regular_file()) names.insert(fs::relative(e.path(), *root).string());
        }
    }
    for (const auto& n : names) {
        if (!fs::exists(a / n) || !fs::exists(b / n) || slurp(a / n) != slurp(b / n)) {
            first_diff = n;
            return false;
        }
    }
    return true;
}

Outcome ablation_shape(const fs::path& work) {
    const std::map<std::string, std::size_t> expected{
        {"signals", 8}, {"weighting", 5}, {"distance", 7}, {"ratio", 5}, {"perturbation", 6}};
    std::string detail;
    bool pass = true;
    for (const auto axis : h::kAblationAxes) {
        const std::string name(axis);
        const auto variants = h::ablation_variants(axis);
        auto cfg = small_config();
        cfg["run"]["steps"] = 2;
        const auto a = work / "ablate" / (name + "-a");
        const auto b = work / "ablate" / (name + "-b");
        fs::remove_all(a);
        fs::remove_all(b);
        std::ostringstream log;
        const int ca = h::cmd_ablate(axis, cfg, a, log);
        const int cb = h::cmd_ablate(axis, cfg, b, log);

        std::size_t children = 0;
        bool paired = true;
        std::string first_init;
        for (const auto& v : variants) {
            const auto init = slurp(a / v.name / "checkpoints" / "initial.ckpt");
            if (first_init.empty()) first_init = init;
            paired = paired && !init.empty() && init == first_init;
            children += fs::exists(a / v.name / "metrics.jsonl");
        }
        std::string diff;
        const bool repro = same_tree(a, b, diff);
        const bool ok = ca == 0 && cb == 0 && variants.size() == expected.at(name) && children == variants.size() &&
                        paired && repro;
        pass = pass && ok;
        detail += fmt("%s %zu/%zu%s%s; ", name.c_str(), children, expected.at(name), paired ? "" : " unpaired",
                      repro ? "" : (" differs at " + diff).c_str());
    }
    detail += "children seed-paired and byte-reproducible";
    return {pass, detail};
}

Outcome determinism(const fs::path& work) {
    std::string detail;
    bool pass = true;
    for (const auto method : {rl::Method::Ktr, rl::Method::Grpo}) {
        auto cfg = small_config();
        cfg["run"]["steps"] = 12;
        cfg["rl"]["method"] = rl::method_name(method);
        const std::string name(rl::method_name(method));
        const auto a = work / "determinism" / (name + "-a");
        const auto b = work / "determinism" / (name + "-b");
        fs::remove_all(a);
        fs::remove_all(b);
        std::ostringstream log;
        const int ca = h::cmd_train(h::config_from_json(cfg), a, log, {true});
        const int cb = h::cmd_train(h::config_from_json(cfg), b, log, {true});
        std::string diff;
        const bool same = same_tree(a, b, diff);
        pass = pass && ca == 0 && cb == 0 && same;
        detail += fmt("%s: %s; ", name.c_str(), same ? "byte-identical" : ("differs at " + diff).c_str());
    }
    detail += "metrics, dumps, checkpoints and report compared file by file";
    return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string work_opt;
    std::vector<int> only;
    bool keep = false;
    app.add_option("--work", work_opt, "Working directory (default: $VIDEOKTR_RUNS/acceptance)");
    app.add_option("--only", only, "Criterion numbers to run")->delimiter(',');
    app.add_flag("--keep", keep, "Keep the working directory");
    CLI11_PARSE(app, argc, argv);

    fs::path work = work_opt.empty() ? h::resolve_run_dir("acceptance") : fs::path(work_opt);
    if (work.is_relative() && !std::getenv(h::kRunsRootEnv)) work = fs::temp_directory_path() / "videoktr-acceptance";
    fs::create_directories(work);
    auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

    std::optional<MatchedRuns> runs;
    auto need_runs = [&]() -> const MatchedRuns& {
        if (!runs) runs = matched_runs(work);
        return *runs;
    };

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"attribution oracle", attribution_oracle},
        {"entropy bounds", entropy_bounds},
        {"objective reduction", objective_reduction},
        {"gradient correctness", gradient_correctness},
        {"selection contracts", [&] { need_runs(); return selection_contracts(work); }},
        {"modality validation", [&] { return modality_validation(work); }},
        {"gradient alignment", [&] { need_runs(); return gradient_alignment(work); }},
        {"training dynamics",
         [&] {
             const auto& r = need_runs();
             if (!r.ok) return Outcome{false, "a matched training run failed"};
             return training_dynamics(work, r.seconds);
         }},
        {"ablation harness shape", [&] { return ablation_shape(work); }},
        {"determinism", [&] { return determinism(work); }},
    };

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i + 1);
        if (!wanted(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << n << "] " << criteria[i].first << ": " << o.detail
                  << std::endl;
    }
    if (!keep && work_opt.empty() && !std::getenv(h::kRunsRootEnv)) fs::remove_all(work);
    return failed ? 1 : 0;
}
