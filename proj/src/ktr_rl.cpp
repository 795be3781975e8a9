#include "ktr/ktr_rl.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>

#include "ktr/rng.hpp"

namespace ktr::rl {

using diff::Graph;
using diff::NodeId;
using diff::Tensor;

namespace {

std::atomic<std::uint64_t> g_ratio_clamps{0};

// Runs fn(i) for i in [0, n) in parallel, then rethrows the first failure by index.
template <class Fn>
void parallel_for_each(std::size_t n, Fn&& fn) {
    std::vector<std::exception_ptr> errors(n);
    const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < count; ++i) {
        try {
            fn(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

NodeId add_all(Graph& graph, const std::vector<NodeId>& terms) {
    NodeId acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = graph.add(acc, terms[i]);
    return acc;
}

}  // namespace

std::string_view method_name(Method method) { return method == Method::Ktr ? "ktr" : "grpo"; }

Method parse_method(std::string_view name) {
    if (name == "ktr") return Method::Ktr;
    if (name == "grpo") return Method::Grpo;
    throw std::invalid_argument("unknown method '" + std::string(name) + "' (expected ktr or grpo)");
}

void RLConfig::validate() const {
    if (group_size < 2) throw std::invalid_argument("rl.group_size must be >= 2");
    if (tasks_per_step < 1) throw std::invalid_argument("rl.tasks_per_step must be >= 1");
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw std::invalid_argument("rl.clip_epsilon must lie in (0, 1)");
    if (!(kl_beta >= 0.0)) throw std::invalid_argument("rl.kl_beta must be >= 0");
    if (!(learning_rate >= 0.0 && std::isfinite(learning_rate))) throw std::invalid_argument("rl.learning_rate must be finite and >= 0");
    if (!(advantage_epsilon > 0.0)) throw std::invalid_argument("rl.advantage_epsilon must be > 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("rl.temperature must be > 0");
}

std::vector<double> normalize_advantages(std::span<const double> rewards, double eps) {
    if (rewards.size() < 2) throw std::invalid_argument("normalize_advantages: need at least two rewards");
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    bool all_equal = true;
    double var = 0.0;
    for (const double r : rewards) {
        all_equal = all_equal && r == rewards.front();
        var += (r - mean) * (r - mean);
    }
    std::vector<double> out(rewards.size(), 0.0);
    if (all_equal) return out;
    const double denom = std::sqrt(var / n) + eps;
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
    return out;
}

double likelihood_ratio(double new_log_prob, double old_log_prob) {
    if (!std::isfinite(new_log_prob) || !std::isfinite(old_log_prob)) {
        throw std::domain_error("likelihood_ratio: non-finite log-probability");
    }
    double d = new_log_prob - old_log_prob;
    if (std::abs(d) > kRatioExponentLimit) {
        g_ratio_clamps.fetch_add(1, std::memory_order_relaxed);
        d = std::clamp(d, -kRatioExponentLimit, kRatioExponentLimit);
    }
    return std::exp(d);
}

std::uint64_t ratio_clamp_warnings() { return g_ratio_clamps.load(std::memory_order_relaxed); }

double surrogate_term(double ratio, double advantage, double epsilon) {
    return std::min(ratio * advantage, std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage);
}

double kl_estimate(double new_log_prob, double ref_log_prob) {
    const double d = ref_log_prob - new_log_prob;
    return std::exp(d) - d - 1.0;
}

ObjectiveNodes ktr_objective(Graph& graph, const policy::PolicyModel& model, const policy::ParamNodes& params,
                             const GroupBatch& batch, const RLConfig& config, bool with_token_losses) {
    const auto G = batch.size();
    if (G == 0) throw std::invalid_argument("ktr_objective: empty group");
    if (batch.advantages.size() != G || batch.weights.size() != G) {
        throw std::invalid_argument("ktr_objective: advantages and masks must cover every rollout");
    }
    const bool use_kl = config.kl_beta > 0.0;
    if (use_kl && batch.ref_log_probs.size() != G) {
        throw std::invalid_argument("ktr_objective: reference log-probs required when kl_beta > 0");
    }
    bool any_weight = false;
    for (std::size_t i = 0; i < G; ++i) {
        const auto T = batch.rollouts[i].length();
        if (batch.weights[i].size() != T || batch.rollouts[i].old_log_probs.size() != T) {
            throw std::invalid_argument("ktr_objective: mask length does not match rollout " + std::to_string(i));
        }
        if (use_kl && batch.ref_log_probs[i].size() != T) {
            throw std::invalid_argument("ktr_objective: reference log-probs do not match rollout " + std::to_string(i));
        }
        for (const double w : batch.weights[i]) any_weight = any_weight || w != 0.0;
    }
    if (!any_weight) throw std::invalid_argument("ktr_objective: mask is all-zero across the batch");

    ObjectiveNodes out{};
    std::vector<NodeId> surrogate_terms;
    std::vector<NodeId> kl_terms;
    const double eps = config.clip_epsilon;
    for (std::size_t i = 0; i < G; ++i) {
        const auto& r = batch.rollouts[i];
        const auto T = r.length();
        const double norm = 1.0 / (static_cast<double>(G) * static_cast<double>(T));
        const double adv = batch.advantages[i];

        const auto nodes = policy::build_response_graph(graph, model, params, r.task.video, r.task.prompt, r.tokens);
        const NodeId new_lp = nodes.token_log_probs;
        const NodeId log_ratio = graph.sub(new_lp, graph.constant(Tensor::vector(r.old_log_probs)));
        for (const double d : graph.value(log_ratio).data()) {
            if (std::abs(d) > kRatioExponentLimit) g_ratio_clamps.fetch_add(1, std::memory_order_relaxed);
        }
        const NodeId ratio = graph.exp(graph.clamp(log_ratio, -kRatioExponentLimit, kRatioExponentLimit));
        const NodeId unclipped = graph.scale(ratio, adv);
        const NodeId clipped = graph.scale(graph.clamp(ratio, 1.0 - eps, 1.0 + eps), adv);
        const NodeId term = graph.minimum(unclipped, clipped);
        surrogate_terms.push_back(graph.scale(graph.dot(term, graph.constant(Tensor::vector(batch.weights[i]))), norm));

        if (with_token_losses) {
            std::vector<NodeId> per_token;
            per_token.reserve(T);
            for (std::size_t t = 0; t < T; ++t) per_token.push_back(graph.scale(graph.element(term, t), -norm));
            out.token_losses.push_back(std::move(per_token));
        }

        if (use_kl) {
            const NodeId delta = graph.sub(graph.constant(Tensor::vector(batch.ref_log_probs[i])), new_lp);
            const NodeId kl_tok = graph.add_scalar(graph.sub(graph.exp(delta), delta), -1.0);
            kl_terms.push_back(graph.scale(graph.sum(kl_tok), norm));
        }
    }
    out.surrogate = add_all(graph, surrogate_terms);
    if (use_kl) {
        out.kl = add_all(graph, kl_terms);
        out.loss = graph.scale(graph.sub(out.surrogate, graph.scale(out.kl, config.kl_beta)), -1.0);
    } else {
        out.kl = graph.constant(Tensor::scalar(0.0));
        out.loss = graph.scale(out.surrogate, -1.0);
    }
    return out;
}

namespace {

double plain_objective(const GroupBatch& batch, std::span<const std::vector<double>> new_log_probs,
                       double clip_epsilon, bool masked) {
    const auto G = batch.size();
    if (new_log_probs.size() != G || batch.advantages.size() != G) {
        throw std::invalid_argument("objective: one log-prob array and advantage per rollout required");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < G; ++i) {
        const auto& r = batch.rollouts[i];
        const auto T = r.length();
        if (new_log_probs[i].size() != T) throw std::invalid_argument("objective: log-prob length mismatch");
        double inner = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            const double ratio = likelihood_ratio(new_log_probs[i][t], r.old_log_probs[t]);
            const double w = masked ? batch.weights.at(i).at(t) : 1.0;
            inner += w * surrogate_term(ratio, batch.advantages[i], clip_epsilon);
        }
        total += inner / static_cast<double>(T);
    }
    return total / static_cast<double>(G);
}

}  // namespace

double grpo_objective(const GroupBatch& batch, std::span<const std::vector<double>> new_log_probs,
                      double clip_epsilon) {
    return plain_objective(batch, new_log_probs, clip_epsilon, false);
}

double masked_objective(const GroupBatch& batch, std::span<const std::vector<double>> new_log_probs,
                        double clip_epsilon) {
    return plain_objective(batch, new_log_probs, clip_epsilon, true);
}

// ---------------------------------------------------------------------------

GroupBatch prepare_group(const policy::PolicyModel& model, const policy::PolicyModel& reference,
                         const env::Task& task, const TrainSettings& settings, std::uint64_t seed,
                         std::uint64_t first_rollout_id) {
    const auto& rl = settings.rl;
    GroupBatch batch;
    batch.rollouts = policy::sample_rollouts(model, task, {rl.group_size, rl.temperature, false},
                                             derive_seed(seed, "sample"), first_rollout_id);
    const auto G = batch.size();
    std::vector<double> rewards(G);
    for (std::size_t i = 0; i < G; ++i) rewards[i] = batch.rollouts[i].reward;
    batch.advantages = normalize_advantages(rewards, rl.advantage_epsilon);

    batch.weights.resize(G);
    batch.masks.resize(G);
    if (settings.method == Method::Ktr) {
        batch.profiles.resize(G);
        const auto attr_seed = derive_seed(seed, "attribution");
        parallel_for_each(G, [&](std::size_t i) {
            const auto& r = batch.rollouts[i];
            batch.profiles[i] = attr::compute_profile(model, r, settings.attribution, derive_seed(attr_seed, r.id));
            batch.masks[i] = select::build_mask(batch.profiles[i], settings.selection);
            if (settings.selection.mode == select::WeightingMode::BinaryTopK) {
                batch.weights[i].assign(batch.masks[i].bits.begin(), batch.masks[i].bits.end());
            } else {
                batch.weights[i] = select::build_weights(batch.profiles[i], settings.selection).weights;
            }
        });
    } else {
        for (std::size_t i = 0; i < G; ++i) {
            batch.masks[i] = select::full_mask(batch.rollouts[i].length());
            batch.weights[i].assign(batch.rollouts[i].length(), 1.0);
        }
    }

    if (rl.kl_beta > 0.0) {
        batch.ref_log_probs.resize(G);
        parallel_for_each(G, [&](std::size_t i) {
            const auto& r = batch.rollouts[i];
            batch.ref_log_probs[i] = policy::score_response(reference, r.task.video, r.task.prompt, r.tokens).log_probs;
        });
    }
    return batch;
}

BatchGradient batch_gradient(const policy::PolicyModel& model, std::span<const GroupBatch> groups,
                             const RLConfig& config) {
    if (groups.empty()) throw std::invalid_argument("batch_gradient: no groups");
    struct Partial {
        diff::GradientVector grad;
        double loss = 0.0;
        double surrogate = 0.0;
        double kl = 0.0;
    };
    std::vector<Partial> partials(groups.size());
    parallel_for_each(groups.size(), [&](std::size_t g) {
        Graph graph;
        const auto params = policy::register_parameters(graph, model);
        const auto nodes = ktr_objective(graph, model, params, groups[g], config);
        partials[g].grad = graph.backward(nodes.loss);
        partials[g].loss = graph.value(nodes.loss).item();
        partials[g].surrogate = graph.value(nodes.surrogate).item();
        partials[g].kl = graph.value(nodes.kl).item();
    });

    BatchGradient out;
    for (const auto& p : partials) {
        out.gradient += p.grad;
        out.loss += p.loss;
        out.surrogate += p.surrogate;
        out.kl += p.kl;
    }
    const double inv = 1.0 / static_cast<double>(groups.size());
    out.gradient.scale(inv);
    out.loss *= inv;
    out.surrogate *= inv;
    out.kl *= inv;
    return out;
}

StepReport train_step(policy::PolicyModel& model, const policy::PolicyModel& reference,
                      std::span<const env::Task> tasks, const TrainSettings& settings, std::uint64_t seed,
                      std::size_t step, std::vector<GroupBatch>* groups_out) {
    settings.rl.validate();
    if (settings.method == Method::Ktr) settings.selection.validate();
    const auto start = std::chrono::steady_clock::now();

    StepReport report;
    report.step = step;
    const auto G = settings.rl.group_size;
    std::vector<GroupBatch> groups;
    groups.reserve(tasks.size());
    try {
        for (std::size_t j = 0; j < tasks.size(); ++j) {
            const auto first_id = (static_cast<std::uint64_t>(step) * tasks.size() + j) * G;
            groups.push_back(prepare_group(model, reference, tasks[j], settings, derive_seed(seed, j), first_id));
        }

        double reward_sum = 0.0;
        double density_sum = 0.0;
        std::size_t rollouts = 0;
        for (const auto& g : groups) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                reward_sum += g.rollouts[i].reward;
                const auto& w = g.weights[i];
                density_sum += std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
                ++rollouts;
            }
        }
        report.mean_reward = reward_sum / static_cast<double>(rollouts);
        report.mask_density = density_sum / static_cast<double>(rollouts);

        const auto bg = batch_gradient(model, groups, settings.rl);
        report.loss = bg.loss;
        report.surrogate = bg.surrogate;
        report.kl = bg.kl;
        report.grad_norm = bg.gradient.norm();
        if (!std::isfinite(report.loss) || !std::isfinite(report.grad_norm)) {
            throw std::domain_error("non-finite loss or gradient");
        }
        // An update that overflows is rolled back rather than left in the model.
        const auto before = model.parameters();
        model.apply_gradient(bg.gradient, settings.rl.learning_rate);
        for (const auto& t : model.parameters()) {
            if (!t.all_finite()) {
                model.parameters() = before;
                throw std::domain_error("update produced non-finite parameters");
            }
        }
    } catch (const std::domain_error& e) {
        report.aborted = true;
        report.abort_reason = e.what();
    }

    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (groups_out != nullptr) *groups_out = std::move(groups);
    return report;
}

// ---------------------------------------------------------------------------

void WarmupConfig::validate() const {
    if (batch < 1) throw std::invalid_argument("warmup.batch must be >= 1");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("warmup.learning_rate must be >= 0");
    if (think_min > think_max) throw std::invalid_argument("warmup.think_min exceeds warmup.think_max");
    if (!(gold_fraction >= 0.0 && gold_fraction <= 1.0)) throw std::invalid_argument("warmup.gold_fraction must lie in [0, 1]");
}

std::vector<TokenId> template_response(const Vocabulary& vocab, TokenId answer, std::size_t think_tokens,
                                       std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenId> out{vocab.think()};
    for (std::size_t i = 0; i < think_tokens; ++i) out.push_back(vocab.connective(rng.below(kConnectiveCount)));
    out.push_back(vocab.answer_marker());
    out.push_back(answer);
    out.push_back(vocab.eos());
    return out;
}

double supervised_warmup(policy::PolicyModel& model, const env::EnvConfig& env, const WarmupConfig& config,
                         std::uint64_t seed) {
    config.validate();
    const auto& vocab = model.vocab();
    // Adam moments, one flat array per parameter tensor.
    std::vector<std::vector<double>> m1, m2;
    for (const auto& p : model.parameters()) {
        m1.emplace_back(p.size(), 0.0);
        m2.emplace_back(p.size(), 0.0);
    }
    constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
    double last_loss = 0.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        std::vector<diff::GradientVector> grads(config.batch);
        std::vector<double> losses(config.batch);
        parallel_for_each(config.batch, [&](std::size_t b) {
            const auto index = static_cast<std::uint64_t>(step) * config.batch + b;
            const auto example_seed = derive_seed(seed, index);
            const auto task = env::generate_task(example_seed, env::family_for_index(index), env);
            Rng rng(derive_seed(example_seed, "warmup-target"));
            TokenId answer = task.gold;
            if (rng.uniform() >= config.gold_fraction) {
                answer = task.family == env::Family::Static
                             ? vocab.digit(rng.below(kDigitCount))
                             : vocab.symbol(1 + rng.below(vocab.frame_vocab() - 1));
            }
            const auto think = config.think_min + rng.below(config.think_max - config.think_min + 1);
            const auto target = template_response(vocab, answer, think, rng.next());

            Graph graph;
            const auto params = policy::register_parameters(graph, model);
            const auto nodes = policy::build_response_graph(graph, model, params, task.video, task.prompt, target);
            const auto loss = graph.scale(graph.sum(nodes.token_log_probs),
                                          -1.0 / (static_cast<double>(target.size()) * static_cast<double>(config.batch)));
            grads[b] = graph.backward(loss);
            losses[b] = graph.value(loss).item();
        });
        diff::GradientVector total;
        last_loss = 0.0;
        for (std::size_t b = 0; b < config.batch; ++b) {
            total += grads[b];
            last_loss += losses[b];
        }
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
        for (std::size_t p = 0; p < m1.size(); ++p) {
            auto data = model.parameters()[p].data();
            const auto& g = total.per_parameter[p];
            for (std::size_t i = 0; i < data.size(); ++i) {
                m1[p][i] = b1 * m1[p][i] + (1.0 - b1) * g[i];
                m2[p][i] = b2 * m2[p][i] + (1.0 - b2) * g[i] * g[i];
                data[i] -= config.learning_rate * (m1[p][i] / c1) / (std::sqrt(m2[p][i] / c2) + adam_eps);
            }
        }
    }
    return last_loss;
}

EvalReport evaluate(const policy::PolicyModel& model, std::span<const env::Task> tasks) {
    EvalReport report;
    report.tasks = tasks.size();
    if (tasks.empty()) return report;
    std::vector<double> rewards(tasks.size());
    parallel_for_each(tasks.size(), [&](std::size_t i) {
        rewards[i] = policy::sample_rollout(model, tasks[i], 1.0, true, 0, i).reward;
    });
    std::array<double, 3> hits{};
    std::array<std::size_t, 3> counts{};
    double total = 0.0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto f = static_cast<std::size_t>(tasks[i].family);
        hits[f] += rewards[i];
        ++counts[f];
        total += rewards[i];
    }
    auto rate = [&](std::size_t f) { return counts[f] ? hits[f] / static_cast<double>(counts[f]) : 0.0; };
    report.mean_reward = total / static_cast<double>(tasks.size());
    report.visual_accuracy = rate(0);
    report.temporal_accuracy = rate(1);
    report.static_accuracy = rate(2);
    return report;
}

}  // namespace ktr::rl
