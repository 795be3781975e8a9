#include "ktr/fixtures.hpp"

#include "ktr/rng.hpp"

namespace ktr::fixtures {

env::EnvConfig tiny_env() {
    env::EnvConfig e;
    e.frames = 3;
    e.slots = 2;
    e.frame_vocab = 4;
    return e;
}

policy::ModelConfig tiny_model_config(std::uint64_t init_seed) {
    const auto e = tiny_env();
    policy::ModelConfig c;
    c.embed_dim = 8;
    c.layers = 2;
    c.heads = 2;
    c.mlp_hidden = 8;
    c.frames = e.frames;
    c.slots = e.slots;
    c.max_seq_len = 16;
    c.max_response_len = 6;
    c.init_std = 0.4;
    c.init_seed = init_seed;
    return c;
}

rl::GroupBatch random_batch(const policy::PolicyModel& model, const env::EnvConfig& env, std::uint64_t seed,
                            std::size_t group_size, MaskPattern pattern, double ratio_jitter) {
    Rng rng(derive_seed(seed, "fixture"));
    const auto family = static_cast<env::Family>(rng.below(3));
    const auto task = env::generate_task(derive_seed(seed, "task"), family, env);

    rl::GroupBatch b;
    b.rollouts = policy::sample_rollouts(model, task, {group_size, 1.0, false}, derive_seed(seed, "sample"));
    std::vector<double> rewards(group_size);
    for (auto& r : rewards) r = rng.uniform();
    b.advantages = rl::normalize_advantages(rewards, 1e-6);

    bool any = false;
    for (auto& r : b.rollouts) {
        for (auto& lp : r.old_log_probs) lp += ratio_jitter * (2.0 * rng.uniform() - 1.0);
        std::vector<double> ref = r.old_log_probs;
        for (auto& lp : ref) lp += 0.1 * (2.0 * rng.uniform() - 1.0);
        b.ref_log_probs.push_back(std::move(ref));

        std::vector<double> w(r.length(), 1.0);
        if (pattern == MaskPattern::AllZeros) w.assign(r.length(), 0.0);
        if (pattern == MaskPattern::Random) {
            for (auto& x : w) x = rng.below(2) ? 1.0 : 0.0;
        }
        for (const double x : w) any = any || x != 0.0;
        select::TokenMask m;
        m.bits.assign(w.begin(), w.end());
        b.masks.push_back(std::move(m));
        b.weights.push_back(std::move(w));
    }
    if (pattern == MaskPattern::Random && !any) {
        b.weights[0][0] = 1.0;
        b.masks[0].bits[0] = 1;
    }
    return b;
}

}  // namespace ktr::fixtures
