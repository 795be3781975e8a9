#pragma once

// Small seeded models and batches shared by the self-test, unit tests and
// the acceptance suite.

#include <cstdint>
#include <vector>

#include "ktr/ktr_rl.hpp"
#include "ktr/policy.hpp"
#include "ktr/synthenv.hpp"

namespace ktr::fixtures {

/// F=3, K=2, V_f=4 environment.
env::EnvConfig tiny_env();
/// 2-layer, width-8 decoder over tiny_env (cheap enough for full finite differences).
policy::ModelConfig tiny_model_config(std::uint64_t init_seed = 3);

enum class MaskPattern { AllOnes, Random, AllZeros };

/// G seeded rollouts of `model` on one task, with advantages from rewards
/// perturbed by seeded noise (so they are non-degenerate), old log-probs
/// jittered by up to `ratio_jitter` in log space, and reference log-probs
/// filled in. Weights follow `pattern` (Random keeps at least one bit per batch).
rl::GroupBatch random_batch(const policy::PolicyModel& model, const env::EnvConfig& env, std::uint64_t seed,
                            std::size_t group_size, MaskPattern pattern, double ratio_jitter = 0.05);

}  // namespace ktr::fixtures
