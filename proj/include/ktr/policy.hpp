#pragma once

// Small causal self-attention decoder over [frame pseudo-tokens | prompt | response].
//
// Frame pseudo-tokens are symbol embeddings plus a per-frame segment
// embedding, so frame order is visible to the model. Logits for response
// position i are read from the hidden state one position earlier, which makes
// them a function of (video, prompt, y_<i) only.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ktr/graph.hpp"
#include "ktr/synthenv.hpp"
#include "ktr/vocab.hpp"

namespace ktr::policy {

struct ModelConfig {
    std::size_t embed_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t mlp_hidden = 256;
    std::size_t vocab_size = 0;  // derived from the frame vocabulary when 0
    std::size_t max_seq_len = 80;
    std::size_t max_response_len = 48;
    std::size_t frames = 4;  // F
    std::size_t slots = 3;   // K
    double init_std = 0.05;
    std::uint64_t init_seed = 1;

    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

class PolicyModel {
  public:
    PolicyModel(ModelConfig config, std::size_t frame_vocab);

    const ModelConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }

    std::vector<diff::Tensor>& parameters() { return params_; }
    const std::vector<diff::Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }
    std::size_t parameter_count() const;
    /// Indices of the output projection (the "final layer" for gradient diagnostics).
    std::vector<std::size_t> final_layer_parameters() const;

    /// theta <- theta - learning_rate * grad
    void apply_gradient(const diff::GradientVector& grad, double learning_rate);

    friend bool operator==(const PolicyModel& a, const PolicyModel& b) {
        return a.config_ == b.config_ && a.params_ == b.params_;
    }

  private:
    ModelConfig config_;
    Vocabulary vocab_;
    std::vector<diff::Tensor> params_;
    std::vector<std::string> names_;
};

/// Parameter nodes registered once per graph, in model order.
using ParamNodes = std::vector<diff::NodeId>;
ParamNodes register_parameters(diff::Graph& graph, const PolicyModel& model);

struct ResponseNodes {
    diff::NodeId logits;           // [rows, V]
    diff::NodeId log_probs;        // log_softmax(logits)
    diff::NodeId token_log_probs;  // [T] picked at the response tokens (teacher forcing only)
};

/// Appends the forward pass predicting each response token given its prefix.
/// With `response` of length T the graph holds T logit rows; with
/// `predict_next` the final row predicting the token after `response` is
/// also produced (T+1 rows) and token_log_probs is left unset (== logits).
ResponseNodes build_response_graph(diff::Graph& graph, const PolicyModel& model, const ParamNodes& params,
                                   const env::VideoClip& video, std::span<const TokenId> prompt,
                                   std::span<const TokenId> response, bool predict_next = false);

/// Logit vectors for positions 0..|prefix| of the response, i.e. |prefix|+1 rows.
diff::Tensor forward_logits(const PolicyModel& model, const env::VideoClip& video,
                            std::span<const TokenId> prompt, std::span<const TokenId> prefix);

struct Rollout {
    std::uint64_t id = 0;
    env::Task task;
    std::vector<TokenId> tokens;   // y_1..y_T
    diff::Tensor logits;           // [T, V] under the sampling-time policy
    std::vector<double> old_log_probs;
    double reward = 0.0;
    std::uint64_t sample_seed = 0;

    std::size_t length() const { return tokens.size(); }
};

struct SampleOptions {
    std::size_t group_size = 8;
    double temperature = 1.0;
    bool greedy = false;
};

/// One seeded rollout (greedy picks the lowest-index argmax).
Rollout sample_rollout(const PolicyModel& model, const env::Task& task, double temperature, bool greedy,
                       std::uint64_t seed, std::uint64_t id = 0);

/// G independently seeded rollouts for one task, rewards filled in.
std::vector<Rollout> sample_rollouts(const PolicyModel& model, const env::Task& task,
                                     const SampleOptions& options, std::uint64_t seed,
                                     std::uint64_t first_id = 0);

struct ScoredResponse {
    diff::Tensor logits;  // [T, V]
    std::vector<double> log_probs;
};

/// Teacher-forced re-scoring of a fixed response (one forward pass).
ScoredResponse score_response(const PolicyModel& model, const env::VideoClip& video,
                              std::span<const TokenId> prompt, std::span<const TokenId> response);

/// Number of forward passes run so far in this process.
std::uint64_t forward_pass_count();

/// Checkpoint: "VKTRCKPT", u32 version, u64 header length, JSON header
/// {config, frame_vocab, parameters:[{name, shape}]}, then little-endian f64 payload.
void save_checkpoint(const PolicyModel& model, std::ostream& out);
PolicyModel load_checkpoint(std::istream& in);
void save_checkpoint(const PolicyModel& model, const std::string& path);
PolicyModel load_checkpoint(const std::string& path);

}  // namespace ktr::policy
