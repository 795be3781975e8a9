#pragma once

// Synthetic video-reasoning tasks with known modality dependence.
//
// VISUAL   majority symbol over all frames: invariant to frame order, lost when frames are masked
// TEMPORAL first-frame slot-0 symbol, or the symbol after the first X: order sensitive
// STATIC   (a + b) mod 10 from the prompt; the video is a distractor

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ktr/vocab.hpp"

namespace ktr::env {

struct EnvConfig {
    std::size_t frames = 4;       // F
    std::size_t slots = 3;        // K
    std::size_t frame_vocab = 8;  // V_f, including the null symbol 0
    std::size_t max_resamples = 100;

    void validate() const;
    friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

/// Ordered frames, each a fixed-length row of symbol ids in [0, V_f).
struct VideoClip {
    std::vector<std::vector<TokenId>> frames;

    std::size_t frame_count() const { return frames.size(); }
    std::size_t slot_count() const { return frames.empty() ? 0 : frames.front().size(); }
    void validate(std::size_t frame_vocab) const;
    std::vector<TokenId> flatten() const;

    friend bool operator==(const VideoClip&, const VideoClip&) = default;
};

enum class Family : std::uint8_t { Visual, Temporal, Static };
enum class TemporalTemplate : std::uint8_t { Any, FirstSlot, After };

enum class VisualPerturbation : std::uint8_t { MaskAll, MaskHalf, ReplaceUnrelated };
enum class TemporalPerturbation : std::uint8_t { ShuffleRandom, Reverse, SegmentalShuffle };

struct PerturbationKind {
    VisualPerturbation visual = VisualPerturbation::MaskAll;
    TemporalPerturbation temporal = TemporalPerturbation::ShuffleRandom;
    friend bool operator==(const PerturbationKind&, const PerturbationKind&) = default;
};

std::string_view family_name(Family family);
Family parse_family(std::string_view name);
std::string_view visual_perturbation_name(VisualPerturbation kind);
VisualPerturbation parse_visual_perturbation(std::string_view name);
std::string_view temporal_perturbation_name(TemporalPerturbation kind);
TemporalPerturbation parse_temporal_perturbation(std::string_view name);

struct Task {
    Family family = Family::Static;
    std::vector<TokenId> prompt;
    VideoClip video;
    TokenId gold = 0;
    std::uint64_t seed = 0;

    friend bool operator==(const Task&, const Task&) = default;
};

/// Recomputes the answer a (family, prompt, video) triple asks for, or
/// nullopt when the question is undefined on this video.
std::optional<TokenId> compute_gold(Family family, std::span<const TokenId> prompt,
                                    const VideoClip& video, const Vocabulary& vocab);

/// Deterministic in (seed, family, config, temporal template).
/// Throws std::invalid_argument on bad config and std::runtime_error when the
/// family invariant cannot be met within config.max_resamples draws.
Task generate_task(std::uint64_t seed, Family family, const EnvConfig& config,
                   TemporalTemplate temporal_template = TemporalTemplate::Any);

/// Family for the i-th task of a balanced stream (1/3 each).
inline Family family_for_index(std::uint64_t index) { return static_cast<Family>(index % 3); }

/// 1 if the token after the first answer marker equals the gold answer, else 0.
double reward(std::span<const TokenId> response, const Task& task, const Vocabulary& vocab);

VideoClip perturb_visual(const VideoClip& video, VisualPerturbation kind, std::uint64_t seed,
                         std::size_t frame_vocab);
VideoClip perturb_temporal(const VideoClip& video, TemporalPerturbation kind, std::uint64_t seed);

/// Frame order used by perturb_temporal (never the identity).
std::vector<std::size_t> temporal_permutation(TemporalPerturbation kind, std::size_t frame_count,
                                              std::uint64_t seed);
/// out.frames[i] = video.frames[order[i]]
VideoClip permute_frames(const VideoClip& video, std::span<const std::size_t> order);

// One task per line: {seed, family, prompt, frames, gold}.
std::string task_to_json(const Task& task);
Task task_from_json(std::string_view line);
void write_tasks_jsonl(std::ostream& out, std::span<const Task> tasks);
std::vector<Task> read_tasks_jsonl(std::istream& in);

}  // namespace ktr::env
