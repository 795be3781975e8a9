#include "ktr/synthenv.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "ktr/rng.hpp"

namespace ktr::env {

using nlohmann::json;

void EnvConfig::validate() const {
    if (frames < 2) throw std::invalid_argument("env.frames must be >= 2");
    if (slots < 1) throw std::invalid_argument("env.slots must be >= 1");
    if (frame_vocab < 4) throw std::invalid_argument("env.frame_vocab must be >= 4");
}

void VideoClip::validate(std::size_t frame_vocab) const {
    if (frames.size() < 2) {
        throw std::invalid_argument("video clip needs at least two frames");
    }
    const auto k = frames.front().size();
    for (const auto& frame : frames) {
        if (frame.size() != k || k == 0) {
            throw std::invalid_argument("video frames must share a positive length");
        }
        for (const auto s : frame) {
            if (s >= frame_vocab) {
                throw std::invalid_argument("frame symbol out of range");
            }
        }
    }
}

std::vector<TokenId> VideoClip::flatten() const {
    std::vector<TokenId> out;
    for (const auto& frame : frames) {
        out.insert(out.end(), frame.begin(), frame.end());
    }
    return out;
}

std::string_view family_name(Family family) {
    switch (family) {
        case Family::Visual: return "VISUAL";
        case Family::Temporal: return "TEMPORAL";
        case Family::Static: return "STATIC";
    }
    return "STATIC";
}

Family parse_family(std::string_view name) {
    if (name == "VISUAL") return Family::Visual;
    if (name == "TEMPORAL") return Family::Temporal;
    if (name == "STATIC") return Family::Static;
    throw std::invalid_argument("unknown task family '" + std::string(name) + "'");
}

std::string_view visual_perturbation_name(VisualPerturbation kind) {
    switch (kind) {
        case VisualPerturbation::MaskAll: return "MASK_ALL";
        case VisualPerturbation::MaskHalf: return "MASK_HALF";
        case VisualPerturbation::ReplaceUnrelated: return "REPLACE_UNRELATED";
    }
    return "MASK_ALL";
}

VisualPerturbation parse_visual_perturbation(std::string_view name) {
    if (name == "MASK_ALL") return VisualPerturbation::MaskAll;
    if (name == "MASK_HALF") return VisualPerturbation::MaskHalf;
    if (name == "REPLACE_UNRELATED") return VisualPerturbation::ReplaceUnrelated;
    throw std::invalid_argument("unknown visual perturbation '" + std::string(name) + "'");
}

std::string_view temporal_perturbation_name(TemporalPerturbation kind) {
    switch (kind) {
        case TemporalPerturbation::ShuffleRandom: return "SHUFFLE_RANDOM";
        case TemporalPerturbation::Reverse: return "REVERSE";
        case TemporalPerturbation::SegmentalShuffle: return "SEGMENTAL_SHUFFLE";
    }
    return "SHUFFLE_RANDOM";
}

TemporalPerturbation parse_temporal_perturbation(std::string_view name) {
    if (name == "SHUFFLE_RANDOM") return TemporalPerturbation::ShuffleRandom;
    if (name == "REVERSE") return TemporalPerturbation::Reverse;
    if (name == "SEGMENTAL_SHUFFLE") return TemporalPerturbation::SegmentalShuffle;
    throw std::invalid_argument("unknown temporal perturbation '" + std::string(name) + "'");
}

namespace {

VideoClip random_clip(Rng& rng, std::size_t frames, std::size_t slots, std::size_t frame_vocab) {
    VideoClip clip;
    clip.frames.assign(frames, std::vector<TokenId>(slots, 0));
    for (auto& frame : clip.frames) {
        for (auto& s : frame) {
            s = static_cast<TokenId>(1 + rng.below(frame_vocab - 1));
        }
    }
    return clip;
}

std::vector<std::size_t> reversed_order(std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.rbegin(), order.rend(), std::size_t{0});
    return order;
}

bool is_identity(const std::vector<std::size_t>& order) {
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (order[i] != i) return false;
    }
    return true;
}

std::optional<TokenId> majority_symbol(const VideoClip& video, std::size_t frame_vocab) {
    std::vector<std::size_t> counts(frame_vocab, 0);
    for (const auto& frame : video.frames) {
        for (const auto s : frame) {
            if (s < frame_vocab) ++counts[s];
        }
    }
    // The null symbol never counts as an answer.
    std::size_t best = 0;
    std::size_t best_count = 0;
    bool unique = false;
    for (std::size_t s = 1; s < frame_vocab; ++s) {
        if (counts[s] > best_count) {
            best = s;
            best_count = counts[s];
            unique = true;
        } else if (counts[s] == best_count && best_count > 0) {
            unique = false;
        }
    }
    if (!unique) return std::nullopt;
    return static_cast<TokenId>(best);
}

}  // namespace

std::optional<TokenId> compute_gold(Family family, std::span<const TokenId> prompt,
                                    const VideoClip& video, const Vocabulary& vocab) {
    if (prompt.empty()) return std::nullopt;
    switch (family) {
        case Family::Visual:
            return majority_symbol(video, vocab.frame_vocab());
        case Family::Temporal: {
            if (prompt[0] == vocab.question(QuestionWord::FirstSlot)) {
                if (video.frames.empty() || video.frames[0].empty()) return std::nullopt;
                return video.frames[0][0];
            }
            if (prompt[0] == vocab.question(QuestionWord::After) && prompt.size() >= 2) {
                const auto seq = video.flatten();
                const auto it = std::find(seq.begin(), seq.end(), prompt[1]);
                if (it == seq.end() || it + 1 == seq.end()) return std::nullopt;
                return *(it + 1);
            }
            return std::nullopt;
        }
        case Family::Static: {
            if (prompt.size() < 3 || prompt[0] != vocab.question(QuestionWord::Sum)) return std::nullopt;
            if (!vocab.is_digit(prompt[1]) || !vocab.is_digit(prompt[2])) return std::nullopt;
            return vocab.digit((vocab.digit_value(prompt[1]) + vocab.digit_value(prompt[2])) % 10);
        }
    }
    return std::nullopt;
}

Task generate_task(std::uint64_t seed, Family family, const EnvConfig& config,
                   TemporalTemplate temporal_template) {
    config.validate();
    const Vocabulary vocab(config.frame_vocab);
    const auto F = config.frames;
    const auto K = config.slots;
    Rng rng(derive_seed(seed, family_name(family)));

    Task task;
    task.family = family;
    task.seed = seed;

    switch (family) {
        case Family::Visual: {
            const std::size_t n = F * K;
            for (std::size_t attempt = 0; attempt < config.max_resamples; ++attempt) {
                auto clip = random_clip(rng, F, K, config.frame_vocab);
                const auto dominant = static_cast<TokenId>(1 + rng.below(config.frame_vocab - 1));
                std::vector<std::size_t> cells(n);
                std::iota(cells.begin(), cells.end(), std::size_t{0});
                rng.shuffle(cells);
                for (std::size_t c = 0; c < std::max<std::size_t>(1, n / 2); ++c) {
                    clip.frames[cells[c] / K][cells[c] % K] = dominant;
                }
                const auto gold = majority_symbol(clip, config.frame_vocab);
                if (gold) {
                    task.prompt = {vocab.question(QuestionWord::Majority)};
                    task.video = std::move(clip);
                    task.gold = *gold;
                    return task;
                }
            }
            break;
        }
        case Family::Temporal: {
            auto tmpl = temporal_template;
            if (tmpl == TemporalTemplate::Any) {
                tmpl = rng.below(2) == 0 ? TemporalTemplate::FirstSlot : TemporalTemplate::After;
            }
            const auto reverse = reversed_order(F);
            for (std::size_t attempt = 0; attempt < config.max_resamples; ++attempt) {
                auto clip = random_clip(rng, F, K, config.frame_vocab);
                std::vector<TokenId> prompt;
                if (tmpl == TemporalTemplate::FirstSlot) {
                    prompt = {vocab.question(QuestionWord::FirstSlot)};
                } else {
                    // Anchors occur exactly once, so "first occurrence" is unambiguous,
                    // and only anchors whose answer moves under reversal are kept.
                    const auto seq = clip.flatten();
                    const auto reversed = permute_frames(clip, reverse);
                    std::vector<TokenId> anchors;
                    for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
                        if (std::count(seq.begin(), seq.end(), seq[p]) != 1) continue;
                        const std::vector<TokenId> q{vocab.question(QuestionWord::After), seq[p]};
                        const auto moved = compute_gold(Family::Temporal, q, reversed, vocab);
                        if (moved && *moved != seq[p + 1]) anchors.push_back(seq[p]);
                    }
                    if (anchors.empty()) continue;
                    prompt = {vocab.question(QuestionWord::After), anchors[rng.below(anchors.size())]};
                }
                const auto gold = compute_gold(Family::Temporal, prompt, clip, vocab);
                const auto flipped = compute_gold(Family::Temporal, prompt, permute_frames(clip, reverse), vocab);
                if (gold && flipped && *gold != *flipped) {
                    task.prompt = std::move(prompt);
                    task.video = std::move(clip);
                    task.gold = *gold;
                    return task;
                }
            }
            break;
        }
        case Family::Static: {
            const auto a = rng.below(10);
            const auto b = rng.below(10);
            task.prompt = {vocab.question(QuestionWord::Sum), vocab.digit(a), vocab.digit(b)};
            task.video = random_clip(rng, F, K, config.frame_vocab);
            task.gold = vocab.digit((a + b) % 10);
            return task;
        }
    }
    throw std::runtime_error("generate_task: could not satisfy the " + std::string(family_name(family)) +
                             " invariant after " + std::to_string(config.max_resamples) +
                             " resamples (seed " + std::to_string(seed) + ")");
}

double reward(std::span<const TokenId> response, const Task& task, const Vocabulary& vocab) {
    const auto marker = std::find(response.begin(), response.end(), vocab.answer_marker());
    if (marker == response.end() || marker + 1 == response.end()) {
        return 0.0;
    }
    return *(marker + 1) == task.gold ? 1.0 : 0.0;
}

VideoClip perturb_visual(const VideoClip& video, VisualPerturbation kind, std::uint64_t seed,
                         std::size_t frame_vocab) {
    VideoClip out = video;
    switch (kind) {
        case VisualPerturbation::MaskAll:
            for (auto& frame : out.frames) {
                std::fill(frame.begin(), frame.end(), Vocabulary::null_symbol());
            }
            break;
        case VisualPerturbation::MaskHalf: {
            Rng rng(derive_seed(seed, "mask-half"));
            std::vector<std::size_t> order(out.frame_count());
            std::iota(order.begin(), order.end(), std::size_t{0});
            rng.shuffle(order);
            for (std::size_t i = 0; i < out.frame_count() / 2; ++i) {
                auto& frame = out.frames[order[i]];
                std::fill(frame.begin(), frame.end(), Vocabulary::null_symbol());
            }
            break;
        }
        case VisualPerturbation::ReplaceUnrelated: {
            Rng rng(derive_seed(seed, "replace-unrelated"));
            out = random_clip(rng, video.frame_count(), video.slot_count(), frame_vocab);
            break;
        }
    }
    return out;
}

std::vector<std::size_t> temporal_permutation(TemporalPerturbation kind, std::size_t frame_count,
                                              std::uint64_t seed) {
    if (frame_count < 2) {
        throw std::invalid_argument("temporal perturbation needs at least two frames");
    }
    std::vector<std::size_t> order(frame_count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    switch (kind) {
        case TemporalPerturbation::Reverse:
            return reversed_order(frame_count);
        case TemporalPerturbation::ShuffleRandom: {
            Rng rng(derive_seed(seed, "shuffle"));
            do {
                rng.shuffle(order);
            } while (is_identity(order));
            return order;
        }
        case TemporalPerturbation::SegmentalShuffle: {
            const std::size_t segment = (frame_count + 1) / 2;
            const std::size_t segments = (frame_count + segment - 1) / segment;
            std::vector<std::size_t> seg_order(segments);
            std::iota(seg_order.begin(), seg_order.end(), std::size_t{0});
            Rng rng(derive_seed(seed, "segmental"));
            do {
                rng.shuffle(seg_order);
            } while (is_identity(seg_order));
            order.clear();
            for (const auto s : seg_order) {
                for (std::size_t f = s * segment; f < std::min(frame_count, (s + 1) * segment); ++f) {
                    order.push_back(f);
                }
            }
            return order;
        }
    }
    return order;
}

VideoClip permute_frames(const VideoClip& video, std::span<const std::size_t> order) {
    if (order.size() != video.frame_count()) {
        throw std::invalid_argument("permutation length differs from frame count");
    }
    VideoClip out;
    out.frames.reserve(order.size());
    for (const auto i : order) {
        out.frames.push_back(video.frames.at(i));
    }
    return out;
}

VideoClip perturb_temporal(const VideoClip& video, TemporalPerturbation kind, std::uint64_t seed) {
    const auto order = temporal_permutation(kind, video.frame_count(), seed);
    return permute_frames(video, order);
}

std::string task_to_json(const Task& task) {
    json j;
    j["seed"] = task.seed;
    j["family"] = family_name(task.family);
    j["prompt"] = task.prompt;
    j["frames"] = task.video.frames;
    j["gold"] = task.gold;
    return j.dump();
}

Task task_from_json(std::string_view line) {
    const auto j = json::parse(line);
    Task task;
    task.seed = j.at("seed").get<std::uint64_t>();
    task.family = parse_family(j.at("family").get<std::string>());
    task.prompt = j.at("prompt").get<std::vector<TokenId>>();
    task.video.frames = j.at("frames").get<std::vector<std::vector<TokenId>>>();
    task.gold = j.at("gold").get<TokenId>();
    return task;
}

void write_tasks_jsonl(std::ostream& out, std::span<const Task> tasks) {
    for (const auto& task : tasks) {
        out << task_to_json(task) << '\n';
    }
}

std::vector<Task> read_tasks_jsonl(std::istream& in) {
    std::vector<Task> tasks;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            tasks.push_back(task_from_json(line));
        }
    }
    return tasks;
}

}  // namespace ktr::env
