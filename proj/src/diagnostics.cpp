#include "ktr/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ktr::diag {

using nlohmann::json;

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (const double x : v) s += x * x;
    return std::sqrt(s);
}

std::optional<double> cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na < kNormFloor || nb < kNormFloor) return std::nullopt;
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return std::clamp(dot / (na * nb), -1.0, 1.0);
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> read_optional(const json& j, const char* key) {
    const auto& v = j.at(key);
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
}

void accumulate(std::vector<double>& acc, const diff::GradientVector& g, std::span<const std::size_t> params) {
    std::size_t off = 0;
    for (const auto p : params) {
        const auto& src = g.per_parameter[p];
        for (std::size_t i = 0; i < src.size(); ++i) acc[off + i] += src[i];
        off += src.size();
    }
}

}  // namespace

json to_json(const GradDecomposition& d) {
    return {{"step", d.step},
            {"full-norm", d.full_norm},
            {"ktr-norm", d.ktr_norm},
            {"rest-norm", d.rest_norm},
            {"cos-ktr-full", optional_number(d.cos_ktr_full)},
            {"cos-rest-full", optional_number(d.cos_rest_full)},
            {"selected-token-norm", optional_number(d.selected_token_norm)},
            {"masked-token-norm", optional_number(d.masked_token_norm)},
            {"selected-tokens", d.selected_tokens},
            {"masked-tokens", d.masked_tokens},
            {"additivity-error", d.additivity_error}};
}

GradDecomposition grad_decomposition_from_json(const json& j) {
    GradDecomposition d;
    d.step = j.at("step").get<std::size_t>();
    d.full_norm = j.at("full-norm").get<double>();
    d.ktr_norm = j.at("ktr-norm").get<double>();
    d.rest_norm = j.at("rest-norm").get<double>();
    d.cos_ktr_full = read_optional(j, "cos-ktr-full");
    d.cos_rest_full = read_optional(j, "cos-rest-full");
    d.selected_token_norm = read_optional(j, "selected-token-norm");
    d.masked_token_norm = read_optional(j, "masked-token-norm");
    d.selected_tokens = j.at("selected-tokens").get<std::size_t>();
    d.masked_tokens = j.at("masked-tokens").get<std::size_t>();
    d.additivity_error = j.at("additivity-error").get<double>();
    return d;
}

GradDecomposition decompose_gradients(const policy::PolicyModel& model, std::span<const rl::GroupBatch> groups,
                                      const rl::RLConfig& config) {
    if (groups.empty()) throw std::invalid_argument("decompose_gradients: no groups");
    auto surrogate_only = config;
    surrogate_only.kl_beta = 0.0;
    const auto head = model.final_layer_parameters();
    std::size_t width = 0;
    for (const auto p : head) width += model.parameters()[p].size();

    std::vector<double> g_full(width, 0.0), g_ktr(width, 0.0), g_rest(width, 0.0);
    double selected_norm_sum = 0.0;
    double masked_norm_sum = 0.0;
    GradDecomposition out;

    for (const auto& batch : groups) {
        if (batch.masks.size() != batch.size()) throw std::invalid_argument("decompose_gradients: masks missing");
        // The objective rejects an all-zero weight batch, but an all-masked
        // group is legitimate here, so score it with unit weights and split by bits.
        rl::GroupBatch unit = batch;
        for (std::size_t i = 0; i < unit.size(); ++i) unit.weights[i].assign(unit.rollouts[i].length(), 1.0);

        diff::Graph graph;
        const auto params = policy::register_parameters(graph, model);
        const auto nodes = rl::ktr_objective(graph, model, params, unit, surrogate_only, true);

        std::vector<diff::NodeId> all;
        for (const auto& row : nodes.token_losses) all.insert(all.end(), row.begin(), row.end());
        diff::NodeId total = all.front();
        for (std::size_t k = 1; k < all.size(); ++k) total = graph.add(total, all[k]);
        accumulate(g_full, graph.backward(total, head), head);

        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto& bits = batch.masks[i].bits;
            if (bits.size() != batch.rollouts[i].length()) {
                throw std::invalid_argument("decompose_gradients: mask length mismatch");
            }
            for (std::size_t t = 0; t < bits.size(); ++t) {
                const auto g = graph.backward(nodes.token_losses[i][t], head);
                std::vector<double> flat(width, 0.0);
                accumulate(flat, g, head);
                const double n = l2_norm(flat);
                auto& dest = bits[t] ? g_ktr : g_rest;
                for (std::size_t j = 0; j < width; ++j) dest[j] += flat[j];
                if (bits[t]) {
                    selected_norm_sum += n;
                    ++out.selected_tokens;
                } else {
                    masked_norm_sum += n;
                    ++out.masked_tokens;
                }
            }
        }
    }

    out.full_norm = l2_norm(g_full);
    out.ktr_norm = l2_norm(g_ktr);
    out.rest_norm = l2_norm(g_rest);
    out.cos_ktr_full = cosine(g_ktr, g_full);
    out.cos_rest_full = cosine(g_rest, g_full);
    if (out.selected_tokens) out.selected_token_norm = selected_norm_sum / static_cast<double>(out.selected_tokens);
    if (out.masked_tokens) out.masked_token_norm = masked_norm_sum / static_cast<double>(out.masked_tokens);
    for (std::size_t j = 0; j < width; ++j) {
        out.additivity_error = std::max(out.additivity_error, std::abs(g_ktr[j] + g_rest[j] - g_full[j]));
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {
// Two passes over values shifted by the first one, so a constant window is exactly 0.
double population_variance(std::span<const double> xs) {
    const double n = static_cast<double>(xs.size());
    const double x0 = xs.front();
    double mean = 0.0;
    for (const double x : xs) mean += x - x0;
    mean /= n;
    double s = 0.0;
    for (const double x : xs) s += (x - x0 - mean) * (x - x0 - mean);
    return s / n;
}
}  // namespace

double loss_variance(std::span<const double> losses, std::size_t window) {
    if (window < 2) throw std::invalid_argument("loss_variance: window must be >= 2");
    if (losses.empty()) return 0.0;
    const auto n = std::min(window, losses.size());
    return population_variance(losses.subspan(losses.size() - n));
}

std::vector<double> rolling_loss_variance(std::span<const double> losses, std::size_t window) {
    if (window < 2) throw std::invalid_argument("rolling_loss_variance: window must be >= 2");
    std::vector<double> out;
    if (losses.size() < 2) return out;
    if (losses.size() < window) {
        out.push_back(population_variance(losses));
        return out;
    }
    for (std::size_t end = window; end <= losses.size(); ++end) {
        out.push_back(population_variance(losses.subspan(end - window, window)));
    }
    return out;
}

double mean_loss_variance(std::span<const double> losses, std::size_t window) {
    const auto v = rolling_loss_variance(losses, window);
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double PositionHistogram::probability(std::size_t bin) const {
    return total.at(bin) ? static_cast<double>(selected[bin]) / static_cast<double>(total[bin]) : 0.0;
}

PositionHistogram position_histogram(std::span<const select::TokenMask> masks, std::size_t bins) {
    if (bins == 0) throw std::invalid_argument("position_histogram: need at least one bin");
    PositionHistogram h;
    h.selected.assign(bins, 0);
    h.total.assign(bins, 0);
    for (const auto& m : masks) {
        const auto T = m.bits.size();
        for (std::size_t t = 0; t < T; ++t) {
            const auto b = std::min(bins - 1, t * bins / T);
            ++h.total[b];
            h.selected[b] += m.bits[t] ? 1 : 0;
        }
    }
    return h;
}

OverlapStats& OverlapStats::operator+=(const OverlapStats& o) {
    exactly_one += o.exactly_one;
    exactly_two += o.exactly_two;
    all_three += o.all_three;
    union_size += o.union_size;
    tokens += o.tokens;
    return *this;
}

OverlapStats overlap_stats(std::span<const std::size_t> visual, std::span<const std::size_t> temporal,
                           std::span<const std::size_t> entropy, std::size_t length) {
    std::vector<std::uint8_t> hits(length, 0);
    for (const auto set : {visual, temporal, entropy}) {
        std::vector<std::uint8_t> seen(length, 0);
        for (const auto i : set) {
            if (i >= length) throw std::out_of_range("overlap_stats: index outside the token range");
            if (!seen[i]) ++hits[i];
            seen[i] = 1;
        }
    }
    OverlapStats s;
    s.tokens = length;
    for (const auto h : hits) {
        if (h == 1) ++s.exactly_one;
        if (h == 2) ++s.exactly_two;
        if (h == 3) ++s.all_three;
        if (h > 0) ++s.union_size;
    }
    return s;
}

OverlapStats overlap_stats(const select::TokenMask& mask) {
    return overlap_stats(mask.visual, mask.temporal, mask.entropy, mask.bits.size());
}

std::string_view signal_name(Signal s) {
    switch (s) {
        case Signal::Visual: return "visual";
        case Signal::Temporal: return "temporal";
        case Signal::Entropy: return "entropy";
        case Signal::Union: return "union";
    }
    return "?";
}

std::uint64_t CategoryStats::selected_total(Signal s) const {
    const auto& row = selected[static_cast<std::size_t>(s)];
    return std::accumulate(row.begin(), row.end(), std::uint64_t{0});
}

std::uint64_t CategoryStats::base_total() const { return std::accumulate(base.begin(), base.end(), std::uint64_t{0}); }

double CategoryStats::rate(Signal s, TokenCategory c) const {
    const auto n = selected_total(s);
    return n ? static_cast<double>(selected[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)]) /
                   static_cast<double>(n)
             : 0.0;
}

double CategoryStats::base_rate(TokenCategory c) const {
    const auto n = base_total();
    return n ? static_cast<double>(base[static_cast<std::size_t>(c)]) / static_cast<double>(n) : 0.0;
}

CategoryStats token_category_stats(std::span<const select::TokenMask> masks,
                                   std::span<const std::vector<TokenId>> tokens, const Vocabulary& vocab) {
    if (masks.size() != tokens.size()) throw std::invalid_argument("token_category_stats: one token stream per mask");
    CategoryStats st;
    for (std::size_t r = 0; r < masks.size(); ++r) {
        const auto& m = masks[r];
        const auto& toks = tokens[r];
        if (m.bits.size() != toks.size()) throw std::invalid_argument("token_category_stats: mask/token length mismatch");
        auto cat = [&](std::size_t t) { return static_cast<std::size_t>(vocab.category(toks.at(t))); };
        for (std::size_t t = 0; t < toks.size(); ++t) {
            ++st.base[cat(t)];
            if (m.bits[t]) ++st.selected[static_cast<std::size_t>(Signal::Union)][cat(t)];
        }
        for (const auto i : m.visual) ++st.selected[static_cast<std::size_t>(Signal::Visual)][cat(i)];
        for (const auto i : m.temporal) ++st.selected[static_cast<std::size_t>(Signal::Temporal)][cat(i)];
        for (const auto i : m.entropy) ++st.selected[static_cast<std::size_t>(Signal::Entropy)][cat(i)];
    }
    return st;
}

}  // namespace ktr::diag
