#include <charconv>
#include <fstream>
#include <numeric>
#include <ostream>

#include "ktr/diagnostics.hpp"
#include "ktr/harness.hpp"

namespace ktr::harness {

using nlohmann::json;

namespace {

constexpr std::size_t kPositionBins = 10;
constexpr std::size_t kVarianceWindow = 20;

// Shortest round-trip decimal form, so repeated reports are byte-identical.
std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}
std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::vector<json> read_jsonl(const fs::path& path, std::vector<std::string>& warnings) {
    std::vector<json> out;
    std::ifstream in(path);
    if (!in) {
        warnings.push_back("missing " + path.filename().string());
        return out;
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error&) {
            warnings.push_back(path.filename().string() + ":" + std::to_string(lineno) + ": unreadable record skipped");
        }
    }
    return out;
}

double mean_of(const std::vector<double>& xs) {
    return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

json mean_or_null(const std::vector<double>& xs) { return xs.empty() ? json(nullptr) : json(mean_of(xs)); }

double number_or(const json& j, const char* key, double fallback) {
    return j.contains(key) && j[key].is_number() ? j[key].get<double>() : fallback;
}

}  // namespace

int cmd_report(const fs::path& run_dir, std::ostream& log) {
    if (!fs::is_directory(run_dir)) {
        log << "run directory " << run_dir << " does not exist\n";
        return kExitFailure;
    }
    std::vector<std::string> warnings;
    const auto metrics = read_jsonl(run_dir / "metrics.jsonl", warnings);
    const auto evals = read_jsonl(run_dir / "eval.jsonl", warnings);
    const auto grad_records = read_jsonl(run_dir / "grad_stats.jsonl", warnings);
    const auto mask_records = read_jsonl(run_dir / "masks.jsonl", warnings);

    const auto out = run_dir / "report";
    fs::create_directories(out);

    // metrics.csv
    std::vector<double> losses, rewards, densities;
    {
        std::ofstream csv(out / "metrics.csv", std::ios::binary);
        csv << "step,mean_reward,loss,kl,mask_density,grad_norm,loss_variance\n";
        for (const auto& m : metrics) {
            rewards.push_back(number_or(m, "mean-reward", 0.0));
            densities.push_back(number_or(m, "mask-density", 0.0));
            const bool has_loss = m.contains("loss") && m["loss"].is_number();
            if (has_loss) losses.push_back(m["loss"].get<double>());
            csv << m.value("step", std::size_t{0}) << ',' << num(rewards.back()) << ','
                << (has_loss ? num(losses.back()) : "") << ',' << num(number_or(m, "kl", 0.0)) << ','
                << num(densities.back()) << ',' << num(number_or(m, "grad-norm", 0.0)) << ','
                << (losses.empty() ? "" : num(diag::loss_variance(losses, kVarianceWindow))) << '\n';
        }
    }

    // grad_stats.csv
    std::vector<double> cos_ktr, cos_rest, sel_norm, mask_norm;
    double max_additivity = 0.0;
    {
        std::ofstream csv(out / "grad_stats.csv", std::ios::binary);
        csv << "step,full_norm,ktr_norm,rest_norm,cos_ktr_full,cos_rest_full,selected_token_norm,masked_token_norm,"
               "selected_tokens,masked_tokens,additivity_error\n";
        for (const auto& r : grad_records) {
            diag::GradDecomposition d;
            try {
                d = diag::grad_decomposition_from_json(r);
            } catch (const json::exception&) {
                warnings.push_back("grad_stats.jsonl: malformed record skipped");
                continue;
            }
            if (d.cos_ktr_full) cos_ktr.push_back(*d.cos_ktr_full);
            if (d.cos_rest_full) cos_rest.push_back(*d.cos_rest_full);
            if (d.selected_token_norm) sel_norm.push_back(*d.selected_token_norm);
            if (d.masked_token_norm) mask_norm.push_back(*d.masked_token_norm);
            max_additivity = std::max(max_additivity, d.additivity_error);
            csv << d.step << ',' << num(d.full_norm) << ',' << num(d.ktr_norm) << ',' << num(d.rest_norm) << ','
                << num(d.cos_ktr_full) << ',' << num(d.cos_rest_full) << ',' << num(d.selected_token_norm) << ','
                << num(d.masked_token_norm) << ',' << d.selected_tokens << ',' << d.masked_tokens << ','
                << num(d.additivity_error) << '\n';
        }
    }

    // Mask-derived tables.
    std::vector<select::TokenMask> masks;
    std::vector<std::vector<TokenId>> tokens;
    for (const auto& r : mask_records) {
        try {
            auto rec = select::mask_from_json(r.dump());
            masks.push_back(std::move(rec.mask));
            tokens.push_back(std::move(rec.tokens));
        } catch (const std::exception&) {
            warnings.push_back("masks.jsonl: malformed record skipped");
        }
    }
    diag::OverlapStats overlap;
    for (const auto& m : masks) overlap += diag::overlap_stats(m);
    {
        const auto hist = diag::position_histogram(masks, kPositionBins);
        std::ofstream csv(out / "position_histogram.csv", std::ios::binary);
        csv << "bin,lo,hi,selected,total,probability\n";
        if (!masks.empty()) {
            for (std::size_t b = 0; b < hist.bins(); ++b) {
                csv << b << ',' << num(static_cast<double>(b) / kPositionBins) << ','
                    << num(static_cast<double>(b + 1) / kPositionBins) << ',' << hist.selected[b] << ','
                    << hist.total[b] << ',' << num(hist.probability(b)) << '\n';
            }
        }
    }
    {
        std::ofstream csv(out / "overlap.csv", std::ios::binary);
        csv << "exactly_one,exactly_two,all_three,union,tokens,density\n";
        if (!masks.empty()) {
            csv << overlap.exactly_one << ',' << overlap.exactly_two << ',' << overlap.all_three << ','
                << overlap.union_size << ',' << overlap.tokens << ',' << num(overlap.density()) << '\n';
        }
    }
    {
        // The vocabulary only depends on V_f, which the config records.
        std::size_t frame_vocab = env::EnvConfig{}.frame_vocab;
        if (std::ifstream in(run_dir / "config.json"); in) {
            try {
                frame_vocab = json::parse(in).at("env").at("frame_vocab").get<std::size_t>();
            } catch (const json::exception&) {
                warnings.push_back("config.json: frame_vocab unreadable, using default");
            }
        } else {
            warnings.push_back("missing config.json");
        }
        std::ofstream csv(out / "category_rates.csv", std::ios::binary);
        csv << "signal,category,selected,rate,base_rate\n";
        bool usable = !masks.empty();
        for (std::size_t i = 0; i < masks.size() && usable; ++i) usable = tokens[i].size() == masks[i].bits.size();
        if (usable) {
            const auto st = diag::token_category_stats(masks, tokens, Vocabulary(frame_vocab));
            for (std::size_t s = 0; s < diag::kSignalCount; ++s) {
                for (std::size_t c = 0; c < kTokenCategoryCount; ++c) {
                    const auto sig = static_cast<diag::Signal>(s);
                    const auto cat = static_cast<TokenCategory>(c);
                    csv << diag::signal_name(sig) << ',' << category_name(cat) << ',' << st.selected[s][c] << ','
                        << num(st.rate(sig, cat)) << ',' << num(st.base_rate(cat)) << '\n';
                }
            }
        } else if (!masks.empty()) {
            warnings.push_back("masks.jsonl: token streams missing, category table left empty");
        }
    }

    json summary;
    summary["steps"] = metrics.size();
    summary["mean-reward"] = mean_or_null(rewards);
    summary["mask-density"] = mean_or_null(densities);
    summary["mean-loss"] = mean_or_null(losses);
    summary["mean-loss-variance"] = losses.size() >= 2 ? json(diag::mean_loss_variance(losses, kVarianceWindow)) : json(nullptr);
    summary["loss-variance-window"] = kVarianceWindow;
    summary["initial-eval-reward"] = evals.empty() ? json(nullptr) : evals.front().value("mean-reward", json(nullptr));
    summary["final-eval-reward"] = evals.empty() ? json(nullptr) : evals.back().value("mean-reward", json(nullptr));
    if (!evals.empty()) summary["final-eval"] = evals.back();
    summary["diagnostic-steps"] = grad_records.size();
    summary["mean-cos-ktr-full"] = mean_or_null(cos_ktr);
    summary["mean-cos-rest-full"] = mean_or_null(cos_rest);
    summary["mean-selected-token-norm"] = mean_or_null(sel_norm);
    summary["mean-masked-token-norm"] = mean_or_null(mask_norm);
    summary["max-additivity-error"] = max_additivity;
    summary["overlap"] = {{"exactly-one", overlap.exactly_one},
                          {"exactly-two", overlap.exactly_two},
                          {"all-three", overlap.all_three},
                          {"union", overlap.union_size},
                          {"tokens", overlap.tokens},
                          {"density", overlap.density()}};
    summary["rollouts"] = masks.size();
    summary["warnings"] = warnings;
    std::ofstream(out / "summary.json", std::ios::binary) << summary.dump(2) << '\n';

    for (const auto& w : warnings) log << "report warning: " << w << '\n';
    return kExitOk;
}

}  // namespace ktr::harness
