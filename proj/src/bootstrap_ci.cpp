#include "confloop/bootstrap_ci.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "confloop/error.hpp"
#include "confloop/log.hpp"
#include "confloop/parallel.hpp"
#include "confloop/random.hpp"

namespace confloop {

std::vector<SampleIndex> bag_replicate(std::span<const SampleIndex> ids, std::uint64_t seed, std::size_t replicate) {
    Rng rng(derive_seed(seed, replicate));
    std::vector<SampleIndex> out(ids.size());
    for (auto& slot : out) slot = ids[static_cast<std::size_t>(rng.below(ids.size()))];
    return out;
}

std::vector<std::vector<SampleIndex>> bag(std::span<const SampleIndex> ids, std::size_t b, std::uint64_t seed) {
    if (ids.empty()) throw Error("bag: empty id set");
    if (b < 1) throw Error("bag: b must be >= 1");
    std::vector<std::vector<SampleIndex>> bags(b);
    for (std::size_t r = 0; r < b; ++r) bags[r] = bag_replicate(ids, seed, r);
    return bags;
}

std::uint64_t ensemble_tree_seed(std::uint64_t master_seed, std::size_t index) {
    return derive_seed(master_seed ^ 0x74726565ULL, index);
}

BootstrapEnsemble fit_ensemble(const Dataset& ds, std::span<const SampleIndex> source_ids,
                               const std::vector<std::vector<SampleIndex>>& bags,
                               const std::vector<std::string>& covariates, const TreeParams& params,
                               std::uint64_t master_seed, const EnsembleOptions& options) {
    BootstrapEnsemble ens;
    ens.b = bags.size();
    ens.seed = master_seed;
    ens.trees.resize(bags.size());
    ens.redraws.assign(bags.size(), 0);

    parallel_for(bags.size(), options.threads, [&](std::size_t r) {
        TreeParams p = params;
        p.seed = ensemble_tree_seed(master_seed, r);
        try {
            ens.trees[r] = fit_tree(ds, bags[r], covariates, p);
            return;
        } catch (const FitError&) {
            if (source_ids.empty()) throw;
        }
        const std::uint64_t redraw_seed = derive_seed(master_seed ^ 0x726564726177ULL, r);
        for (int attempt = 1; attempt <= options.max_redraws; ++attempt) {
            auto redrawn = bag_replicate(source_ids, redraw_seed, static_cast<std::size_t>(attempt));
            try {
                ens.trees[r] = fit_tree(ds, redrawn, covariates, p);
                ens.redraws[r] = attempt;
                return;
            } catch (const FitError&) {
            }
        }
        throw FitError("bootstrap bag " + std::to_string(r) + " could not be fitted after " +
                       std::to_string(options.max_redraws) + " redraws");
    });
    for (std::size_t r = 0; r < ens.redraws.size(); ++r)
        if (ens.redraws[r] > 0)
            log::info("bootstrap_ci", "bag " + std::to_string(r) + " refitted after " +
                                          std::to_string(ens.redraws[r]) + " redraw(s)");
    return ens;
}

double quantile_sorted(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw Error("quantile of an empty list");
    if (!(p >= 0.0 && p <= 1.0)) throw Error("quantile probability outside [0, 1]");
    const std::size_t n = sorted.size();
    const double h = static_cast<double>(n - 1) * p + 1.0;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo >= n) return sorted[n - 1];
    const double frac = h - static_cast<double>(lo);
    return sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1]);
}

double quantile(std::span<const double> values, double p) {
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    return quantile_sorted(sorted, p);
}

CIRecord ci_from_predictions(std::span<const double> predictions, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0, 1)");
    std::vector<double> sorted(predictions.begin(), predictions.end());
    std::sort(sorted.begin(), sorted.end());
    CIRecord r;
    r.point = std::accumulate(predictions.begin(), predictions.end(), 0.0) / static_cast<double>(predictions.size());
    r.lower = quantile_sorted(sorted, alpha / 2.0);
    r.upper = quantile_sorted(sorted, 1.0 - alpha / 2.0);
    r.width = r.upper - r.lower;
    return r;
}

std::vector<CIRecord> predict_ci(const BootstrapEnsemble& ens, const Dataset& ds,
                                 std::span<const SampleIndex> samples, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0, 1)");
    if (ens.trees.empty()) throw Error("predict_ci: empty ensemble");
    std::vector<CIRecord> out;
    out.reserve(samples.size());
    std::vector<double> preds(ens.trees.size());
    for (auto i : samples) {
        for (std::size_t b = 0; b < ens.trees.size(); ++b) preds[b] = ens.trees[b].assign_leaf(ds, i).cate;
        CIRecord r = ci_from_predictions(preds, alpha);
        r.sample_id = ds.id(i);
        r.index = i;
        out.push_back(std::move(r));
    }
    return out;
}

StabilityReport stability_filter(std::vector<CIRecord> records) {
    if (records.empty()) throw Error("stability_filter: no records");
    StabilityReport report;
    double sum = 0.0;
    for (const auto& r : records) sum += r.width;
    report.threshold = sum / static_cast<double>(records.size());
    for (const auto& r : records) (r.width > report.threshold ? report.unstable_ids : report.stable_ids).push_back(r.index);
    std::sort(report.unstable_ids.begin(), report.unstable_ids.end());
    std::sort(report.stable_ids.begin(), report.stable_ids.end());
    report.records = std::move(records);
    return report;
}

nlohmann::ordered_json to_json(const CIRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.sample_id;
    j["index"] = r.index;
    j["point"] = r.point;
    j["lower"] = r.lower;
    j["upper"] = r.upper;
    j["width"] = r.width;
    return j;
}

nlohmann::ordered_json to_json(const StabilityReport& report) {
    nlohmann::ordered_json j;
    j["threshold"] = report.threshold;
    j["n_records"] = report.records.size();
    j["n_unstable"] = report.unstable_ids.size();
    j["n_stable"] = report.stable_ids.size();
    auto recs = nlohmann::ordered_json::array();
    for (const auto& r : report.records) {
        auto rj = to_json(r);
        rj["stable"] = !(r.width > report.threshold);
        recs.push_back(std::move(rj));
    }
    j["records"] = std::move(recs);
    return j;
}

StabilityReport stability_report_from_json(const nlohmann::json& doc) {
    std::vector<CIRecord> records;
    for (const auto& rj : doc.at("records")) {
        CIRecord r;
        r.sample_id = rj.at("id").get<std::string>();
        r.index = rj.at("index").get<SampleIndex>();
        r.point = rj.at("point").get<double>();
        r.lower = rj.at("lower").get<double>();
        r.upper = rj.at("upper").get<double>();
        r.width = rj.at("width").get<double>();
        records.push_back(std::move(r));
    }
    return stability_filter(std::move(records));
}

}  // namespace confloop
