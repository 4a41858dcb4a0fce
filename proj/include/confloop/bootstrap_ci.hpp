#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confloop/causal_tree.hpp"
#include "confloop/dataset.hpp"

namespace confloop {

/// Bootstrap replicate count and two-sided CI level used throughout.
inline constexpr std::size_t kDefaultBootstrapReplicates = 64;
inline constexpr double kDefaultAlpha = 0.05;

/// Resamples with replacement: b multisets, each of |ids| elements. Replicate r
/// draws from its own sub-seed, so any subset of replicates can be recomputed
/// independently.
std::vector<std::vector<SampleIndex>> bag(std::span<const SampleIndex> ids, std::size_t b, std::uint64_t seed);

/// One replicate drawn from derive_seed(seed, replicate).
std::vector<SampleIndex> bag_replicate(std::span<const SampleIndex> ids, std::uint64_t seed, std::size_t replicate);

struct BootstrapEnsemble {
    std::vector<CausalTree> trees;
    std::size_t b = 0;
    std::uint64_t seed = 0;
    /// Redraw attempts used per replicate (0 when the first bag fitted).
    std::vector<int> redraws;
};

struct EnsembleOptions {
    std::size_t threads = 1;
    int max_redraws = 5;
};

/// Per-tree seed for replicate `index` of an ensemble.
std::uint64_t ensemble_tree_seed(std::uint64_t master_seed, std::size_t index);

/// Fits one tree per bag with params.seed replaced by the per-tree seed. A bag
/// that cannot be fitted is replaced by a fresh redraw from `source_ids`, up to
/// max_redraws times; after that a FitError names the bag index.
BootstrapEnsemble fit_ensemble(const Dataset& ds, std::span<const SampleIndex> source_ids,
                               const std::vector<std::vector<SampleIndex>>& bags,
                               const std::vector<std::string>& covariates, const TreeParams& params,
                               std::uint64_t master_seed, const EnsembleOptions& options = {});

/// Sample quantile with linear interpolation at 1-based rank h = (n-1)p + 1.
double quantile(std::span<const double> values, double p);
/// Same on already sorted input.
double quantile_sorted(std::span<const double> sorted, double p);

struct CIRecord {
    std::string sample_id;
    SampleIndex index = 0;
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    double width = 0.0;

    friend bool operator==(const CIRecord&, const CIRecord&) = default;
};

/// Per-sample percentile CIs from the B tree predictions; point is their mean.
std::vector<CIRecord> predict_ci(const BootstrapEnsemble& ens, const Dataset& ds,
                                 std::span<const SampleIndex> samples, double alpha = kDefaultAlpha);

/// CI from an explicit prediction vector (exposed for testing and reuse).
CIRecord ci_from_predictions(std::span<const double> predictions, double alpha);

struct StabilityReport {
    std::vector<CIRecord> records;
    double threshold = 0.0;
    IdSet unstable_ids;
    IdSet stable_ids;

    double mean_width() const { return threshold; }
};

/// threshold = mean width; unstable = width strictly above the threshold.
StabilityReport stability_filter(std::vector<CIRecord> records);

nlohmann::ordered_json to_json(const CIRecord& r);
nlohmann::ordered_json to_json(const StabilityReport& report);
StabilityReport stability_report_from_json(const nlohmann::json& doc);

}  // namespace confloop
