#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confloop/dataset.hpp"

namespace confloop {

struct FinalModel;

struct SynthCovariate {
    CovariateMeta meta;
    /// Binary: P(level 1). Categorical: one probability per level.
    /// Continuous: unused.
    double prevalence = 0.5;
    std::vector<double> level_probs;
    double mean = 0.0;  // continuous draws are Normal(mean, sd)
    double sd = 1.0;
};

struct SynthConfounder {
    std::string name;
    double treatment_log_odds_shift = 0.0;
    double outcome_shift = 0.0;
};

/// One piece of the piecewise-constant effect: adds `shift` where the
/// covariate equals `level` (discrete) or exceeds `threshold` (continuous).
struct EffectTerm {
    std::string covariate;
    std::string level;
    double threshold = 0.0;
    double shift = 0.0;
};

struct SynthConfig {
    std::size_t n = 5000;
    std::uint64_t seed = 1;
    std::vector<SynthCovariate> covariates;
    std::vector<SynthConfounder> confounders;
    double effect_base = 0.0;
    std::vector<EffectTerm> effect_terms;
    double noise_sd = 1.0;
    double base_rate_treated = 0.5;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

/// Comorbidity flags HTN, DM, CHF, AF, CAD, CVAD, CKD, COPDA, GOUT (binary,
/// prevalence 0.5) with no confounding and tau = 1.
SynthConfig default_synth_config();

nlohmann::ordered_json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& doc);
SynthConfig load_synth_config(const std::filesystem::path& path);

struct ConfounderBias {
    std::string name;
    double treatment_log_odds_shift = 0.0;
    double outcome_shift = 0.0;
    /// P(flag | treated) - P(flag | control) in the draw.
    double prevalence_gap = 0.0;
    /// outcome_shift * prevalence_gap: this confounder's share of the naive
    /// difference-in-means bias.
    double naive_bias = 0.0;
};

struct GroundTruth {
    std::vector<std::string> ids;
    std::vector<double> tau;
    double ate = 0.0;
    std::vector<ConfounderBias> confounders;

    /// tau for a sample id; throws DataError for unknown ids.
    double tau_of(const std::string& id) const;
};

nlohmann::ordered_json to_json(const GroundTruth& truth);
GroundTruth ground_truth_from_json(const nlohmann::json& doc);

/// tau(x) for a covariate map under the config's effect function.
double true_effect(const SynthConfig& cfg, const CovariateMap& x);

struct SynthResult {
    Dataset dataset;
    GroundTruth truth;
};

/// Throws DataError if every draw landed in one arm (suggests a new seed).
SynthResult generate(const SynthConfig& cfg);

struct ModelEvaluation {
    double pehe = 0.0;
    double ate_error = 0.0;
    double mean_predicted = 0.0;
};

/// pehe = sqrt(mean (predict_final - tau)^2) over `ids`; ate_error =
/// |mean predicted - true ATE|.
ModelEvaluation evaluate_model(const FinalModel& model, const Dataset& ds, const GroundTruth& truth,
                               std::span<const SampleIndex> ids);

/// Writes data.csv, metadata.json and truth.json into out_dir.
void write_synth_outputs(const SynthResult& result, const std::filesystem::path& out_dir);

}  // namespace confloop
