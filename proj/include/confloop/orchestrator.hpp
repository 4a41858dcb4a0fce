#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confloop/agent.hpp"
#include "confloop/bootstrap_ci.hpp"
#include "confloop/causal_tree.hpp"
#include "confloop/config.hpp"
#include "confloop/dataset.hpp"
#include "confloop/error.hpp"
#include "confloop/knowledge.hpp"
#include "confloop/review.hpp"

namespace confloop {

struct StratumModel {
    std::string key;  // empty for the unrestricted iteration-0 tree
    RestrictionContext context;
    CausalTree tree;
};

struct IterationModel {
    int index = 0;
    std::vector<std::string> validated;
    std::vector<StratumModel> strata;
    /// Test samples (by id) whose CI was at or below the threshold here.
    std::vector<std::string> stable_ids;
};

struct FinalModel {
    std::string run_id;
    std::vector<IterationModel> iterations;

    nlohmann::ordered_json to_json() const;
    static FinalModel from_json(const nlohmann::json& doc);
};

struct FinalPrediction {
    double cate = 0.0;
    int iteration = 0;
    int leaf_id = 0;
    std::string stratum;
};

/// Scans iterations from last to first and answers from the first one where x
/// lies in a stratum and routes to a leaf of that stratum's tree. Iteration 0
/// has no restriction, so every complete x gets an answer. Throws DataError
/// when a covariate the answering tree needs is missing.
FinalPrediction predict_final(const FinalModel& model, const CovariateMap& x);

namespace termination {
inline constexpr const char* empty_set = "empty C′";
inline constexpr const char* max_iterations = "max_iterations";
inline constexpr const char* min_active_samples = "min_active_samples";
inline constexpr const char* pool_exhausted = "covariate_pool_exhausted";
inline constexpr const char* no_fittable_strata = "no_fittable_strata";
inline constexpr const char* partition_unfittable = "partition_unfittable";
inline constexpr const char* stopped = "stopped";
}  // namespace termination

struct PipelineHooks {
    /// Called with the report after every stage that changes it.
    std::function<void(const nlohmann::ordered_json& report)> on_progress;
    std::function<void(int iteration, int rework, const nlohmann::ordered_json& trace)> on_trace;
    /// Checked between stages; when set the run ends with reason "stopped".
    const std::atomic<bool>* stop = nullptr;
    /// When set, the run directory is rewritten after every iteration.
    std::optional<std::filesystem::path> persist_dir;
};

struct PipelineResult {
    std::string run_id;
    nlohmann::ordered_json report;
    FinalModel model;
    /// Pooled test-set stability report per iteration that ran bootstrap CI.
    std::vector<StabilityReport> ci;
    /// Agent traces in execution order.
    std::vector<nlohmann::ordered_json> traces;
};

/// A stage failed; `partial` holds everything produced before the failure,
/// with report status "aborted" and the error message recorded.
class PipelineError : public Error {
public:
    PipelineError(const std::string& what, PipelineResult partial) : Error(what), partial(std::move(partial)) {}
    PipelineResult partial;
};

/// Deterministic id from the dataset contents and the serialized config.
std::string compute_run_id(const Dataset& ds, const RunConfig& cfg);

PipelineResult run_pipeline(const Dataset& ds, const RunConfig& cfg, AgentBackend& backend, ExpertPolicy& policy,
                            const KnowledgeBase& kb, const PipelineHooks& hooks = {}, std::string run_id = {});

/// Writes report.json, model.json, traces/iteration_<k>.json and
/// ci/iteration_<k>.json under run_dir. Timestamps go to timestamps.json only.
void persist_run(const PipelineResult& result, const std::filesystem::path& run_dir);

/// Mean of predict_final over `ids`.
double mean_prediction(const FinalModel& model, const Dataset& ds, std::span<const SampleIndex> ids);
/// Same, answering only from iterations <= max_iteration.
double mean_prediction(const FinalModel& model, const Dataset& ds, std::span<const SampleIndex> ids,
                       int max_iteration);

}  // namespace confloop
