#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace confloop {

enum class CovariateKind { binary, categorical, continuous };

std::string_view to_string(CovariateKind kind);
CovariateKind parse_covariate_kind(std::string_view text);

/// Schema entry for one pre-treatment covariate. `description` is free text
/// that is passed verbatim into agent prompts.
struct CovariateMeta {
    std::string name;
    std::string description;
    CovariateKind kind = CovariateKind::continuous;
    std::vector<std::string> levels;  // empty for continuous

    bool is_discrete() const { return kind != CovariateKind::continuous; }

    friend bool operator==(const CovariateMeta&, const CovariateMeta&) = default;
};

/// Row position inside a Dataset. Id sets are sorted vectors of these.
using SampleIndex = std::size_t;
using IdSet = std::vector<SampleIndex>;

/// Covariate values keyed by name. Discrete covariates are coded by level
/// index (position in CovariateMeta::levels); continuous ones carry the value.
using CovariateMap = std::map<std::string, double>;

struct Sample {
    std::string id;
    double outcome = 0.0;
    int treatment = 0;
    CovariateMap covariates;
};

/// Immutable, validated observational data stored column-wise.
class Dataset {
public:
    Dataset() = default;

    /// Validates every invariant (unique names and ids, treatment in {0,1},
    /// discrete codes within range). `columns[c][i]` is covariate c of row i.
    Dataset(std::vector<CovariateMeta> meta, std::vector<std::string> ids,
            std::vector<double> outcomes, std::vector<int> treatments,
            std::vector<std::vector<double>> columns);

    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }

    const std::vector<CovariateMeta>& meta() const { return meta_; }
    std::size_t covariate_count() const { return meta_.size(); }
    std::optional<std::size_t> covariate_index(std::string_view name) const;
    /// Throws DataError for an unknown name.
    std::size_t require_covariate(std::string_view name) const;
    const CovariateMeta& covariate(std::string_view name) const;

    const std::string& id(SampleIndex i) const { return ids_[i]; }
    double outcome(SampleIndex i) const { return outcomes_[i]; }
    int treatment(SampleIndex i) const { return treatments_[i]; }
    double value(SampleIndex i, std::size_t column) const { return columns_[column][i]; }
    std::span<const double> column(std::size_t c) const { return columns_[c]; }
    const std::vector<std::string>& ids() const { return ids_; }

    std::optional<SampleIndex> find_id(std::string_view id) const;

    Sample sample(SampleIndex i) const;
    CovariateMap covariate_map(SampleIndex i) const;

    /// Level text for a discrete value code, or the formatted number.
    std::string format_value(std::size_t column, double code) const;
    /// Inverse of format_value for a single cell; throws DataError.
    double parse_value(std::size_t column, std::string_view text) const;

    IdSet all_ids() const;

private:
    std::vector<CovariateMeta> meta_;
    std::vector<std::string> ids_;
    std::vector<double> outcomes_;
    std::vector<int> treatments_;
    std::vector<std::vector<double>> columns_;
    std::map<std::string, std::size_t, std::less<>> name_index_;
    std::map<std::string, SampleIndex, std::less<>> id_index_;
};

std::vector<CovariateMeta> parse_metadata(const nlohmann::json& doc);
nlohmann::ordered_json metadata_to_json(const std::vector<CovariateMeta>& meta);
std::vector<CovariateMeta> load_metadata(const std::filesystem::path& meta_path);

/// Parses CSV text with header `id,y,w,<covariates...>`. Errors name the
/// 1-based data row (header is row 0).
Dataset parse_dataset(std::string_view csv_text, std::vector<CovariateMeta> meta);
Dataset load_dataset(const std::filesystem::path& data_path, const std::filesystem::path& meta_path);

std::string dataset_to_csv(const Dataset& ds);

struct DataSplit {
    IdSet train;
    IdSet estimation;
    IdSet test;
};

struct SplitRatios {
    double train = 0.4;
    double estimation = 0.4;
    double test = 0.2;

    friend bool operator==(const SplitRatios&, const SplitRatios&) = default;
};

/// Deterministic shuffled partition. Sizes are floor(n * ratio) for train and
/// estimation; the remainder goes to test.
DataSplit split_dataset(const Dataset& ds, const SplitRatios& ratios, std::uint64_t seed);

/// Validated confounders accumulated so far and the level of each one that
/// defines a particular stratum (stratum values are level indices).
struct RestrictionContext {
    std::vector<std::string> confounders;
    std::map<std::string, double> stratum;

    friend bool operator==(const RestrictionContext&, const RestrictionContext&) = default;
};

struct Stratum {
    RestrictionContext context;
    IdSet ids;
};

struct RestrictionResult {
    /// Keyed by the canonical stratum key, e.g. "DM=1&HTN=0" in confounder order.
    std::map<std::string, Stratum> strata;
    IdSet dropped;
};

/// Canonical text key of a stratum, confounders in context order.
std::string stratum_key(const RestrictionContext& ctx, const Dataset& ds);

/// Partitions ids into strata of identical joint confounder level. Strata with
/// fewer than min_stratum_size members are dropped (logged). Continuous
/// confounders raise RestrictionError.
RestrictionResult apply_restriction(std::span<const SampleIndex> ids,
                                    const RestrictionContext& ctx, const Dataset& ds,
                                    std::size_t min_stratum_size = 30);

/// True when sample i has exactly the stratum's confounder levels.
bool in_stratum(const Dataset& ds, SampleIndex i, const RestrictionContext& ctx);
bool in_stratum(const CovariateMap& x, const RestrictionContext& ctx);

/// All covariates not in `validated`, in metadata order.
std::vector<std::string> remaining_covariates(const Dataset& ds,
                                              const std::vector<std::string>& validated);

}  // namespace confloop
