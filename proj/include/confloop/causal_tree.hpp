#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confloop/dataset.hpp"

namespace confloop {

/// One conjunct of a leaf path. Thresholds apply to continuous covariates
/// (`<=` / `>`); levels to discrete ones (`==` / `!=`, level index in `level`).
struct SplitRule {
    enum class Op { le, gt, eq, ne };

    std::string covariate;
    CovariateKind kind = CovariateKind::continuous;
    Op op = Op::le;
    double threshold = 0.0;
    std::size_t level = 0;
    std::string level_name;

    bool matches(double value) const;
    /// "AGE <= 61.5", "HTN == 1", "REGION != north".
    std::string to_string() const;

    friend bool operator==(const SplitRule&, const SplitRule&) = default;
};

std::string_view op_symbol(SplitRule::Op op);

struct Leaf {
    int id = 0;
    std::vector<SplitRule> path;
    double cate = 0.0;
    std::size_t n_treated = 0;
    std::size_t n_control = 0;

    bool matches(const CovariateMap& x) const;

    friend bool operator==(const Leaf&, const Leaf&) = default;
};

struct TreeParams {
    int max_depth = 4;
    std::size_t min_leaf_per_arm = 15;
    double min_split_gain = 1e-4;
    bool honest = true;
    std::uint64_t seed = 0;

    void validate() const;

    friend bool operator==(const TreeParams&, const TreeParams&) = default;
};

/// The leaf set of a fitted tree.
struct Partition {
    std::string tree_id;
    std::vector<Leaf> leaves;
    TreeParams fit_params;
};

/// Difference in means: mean(treated) - mean(control). Throws on an empty arm.
double leaf_cate(std::span<const double> treated_outcomes, std::span<const double> control_outcomes);

/// Heterogeneity gain of splitting a node into two children, each given as
/// (n, cate): n_l*cate_l^2 + n_r*cate_r^2 - (n_l+n_r)*cate_parent^2.
double heterogeneity_gain(std::size_t n_left, double cate_left, std::size_t n_right, double cate_right,
                          double cate_parent);

/// Honest halves of a sample multiset: split-arm-balanced, seeded shuffle.
struct HonestHalves {
    std::vector<SampleIndex> structure;
    std::vector<SampleIndex> estimate;
};
HonestHalves honest_halves(const Dataset& ds, std::span<const SampleIndex> samples, std::uint64_t seed);

/// A fitted honest causal tree. Immutable after construction.
class CausalTree {
public:
    struct Node {
        // Internal nodes: `rule` is the condition of the left child; the right
        // child holds its negation. Leaves carry an index into leaves().
        bool is_leaf = true;
        SplitRule rule;
        int left = -1;
        int right = -1;
        int leaf = -1;
        int depth = 0;

        friend bool operator==(const Node&, const Node&) = default;
    };

    CausalTree() = default;

    const std::string& tree_id() const { return tree_id_; }
    const TreeParams& params() const { return params_; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<Leaf>& leaves() const { return leaves_; }
    /// Covariates the tree was allowed to split on, in tie-break order.
    const std::vector<std::string>& covariates() const { return covariates_; }
    /// Schema of covariates(), same order.
    const std::vector<CovariateMeta>& schema() const { return schema_; }

    Partition partition() const { return Partition{tree_id_, leaves_, params_}; }

    /// Route a covariate map; throws DataError when a needed value is missing.
    const Leaf& assign_leaf(const CovariateMap& x) const;
    /// Route a dataset row; the dataset must carry every split covariate.
    const Leaf& assign_leaf(const Dataset& ds, SampleIndex i) const;

    /// Same structure with leaf statistics recomputed from `estimate` samples.
    CausalTree reestimated(const Dataset& ds, std::span<const SampleIndex> estimate) const;

    nlohmann::ordered_json to_json() const;
    static CausalTree from_json(const nlohmann::json& doc);

    friend CausalTree fit_tree(const Dataset& ds, std::span<const SampleIndex> samples,
                               const std::vector<std::string>& covariates, const TreeParams& params);

    friend bool operator==(const CausalTree& a, const CausalTree& b);

private:
    int route(const Dataset* ds, SampleIndex i, const CovariateMap* x) const;
    void rebuild_leaf_paths();

    std::string tree_id_;
    TreeParams params_;
    std::vector<std::string> covariates_;
    std::vector<CovariateMeta> schema_;
    std::vector<Node> nodes_;
    std::vector<Leaf> leaves_;
};

/// Greedy recursive partitioning on the heterogeneity gain. With
/// params.honest the samples are halved: one half picks splits, the other
/// supplies leaf CATEs and counts. Splits must leave at least
/// min_leaf_per_arm treated and control samples in each child of each half.
CausalTree fit_tree(const Dataset& ds, std::span<const SampleIndex> samples,
                    const std::vector<std::string>& covariates, const TreeParams& params);

/// A leaf rendered for people and prompts; no backend involved.
struct RuleText {
    int leaf_id = 0;
    std::vector<SplitRule> conjunction;
    std::string text;  // "HTN == 1 AND AGE <= 61.5" or "(entire population)"
    std::string described;  // same, with covariate descriptions substituted
    double cate = 0.0;
    std::size_t n_treated = 0;
    std::size_t n_control = 0;
};

inline constexpr const char* kEntirePopulation = "(entire population)";

std::vector<RuleText> extract_rules(const Partition& p, const std::vector<CovariateMeta>& meta);

}  // namespace confloop
