#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "confloop/causal_tree.hpp"
#include "confloop/dataset.hpp"

namespace oracle {

// Sort, then interpolate between the order statistics at 1-based rank
// h = (n-1)p + 1.
double quantile(std::vector<double> values, double p);

double mean(const std::vector<double>& v);

// mean(y | w=1) - mean(y | w=0) over ids, summed in long double.
double arm_mean_difference(const confloop::Dataset& ds, const std::vector<std::size_t>& ids);

// Evaluates a split rule without going through SplitRule::matches.
bool goes_left(const confloop::Dataset& ds, std::size_t i, const confloop::SplitRule& rule);

struct SplitCandidate {
    std::string covariate;
    std::string describe;
    double gain = 0.0;
};

// Every admissible split of a node: continuous midpoints between consecutive
// distinct structure values, one-vs-rest levels for categorical covariates,
// the single partition for binary ones. Admissible means each child keeps
// min_leaf treated and control samples in the structure half and, when
// honest, in the estimate half too. Gain is recomputed from scratch.
std::vector<SplitCandidate> enumerate_splits(const confloop::Dataset& ds, const std::vector<std::size_t>& structure,
                                             const std::vector<std::size_t>& estimate,
                                             const std::vector<std::string>& covariates, std::size_t min_leaf,
                                             bool honest);

// Gain of splitting `structure` by the rule, recomputed from arm means.
double split_gain(const confloop::Dataset& ds, const std::vector<std::size_t>& structure,
                  const confloop::SplitRule& rule);

// Samples reaching each node of the tree, by node index.
std::vector<std::vector<std::size_t>> route_nodes(const confloop::CausalTree& tree, const confloop::Dataset& ds,
                                                  const std::vector<std::size_t>& ids);

}  // namespace oracle
