#include "confloop/causal_tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "confloop/error.hpp"
#include "confloop/hash.hpp"
#include "confloop/random.hpp"

namespace confloop {
namespace {

std::string format_threshold(double v) {
    std::ostringstream out;
    out.precision(6);
    out << v;
    return out.str();
}

SplitRule::Op parse_op(std::string_view s) {
    if (s == "<=") return SplitRule::Op::le;
    if (s == ">") return SplitRule::Op::gt;
    if (s == "==") return SplitRule::Op::eq;
    if (s == "!=") return SplitRule::Op::ne;
    throw DataError("unknown split operator '" + std::string(s) + "'");
}

struct ArmSums {
    std::size_t n_t = 0;
    std::size_t n_c = 0;
    double sum_t = 0.0;
    double sum_c = 0.0;

    void add(int w, double y) {
        if (w == 1) {
            ++n_t;
            sum_t += y;
        } else {
            ++n_c;
            sum_c += y;
        }
    }
    std::size_t n() const { return n_t + n_c; }
    double cate() const { return sum_t / static_cast<double>(n_t) - sum_c / static_cast<double>(n_c); }
    ArmSums minus(const ArmSums& o) const {
        return ArmSums{n_t - o.n_t, n_c - o.n_c, sum_t - o.sum_t, sum_c - o.sum_c};
    }
};

struct Candidate {
    double gain = -std::numeric_limits<double>::infinity();
    std::size_t covariate = 0;
    SplitRule rule;
    bool found = false;
};

SplitRule negate(const SplitRule& rule, const CovariateMeta& meta) {
    SplitRule out = rule;
    switch (rule.op) {
        case SplitRule::Op::le: out.op = SplitRule::Op::gt; break;
        case SplitRule::Op::gt: out.op = SplitRule::Op::le; break;
        case SplitRule::Op::eq:
            if (meta.kind == CovariateKind::binary) {
                out.level = 1 - rule.level;
                out.level_name = meta.levels[out.level];
            } else {
                out.op = SplitRule::Op::ne;
            }
            break;
        case SplitRule::Op::ne: out.op = SplitRule::Op::eq; break;
    }
    return out;
}

class TreeBuilder {
public:
    TreeBuilder(const Dataset& ds, const std::vector<std::size_t>& columns, const TreeParams& params,
                std::vector<CausalTree::Node>& nodes, std::vector<Leaf>& leaves)
        : ds_(ds), columns_(columns), params_(params), nodes_(nodes), leaves_(leaves) {}

    int build(std::vector<SampleIndex> structure, std::vector<SampleIndex> estimate, int depth) {
        const int index = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        nodes_[index].depth = depth;

        Candidate best;
        if (depth < params_.max_depth) best = best_split(structure, estimate);
        if (!best.found || !(best.gain > params_.min_split_gain)) {
            make_leaf(index, estimate);
            return index;
        }

        std::vector<SampleIndex> s_left, s_right, e_left, e_right;
        const auto col = columns_[best.covariate];
        for (auto i : structure) (best.rule.matches(ds_.value(i, col)) ? s_left : s_right).push_back(i);
        for (auto i : estimate) (best.rule.matches(ds_.value(i, col)) ? e_left : e_right).push_back(i);
        structure.clear();
        structure.shrink_to_fit();
        estimate.clear();
        estimate.shrink_to_fit();

        nodes_[index].is_leaf = false;
        nodes_[index].rule = best.rule;
        const int left = build(std::move(s_left), std::move(e_left), depth + 1);
        const int right = build(std::move(s_right), std::move(e_right), depth + 1);
        nodes_[index].left = left;
        nodes_[index].right = right;
        return index;
    }

private:
    bool arms_ok(const ArmSums& s) const {
        return s.n_t >= params_.min_leaf_per_arm && s.n_c >= params_.min_leaf_per_arm;
    }

    // Consider a candidate in enumeration order; strict improvement keeps the
    // earliest (lowest covariate index, then smallest threshold / level).
    void offer(Candidate& best, double gain, std::size_t cov, const SplitRule& rule) const {
        if (!best.found || gain > best.gain) {
            best.gain = gain;
            best.covariate = cov;
            best.rule = rule;
            best.found = true;
        }
    }

    Candidate best_split(const std::vector<SampleIndex>& structure, const std::vector<SampleIndex>& estimate) const {
        ArmSums total;
        for (auto i : structure) total.add(ds_.treatment(i), ds_.outcome(i));
        Candidate best;
        if (!arms_ok(total)) return best;
        const double parent = total.cate();

        for (std::size_t k = 0; k < columns_.size(); ++k) {
            const auto col = columns_[k];
            const auto& meta = ds_.meta()[col];
            if (meta.is_discrete()) {
                const std::size_t levels = meta.levels.size();
                std::vector<ArmSums> s_by_level(levels), e_by_level(levels);
                for (auto i : structure)
                    s_by_level[static_cast<std::size_t>(ds_.value(i, col))].add(ds_.treatment(i), ds_.outcome(i));
                for (auto i : estimate)
                    e_by_level[static_cast<std::size_t>(ds_.value(i, col))].add(ds_.treatment(i), 0.0);
                ArmSums e_total;
                for (const auto& e : e_by_level) {
                    e_total.n_t += e.n_t;
                    e_total.n_c += e.n_c;
                }
                // Binary covariates yield a single distinct partition.
                const std::size_t n_candidates = meta.kind == CovariateKind::binary ? 1 : levels;
                for (std::size_t l = 0; l < n_candidates; ++l) {
                    const ArmSums& left = s_by_level[l];
                    const ArmSums right = total.minus(left);
                    if (!arms_ok(left) || !arms_ok(right)) continue;
                    if (params_.honest && (!arms_ok(e_by_level[l]) || !arms_ok(e_total.minus(e_by_level[l]))))
                        continue;
                    SplitRule rule;
                    rule.covariate = meta.name;
                    rule.kind = meta.kind;
                    rule.op = SplitRule::Op::eq;
                    rule.level = l;
                    rule.level_name = meta.levels[l];
                    offer(best, heterogeneity_gain(left.n(), left.cate(), right.n(), right.cate(), parent), k, rule);
                }
                continue;
            }

            struct Point {
                double v;
                int w;
                double y;
            };
            std::vector<Point> pts;
            pts.reserve(structure.size());
            for (auto i : structure) pts.push_back({ds_.value(i, col), ds_.treatment(i), ds_.outcome(i)});
            std::stable_sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.v < b.v; });

            // Estimate-half values per arm, sorted, for counting children.
            std::vector<double> e_treated, e_control;
            if (params_.honest) {
                for (auto i : estimate) (ds_.treatment(i) == 1 ? e_treated : e_control).push_back(ds_.value(i, col));
                std::sort(e_treated.begin(), e_treated.end());
                std::sort(e_control.begin(), e_control.end());
            }

            ArmSums left;
            for (std::size_t p = 0; p + 1 < pts.size(); ++p) {
                left.add(pts[p].w, pts[p].y);
                if (pts[p].v == pts[p + 1].v) continue;
                const ArmSums right = total.minus(left);
                if (!arms_ok(left)) continue;
                if (!arms_ok(right)) break;  // right only shrinks from here on
                double threshold = pts[p].v + (pts[p + 1].v - pts[p].v) / 2.0;
                if (!(threshold < pts[p + 1].v)) threshold = pts[p].v;
                if (params_.honest) {
                    const auto lt = static_cast<std::size_t>(
                        std::upper_bound(e_treated.begin(), e_treated.end(), threshold) - e_treated.begin());
                    const auto lc = static_cast<std::size_t>(
                        std::upper_bound(e_control.begin(), e_control.end(), threshold) - e_control.begin());
                    const auto m = params_.min_leaf_per_arm;
                    if (lt < m || lc < m || e_treated.size() - lt < m || e_control.size() - lc < m) continue;
                }
                SplitRule rule;
                rule.covariate = meta.name;
                rule.kind = meta.kind;
                rule.op = SplitRule::Op::le;
                rule.threshold = threshold;
                offer(best, heterogeneity_gain(left.n(), left.cate(), right.n(), right.cate(), parent), k, rule);
            }
        }
        return best;
    }

    void make_leaf(int index, const std::vector<SampleIndex>& estimate) {
        ArmSums s;
        for (auto i : estimate) s.add(ds_.treatment(i), ds_.outcome(i));
        if (s.n_t == 0 || s.n_c == 0) throw FitError("leaf without both treatment arms");
        Leaf leaf;
        leaf.id = static_cast<int>(leaves_.size());
        leaf.cate = s.cate();
        leaf.n_treated = s.n_t;
        leaf.n_control = s.n_c;
        nodes_[index].is_leaf = true;
        nodes_[index].leaf = leaf.id;
        leaves_.push_back(std::move(leaf));
    }

    const Dataset& ds_;
    const std::vector<std::size_t>& columns_;
    const TreeParams& params_;
    std::vector<CausalTree::Node>& nodes_;
    std::vector<Leaf>& leaves_;
};

nlohmann::ordered_json rule_to_json(const SplitRule& r) {
    nlohmann::ordered_json j;
    j["covariate"] = r.covariate;
    j["kind"] = to_string(r.kind);
    j["op"] = op_symbol(r.op);
    if (r.kind == CovariateKind::continuous) {
        j["threshold"] = r.threshold;
    } else {
        j["level"] = r.level;
        j["level_name"] = r.level_name;
    }
    return j;
}

SplitRule rule_from_json(const nlohmann::json& j) {
    SplitRule r;
    r.covariate = j.at("covariate").get<std::string>();
    r.kind = parse_covariate_kind(j.at("kind").get<std::string>());
    r.op = parse_op(j.at("op").get<std::string>());
    if (r.kind == CovariateKind::continuous) {
        r.threshold = j.at("threshold").get<double>();
    } else {
        r.level = j.at("level").get<std::size_t>();
        r.level_name = j.at("level_name").get<std::string>();
    }
    return r;
}

}  // namespace

std::string_view op_symbol(SplitRule::Op op) {
    switch (op) {
        case SplitRule::Op::le: return "<=";
        case SplitRule::Op::gt: return ">";
        case SplitRule::Op::eq: return "==";
        case SplitRule::Op::ne: return "!=";
    }
    return "?";
}

bool SplitRule::matches(double value) const {
    switch (op) {
        case Op::le: return value <= threshold;
        case Op::gt: return value > threshold;
        case Op::eq: return value == static_cast<double>(level);
        case Op::ne: return value != static_cast<double>(level);
    }
    return false;
}

std::string SplitRule::to_string() const {
    std::string rhs = kind == CovariateKind::continuous ? format_threshold(threshold) : level_name;
    return covariate + " " + std::string(op_symbol(op)) + " " + rhs;
}

bool Leaf::matches(const CovariateMap& x) const {
    for (const auto& r : path) {
        auto it = x.find(r.covariate);
        if (it == x.end()) throw DataError("missing covariate value " + r.covariate);
        if (!r.matches(it->second)) return false;
    }
    return true;
}

void TreeParams::validate() const {
    if (max_depth < 1) throw ConfigError("max_depth must be >= 1");
    if (min_leaf_per_arm < 1) throw ConfigError("min_leaf_per_arm must be >= 1");
    if (!(min_split_gain >= 0.0)) throw ConfigError("min_split_gain must be >= 0");
}

double leaf_cate(std::span<const double> treated, std::span<const double> control) {
    if (treated.empty() || control.empty()) throw FitError("leaf_cate: empty treatment arm");
    const double mt = std::accumulate(treated.begin(), treated.end(), 0.0) / static_cast<double>(treated.size());
    const double mc = std::accumulate(control.begin(), control.end(), 0.0) / static_cast<double>(control.size());
    return mt - mc;
}

double heterogeneity_gain(std::size_t n_left, double cate_left, std::size_t n_right, double cate_right,
                          double cate_parent) {
    const double nl = static_cast<double>(n_left);
    const double nr = static_cast<double>(n_right);
    return nl * cate_left * cate_left + nr * cate_right * cate_right - (nl + nr) * cate_parent * cate_parent;
}

HonestHalves honest_halves(const Dataset& ds, std::span<const SampleIndex> samples, std::uint64_t seed) {
    std::vector<SampleIndex> treated, control;
    for (auto i : samples) (ds.treatment(i) == 1 ? treated : control).push_back(i);
    HonestHalves halves;
    Rng rng(derive_seed(seed, 0x686f6e657374ULL));
    for (auto* arm : {&treated, &control}) {
        rng.shuffle(std::span<SampleIndex>(*arm));
        const std::size_t half = arm->size() / 2;
        halves.structure.insert(halves.structure.end(), arm->begin(), arm->begin() + static_cast<std::ptrdiff_t>(half));
        halves.estimate.insert(halves.estimate.end(), arm->begin() + static_cast<std::ptrdiff_t>(half), arm->end());
    }
    std::sort(halves.structure.begin(), halves.structure.end());
    std::sort(halves.estimate.begin(), halves.estimate.end());
    return halves;
}

CausalTree fit_tree(const Dataset& ds, std::span<const SampleIndex> samples,
                    const std::vector<std::string>& covariates, const TreeParams& params) {
    params.validate();
    std::vector<std::size_t> columns;
    for (const auto& name : covariates) columns.push_back(ds.require_covariate(name));

    std::size_t n_t = 0, n_c = 0;
    for (auto i : samples) (ds.treatment(i) == 1 ? n_t : n_c) += 1;
    const std::size_t need = 2 * params.min_leaf_per_arm;
    if (n_t < need || n_c < need)
        throw FitError("fit_tree: need >= " + std::to_string(need) + " samples per arm, have " +
                       std::to_string(n_t) + " treated and " + std::to_string(n_c) + " control");

    CausalTree tree;
    tree.params_ = params;
    tree.covariates_ = covariates;
    for (auto c : columns) tree.schema_.push_back(ds.meta()[c]);
    {
        std::string id_src = std::to_string(params.seed) + ":" + std::to_string(samples.size());
        for (const auto& c : covariates) id_src += ":" + c;
        for (auto i : samples) id_src += "," + std::to_string(i);
        tree.tree_id_ = "tree-" + hash_hex(id_src).substr(0, 12);
    }

    std::vector<SampleIndex> structure, estimate;
    if (params.honest) {
        auto halves = honest_halves(ds, samples, params.seed);
        structure = std::move(halves.structure);
        estimate = std::move(halves.estimate);
    } else {
        structure.assign(samples.begin(), samples.end());
        estimate = structure;
    }
    TreeBuilder builder(ds, columns, params, tree.nodes_, tree.leaves_);
    builder.build(std::move(structure), std::move(estimate), 0);
    tree.rebuild_leaf_paths();
    return tree;
}

void CausalTree::rebuild_leaf_paths() {
    if (nodes_.empty()) return;
    std::vector<std::pair<int, std::vector<SplitRule>>> stack;
    stack.push_back({0, {}});
    while (!stack.empty()) {
        auto [idx, path] = std::move(stack.back());
        stack.pop_back();
        const Node& node = nodes_[static_cast<std::size_t>(idx)];
        if (node.is_leaf) {
            leaves_[static_cast<std::size_t>(node.leaf)].path = path;
            continue;
        }
        auto it = std::find(covariates_.begin(), covariates_.end(), node.rule.covariate);
        if (it == covariates_.end()) throw DataError("tree splits on unknown covariate " + node.rule.covariate);
        auto right_path = path;
        right_path.push_back(negate(node.rule, schema_[static_cast<std::size_t>(it - covariates_.begin())]));
        path.push_back(node.rule);
        stack.push_back({node.right, std::move(right_path)});
        stack.push_back({node.left, std::move(path)});
    }
}

int CausalTree::route(const Dataset* ds, SampleIndex i, const CovariateMap* x) const {
    if (nodes_.empty()) throw FitError("tree has no nodes");
    int idx = 0;
    while (!nodes_[static_cast<std::size_t>(idx)].is_leaf) {
        const Node& node = nodes_[static_cast<std::size_t>(idx)];
        double value = 0.0;
        if (ds != nullptr) {
            value = ds->value(i, ds->require_covariate(node.rule.covariate));
        } else {
            auto it = x->find(node.rule.covariate);
            if (it == x->end()) throw DataError("missing covariate value " + node.rule.covariate);
            value = it->second;
        }
        idx = node.rule.matches(value) ? node.left : node.right;
    }
    return nodes_[static_cast<std::size_t>(idx)].leaf;
}

const Leaf& CausalTree::assign_leaf(const CovariateMap& x) const {
    return leaves_[static_cast<std::size_t>(route(nullptr, 0, &x))];
}

const Leaf& CausalTree::assign_leaf(const Dataset& ds, SampleIndex i) const {
    return leaves_[static_cast<std::size_t>(route(&ds, i, nullptr))];
}

CausalTree CausalTree::reestimated(const Dataset& ds, std::span<const SampleIndex> estimate) const {
    CausalTree out = *this;
    std::vector<ArmSums> sums(leaves_.size());
    for (auto i : estimate) sums[static_cast<std::size_t>(route(&ds, i, nullptr))].add(ds.treatment(i), ds.outcome(i));
    for (std::size_t l = 0; l < sums.size(); ++l) {
        if (sums[l].n_t == 0 || sums[l].n_c == 0)
            throw FitError("reestimate: leaf " + std::to_string(l) + " lacks a treatment arm");
        out.leaves_[l].cate = sums[l].cate();
        out.leaves_[l].n_treated = sums[l].n_t;
        out.leaves_[l].n_control = sums[l].n_c;
    }
    return out;
}

bool operator==(const CausalTree& a, const CausalTree& b) {
    return a.tree_id_ == b.tree_id_ && a.params_ == b.params_ && a.covariates_ == b.covariates_ &&
           a.schema_ == b.schema_ && a.nodes_ == b.nodes_ && a.leaves_ == b.leaves_;
}

nlohmann::ordered_json CausalTree::to_json() const {
    nlohmann::ordered_json doc;
    doc["tree_id"] = tree_id_;
    doc["params"] = {{"max_depth", params_.max_depth},
                     {"min_leaf_per_arm", params_.min_leaf_per_arm},
                     {"min_split_gain", params_.min_split_gain},
                     {"honest", params_.honest},
                     {"seed", params_.seed}};
    doc["covariates"] = covariates_;
    doc["schema"] = metadata_to_json(schema_);
    auto emit = [this](auto&& self, int idx) -> nlohmann::ordered_json {
        const Node& node = nodes_[static_cast<std::size_t>(idx)];
        nlohmann::ordered_json j;
        if (node.is_leaf) {
            const Leaf& leaf = leaves_[static_cast<std::size_t>(node.leaf)];
            j["leaf"] = {{"id", leaf.id}, {"cate", leaf.cate}, {"n_treated", leaf.n_treated}, {"n_control", leaf.n_control}};
            return j;
        }
        j["split"] = rule_to_json(node.rule);
        j["left"] = self(self, node.left);
        j["right"] = self(self, node.right);
        return j;
    };
    doc["root"] = nodes_.empty() ? nlohmann::ordered_json() : emit(emit, 0);
    return doc;
}

CausalTree CausalTree::from_json(const nlohmann::json& doc) {
    CausalTree tree;
    tree.tree_id_ = doc.at("tree_id").get<std::string>();
    const auto& p = doc.at("params");
    tree.params_.max_depth = p.at("max_depth").get<int>();
    tree.params_.min_leaf_per_arm = p.at("min_leaf_per_arm").get<std::size_t>();
    tree.params_.min_split_gain = p.at("min_split_gain").get<double>();
    tree.params_.honest = p.at("honest").get<bool>();
    tree.params_.seed = p.at("seed").get<std::uint64_t>();
    tree.covariates_ = doc.at("covariates").get<std::vector<std::string>>();
    tree.schema_ = parse_metadata(doc.at("schema"));
    if (tree.schema_.size() != tree.covariates_.size()) throw DataError("tree JSON: schema does not match covariates");
    auto parse = [&tree](auto&& self, const nlohmann::json& j, int depth) -> int {
        const int idx = static_cast<int>(tree.nodes_.size());
        tree.nodes_.emplace_back();
        tree.nodes_[static_cast<std::size_t>(idx)].depth = depth;
        if (j.contains("leaf")) {
            const auto& lj = j.at("leaf");
            Leaf leaf;
            leaf.id = lj.at("id").get<int>();
            leaf.cate = lj.at("cate").get<double>();
            leaf.n_treated = lj.at("n_treated").get<std::size_t>();
            leaf.n_control = lj.at("n_control").get<std::size_t>();
            if (leaf.id != static_cast<int>(tree.leaves_.size())) throw DataError("tree JSON: leaf ids out of order");
            tree.nodes_[static_cast<std::size_t>(idx)].leaf = leaf.id;
            tree.leaves_.push_back(std::move(leaf));
            return idx;
        }
        tree.nodes_[static_cast<std::size_t>(idx)].is_leaf = false;
        tree.nodes_[static_cast<std::size_t>(idx)].rule = rule_from_json(j.at("split"));
        const int left = self(self, j.at("left"), depth + 1);
        const int right = self(self, j.at("right"), depth + 1);
        tree.nodes_[static_cast<std::size_t>(idx)].left = left;
        tree.nodes_[static_cast<std::size_t>(idx)].right = right;
        return idx;
    };
    parse(parse, doc.at("root"), 0);
    tree.rebuild_leaf_paths();
    return tree;
}

std::vector<RuleText> extract_rules(const Partition& p, const std::vector<CovariateMeta>& meta) {
    std::vector<RuleText> rules;
    rules.reserve(p.leaves.size());
    for (const auto& leaf : p.leaves) {
        RuleText r;
        r.leaf_id = leaf.id;
        r.conjunction = leaf.path;
        r.cate = leaf.cate;
        r.n_treated = leaf.n_treated;
        r.n_control = leaf.n_control;
        if (leaf.path.empty()) {
            r.text = kEntirePopulation;
            r.described = kEntirePopulation;
        }
        for (std::size_t k = 0; k < leaf.path.size(); ++k) {
            const auto& rule = leaf.path[k];
            if (k > 0) {
                r.text += " AND ";
                r.described += " AND ";
            }
            r.text += rule.to_string();
            auto it = std::find_if(meta.begin(), meta.end(), [&](const CovariateMeta& m) { return m.name == rule.covariate; });
            std::string desc = rule.to_string();
            if (it != meta.end() && !it->description.empty()) desc += " (" + it->description + ")";
            r.described += desc;
        }
        rules.push_back(std::move(r));
    }
    return rules;
}

}  // namespace confloop
