// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "confloop/bootstrap_ci.hpp"
#include "confloop/causal_tree.hpp"
#include "confloop/orchestrator.hpp"
#include "confloop/random.hpp"
#include "confloop/synth.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace confloop;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr double kExact = 1e-12;
constexpr double kGainSlack = 1e-9;
constexpr double kCoverage = 0.90;
constexpr double kBiasRatio = 0.5;
constexpr double kWidthSlack = 1.05;

struct Outcome {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void criterion(int n, const std::string& name, double limit_seconds, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > limit_seconds) {
        o.pass = false;
        o.detail += (o.detail.empty() ? "" : "; ") + std::string("over time limit");
    }
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.2fs/%.0fs", secs, limit_seconds);
    std::cout << "AC" << n << (o.pass ? " PASS " : " FAIL ") << name << " [" << timing << "] " << o.detail << std::endl;
    if (!o.pass) ++failures;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

TreeParams tree_params(std::size_t min_leaf, bool honest, std::uint64_t seed) {
    TreeParams p;
    p.max_depth = 3;
    p.min_leaf_per_arm = min_leaf;
    p.honest = honest;
    p.seed = seed;
    return p;
}

std::vector<std::size_t> half(const Dataset& ds, const TreeParams& p, bool structure) {
    const auto ids = ds.all_ids();
    if (!p.honest) return ids;
    const auto h = honest_halves(ds, ids, p.seed);
    return structure ? h.structure : h.estimate;
}

std::vector<CIRecord> with_widths(const std::vector<double>& widths) {
    std::vector<CIRecord> out;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        CIRecord r;
        r.sample_id = "s" + std::to_string(i);
        r.index = i;
        r.upper = widths[i];
        r.width = widths[i];
        out.push_back(r);
    }
    return out;
}

bool filter_matches(const std::vector<double>& widths) {
    const auto rep = stability_filter(with_widths(widths));
    long double sum = 0;
    for (double w : widths) sum += w;
    const double threshold = static_cast<double>(sum / widths.size());
    IdSet stable, unstable;
    for (std::size_t i = 0; i < widths.size(); ++i) (widths[i] > rep.threshold ? unstable : stable).push_back(i);
    return std::abs(rep.threshold - threshold) <= kExact && rep.stable_ids == stable && rep.unstable_ids == unstable;
}

RunConfig config(const std::string& name) { return load_run_config(fixtures::configs_dir() / name); }

PipelineResult run_with(const Dataset& ds, const std::string& cfg, const std::string& mock) {
    auto backend = MockBackend::from_file(fixtures::configs_dir() / mock);
    AutoAcceptPolicy policy;
    const auto kb = fixtures::corpus_kb();
    return run_pipeline(ds, config(cfg), backend, policy, kb);
}

const Dataset& schedule_data() {
    static const Dataset ds = generate(fixtures::schedule_config()).dataset;
    return ds;
}

const PipelineResult& schedule_run() {
    static const PipelineResult r = run_with(schedule_data(), "run_schedule.json", "mock_table1.json");
    return r;
}

const SynthResult& confounded() {
    static const SynthResult r = generate(fixtures::confounded_config());
    return r;
}

const PipelineResult& oracle_run() {
    static const PipelineResult r = run_with(confounded().dataset, "run_oracle.json", "mock_oracle.json");
    return r;
}

bool matches(const CovariateMap& x, const RestrictionContext& ctx) {
    for (const auto& [name, level] : ctx.stratum) {
        auto it = x.find(name);
        if (it == x.end() || it->second != level) return false;
    }
    return true;
}

void collect_gathers(const json& node, std::vector<json>& out) {
    if (node.is_object()) {
        for (const auto& [key, value] : node.items()) {
            if (key == "gather" && value.is_object()) out.push_back(value);
            else collect_gathers(value, out);
        }
    } else if (node.is_array()) {
        for (const auto& v : node) collect_gathers(v, out);
    }
}

}  // namespace

int main() {
    criterion(1, "quantile matches sort-interpolate oracle", 1.0, [] {
        Rng rng(101);
        std::size_t checked = 0;
        double worst = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> v(1 + rng.below(200));
            for (auto& x : v) x = rng.normal(0, 10);
            for (double p : {0.0, 1.0, rng.uniform(), 0.025, 0.975}) {
                worst = std::max(worst, std::abs(quantile(v, p) - oracle::quantile(v, p)));
                ++checked;
            }
        }
        return Outcome{worst <= kExact, std::to_string(checked) + " evaluations, max |diff| " + fmt(worst)};
    });

    criterion(2, "leaf CATE equals brute-force arm-mean difference", 10.0, [] {
        std::size_t leaves = 0;
        double worst = 0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const Dataset ds = fixtures::random_dataset(1000 + seed, 100 + 4 * seed);
            const auto p = tree_params(5, seed % 2 == 0, seed);
            const auto tree = fit_tree(ds, ds.all_ids(), {"A", "B", "C", "D"}, p);
            const auto routed = oracle::route_nodes(tree, ds, half(ds, p, false));
            for (std::size_t n = 0; n < tree.nodes().size(); ++n) {
                const auto& node = tree.nodes()[n];
                if (!node.is_leaf) continue;
                const double cate = tree.leaves()[static_cast<std::size_t>(node.leaf)].cate;
                worst = std::max(worst, std::abs(cate - oracle::arm_mean_difference(ds, routed[n])));
                ++leaves;
            }
        }
        return Outcome{worst <= kExact, std::to_string(leaves) + " leaves over 100 fixtures, max |diff| " + fmt(worst)};
    });

    criterion(3, "chosen split gain dominates every enumerated candidate", 30.0, [] {
        std::size_t nodes = 0, candidates = 0, violations = 0;
        for (std::uint64_t seed = 0; seed < 40; ++seed) {
            const Dataset ds = fixtures::random_dataset(2000 + seed, 150 + 8 * seed);
            const auto p = tree_params(5, seed % 2 == 1, seed);
            const std::vector<std::string> covs = {"A", "B", "C", "D"};
            const auto tree = fit_tree(ds, ds.all_ids(), covs, p);
            const auto s_at = oracle::route_nodes(tree, ds, half(ds, p, true));
            const auto e_at = oracle::route_nodes(tree, ds, half(ds, p, false));
            for (std::size_t n = 0; n < tree.nodes().size(); ++n) {
                const auto& node = tree.nodes()[n];
                const auto all = oracle::enumerate_splits(ds, s_at[n], e_at[n], covs, p.min_leaf_per_arm, p.honest);
                candidates += all.size();
                ++nodes;
                if (node.is_leaf) {
                    if (node.depth < p.max_depth)
                        for (const auto& c : all) violations += c.gain > p.min_split_gain;
                    continue;
                }
                const double chosen = oracle::split_gain(ds, s_at[n], node.rule);
                for (const auto& c : all) violations += chosen < c.gain - kGainSlack * std::max(1.0, std::abs(c.gain));
            }
        }
        return Outcome{violations == 0, std::to_string(nodes) + " nodes, " + std::to_string(candidates) +
                                            " candidates, " + std::to_string(violations) + " violations"};
    });

    criterion(4, "homogeneous-effect CI coverage of tau = 1", 120.0, [] {
        SynthConfig cfg = default_synth_config();
        cfg.n = 2000;
        cfg.seed = 2024;
        const auto data = generate(cfg);
        const auto split = split_dataset(data.dataset, {}, 2024);
        std::vector<std::string> covs;
        for (const auto& m : data.dataset.meta()) covs.push_back(m.name);
        const auto ens = fit_ensemble(data.dataset, split.estimation, bag(split.estimation, 64, 1), covs, TreeParams{}, 1);
        const auto records = predict_ci(ens, data.dataset, split.test, 0.05);
        std::size_t covered = 0;
        for (const auto& r : records) covered += r.lower <= 1.0 && 1.0 <= r.upper;
        const double rate = double(covered) / double(records.size());
        return Outcome{rate >= kCoverage, "coverage " + fmt(rate) + " over " + std::to_string(records.size()) +
                                              " test samples (B=64, alpha=0.05)"};
    });

    criterion(5, "stability filter: mean threshold, strictly-above unstable", 10.0, [] {
        bool ok = filter_matches({1, 1, 1, 1}) && filter_matches({0, 2}) && filter_matches({1, 2, 3, 4, 10});
        const auto a = stability_filter(with_widths({1, 1, 1, 1}));
        const auto b = stability_filter(with_widths({0, 2}));
        const auto c = stability_filter(with_widths({1, 2, 3, 4, 10}));
        ok = ok && a.threshold == 1.0 && a.unstable_ids.empty();
        ok = ok && b.threshold == 1.0 && b.unstable_ids == IdSet{1};
        ok = ok && c.threshold == 4.0 && c.unstable_ids == IdSet{4} && c.stable_ids == IdSet{0, 1, 2, 3};
        Rng rng(55);
        int agreed = 0;
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> widths(1 + rng.below(60));
            for (auto& w : widths) w = trial % 2 ? double(rng.below(5)) * 0.5 : rng.uniform();
            agreed += filter_matches(widths);
        }
        return Outcome{ok && agreed == 50, "3 worked examples, " + std::to_string(agreed) + "/50 randomized cases"};
    });

    criterion(6, "oracle agent halves the naive confounding bias", 300.0, [] {
        const auto& ds = confounded().dataset;
        const auto dm = ds.require_covariate("DM");
        double treated = 0, control = 0, dm_t = 0, dm_c = 0;
        for (SampleIndex i = 0; i < ds.size(); ++i) {
            (ds.treatment(i) ? treated : control) += 1;
            if (ds.value(i, dm) == 1.0) (ds.treatment(i) ? dm_t : dm_c) += 1;
        }
        const double expected_bias = 2.0 * (dm_t / treated - dm_c / control);
        const double naive = oracle::arm_mean_difference(ds, ds.all_ids());
        const auto& rep = oracle_run().report;
        const double baseline = rep["baseline_ate"], final_ate = rep["final_ate"];
        const bool truth_ok = std::abs(confounded().truth.confounders.at(0).naive_bias - expected_bias) <= kExact;
        const bool ok = truth_ok && std::abs(final_ate) <= kBiasRatio * std::abs(baseline);
        return Outcome{ok, "expected bias " + fmt(expected_bias) + ", naive DiM " + fmt(naive) + ", iteration-0 ATE " +
                               fmt(baseline) + ", final ATE " + fmt(final_ate) + ", validated " +
                               rep["validated"].dump()};
    });

    criterion(7, "mean CI width narrows across iterations", 300.0, [] {
        const auto& it = oracle_run().report["iterations"];
        std::vector<double> widths;
        for (const auto& row : it) widths.push_back(row["mean_ci_width"]);
        bool ok = widths.size() >= 2 && widths.back() <= widths.front();
        for (std::size_t k = 1; k < widths.size(); ++k) ok = ok && widths[k] <= kWidthSlack * widths[k - 1];
        std::string seq;
        for (double w : widths) seq += (seq.empty() ? "" : " -> ") + fmt(w);
        return Outcome{ok, "widths " + seq};
    });

    criterion(8, "scheduled mock agent runs exactly three confounder iterations", 120.0, [] {
        const auto& rep = schedule_run().report;
        const std::set<std::string> validated(rep["validated"].begin(), rep["validated"].end());
        const std::set<std::string> schedule = {"HTN", "CHF", "AF", "CAD", "DM", "CVAD"};
        std::set<std::string> accepted;
        for (const auto& run : rep["agent_runs"])
            for (const auto& n : run["accepted"]) accepted.insert(n.get<std::string>());
        const std::size_t confounder_iterations = rep["iterations"].size() - 1;
        const bool ok = confounder_iterations == 3 && rep["termination_reason"] == termination::empty_set &&
                        validated == schedule && accepted == schedule;
        return Outcome{ok, std::to_string(confounder_iterations) + " iterations, termination \"" +
                               rep["termination_reason"].get<std::string>() + "\", validated " +
                               rep["validated"].dump()};
    });

    criterion(9, "backward trace answers every covariate vector", 120.0, [] {
        const auto& model = schedule_run().model;
        std::vector<std::string> names;
        for (const auto& m : schedule_data().meta()) names.push_back(m.name);
        Rng rng(909);
        std::size_t mismatched = 0, engineered = 0, engineered_wrong = 0;
        auto expect = [&](const CovariateMap& x) {
            int k_expected = 0;
            const StratumModel* s_expected = &model.iterations[0].strata[0];
            for (std::size_t k = model.iterations.size(); k-- > 1;) {
                for (const auto& s : model.iterations[k].strata)
                    if (matches(x, s.context)) {
                        k_expected = static_cast<int>(k);
                        s_expected = &s;
                        break;
                    }
                if (k_expected) break;
            }
            const auto p = predict_final(model, x);
            return std::make_pair(p, p.iteration == k_expected && p.cate == s_expected->tree.assign_leaf(x).cate);
        };
        for (int trial = 0; trial < 10000; ++trial) {
            CovariateMap x;
            for (const auto& n : names) x[n] = rng.below(10) == 0 ? double(rng.below(4)) : double(rng.below(2));
            mismatched += !expect(x).second;
        }
        const auto& first = model.iterations.at(1).validated;
        for (int trial = 0; trial < 1000; ++trial) {
            CovariateMap x;
            for (const auto& n : names) x[n] = double(rng.below(2));
            x[first.at(rng.below(first.size()))] = 7.0;
            const auto [p, ok] = expect(x);
            ++engineered;
            engineered_wrong += !ok || p.iteration != 0;
        }
        const bool ok = model.iterations.size() == 4 && mismatched == 0 && engineered_wrong == 0;
        return Outcome{ok, "10000 random vectors, " + std::to_string(mismatched) + " disagreements; " +
                               std::to_string(engineered) + " engineered misses, " +
                               std::to_string(engineered_wrong) + " not at iteration 0"};
    });

    criterion(10, "gather trace shape", 60.0, [] {
        std::vector<json> gathers;
        for (const auto& t : schedule_run().traces) collect_gathers(json::parse(t.dump()), gathers);
        std::size_t rag = 0, bad = 0;
        for (const auto& g : gathers) {
            if (g["fallback"].get<bool>() || g["provenance"] != "rag" || g["no_knowledge"].get<bool>()) continue;
            ++rag;
            bad += g["pipeline"] != "retrieve(10) -> rerank -> top_k(3)" || g["retrieve_k"] != 10 ||
                   !g["reranked"].get<bool>() || g["kept_k"] != 3 || g["returned"].get<int>() > 3;
        }
        const auto tool_dir = fixtures::temp_dir("acceptance-tool");
        for (int i = 0; i < 5; ++i)
            fixtures::write_file(tool_dir / ("n" + std::to_string(i) + ".txt"), "comorbidity note " + std::to_string(i));
        KnowledgeBase kb;
        kb.index = std::make_shared<Index>();
        kb.tools.push_back(std::make_shared<LocalFixtureTool>(tool_dir));
        const auto empty = gather(kb, "comorbidity");
        bool tool_ok = empty.trace.provenance == Provenance::tool && empty.trace.tool_k == 3 &&
                       empty.items.size() == 3 && empty.trace.describe() == "retrieve(10) -> fallback -> tools(3)";
        for (const auto& i : empty.items) tool_ok = tool_ok && i.provenance == Provenance::tool;
        const bool ok = rag > 0 && bad == 0 && tool_ok;
        return Outcome{ok, std::to_string(rag) + " rag gathers (" + std::to_string(bad) + " off-shape); empty index -> " +
                               empty.trace.describe()};
    });

    criterion(11, "identical config and seed give byte-identical reports", 300.0, [] {
        const auto a = run_with(confounded().dataset, "run_oracle.json", "mock_oracle.json");
        const auto b = run_with(confounded().dataset, "run_oracle.json", "mock_oracle.json");
        const auto da = fixtures::temp_dir("acceptance-a"), db = fixtures::temp_dir("acceptance-b");
        persist_run(a, da);
        persist_run(b, db);
        bool ok = a.report.dump() == b.report.dump();
        for (const char* f : {"report.json", "model.json", "traces/iteration_1.json", "ci/iteration_1.json"})
            ok = ok && fixtures::read_file(da / f) == fixtures::read_file(db / f);
        return Outcome{ok, "run " + a.run_id + ", " + std::to_string(a.report.dump().size()) + " report bytes"};
    });

    std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criteria failed" : "acceptance: all criteria passed")
              << std::endl;
    return failures ? 1 : 0;
}
