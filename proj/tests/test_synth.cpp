#include <gtest/gtest.h>

#include <cmath>

#include "confloop/error.hpp"
#include "confloop/orchestrator.hpp"
#include "confloop/synth.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace confloop;
using nlohmann::json;

namespace {

double naive_ate(const Dataset& ds, const IdSet& ids) { return oracle::arm_mean_difference(ds, ids); }

IdSet where(const Dataset& ds, const std::string& cov, double value) {
    IdSet out;
    const auto c = ds.require_covariate(cov);
    for (SampleIndex i = 0; i < ds.size(); ++i)
        if (ds.value(i, c) == value) out.push_back(i);
    return out;
}

FinalModel single_tree_model(CausalTree tree) {
    FinalModel m;
    IterationModel it;
    it.strata.push_back(StratumModel{"", {}, std::move(tree)});
    m.iterations.push_back(std::move(it));
    return m;
}

}  // namespace

TEST(SynthConfig, DefaultVocabulary) {
    const auto cfg = default_synth_config();
    std::vector<std::string> names;
    for (const auto& c : cfg.covariates) names.push_back(c.meta.name);
    EXPECT_EQ(names, (std::vector<std::string>{"HTN", "DM", "CHF", "AF", "CAD", "CVAD", "CKD", "COPDA", "GOUT"}));
    EXPECT_EQ(cfg.effect_base, 1.0);
    EXPECT_TRUE(cfg.confounders.empty());
}

TEST(SynthConfig, ValidationNamesTheField) {
    auto bad = [](json doc, const std::string& field) {
        try {
            synth_config_from_json(doc);
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
            return;
        }
        ADD_FAILURE() << "accepted " << doc.dump();
    };
    bad({{"n", 0}}, "n");
    bad({{"noise_sd", -1}}, "noise_sd");
    bad({{"base_rate_treated", 1.0}}, "base_rate_treated");
    bad({{"confounders", {{{"name", "XYZ"}}}}}, "XYZ");
    bad({{"sample_size", 10}}, "sample_size");
    bad({{"effect", {{"terms", {{{"covariate", "HTN"}, {"level", "7"}, {"shift", 1}}}}}}}, "HTN");
}

TEST(SynthConfig, JsonRoundTrip) {
    const auto cfg = fixtures::schedule_config();
    EXPECT_EQ(to_json(synth_config_from_json(json::parse(to_json(cfg).dump()))).dump(), to_json(cfg).dump());
}

TEST(Generate, HomogeneousNaiveAteNearOne) {
    auto cfg = default_synth_config();
    cfg.n = 5000;
    cfg.seed = 3;
    const auto r = generate(cfg);
    EXPECT_EQ(r.dataset.size(), 5000u);
    const double ate = naive_ate(r.dataset, r.dataset.all_ids());
    EXPECT_GE(ate, 0.9);
    EXPECT_LE(ate, 1.1);
    EXPECT_EQ(r.truth.ate, 1.0);
}

TEST(Generate, ConfounderBiasesNaiveAteButNotStrata) {
    const auto r = generate(fixtures::confounded_config());
    const auto& ds = r.dataset;
    const double naive = naive_ate(ds, ds.all_ids());
    ASSERT_EQ(r.truth.confounders.size(), 1u);
    const auto& bias = r.truth.confounders[0];

    // Brute-force expectation on the fixed draw: the DM share of the naive
    // contrast is outcome_shift times the treated/control prevalence gap.
    const auto dm = ds.require_covariate("DM");
    double treated = 0, control = 0, dm_treated = 0, dm_control = 0;
    for (SampleIndex i = 0; i < ds.size(); ++i) {
        (ds.treatment(i) ? treated : control) += 1;
        if (ds.value(i, dm) == 1.0) (ds.treatment(i) ? dm_treated : dm_control) += 1;
    }
    const double gap = dm_treated / treated - dm_control / control;
    EXPECT_NEAR(bias.prevalence_gap, gap, 1e-12);
    EXPECT_NEAR(bias.naive_bias, 2.0 * gap, 1e-12);
    EXPECT_GT(bias.naive_bias, 0.5);
    EXPECT_GT(naive, 0.5);
    EXPECT_NEAR(naive, bias.naive_bias, 0.1);
    for (double level : {0.0, 1.0}) {
        const double within = naive_ate(ds, where(ds, "DM", level));
        EXPECT_GE(within, -0.1) << level;
        EXPECT_LE(within, 0.1) << level;
    }
}

TEST(Generate, NoiselessPiecewiseEffectIsExactOnGTree) {
    SynthConfig cfg;
    cfg.n = 400;
    cfg.seed = 5;
    cfg.noise_sd = 0;
    SynthCovariate g;
    g.meta = fixtures::binary("G");
    cfg.covariates = {g};
    cfg.effect_base = 0.5;
    cfg.effect_terms = {{"G", "1", 0.0, 2.0}};
    const auto r = generate(cfg);
    TreeParams p;
    p.min_leaf_per_arm = 5;
    const auto tree = fit_tree(r.dataset, r.dataset.all_ids(), {"G"}, p);
    ASSERT_EQ(tree.leaves().size(), 2u);
    for (const auto& leaf : tree.leaves()) {
        const double expected = leaf.path[0].matches(1.0) ? 2.5 : 0.5;
        EXPECT_DOUBLE_EQ(leaf.cate, expected);
    }
}

TEST(Generate, DeterministicUnderSeed) {
    auto cfg = fixtures::confounded_config();
    cfg.n = 500;
    const auto a = generate(cfg), b = generate(cfg);
    EXPECT_EQ(dataset_to_csv(a.dataset), dataset_to_csv(b.dataset));
    EXPECT_EQ(to_json(a.truth).dump(), to_json(b.truth).dump());
    cfg.seed += 1;
    const auto c = generate(cfg);
    EXPECT_NE(dataset_to_csv(c.dataset), dataset_to_csv(a.dataset));
    for (SampleIndex i = 0; i < c.dataset.size(); ++i)
        EXPECT_EQ(c.truth.tau[i], true_effect(cfg, c.dataset.covariate_map(i)));
}

TEST(Generate, DegenerateDrawIsRejected) {
    auto cfg = default_synth_config();
    cfg.n = 1;
    try {
        generate(cfg);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
    }
}

TEST(GroundTruth, AteIsMeanOfTauAndRoundTrips) {
    auto cfg = fixtures::schedule_config();
    cfg.n = 2000;
    cfg.effect_terms = {{"HTN", "1", 0.0, 0.75}, {"DM", "1", 0.0, -0.25}};
    const auto r = generate(cfg);
    EXPECT_EQ(r.truth.ate, oracle::mean(r.truth.tau));
    const auto back = ground_truth_from_json(json::parse(to_json(r.truth).dump()));
    EXPECT_EQ(back.tau, r.truth.tau);
    EXPECT_EQ(back.ate, r.truth.ate);
    EXPECT_EQ(back.tau_of(r.truth.ids[7]), r.truth.tau[7]);
    EXPECT_THROW(back.tau_of("nope"), DataError);
}

TEST(SynthProperty, NaiveBiasMonotoneInTreatmentShift) {
    auto cfg = fixtures::confounded_config();
    double previous = -1e9;
    for (double shift : {0.0, 0.5, 1.0, 1.5, 2.0, 3.0}) {
        cfg.confounders[0].treatment_log_odds_shift = shift;
        const auto r = generate(cfg);
        const double naive = naive_ate(r.dataset, r.dataset.all_ids());
        EXPECT_GE(naive, previous) << shift;
        EXPECT_GE(r.truth.confounders[0].naive_bias, 0.0);
        previous = naive;
    }
}

TEST(EvaluateModel, ConstantZeroAgainstUnitEffect) {
    auto cfg = default_synth_config();
    cfg.n = 200;
    const auto r = generate(cfg);
    const Dataset zeros = fixtures::make_dataset({fixtures::binary("HTN")},
                                                 {{0, 1, {0}}, {0, 1, {1}}, {0, 0, {0}}, {0, 0, {1}}});
    TreeParams p;
    p.min_leaf_per_arm = 1;
    const auto model = single_tree_model(fit_tree(zeros, zeros.all_ids(), {}, p));
    const auto ids = r.dataset.all_ids();
    const auto e = evaluate_model(model, r.dataset, r.truth, ids);
    EXPECT_EQ(e.pehe, 1.0);
    EXPECT_EQ(e.ate_error, 1.0);
}

TEST(EvaluateModel, PerfectModelOnNoiselessData) {
    const Dataset ds = fixtures::noiseless_g(200);
    TreeParams p;
    p.min_leaf_per_arm = 5;
    const auto model = single_tree_model(fit_tree(ds, ds.all_ids(), {"G"}, p));
    GroundTruth truth;
    const auto g = ds.require_covariate("G");
    for (SampleIndex i = 0; i < ds.size(); ++i) {
        truth.ids.push_back(ds.id(i));
        truth.tau.push_back(ds.value(i, g) == 1.0 ? 2.0 : 0.0);
    }
    truth.ate = oracle::mean(truth.tau);
    const auto e = evaluate_model(model, ds, truth, ds.all_ids());
    EXPECT_EQ(e.pehe, 0.0);
    EXPECT_NEAR(e.ate_error, 0.0, 1e-12);
}

TEST(WriteSynthOutputs, ThreeFilesThatLoadBack) {
    auto cfg = fixtures::confounded_config();
    cfg.n = 300;
    const auto r = generate(cfg);
    const auto dir = fixtures::temp_dir("synth-out");
    write_synth_outputs(r, dir);
    const Dataset back = load_dataset(dir / "data.csv", dir / "metadata.json");
    EXPECT_EQ(dataset_to_csv(back), dataset_to_csv(r.dataset));
    const auto truth = ground_truth_from_json(fixtures::load_json(dir / "truth.json"));
    EXPECT_EQ(truth.ate, r.truth.ate);
}
