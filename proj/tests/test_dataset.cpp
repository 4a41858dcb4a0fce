#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "confloop/dataset.hpp"
#include "confloop/error.hpp"
#include "confloop/random.hpp"
#include "fixtures.hpp"

using namespace confloop;
using fixtures::binary;

namespace {

const char* kMeta = R"([
  {"name": "HTN", "description": "hypertension", "kind": "binary", "levels": ["0", "1"]},
  {"name": "DM", "description": "diabetes mellitus", "kind": "binary", "levels": ["0", "1"]}
])";

std::vector<CovariateMeta> two_flags() { return parse_metadata(nlohmann::json::parse(kMeta)); }

template <typename Fn>
std::string error_of(Fn fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(LoadDataset, ParsesThreeRowsWithTwoCovariates) {
    const auto dir = fixtures::temp_dir("dataset");
    fixtures::write_file(dir / "data.csv", "id,y,w,HTN,DM\na,1.5,1,1,0\nb,0.5,0,0,1\nc,2,1,1,1\n");
    fixtures::write_file(dir / "meta.json", kMeta);
    const Dataset ds = load_dataset(dir / "data.csv", dir / "meta.json");
    EXPECT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.covariate_count(), 2u);
    EXPECT_EQ(ds.id(2), "c");
    EXPECT_DOUBLE_EQ(ds.outcome(0), 1.5);
    EXPECT_EQ(ds.treatment(1), 0);
    EXPECT_EQ(ds.covariate_map(1).at("DM"), 1.0);
    EXPECT_EQ(ds.covariate("HTN").description, "hypertension");
}

TEST(LoadDataset, BadTreatmentNamesTheRow) {
    const std::string csv = "id,y,w,HTN,DM\na,1,1,1,0\nb,1,0,0,1\nc,1,1,1,1\nd,1,0,0,0\ne,1,2,1,0\n";
    const auto msg = error_of([&] { parse_dataset(csv, two_flags()); });
    EXPECT_NE(msg.find("row 5"), std::string::npos) << msg;
}

TEST(LoadDataset, UnknownColumnIsRejected) {
    const std::string csv = "id,y,w,HTN,DM,AGE\na,1,1,1,0,50\n";
    const auto msg = error_of([&] { parse_dataset(csv, two_flags()); });
    EXPECT_NE(msg.find("unknown covariate AGE"), std::string::npos) << msg;
}

TEST(LoadDataset, CsvRoundTripIsExact) {
    const Dataset ds = fixtures::random_dataset(3, 50);
    const Dataset back = parse_dataset(dataset_to_csv(ds), ds.meta());
    ASSERT_EQ(back.size(), ds.size());
    EXPECT_EQ(dataset_to_csv(back), dataset_to_csv(ds));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.outcome(i), ds.outcome(i));
        EXPECT_EQ(back.covariate_map(i), ds.covariate_map(i));
    }
}

TEST(LoadDataset, MetadataRoundTrip) {
    const auto meta = fixtures::random_dataset(1, 5).meta();
    EXPECT_EQ(parse_metadata(nlohmann::json::parse(metadata_to_json(meta).dump())), meta);
}

TEST(LoadDataset, RejectsDuplicateIdsAndBadLevels) {
    EXPECT_THROW(parse_dataset("id,y,w,HTN,DM\na,1,1,1,0\na,1,0,0,1\n", two_flags()), DataError);
    EXPECT_THROW(parse_dataset("id,y,w,HTN,DM\na,1,1,3,0\n", two_flags()), DataError);
    EXPECT_THROW(parse_dataset("id,y,w,HTN\na,1,1,1\n", two_flags()), DataError);
}

TEST(SplitDataset, DefaultRatioSizes) {
    const Dataset ds = fixtures::random_dataset(1, 1000);
    const auto s = split_dataset(ds, SplitRatios{0.4, 0.4, 0.2}, 7);
    EXPECT_EQ(s.train.size(), 400u);
    EXPECT_EQ(s.estimation.size(), 400u);
    EXPECT_EQ(s.test.size(), 200u);
}

TEST(SplitDataset, DegenerateRatioPutsEverythingInTrain) {
    const Dataset ds = fixtures::random_dataset(1, 10);
    const auto s = split_dataset(ds, SplitRatios{1, 0, 0}, 3);
    EXPECT_EQ(s.train.size(), 10u);
    EXPECT_TRUE(s.estimation.empty());
    EXPECT_TRUE(s.test.empty());
}

TEST(SplitDataset, DeterministicUnderSeed) {
    const Dataset ds = fixtures::random_dataset(1, 300);
    const auto a = split_dataset(ds, {}, 11);
    const auto b = split_dataset(ds, {}, 11);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.estimation, b.estimation);
    EXPECT_EQ(a.test, b.test);
    EXPECT_NE(split_dataset(ds, {}, 12).train, a.train);
}

TEST(SplitDataset, RejectsBadRatios) {
    const Dataset ds = fixtures::random_dataset(1, 10);
    EXPECT_THROW(split_dataset(ds, SplitRatios{0.5, 0.5, 0.5}, 1), ConfigError);
    EXPECT_THROW(split_dataset(ds, SplitRatios{-0.1, 0.6, 0.5}, 1), ConfigError);
}

TEST(SplitDatasetProperty, PartsAreDisjointAndCoverEverything) {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 20 + rng.below(300);
        const Dataset ds = fixtures::random_dataset(trial, n);
        const double a = 0.1 + 0.5 * rng.uniform();
        const double b = (1.0 - a) * (0.2 + 0.6 * rng.uniform());
        const auto s = split_dataset(ds, SplitRatios{a, b, 1.0 - a - b}, rng.next());
        std::vector<std::size_t> all;
        all.insert(all.end(), s.train.begin(), s.train.end());
        all.insert(all.end(), s.estimation.begin(), s.estimation.end());
        all.insert(all.end(), s.test.begin(), s.test.end());
        ASSERT_EQ(all.size(), n);
        std::sort(all.begin(), all.end());
        ASSERT_EQ(all, fixtures::iota(n));
    }
}

TEST(ApplyRestriction, SplitsOnOneConfounder) {
    const Dataset ds = fixtures::make_dataset({binary("HTN")}, {{0, 0, {0}}, {0, 1, {0}}, {0, 0, {1}}, {0, 1, {1}}});
    const RestrictionContext ctx{{"HTN"}, {}};
    const auto r = apply_restriction(ds.all_ids(), ctx, ds, 1);
    ASSERT_EQ(r.strata.size(), 2u);
    EXPECT_EQ(r.strata.at("HTN=0").ids, (IdSet{0, 1}));
    EXPECT_EQ(r.strata.at("HTN=1").ids, (IdSet{2, 3}));
    EXPECT_EQ(r.strata.at("HTN=1").context.stratum.at("HTN"), 1.0);
}

TEST(ApplyRestriction, EmptyContextIsIdentity) {
    const Dataset ds = fixtures::random_dataset(2, 40);
    const auto r = apply_restriction(ds.all_ids(), RestrictionContext{}, ds, 1);
    ASSERT_EQ(r.strata.size(), 1u);
    EXPECT_EQ(r.strata.begin()->second.ids, ds.all_ids());
}

TEST(ApplyRestriction, SmallStrataAreDropped) {
    // Joint (HTN, DM) levels: (0,0) x3, (0,1) x1, (1,0) x2, (1,1) x2.
    std::vector<fixtures::Row> rows = {{0, 0, {0, 0}}, {0, 1, {0, 0}}, {0, 0, {0, 0}}, {0, 1, {0, 1}},
                                       {0, 0, {1, 0}}, {0, 1, {1, 0}}, {0, 0, {1, 1}}, {0, 1, {1, 1}}};
    const Dataset ds = fixtures::make_dataset({binary("HTN"), binary("DM")}, rows);
    const auto r = apply_restriction(ds.all_ids(), RestrictionContext{{"HTN", "DM"}, {}}, ds, 3);
    ASSERT_EQ(r.strata.size(), 1u);
    EXPECT_EQ(r.strata.begin()->first, "HTN=0&DM=0");
    EXPECT_EQ(r.strata.begin()->second.ids, (IdSet{0, 1, 2}));
    EXPECT_EQ(r.dropped, (IdSet{3, 4, 5, 6, 7}));
}

TEST(ApplyRestriction, ContinuousConfounderIsUnsupported) {
    const Dataset ds = fixtures::random_dataset(2, 40);
    EXPECT_THROW(apply_restriction(ds.all_ids(), RestrictionContext{{"C"}, {}}, ds, 1), RestrictionError);
}

TEST(ApplyRestrictionProperty, StrataAreDisjointAndExact) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Dataset ds = fixtures::random_dataset(seed, 200);
        const RestrictionContext ctx{{"A", "B", "D"}, {}};
        const auto r = apply_restriction(ds.all_ids(), ctx, ds, 1 + seed % 7);
        std::set<std::size_t> seen;
        for (const auto& [key, s] : r.strata) {
            for (auto i : s.ids) {
                ASSERT_TRUE(seen.insert(i).second) << "sample in two strata";
                ASSERT_TRUE(in_stratum(ds, i, s.context));
                for (const auto& c : ctx.confounders)
                    ASSERT_EQ(ds.value(i, ds.require_covariate(c)), s.context.stratum.at(c));
            }
            EXPECT_EQ(key, stratum_key(s.context, ds));
        }
        for (auto i : r.dropped) ASSERT_TRUE(seen.insert(i).second);
        EXPECT_EQ(seen.size(), ds.size());
    }
}

TEST(InStratum, MissingValueDoesNotMatch) {
    const RestrictionContext ctx{{"DM"}, {{"DM", 1.0}}};
    EXPECT_TRUE(in_stratum(CovariateMap{{"DM", 1.0}}, ctx));
    EXPECT_FALSE(in_stratum(CovariateMap{{"DM", 0.0}}, ctx));
    EXPECT_FALSE(in_stratum(CovariateMap{{"HTN", 1.0}}, ctx));
}

TEST(RemainingCovariates, SetDifferenceInOrder) {
    const Dataset ds = fixtures::make_dataset(
        {binary("HTN"), binary("DM"), binary("CHF"), binary("AF"), binary("CKD")}, {{0, 0, {0, 0, 0, 0, 0}}});
    EXPECT_EQ(remaining_covariates(ds, {"HTN"}), (std::vector<std::string>{"DM", "CHF", "AF", "CKD"}));
    EXPECT_EQ(remaining_covariates(ds, {}), (std::vector<std::string>{"HTN", "DM", "CHF", "AF", "CKD"}));
    EXPECT_TRUE(remaining_covariates(ds, {"HTN", "DM", "CHF", "AF", "CKD"}).empty());
}

TEST(RemainingCovariatesProperty, InsensitiveToValidatedOrder) {
    const Dataset ds = fixtures::make_dataset(
        {binary("HTN"), binary("DM"), binary("CHF"), binary("AF"), binary("CKD")}, {{0, 0, {0, 0, 0, 0, 0}}});
    std::vector<std::string> names = {"CKD", "HTN", "AF"};
    const auto expected = remaining_covariates(ds, names);
    std::sort(names.begin(), names.end());
    do {
        EXPECT_EQ(remaining_covariates(ds, names), expected);
    } while (std::next_permutation(names.begin(), names.end()));
}
