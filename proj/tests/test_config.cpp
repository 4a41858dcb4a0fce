#include <gtest/gtest.h>

#include "confloop/config.hpp"
#include "confloop/error.hpp"
#include "fixtures.hpp"

using namespace confloop;
using nlohmann::json;

namespace {

json minimal() { return {{"backend", {{"kind", "mock"}, {"mock_fixture", "mock.json"}}}}; }

std::string error_of(const json& doc) {
    try {
        run_config_from_json(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(RunConfig, DefaultsMatchPublishedValues) {
    const RunConfig c = run_config_from_json(minimal());
    EXPECT_EQ(c.bootstrap_b, 64u);
    EXPECT_EQ(c.alpha, 0.05);
    EXPECT_EQ(c.knowledge.gather.k_retrieve, 10u);
    EXPECT_EQ(c.knowledge.gather.k_keep, 3u);
    EXPECT_EQ(c.knowledge.chunk_size, 400u);
    EXPECT_EQ(c.knowledge.chunk_overlap, 100u);
    EXPECT_EQ(c.review.policy, "auto_accept");
    EXPECT_EQ(c.agent.min_votes, 0u);
    EXPECT_EQ(c.seed, 42u);
}

TEST(RunConfig, JsonRoundTrip) {
    json doc = minimal();
    doc["seed"] = 7;
    doc["tree"] = {{"max_depth", 3}, {"min_leaf_per_arm", 5}};
    doc["bootstrap"] = {{"b", 16}, {"alpha", 0.1}};
    doc["review"] = {{"policy", "scripted"}, {"fixture", "r.json"}, {"timeout_ms", 500}};
    doc["loop"] = {{"max_iterations", 3}, {"max_rework", 1}};
    const RunConfig a = run_config_from_json(doc);
    const RunConfig b = run_config_from_json(json::parse(to_json(a).dump()));
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(b.tree.max_depth, 3);
    EXPECT_EQ(*b.review.timeout_ms, 500);
    EXPECT_EQ(b.bootstrap_b, 16u);
}

TEST(RunConfig, ShippedConfigsRoundTrip) {
    for (const char* name : {"run_schedule.json", "run_oracle.json"}) {
        const RunConfig a = load_run_config(fixtures::configs_dir() / name);
        EXPECT_EQ(a.base_dir, fixtures::configs_dir());
        const RunConfig b = run_config_from_json(json::parse(to_json(a).dump()));
        EXPECT_EQ(to_json(a).dump(), to_json(b).dump()) << name;
    }
}

TEST(RunConfig, UnknownKeysAreRejectedWithTheirPath) {
    json doc = minimal();
    doc["bootstrap"] = {{"B", 10}};
    EXPECT_NE(error_of(doc).find("bootstrap.B"), std::string::npos) << error_of(doc);
    doc = minimal();
    doc["colour"] = "red";
    EXPECT_NE(error_of(doc).find("colour"), std::string::npos);
}

TEST(RunConfig, FieldLevelValidation) {
    json doc = minimal();
    doc["bootstrap"] = {{"alpha", 1.5}};
    EXPECT_NE(error_of(doc).find("bootstrap.alpha"), std::string::npos);
    doc = minimal();
    doc["split"] = {{"train", 0.5}, {"estimation", 0.5}, {"test", 0.5}};
    EXPECT_NE(error_of(doc).find("split"), std::string::npos);
    doc = minimal();
    doc["backend"]["mock_fixture"] = "";
    EXPECT_NE(error_of(doc).find("backend.mock_fixture"), std::string::npos);
    doc = minimal();
    doc["review"] = {{"policy", "scripted"}};
    EXPECT_NE(error_of(doc).find("review.fixture"), std::string::npos);
    doc = minimal();
    doc["knowledge"] = {{"chunk_size", 100}, {"chunk_overlap", 100}};
    EXPECT_NE(error_of(doc).find("knowledge.chunk_overlap"), std::string::npos);
    doc = minimal();
    doc["tree"] = {{"max_depth", "deep"}};
    EXPECT_NE(error_of(doc).find("tree.max_depth"), std::string::npos);
}

TEST(RunConfig, ResolveIsRelativeToConfigDirectory) {
    RunConfig c = run_config_from_json(minimal());
    EXPECT_EQ(c.resolve("x.csv"), std::filesystem::path("x.csv"));
    c.base_dir = "/etc/confloop";
    EXPECT_EQ(c.resolve("x.csv"), std::filesystem::path("/etc/confloop/x.csv"));
    EXPECT_EQ(c.resolve("/abs/x.csv"), std::filesystem::path("/abs/x.csv"));
}

TEST(RunConfig, MissingOrBrokenFile) {
    const auto dir = fixtures::temp_dir("cfg");
    EXPECT_THROW(load_run_config(dir / "none.json"), ConfigError);
    fixtures::write_file(dir / "bad.json", "{");
    EXPECT_THROW(load_run_config(dir / "bad.json"), ConfigError);
}
