#include <gtest/gtest.h>

#include <thread>

#include "confloop/error.hpp"
#include "confloop/review.hpp"
#include "fixtures.hpp"

using namespace confloop;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

ConfounderSet set_of(const std::vector<std::string>& names) {
    ConfounderSet cs;
    for (const auto& n : names) cs.confounders.push_back({n, 2, {"leaf 1: r"}, {}});
    cs.min_votes = 2;
    return cs;
}

ReviewItem item_for(const std::vector<std::string>& names, int iteration = 1, int rework = 0) {
    ReviewItem item;
    item.run_id = "run1";
    item.iteration = iteration;
    item.rework = rework;
    item.candidates = set_of(names);
    return item;
}

json review_doc(json decisions, std::optional<std::string> fallback = std::nullopt) {
    json doc = {{"format", "confloop-review/1"}, {"decisions", std::move(decisions)}};
    if (fallback) doc["default"] = *fallback;
    return doc;
}

class FixedPolicy final : public ExpertPolicy {
public:
    explicit FixedPolicy(ReviewOutcome o) : o_(std::move(o)) {}
    ReviewOutcome decide(const ReviewItem&) override { return o_; }
    std::string name() const override { return "fixed"; }

private:
    ReviewOutcome o_;
};

}  // namespace

TEST(Decision, ParseAndPrint) {
    EXPECT_EQ(parse_decision("accept"), Decision::accept);
    EXPECT_EQ(to_string(Decision::reject), "reject");
    EXPECT_THROW(parse_decision("maybe"), DataError);
}

TEST(AutoAccept, AcceptsEverythingInOrder) {
    AutoAcceptPolicy p;
    const auto out = request_decision(set_of({"HTN", "DM"}), p, {"run1", 1, 0});
    EXPECT_EQ(out.accepted, (std::vector<std::string>{"HTN", "DM"}));
    EXPECT_TRUE(out.rejected.empty());
    EXPECT_FALSE(out.all_rejected());
    EXPECT_EQ(out.decided_by, "auto_accept");
}

TEST(RequestDecision, EmptySetIsAnError) {
    AutoAcceptPolicy p;
    EXPECT_THROW(request_decision(ConfounderSet{}, p, {"r", 1, 0}), Error);
}

TEST(RequestDecision, PolicyMustDecideEveryCandidateOnce) {
    FixedPolicy partial({{"HTN"}, {}, "", "x"});
    EXPECT_THROW(request_decision(set_of({"HTN", "DM"}), partial, {"r", 1, 0}), ConfigError);
    FixedPolicy stranger({{"HTN", "DM", "AF"}, {}, "", "x"});
    EXPECT_THROW(request_decision(set_of({"HTN", "DM"}), stranger, {"r", 1, 0}), ConfigError);
    FixedPolicy twice({{"HTN"}, {"HTN", "DM"}, "", "x"});
    EXPECT_THROW(request_decision(set_of({"HTN", "DM"}), twice, {"r", 1, 0}), ConfigError);
}

TEST(ScriptedPolicy, MatchesIterationAndRework) {
    auto p = ScriptedPolicy::from_json(review_doc(json::array({
        {{"iteration", 1}, {"rework", "*"}, {"accept", {"HTN"}}, {"reject", {"AF"}}, {"feedback", "AF is a mediator"}},
        {{"iteration", 1}, {"rework", 1}, {"accept", {"HTN", "AF"}}},
    })));
    const auto first = p.decide(item_for({"HTN", "AF"}, 1, 0));
    EXPECT_EQ(first.accepted, (std::vector<std::string>{"HTN"}));
    EXPECT_EQ(first.rejected, (std::vector<std::string>{"AF"}));
    EXPECT_EQ(first.feedback, "AF is a mediator");
    EXPECT_EQ(p.decide(item_for({"HTN", "AF"}, 1, 1)).accepted, (std::vector<std::string>{"HTN", "AF"}));
}

TEST(ScriptedPolicy, DefaultCoversUnscriptedCandidates) {
    auto p = ScriptedPolicy::from_json(review_doc(json::array({{{"iteration", 2}, {"reject", {"DM"}}}}), "accept"));
    const auto out = p.decide(item_for({"DM", "CHF"}, 2));
    EXPECT_EQ(out.accepted, (std::vector<std::string>{"CHF"}));
    EXPECT_EQ(out.rejected, (std::vector<std::string>{"DM"}));
    auto reject_all = ScriptedPolicy::from_json(review_doc(json::array(), "reject"));
    EXPECT_TRUE(reject_all.decide(item_for({"DM"})).all_rejected());
}

TEST(ScriptedPolicy, MissingDecisionWithoutDefaultIsAConfigError) {
    auto p = ScriptedPolicy::from_json(review_doc(json::array({{{"iteration", 1}, {"accept", {"HTN"}}}})));
    EXPECT_THROW(p.decide(item_for({"HTN", "DM"})), ConfigError);
    EXPECT_THROW(ScriptedPolicy::from_json(json{{"format", "nope"}}), ConfigError);
    EXPECT_THROW(ScriptedPolicy::from_json(review_doc(json::array(), "perhaps")), ConfigError);
    EXPECT_THROW(ScriptedPolicy::from_file(fixtures::temp_dir("rv") / "none.json"), ConfigError);
}

TEST(ReviewStore, SubmitDecideLifecycle) {
    ReviewStore store;
    const auto id = store.submit(item_for({"HTN", "DM"}, 2, 1));
    EXPECT_EQ(id, "2-1");
    EXPECT_TRUE(store.has_run("run1"));
    ASSERT_EQ(store.pending("run1").size(), 1u);
    EXPECT_THROW(store.submit(item_for({"HTN"}, 2, 1)), ConflictError);

    EXPECT_THROW(store.decide("run1", id, {{"HTN", Decision::accept}}, ""), DataError);
    EXPECT_THROW(store.decide("run1", id, {{"HTN", Decision::accept}, {"DM", Decision::accept}, {"AF", Decision::reject}}, ""),
                 DataError);
    EXPECT_THROW(store.decide("other", id, {}, ""), NotFoundError);
    EXPECT_THROW(store.decide("run1", "9-9", {}, ""), NotFoundError);

    const auto decided = store.decide("run1", id, {{"HTN", Decision::accept}, {"DM", Decision::reject}}, "DM later");
    EXPECT_EQ(decided.status, ReviewStatus::decided);
    EXPECT_EQ(decided.feedback, "DM later");
    EXPECT_FALSE(decided.decided_at.empty());
    EXPECT_TRUE(store.pending("run1").empty());
    EXPECT_EQ(store.items("run1").size(), 1u);
    EXPECT_THROW(store.decide("run1", id, {{"HTN", Decision::accept}, {"DM", Decision::accept}}, ""), ConflictError);

    const auto j = to_json(*store.item("run1", id));
    EXPECT_EQ(j["status"], "decided");
    EXPECT_EQ(j["decisions"]["DM"], "reject");
}

TEST(ReviewStore, WaitTimesOutAndShutsDown) {
    ReviewStore store;
    const auto id = store.submit(item_for({"HTN"}));
    EXPECT_THROW(store.wait("run1", id, 20ms), TimeoutError);
    std::thread t([&] {
        std::this_thread::sleep_for(20ms);
        store.shutdown();
    });
    EXPECT_THROW(store.wait("run1", id), Error);
    t.join();
}

TEST(InteractivePolicy, BlocksUntilDecisionArrives) {
    auto store = std::make_shared<ReviewStore>();
    InteractivePolicy policy(store);
    std::thread expert([&] {
        while (store->pending("run1").empty()) std::this_thread::sleep_for(1ms);
        const auto pending = store->pending("run1");
        store->decide("run1", pending[0].item_id, {{"HTN", Decision::reject}, {"DM", Decision::accept}}, "HTN no");
    });
    const auto out = request_decision(set_of({"HTN", "DM"}), policy, {"run1", 3, 0});
    expert.join();
    EXPECT_EQ(out.accepted, (std::vector<std::string>{"DM"}));
    EXPECT_EQ(out.rejected, (std::vector<std::string>{"HTN"}));
    EXPECT_EQ(out.feedback, "HTN no");
    EXPECT_EQ(out.decided_by, "human");
    EXPECT_THROW(InteractivePolicy(nullptr), ConfigError);
}

TEST(ReviewStore, TracesAndReports) {
    ReviewStore store;
    EXPECT_FALSE(store.run_report("r").has_value());
    store.update_run("r", "running", nlohmann::ordered_json{{"iterations", nlohmann::ordered_json::array()}});
    store.set_trace("r", 1, 1, {{"rework", 1}});
    store.set_trace("r", 1, 0, {{"rework", 0}});
    const auto t = store.trace("r", 1);
    ASSERT_TRUE(t.has_value());
    ASSERT_EQ(t->size(), 2u);
    EXPECT_EQ((*t)[0]["rework"], 0);
    EXPECT_FALSE(store.trace("r", 2).has_value());
    EXPECT_EQ((*store.run_report("r"))["status"], "running");
    EXPECT_EQ(store.runs_json()["runs"][0]["pending_reviews"], 0);
}

TEST(ReviewStore, LoadsPersistedRuns) {
    const auto dir = fixtures::temp_dir("runs");
    fixtures::write_file(dir / "abc" / "report.json", R"({"run_id": "abc", "status": "finished"})");
    fixtures::write_file(dir / "abc" / "traces" / "iter1.json", R"([{"iteration": 1, "rework": 0}])");
    fixtures::write_file(dir / "bad" / "report.json", "{");
    ReviewStore store;
    store.load_runs_dir(dir);
    EXPECT_TRUE(store.has_run("abc"));
    EXPECT_FALSE(store.has_run("bad"));
    EXPECT_TRUE(store.trace("abc", 1).has_value());
    store.load_runs_dir(dir / "missing");
}

TEST(ParseBind, HostAndPort) {
    EXPECT_EQ(parse_bind("127.0.0.1:8080"), (std::pair<std::string, int>{"127.0.0.1", 8080}));
    EXPECT_EQ(parse_bind("0.0.0.0:0").second, 0);
    EXPECT_THROW(parse_bind("localhost"), ConfigError);
    EXPECT_THROW(parse_bind("h:99999"), ConfigError);
    EXPECT_THROW(parse_bind("h:80x"), ConfigError);
}
