#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "confloop/agent.hpp"

namespace confloop {

enum class Decision { accept, reject };
std::string_view to_string(Decision d);
Decision parse_decision(std::string_view text);

enum class ReviewStatus { pending, decided };
std::string_view to_string(ReviewStatus s);

struct ReviewItem {
    std::string run_id;
    std::string item_id;  // "<iteration>-<rework>"
    int iteration = 0;
    int rework = 0;
    ConfounderSet candidates;
    ReviewStatus status = ReviewStatus::pending;
    std::map<std::string, Decision> decisions;
    std::string decided_by;
    std::string feedback;
    std::string created_at;
    std::string decided_at;
};

nlohmann::ordered_json to_json(const ReviewItem& item);

struct ReviewOutcome {
    std::vector<std::string> accepted;  // candidate order
    std::vector<std::string> rejected;
    std::string feedback;
    std::string decided_by;

    bool all_rejected() const { return accepted.empty(); }
};

class ExpertPolicy {
public:
    virtual ~ExpertPolicy() = default;
    /// Decision per candidate name plus optional feedback text.
    virtual ReviewOutcome decide(const ReviewItem& item) = 0;
    virtual std::string name() const = 0;
};

class AutoAcceptPolicy final : public ExpertPolicy {
public:
    ReviewOutcome decide(const ReviewItem& item) override;
    std::string name() const override { return "auto_accept"; }
};

/// Decisions from a fixture:
///   {"format": "confloop-review/1",
///    "default": "accept" | "reject"            (optional)
///    "decisions": [{"iteration": 1, "rework": 0 | "*",
///                   "accept": [...], "reject": [...], "feedback": "..."}]}
/// A candidate with no scripted decision and no default is a ConfigError.
class ScriptedPolicy final : public ExpertPolicy {
public:
    struct Entry {
        std::optional<int> iteration;
        std::optional<int> rework;
        std::vector<std::string> accept;
        std::vector<std::string> reject;
        std::string feedback;
    };

    explicit ScriptedPolicy(std::vector<Entry> entries, std::optional<Decision> fallback = std::nullopt);
    static ScriptedPolicy from_json(const nlohmann::json& doc);
    static ScriptedPolicy from_file(const std::filesystem::path& path);

    ReviewOutcome decide(const ReviewItem& item) override;
    std::string name() const override { return "scripted"; }

private:
    std::vector<Entry> entries_;
    std::optional<Decision> fallback_;
};

/// Thread-safe state shared by the pipeline and the review HTTP service.
class ReviewStore {
public:
    /// Registers or replaces a run's status and report snapshot.
    void update_run(const std::string& run_id, const std::string& status, nlohmann::ordered_json report);
    void set_trace(const std::string& run_id, int iteration, int rework, nlohmann::ordered_json trace);

    /// Adds a pending item; returns its id.
    std::string submit(ReviewItem item);

    /// Records a complete decision set. Throws NotFoundError for unknown runs or
    /// items, ConflictError for items already decided, DataError for decision
    /// sets that are incomplete or name non-candidates.
    ReviewItem decide(const std::string& run_id, const std::string& item_id,
                      const std::map<std::string, Decision>& decisions, const std::string& feedback,
                      const std::string& decided_by = "human");

    /// Blocks until the item is decided. Throws TimeoutError after `timeout`
    /// and Error once shutdown() is called.
    ReviewItem wait(const std::string& run_id, const std::string& item_id,
                    std::optional<std::chrono::milliseconds> timeout = std::nullopt);

    void shutdown();

    nlohmann::ordered_json runs_json() const;
    std::optional<nlohmann::ordered_json> run_report(const std::string& run_id) const;
    std::vector<ReviewItem> pending(const std::string& run_id) const;
    std::vector<ReviewItem> items(const std::string& run_id) const;
    std::optional<ReviewItem> item(const std::string& run_id, const std::string& item_id) const;
    /// Agent traces of one iteration in rework order; nullopt if none.
    std::optional<nlohmann::ordered_json> trace(const std::string& run_id, int iteration) const;
    bool has_run(const std::string& run_id) const;

    /// Registers the persisted runs found under runs_dir (<id>/report.json and
    /// <id>/traces/*.json) with the status recorded in each report.
    void load_runs_dir(const std::filesystem::path& runs_dir);

private:
    struct RunState {
        std::string status;
        nlohmann::ordered_json report = nlohmann::ordered_json::object();
        std::map<std::pair<int, int>, nlohmann::ordered_json> traces;
        std::map<std::string, ReviewItem> items;
        std::vector<std::string> order;
    };
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::map<std::string, RunState> runs_;
    bool shutdown_ = false;
};

/// Publishes each item to the store and blocks until it is decided over HTTP.
class InteractivePolicy final : public ExpertPolicy {
public:
    explicit InteractivePolicy(std::shared_ptr<ReviewStore> store,
                               std::optional<std::chrono::milliseconds> timeout = std::nullopt);
    ReviewOutcome decide(const ReviewItem& item) override;
    std::string name() const override { return "interactive"; }

private:
    std::shared_ptr<ReviewStore> store_;
    std::optional<std::chrono::milliseconds> timeout_;
};

struct ReviewRequest {
    std::string run_id;
    int iteration = 0;
    int rework = 0;
};

/// Asks the policy about every member of `cs`. Throws Error for an empty set
/// and ConfigError when the policy leaves a candidate undecided.
ReviewOutcome request_decision(const ConfounderSet& cs, ExpertPolicy& policy, const ReviewRequest& request);

struct ServeOptions {
    std::string bind = "127.0.0.1:8080";  // host:port, port 0 picks a free one
    std::optional<std::filesystem::path> ui_dir;
    std::string cors_origin = "*";
};

/// Running HTTP review service; stops on destruction.
class ReviewServer {
public:
    ReviewServer(std::shared_ptr<ReviewStore> store, const ServeOptions& options);
    ~ReviewServer();
    ReviewServer(const ReviewServer&) = delete;
    ReviewServer& operator=(const ReviewServer&) = delete;

    int port() const { return port_; }
    const std::string& host() const { return host_; }
    void stop();
    /// Blocks until stop() is called from another thread.
    void wait();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::string host_;
    int port_ = 0;
    std::thread thread_;
};

std::unique_ptr<ReviewServer> serve_review_api(std::shared_ptr<ReviewStore> store, const ServeOptions& options);

/// "host:port" -> parts; throws ConfigError.
std::pair<std::string, int> parse_bind(const std::string& bind);

std::string utc_timestamp();

}  // namespace confloop
