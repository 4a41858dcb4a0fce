#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "confloop/causal_tree.hpp"
#include "confloop/dataset.hpp"
#include "confloop/knowledge.hpp"

namespace confloop {

// ---------------------------------------------------------------------------
// Backend contract

enum class AgentStage { explain, decompose, reason };
std::string_view to_string(AgentStage stage);
AgentStage parse_agent_stage(std::string_view text);

/// One backend request. The routing fields identify where in the workflow the
/// call happens; remote backends only see `system` and `user`.
struct Prompt {
    AgentStage stage = AgentStage::explain;
    int iteration = 0;
    int rework = 0;
    int leaf_id = 0;
    int sample = 0;
    int attempt = 0;
    std::string system;
    std::string user;

    /// FNV-1a of system + user text.
    std::string hash() const;
};

/// Structured-output contract: a JSON schema (sent to remote backends) plus
/// the local validator that enforces it. The validator throws SchemaError.
struct ResponseSchema {
    std::string name;
    nlohmann::json json_schema;
    std::function<void(const nlohmann::json&)> validate;
};

class AgentBackend {
public:
    virtual ~AgentBackend() = default;
    /// Raw response text for one prompt. Must be safe to call concurrently.
    virtual std::string complete(const Prompt& prompt, const ResponseSchema& schema) = 0;
    virtual std::string name() const = 0;
};

struct BackendConfig {
    std::string endpoint;  // full URL of the chat-completions route
    std::string model;
    double temperature = 0.0;
    int max_retries = 3;
    int timeout_seconds = 120;
};

/// Chat-completion style HTTP backend. The bearer token comes from
/// CONFLOOP_LLM_KEY.
class HttpChatBackend final : public AgentBackend {
public:
    explicit HttpChatBackend(BackendConfig config);
    std::string complete(const Prompt& prompt, const ResponseSchema& schema) override;
    std::string name() const override { return "http:" + config_.model; }

    /// Request body sent for a prompt (exposed for contract tests).
    nlohmann::json request_body(const Prompt& prompt, const ResponseSchema& schema) const;

private:
    BackendConfig config_;
    std::string api_key_;
};

/// Offline backend driven by a fixture mapping (iteration, stage, leaf_id,
/// rework, sample) to scripted responses. Any key may be "*" (or omitted) to
/// match everything; the entry with the most exact key fields wins, earliest
/// in the file on ties. Unmatched prompts get an empty (invalid) response.
class MockBackend final : public AgentBackend {
public:
    struct Entry {
        std::optional<int> iteration;
        std::optional<AgentStage> stage;
        std::optional<int> leaf_id;
        std::optional<int> rework;
        std::optional<int> sample;
        std::string response;  // raw text returned verbatim
    };

    struct CallRecord {
        AgentStage stage;
        int iteration;
        int rework;
        int leaf_id;
        int sample;
        int attempt;
        std::string prompt_hash;
    };

    explicit MockBackend(std::vector<Entry> entries, std::string label = "mock");
    static MockBackend from_json(const nlohmann::json& doc);
    static MockBackend from_file(const std::filesystem::path& path);

    std::string complete(const Prompt& prompt, const ResponseSchema& schema) override;
    std::string name() const override { return label_; }

    std::vector<CallRecord> calls() const;
    std::size_t call_count() const;

private:
    std::vector<Entry> entries_;
    std::string label_;
    mutable std::mutex mutex_;
    std::vector<CallRecord> calls_;
};

/// Replays the responses recorded in agent traces (one trace object or an
/// array of them), keyed by iteration, rework, stage, leaf, sample, attempt and
/// prompt hash. Throws BackendError for prompts absent from the traces.
class ReplayBackend final : public AgentBackend {
public:
    explicit ReplayBackend(const nlohmann::json& trace);
    std::string complete(const Prompt& prompt, const ResponseSchema& schema) override;
    std::string name() const override { return "replay"; }
    std::size_t size() const { return responses_.size(); }

private:
    void add(const nlohmann::json& trace);
    std::map<std::string, std::string> responses_;
};

// ---------------------------------------------------------------------------
// Workflow types

struct Rule {
    int leaf_id = 0;
    std::vector<SplitRule> conjunction;
    std::string text;
    std::string described;
    double cate = 0.0;
    std::size_t n_treated = 0;
    std::size_t n_control = 0;
    std::string narrative;
    std::vector<std::string> covariate_descriptions;
};

struct SubQuery {
    int rule_leaf_id = 0;
    std::string text;
    SourcePreference source_pref = SourcePreference::rag;
    bool templated = false;
};

struct EvidenceRef {
    std::string chunk_id;
    std::string source;
    Provenance provenance = Provenance::rag;
    std::string snippet;
};

struct CandidateConfounder {
    std::string covariate;
    std::string rationale;
    std::vector<EvidenceRef> evidence;
    int rule_leaf_id = 0;
};

struct ConfounderMember {
    std::string covariate;
    std::size_t vote_count = 0;
    std::vector<std::string> rationales;
    std::vector<EvidenceRef> evidence;
};

struct ConfounderSet {
    std::vector<ConfounderMember> confounders;
    /// leaf id -> names proposed by that rule.
    std::map<int, std::vector<std::string>> provenance;
    std::size_t min_votes = 1;

    bool empty() const { return confounders.empty(); }
    std::vector<std::string> names() const;
};

nlohmann::ordered_json to_json(const ConfounderSet& cs);
ConfounderSet confounder_set_from_json(const nlohmann::json& doc);
nlohmann::ordered_json to_json(const EvidenceRef& e);

struct ExpertFeedback {
    std::vector<std::string> rejected;
    std::string text;

    bool empty() const { return rejected.empty() && text.empty(); }
};

struct AgentConfig {
    std::size_t max_subqueries = 4;
    /// 0 selects automatically: 1 for a single rule, otherwise 2.
    std::size_t min_votes = 0;
    int max_retries = 3;
    std::size_t parallel_rules = 2;
    /// Independent completions per rule for the reasoning step; votes are
    /// pooled by per-rule majority. 1 disables self-consistency.
    int self_consistency_samples = 1;
    std::string treatment_description = "the treatment";
    std::string outcome_description = "the outcome";
};

/// Collects every backend call and workflow event of one agent run.
class AgentTrace {
public:
    struct Call {
        int leaf_id;
        AgentStage stage;
        int sample;
        int attempt;
        std::string prompt_hash;
        std::string response;
        bool valid;
        std::string error;
    };

    void record_call(Call call);
    void record_event(int leaf_id, std::string kind, std::string detail);
    std::vector<Call> calls() const;

    /// Calls and events ordered by (leaf_id, stage, sample, attempt).
    nlohmann::ordered_json calls_json() const;
    nlohmann::ordered_json events_json() const;

private:
    struct EventRecord {
        int leaf_id;
        std::string kind;
        std::string detail;
        std::size_t seq;
    };
    mutable std::mutex mutex_;
    std::vector<Call> calls_;
    std::vector<EventRecord> events_;
};

/// Where in the loop an agent run happens, plus the sinks it writes into.
struct AgentContext {
    AgentConfig config;
    int iteration = 1;
    int rework = 0;
    ExpertFeedback feedback;
    AgentTrace* trace = nullptr;  // optional
};

/// Sends the prompt, parses JSON, validates; retries up to max_retries times
/// on invalid output, then throws SchemaError.
nlohmann::json call_structured(AgentBackend& backend, Prompt prompt, const ResponseSchema& schema, int max_retries,
                               AgentTrace* trace);

const ResponseSchema& explain_schema();
ResponseSchema decompose_schema(std::size_t max_subqueries);
const ResponseSchema& reason_schema();

/// One Rule per leaf; one backend call per leaf for the narrative. A failed
/// call leaves the narrative empty and records a degradation event.
std::vector<Rule> explain_partition(const Partition& p, AgentBackend& backend, const std::vector<CovariateMeta>& meta,
                                    const AgentContext& ctx);

/// 1..max_subqueries sub-queries from the backend, or one templated
/// sub-query per conjunct when the backend never produces valid output.
std::vector<SubQuery> decompose(const Rule& rule, AgentBackend& backend, const std::vector<CovariateMeta>& meta,
                                const AgentContext& ctx);

struct SubQueryKnowledge {
    SubQuery query;
    std::vector<KnowledgeItem> items;
    GatherTrace trace;
};

/// Candidate confounders for a rule. Names absent from `meta` (hallucinated)
/// or already validated are dropped and logged. Invalid output after retries
/// yields an empty list.
std::vector<CandidateConfounder> reason_confounders(const Rule& rule, const std::vector<SubQueryKnowledge>& knowledge,
                                                    AgentBackend& backend, const std::vector<CovariateMeta>& meta,
                                                    const std::vector<std::string>& validated, const AgentContext& ctx,
                                                    int sample = 0);

/// Cross-rule voting: vote_count = number of distinct rules proposing a name.
std::size_t auto_min_votes(std::size_t rule_count);
ConfounderSet ensemble(const std::vector<std::vector<CandidateConfounder>>& per_rule, std::size_t min_votes = 0);

struct AgentResult {
    ConfounderSet confounders;
    std::vector<Rule> rules;
    nlohmann::ordered_json trace;
};

/// Full workflow: explain -> decompose -> gather -> reason -> ensemble.
AgentResult run_agent_iteration(const Partition& p, const KnowledgeBase& kb, AgentBackend& backend,
                                const std::vector<CovariateMeta>& meta, const std::vector<std::string>& validated,
                                const AgentContext& ctx);

/// Hashes of the shipped prompt templates, keyed by template name.
std::map<std::string, std::string> prompt_template_hashes();

}  // namespace confloop
