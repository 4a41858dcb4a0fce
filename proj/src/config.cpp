#include "confloop/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "confloop/error.hpp"

namespace confloop {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads one JSON object, remembering its dotted path for error messages and
// rejecting keys nobody asked for.
class Section {
public:
    Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
        if (!doc_.is_object()) throw ConfigError(label() + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!doc_.contains(key)) return;
        try {
            out = doc_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(field(key) + ": wrong type");
        }
    }

    void get_optional(const char* key, std::optional<long long>& out) {
        seen_.insert(key);
        if (!doc_.contains(key) || doc_.at(key).is_null()) return;
        if (!doc_.at(key).is_number_integer()) throw ConfigError(field(key) + ": expected an integer or null");
        out = doc_.at(key).get<long long>();
    }

    std::optional<Section> child(const char* key) {
        seen_.insert(key);
        if (!doc_.contains(key)) return std::nullopt;
        return Section(doc_.at(key), field(key));
    }

    void finish() const {
        for (const auto& [key, value] : doc_.items())
            if (!seen_.count(key)) throw ConfigError(field(key.c_str()) + ": unknown key");
    }

    std::string field(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

private:
    std::string label() const { return path_.empty() ? "config" : path_; }
    const json& doc_;
    std::string path_;
    std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field + ": " + what);
}

}  // namespace

void RunConfig::validate() const {
    check(split.train >= 0 && split.estimation >= 0 && split.test >= 0, "split", "ratios must be non-negative");
    check(std::abs(split.train + split.estimation + split.test - 1.0) < 1e-9, "split", "ratios must sum to 1");
    check(split.train > 0 && split.estimation > 0 && split.test > 0, "split", "every part needs a positive ratio");
    try {
        tree.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("tree: ") + e.what());
    }
    check(bootstrap_b >= 1, "bootstrap.b", "must be at least 1");
    check(alpha > 0 && alpha < 1, "bootstrap.alpha", "must lie in (0, 1)");
    check(backend.kind == "mock" || backend.kind == "http" || backend.kind == "replay", "backend.kind",
          "must be mock, http or replay");
    if (backend.kind == "mock") check(!backend.mock_fixture.empty(), "backend.mock_fixture", "required for mock backend");
    if (backend.kind == "replay") check(!backend.replay_trace.empty(), "backend.replay_trace", "required for replay");
    if (backend.kind == "http") check(!backend.http.endpoint.empty(), "backend.endpoint", "required for http backend");
    check(backend.http.max_retries >= 0, "backend.max_retries", "must be non-negative");
    check(backend.http.temperature >= 0, "backend.temperature", "must be non-negative");
    check(agent.max_subqueries >= 1, "agent.max_subqueries", "must be at least 1");
    check(agent.parallel_rules >= 1, "agent.parallel_rules", "must be at least 1");
    check(agent.self_consistency_samples >= 1, "agent.self_consistency_samples", "must be at least 1");
    check(knowledge.embedding == "hashed" || knowledge.embedding == "remote", "knowledge.embedding",
          "must be hashed or remote");
    check(knowledge.embedding_dim >= 1, "knowledge.embedding_dim", "must be at least 1");
    check(knowledge.chunk_size >= 1 && knowledge.chunk_overlap < knowledge.chunk_size, "knowledge.chunk_overlap",
          "must be smaller than chunk_size");
    check(knowledge.gather.k_retrieve >= 1, "knowledge.k_retrieve", "must be at least 1");
    check(knowledge.gather.k_keep >= 1, "knowledge.k_keep", "must be at least 1");
    check(review.policy == "auto_accept" || review.policy == "scripted" || review.policy == "interactive",
          "review.policy", "must be auto_accept, scripted or interactive");
    if (review.policy == "scripted") check(!review.fixture.empty(), "review.fixture", "required for scripted policy");
    if (review.timeout_ms) check(*review.timeout_ms > 0, "review.timeout_ms", "must be positive");
    check(max_iterations >= 0, "loop.max_iterations", "must be non-negative");
    check(max_rework >= 0, "loop.max_rework", "must be non-negative");
    check(min_stratum_size >= 1, "loop.min_stratum_size", "must be at least 1");
    check(!output_dir.empty(), "output_dir", "must not be empty");
}

std::filesystem::path RunConfig::resolve(const std::string& path) const {
    std::filesystem::path p(path);
    if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["split"] = {{"train", c.split.train}, {"estimation", c.split.estimation}, {"test", c.split.test}};
    j["tree"] = {{"max_depth", c.tree.max_depth},
                 {"min_leaf_per_arm", c.tree.min_leaf_per_arm},
                 {"min_split_gain", c.tree.min_split_gain},
                 {"honest", c.tree.honest}};
    j["bootstrap"] = {{"b", c.bootstrap_b}, {"alpha", c.alpha}};
    j["data"] = {{"csv", c.data.csv}, {"metadata", c.data.metadata}};
    j["backend"] = {{"kind", c.backend.kind},
                    {"mock_fixture", c.backend.mock_fixture},
                    {"replay_trace", c.backend.replay_trace},
                    {"endpoint", c.backend.http.endpoint},
                    {"model", c.backend.http.model},
                    {"temperature", c.backend.http.temperature},
                    {"max_retries", c.backend.http.max_retries},
                    {"timeout_seconds", c.backend.http.timeout_seconds}};
    j["agent"] = {{"max_subqueries", c.agent.max_subqueries},
                  {"min_votes", c.agent.min_votes},
                  {"parallel_rules", c.agent.parallel_rules},
                  {"self_consistency_samples", c.agent.self_consistency_samples},
                  {"treatment_description", c.agent.treatment_description},
                  {"outcome_description", c.agent.outcome_description}};
    j["knowledge"] = {{"corpus_dir", c.knowledge.corpus_dir},
                      {"embedding", c.knowledge.embedding},
                      {"embedding_dim", c.knowledge.embedding_dim},
                      {"embedding_model", c.knowledge.embedding_model},
                      {"chunk_size", c.knowledge.chunk_size},
                      {"chunk_overlap", c.knowledge.chunk_overlap},
                      {"tool_dir", c.knowledge.tool_dir},
                      {"tool_url", c.knowledge.tool_url},
                      {"k_retrieve", c.knowledge.gather.k_retrieve},
                      {"k_keep", c.knowledge.gather.k_keep},
                      {"min_effective_score", c.knowledge.gather.min_effective_score}};
    j["review"] = {{"policy", c.review.policy},
                   {"fixture", c.review.fixture},
                   {"timeout_ms", c.review.timeout_ms ? ordered_json(*c.review.timeout_ms) : ordered_json()}};
    j["loop"] = {{"max_iterations", c.max_iterations},
                 {"min_active_samples", c.min_active_samples},
                 {"max_rework", c.max_rework},
                 {"min_stratum_size", c.min_stratum_size}};
    j["threads"] = c.threads;
    j["output_dir"] = c.output_dir;
    return j;
}

RunConfig run_config_from_json(const json& doc) {
    RunConfig c;
    Section root(doc, "");
    root.get("seed", c.seed);
    if (auto s = root.child("split")) {
        s->get("train", c.split.train);
        s->get("estimation", c.split.estimation);
        s->get("test", c.split.test);
        s->finish();
    }
    if (auto s = root.child("tree")) {
        s->get("max_depth", c.tree.max_depth);
        s->get("min_leaf_per_arm", c.tree.min_leaf_per_arm);
        s->get("min_split_gain", c.tree.min_split_gain);
        s->get("honest", c.tree.honest);
        s->finish();
    }
    if (auto s = root.child("bootstrap")) {
        s->get("b", c.bootstrap_b);
        s->get("alpha", c.alpha);
        s->finish();
    }
    if (auto s = root.child("data")) {
        s->get("csv", c.data.csv);
        s->get("metadata", c.data.metadata);
        s->finish();
    }
    if (auto s = root.child("backend")) {
        s->get("kind", c.backend.kind);
        s->get("mock_fixture", c.backend.mock_fixture);
        s->get("replay_trace", c.backend.replay_trace);
        s->get("endpoint", c.backend.http.endpoint);
        s->get("model", c.backend.http.model);
        s->get("temperature", c.backend.http.temperature);
        s->get("max_retries", c.backend.http.max_retries);
        s->get("timeout_seconds", c.backend.http.timeout_seconds);
        s->finish();
    }
    if (auto s = root.child("agent")) {
        s->get("max_subqueries", c.agent.max_subqueries);
        s->get("min_votes", c.agent.min_votes);
        s->get("parallel_rules", c.agent.parallel_rules);
        s->get("self_consistency_samples", c.agent.self_consistency_samples);
        s->get("treatment_description", c.agent.treatment_description);
        s->get("outcome_description", c.agent.outcome_description);
        s->finish();
    }
    if (auto s = root.child("knowledge")) {
        s->get("corpus_dir", c.knowledge.corpus_dir);
        s->get("embedding", c.knowledge.embedding);
        s->get("embedding_dim", c.knowledge.embedding_dim);
        s->get("embedding_model", c.knowledge.embedding_model);
        s->get("chunk_size", c.knowledge.chunk_size);
        s->get("chunk_overlap", c.knowledge.chunk_overlap);
        s->get("tool_dir", c.knowledge.tool_dir);
        s->get("tool_url", c.knowledge.tool_url);
        s->get("k_retrieve", c.knowledge.gather.k_retrieve);
        s->get("k_keep", c.knowledge.gather.k_keep);
        s->get("min_effective_score", c.knowledge.gather.min_effective_score);
        s->finish();
    }
    if (auto s = root.child("review")) {
        s->get("policy", c.review.policy);
        s->get("fixture", c.review.fixture);
        s->get_optional("timeout_ms", c.review.timeout_ms);
        s->finish();
    }
    if (auto s = root.child("loop")) {
        s->get("max_iterations", c.max_iterations);
        s->get("min_active_samples", c.min_active_samples);
        s->get("max_rework", c.max_rework);
        s->get("min_stratum_size", c.min_stratum_size);
        s->finish();
    }
    root.get("threads", c.threads);
    root.get("output_dir", c.output_dir);
    root.finish();
    c.agent.max_retries = c.backend.http.max_retries;
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    RunConfig c = run_config_from_json(doc);
    c.base_dir = path.parent_path();
    return c;
}

}  // namespace confloop
