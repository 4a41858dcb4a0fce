#include "confloop/agent.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "confloop/error.hpp"
#include "confloop/hash.hpp"
#include "confloop/log.hpp"
#include "confloop/parallel.hpp"
#include "confloop/prompt_templates.hpp"
#include "http_util.hpp"

namespace confloop {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::size_t kSnippetChars = 240;

std::string_view template_text(std::string_view name) {
    for (const auto& t : prompts::kTemplates)
        if (t.name == name) return t.text;
    throw ConfigError("missing prompt template " + std::string(name));
}

std::string render(std::string_view tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tmpl.size() + 256);
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const auto open = tmpl.find("{{", pos);
        if (open == std::string_view::npos) {
            out.append(tmpl.substr(pos));
            break;
        }
        const auto close = tmpl.find("}}", open + 2);
        if (close == std::string_view::npos) {
            out.append(tmpl.substr(pos));
            break;
        }
        out.append(tmpl.substr(pos, open - pos));
        const std::string key(tmpl.substr(open + 2, close - open - 2));
        auto it = values.find(key);
        if (it == values.end()) throw ConfigError("prompt placeholder without value: " + key);
        out += it->second;
        pos = close + 2;
    }
    return out;
}

std::string fmt_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

const CovariateMeta* find_meta(const std::vector<CovariateMeta>& meta, std::string_view name) {
    for (const auto& m : meta)
        if (m.name == name) return &m;
    return nullptr;
}

std::string describe_covariate(const std::vector<CovariateMeta>& meta, const std::string& name) {
    const auto* m = find_meta(meta, name);
    if (!m || m->description.empty()) return name;
    return m->description;
}

int stage_rank(AgentStage s) { return static_cast<int>(s); }

Prompt base_prompt(AgentStage stage, const AgentContext& ctx, int leaf_id, int sample = 0) {
    Prompt p;
    p.stage = stage;
    p.iteration = ctx.iteration;
    p.rework = ctx.rework;
    p.leaf_id = leaf_id;
    p.sample = sample;
    p.system = std::string(template_text("system"));
    return p;
}

void require(bool ok, const std::string& schema, const std::string& what) {
    if (!ok) throw SchemaError(schema + ": " + what);
}

std::string replay_key(int iteration, int rework, AgentStage stage, int leaf, int sample, int attempt,
                       const std::string& hash) {
    std::ostringstream os;
    os << iteration << '|' << rework << '|' << to_string(stage) << '|' << leaf << '|' << sample << '|' << attempt
       << '|' << hash;
    return os.str();
}

std::optional<int> key_field(const json& entry, const char* name) {
    if (!entry.contains(name)) return std::nullopt;
    const auto& v = entry.at(name);
    if (v.is_string() && v.get<std::string>() == "*") return std::nullopt;
    if (!v.is_number_integer()) throw ConfigError(std::string("mock fixture: ") + name + " must be an integer or \"*\"");
    return v.get<int>();
}

ordered_json rule_json(const Rule& r) {
    ordered_json j;
    j["leaf_id"] = r.leaf_id;
    j["rule"] = r.text;
    j["described"] = r.described;
    j["cate"] = r.cate;
    j["n_treated"] = r.n_treated;
    j["n_control"] = r.n_control;
    j["narrative"] = r.narrative;
    return j;
}

EvidenceRef evidence_from(const KnowledgeItem& item) {
    EvidenceRef e;
    e.chunk_id = item.chunk.id;
    e.source = item.chunk.source;
    e.provenance = item.provenance;
    e.snippet = item.chunk.text.substr(0, std::min(item.chunk.text.size(), kSnippetChars));
    return e;
}

}  // namespace

std::string_view to_string(AgentStage stage) {
    switch (stage) {
        case AgentStage::explain: return "explain";
        case AgentStage::decompose: return "decompose";
        case AgentStage::reason: return "reason";
    }
    return "?";
}

AgentStage parse_agent_stage(std::string_view text) {
    if (text == "explain") return AgentStage::explain;
    if (text == "decompose") return AgentStage::decompose;
    if (text == "reason") return AgentStage::reason;
    throw ConfigError("unknown agent stage " + std::string(text));
}

std::string Prompt::hash() const { return hash_hex(system + "\n\x1f\n" + user); }

std::map<std::string, std::string> prompt_template_hashes() {
    std::map<std::string, std::string> out;
    for (const auto& t : prompts::kTemplates) out[std::string(t.name)] = hash_hex(t.text);
    return out;
}

// ---------------------------------------------------------------------------
// Backends

HttpChatBackend::HttpChatBackend(BackendConfig config)
    : config_(std::move(config)), api_key_(detail::env_or("CONFLOOP_LLM_KEY", "")) {
    if (config_.endpoint.empty()) throw ConfigError("agent backend endpoint is empty");
}

json HttpChatBackend::request_body(const Prompt& prompt, const ResponseSchema& schema) const {
    json body;
    body["model"] = config_.model;
    body["temperature"] = config_.temperature;
    body["messages"] = json::array({json{{"role", "system"}, {"content", prompt.system}},
                                    json{{"role", "user"}, {"content", prompt.user}}});
    body["response_format"] = {
        {"type", "json_schema"},
        {"json_schema", {{"name", schema.name}, {"schema", schema.json_schema}, {"strict", true}}}};
    return body;
}

std::string HttpChatBackend::complete(const Prompt& prompt, const ResponseSchema& schema) {
    const json reply = detail::post_json(config_.endpoint, request_body(prompt, schema), api_key_,
                                         config_.timeout_seconds);
    try {
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception&) {
        throw BackendError("chat reply from " + config_.endpoint + " has no choices[0].message.content");
    }
}

MockBackend::MockBackend(std::vector<Entry> entries, std::string label)
    : entries_(std::move(entries)), label_(std::move(label)) {}

MockBackend MockBackend::from_json(const json& doc) {
    if (!doc.is_object() || doc.value("format", "") != "confloop-mock/1")
        throw ConfigError("mock fixture: expected format \"confloop-mock/1\"");
    std::vector<Entry> entries;
    for (const auto& e : doc.at("responses")) {
        Entry entry;
        entry.iteration = key_field(e, "iteration");
        entry.leaf_id = key_field(e, "leaf_id");
        entry.rework = key_field(e, "rework");
        entry.sample = key_field(e, "sample");
        if (e.contains("stage") && e.at("stage") != "*") entry.stage = parse_agent_stage(e.at("stage").get<std::string>());
        if (e.contains("raw")) {
            entry.response = e.at("raw").get<std::string>();
        } else if (e.contains("response")) {
            entry.response = e.at("response").dump();
        } else {
            throw ConfigError("mock fixture: entry needs \"response\" or \"raw\"");
        }
        entries.push_back(std::move(entry));
    }
    return MockBackend(std::move(entries), doc.value("label", "mock"));
}

MockBackend MockBackend::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open mock fixture " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("mock fixture " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(doc);
}

std::string MockBackend::complete(const Prompt& prompt, const ResponseSchema&) {
    const Entry* best = nullptr;
    int best_score = -1;
    for (const auto& e : entries_) {
        int score = 0;
        auto check = [&score](const auto& want, const auto& have) {
            if (!want) return true;
            ++score;
            return *want == have;
        };
        if (!check(e.iteration, prompt.iteration) || !check(e.stage, prompt.stage) ||
            !check(e.leaf_id, prompt.leaf_id) || !check(e.rework, prompt.rework) || !check(e.sample, prompt.sample))
            continue;
        if (score > best_score) {
            best = &e;
            best_score = score;
        }
    }
    {
        std::lock_guard lock(mutex_);
        calls_.push_back({prompt.stage, prompt.iteration, prompt.rework, prompt.leaf_id, prompt.sample, prompt.attempt,
                          prompt.hash()});
    }
    return best ? best->response : std::string();
}

std::vector<MockBackend::CallRecord> MockBackend::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

std::size_t MockBackend::call_count() const {
    std::lock_guard lock(mutex_);
    return calls_.size();
}

ReplayBackend::ReplayBackend(const json& trace) {
    if (trace.is_array()) {
        for (const auto& t : trace) add(t);
    } else {
        add(trace);
    }
}

void ReplayBackend::add(const json& trace) {
    const int iteration = trace.at("iteration").get<int>();
    const int rework = trace.at("rework").get<int>();
    for (const auto& c : trace.at("calls")) {
        const auto key = replay_key(iteration, rework, parse_agent_stage(c.at("stage").get<std::string>()),
                                    c.at("leaf_id").get<int>(), c.at("sample").get<int>(), c.at("attempt").get<int>(),
                                    c.at("prompt_hash").get<std::string>());
        responses_[key] = c.at("response").get<std::string>();
    }
}

std::string ReplayBackend::complete(const Prompt& prompt, const ResponseSchema&) {
    const auto key = replay_key(prompt.iteration, prompt.rework, prompt.stage, prompt.leaf_id, prompt.sample,
                                prompt.attempt, prompt.hash());
    auto it = responses_.find(key);
    if (it == responses_.end())
        throw BackendError("replay: no recorded response for " + std::string(to_string(prompt.stage)) + " leaf " +
                           std::to_string(prompt.leaf_id) + " (prompt " + prompt.hash() + ")");
    return it->second;
}

// ---------------------------------------------------------------------------
// Trace

void AgentTrace::record_call(Call call) {
    std::lock_guard lock(mutex_);
    calls_.push_back(std::move(call));
}

void AgentTrace::record_event(int leaf_id, std::string kind, std::string detail) {
    std::lock_guard lock(mutex_);
    events_.push_back({leaf_id, std::move(kind), std::move(detail), events_.size()});
}

std::vector<AgentTrace::Call> AgentTrace::calls() const {
    std::lock_guard lock(mutex_);
    auto out = calls_;
    std::stable_sort(out.begin(), out.end(), [](const Call& a, const Call& b) {
        return std::tuple(a.leaf_id, stage_rank(a.stage), a.sample, a.attempt) <
               std::tuple(b.leaf_id, stage_rank(b.stage), b.sample, b.attempt);
    });
    return out;
}

ordered_json AgentTrace::calls_json() const {
    auto arr = ordered_json::array();
    for (const auto& c : calls()) {
        ordered_json j;
        j["leaf_id"] = c.leaf_id;
        j["stage"] = to_string(c.stage);
        j["sample"] = c.sample;
        j["attempt"] = c.attempt;
        j["prompt_hash"] = c.prompt_hash;
        j["response"] = c.response;
        j["valid"] = c.valid;
        j["error"] = c.error;
        arr.push_back(std::move(j));
    }
    return arr;
}

ordered_json AgentTrace::events_json() const {
    std::vector<EventRecord> events;
    {
        std::lock_guard lock(mutex_);
        events = events_;
    }
    std::sort(events.begin(), events.end(), [](const EventRecord& a, const EventRecord& b) {
        return std::tie(a.leaf_id, a.kind, a.detail) < std::tie(b.leaf_id, b.kind, b.detail);
    });
    auto arr = ordered_json::array();
    for (const auto& e : events) {
        ordered_json j;
        j["leaf_id"] = e.leaf_id;
        j["kind"] = e.kind;
        j["detail"] = e.detail;
        arr.push_back(std::move(j));
    }
    return arr;
}

// ---------------------------------------------------------------------------
// Structured calls

json call_structured(AgentBackend& backend, Prompt prompt, const ResponseSchema& schema, int max_retries,
                     AgentTrace* trace) {
    const std::string base_user = prompt.user;
    std::string last_error;
    for (int attempt = 0; attempt <= std::max(0, max_retries); ++attempt) {
        prompt.attempt = attempt;
        if (attempt > 0)
            prompt.user = base_user + "\n\nYour previous reply was rejected (" + last_error +
                          "). Reply again with a single JSON object matching the schema.";
        std::string response;
        json parsed;
        bool valid = false;
        try {
            response = backend.complete(prompt, schema);
            parsed = json::parse(response, nullptr, false);
            if (parsed.is_discarded()) throw SchemaError(schema.name + ": response is not valid JSON");
            schema.validate(parsed);
            valid = true;
        } catch (const SchemaError& e) {
            last_error = e.what();
        } catch (const BackendError& e) {
            last_error = e.what();
        }
        if (trace)
            trace->record_call({prompt.leaf_id, prompt.stage, prompt.sample, attempt, prompt.hash(), response, valid,
                                valid ? std::string() : last_error});
        if (valid) return parsed;
    }
    throw SchemaError(schema.name + " response invalid after " + std::to_string(max_retries + 1) +
                      " attempts: " + last_error);
}

const ResponseSchema& explain_schema() {
    static const ResponseSchema schema{
        "explanation",
        json::parse(R"({"type":"object","properties":{"narrative":{"type":"string"}},
                        "required":["narrative"],"additionalProperties":false})"),
        [](const json& j) {
            require(j.is_object(), "explanation", "expected an object");
            require(j.contains("narrative") && j.at("narrative").is_string(), "explanation",
                    "\"narrative\" must be a string");
        }};
    return schema;
}

ResponseSchema decompose_schema(std::size_t max_subqueries) {
    json js = json::parse(R"({"type":"object","properties":{"subqueries":{"type":"array","minItems":1,
        "items":{"type":"object","properties":{"text":{"type":"string"},"source":{"type":"string","enum":["rag","tool"]}},
        "required":["text","source"],"additionalProperties":false}}},
        "required":["subqueries"],"additionalProperties":false})");
    js["properties"]["subqueries"]["maxItems"] = max_subqueries;
    return ResponseSchema{"subqueries", std::move(js), [max_subqueries](const json& j) {
                              const std::string n = "subqueries";
                              require(j.is_object() && j.contains("subqueries") && j.at("subqueries").is_array(), n,
                                      "\"subqueries\" must be an array");
                              const auto& arr = j.at("subqueries");
                              require(!arr.empty(), n, "at least one sub-query required");
                              require(arr.size() <= max_subqueries, n,
                                      "at most " + std::to_string(max_subqueries) + " sub-queries allowed");
                              for (const auto& q : arr) {
                                  require(q.is_object() && q.contains("text") && q.at("text").is_string() &&
                                              !trim(q.at("text").get<std::string>()).empty(),
                                          n, "each sub-query needs non-empty \"text\"");
                                  if (q.contains("source")) {
                                      require(q.at("source").is_string(), n, "\"source\" must be a string");
                                      const auto s = q.at("source").get<std::string>();
                                      require(s == "rag" || s == "tool", n, "\"source\" must be rag or tool");
                                  }
                              }
                          }};
}

const ResponseSchema& reason_schema() {
    static const ResponseSchema schema{
        "confounders",
        json::parse(R"({"type":"object","properties":{"confounders":{"type":"array",
            "items":{"type":"object","properties":{"covariate":{"type":"string"},"rationale":{"type":"string"}},
            "required":["covariate","rationale"],"additionalProperties":false}}},
            "required":["confounders"],"additionalProperties":false})"),
        [](const json& j) {
            const std::string n = "confounders";
            require(j.is_object() && j.contains("confounders") && j.at("confounders").is_array(), n,
                    "\"confounders\" must be an array");
            for (const auto& c : j.at("confounders")) {
                require(c.is_object() && c.contains("covariate") && c.at("covariate").is_string(), n,
                        "each entry needs a string \"covariate\"");
                if (c.contains("rationale")) require(c.at("rationale").is_string(), n, "\"rationale\" must be a string");
            }
        }};
    return schema;
}

// ---------------------------------------------------------------------------
// Stages

std::vector<Rule> explain_partition(const Partition& p, AgentBackend& backend, const std::vector<CovariateMeta>& meta,
                                    const AgentContext& ctx) {
    if (p.leaves.empty()) throw Error("explain_partition: partition has no leaves");
    const auto texts = extract_rules(p, meta);
    std::vector<Rule> rules(texts.size());
    const auto tmpl = template_text("explain");

    parallel_for(texts.size(), ctx.config.parallel_rules, [&](std::size_t i) {
        const auto& t = texts[i];
        Rule& r = rules[i];
        r.leaf_id = t.leaf_id;
        r.conjunction = t.conjunction;
        r.text = t.text;
        r.described = t.described;
        r.cate = t.cate;
        r.n_treated = t.n_treated;
        r.n_control = t.n_control;
        std::set<std::string> seen;
        for (const auto& c : t.conjunction)
            if (seen.insert(c.covariate).second)
                r.covariate_descriptions.push_back(c.covariate + ": " + describe_covariate(meta, c.covariate));

        Prompt prompt = base_prompt(AgentStage::explain, ctx, r.leaf_id);
        prompt.user = render(tmpl, {{"treatment", ctx.config.treatment_description},
                                    {"outcome", ctx.config.outcome_description},
                                    {"leaf_id", std::to_string(r.leaf_id)},
                                    {"rule", r.described},
                                    {"cate", fmt_number(r.cate)},
                                    {"n_treated", std::to_string(r.n_treated)},
                                    {"n_control", std::to_string(r.n_control)},
                                    {"covariates", r.covariate_descriptions.empty()
                                                       ? std::string("(none)")
                                                       : join(r.covariate_descriptions, "\n")}});
        try {
            r.narrative = call_structured(backend, prompt, explain_schema(), ctx.config.max_retries, ctx.trace)
                              .at("narrative")
                              .get<std::string>();
        } catch (const SchemaError& e) {
            log::warn("agent", "leaf " + std::to_string(r.leaf_id) + ": explanation degraded: " + e.what());
            if (ctx.trace) ctx.trace->record_event(r.leaf_id, "degraded_explanation", e.what());
        }
    });
    return rules;
}

std::vector<SubQuery> decompose(const Rule& rule, AgentBackend& backend, const std::vector<CovariateMeta>& meta,
                                const AgentContext& ctx) {
    if (rule.narrative.empty() && rule.conjunction.empty() && rule.text.empty())
        throw Error("decompose: rule has neither narrative nor conjunction");
    Prompt prompt = base_prompt(AgentStage::decompose, ctx, rule.leaf_id);
    prompt.user = render(template_text("decompose"),
                         {{"treatment", ctx.config.treatment_description},
                          {"outcome", ctx.config.outcome_description},
                          {"leaf_id", std::to_string(rule.leaf_id)},
                          {"rule", rule.described},
                          {"narrative", rule.narrative.empty() ? std::string("(not available)") : rule.narrative},
                          {"max_subqueries", std::to_string(ctx.config.max_subqueries)}});
    std::vector<SubQuery> out;
    try {
        const auto reply = call_structured(backend, prompt, decompose_schema(ctx.config.max_subqueries),
                                           ctx.config.max_retries, ctx.trace);
        for (const auto& q : reply.at("subqueries")) {
            SubQuery sq;
            sq.rule_leaf_id = rule.leaf_id;
            sq.text = trim(q.at("text").get<std::string>());
            sq.source_pref = parse_source_preference(q.value("source", std::string("rag")));
            out.push_back(std::move(sq));
        }
        return out;
    } catch (const SchemaError& e) {
        log::warn("agent", "leaf " + std::to_string(rule.leaf_id) + ": decomposition fell back to templates: " +
                               e.what());
        if (ctx.trace) ctx.trace->record_event(rule.leaf_id, "templated_subqueries", e.what());
    }
    auto templated = [&](std::string text) {
        SubQuery sq;
        sq.rule_leaf_id = rule.leaf_id;
        sq.text = std::move(text);
        sq.templated = true;
        out.push_back(std::move(sq));
    };
    for (const auto& c : rule.conjunction)
        templated("How does " + describe_covariate(meta, c.covariate) + " affect the outcome under " +
                  ctx.config.treatment_description + "?");
    if (rule.conjunction.empty())
        templated("Which patient characteristics affect the outcome under " + ctx.config.treatment_description + "?");
    return out;
}

std::vector<CandidateConfounder> reason_confounders(const Rule& rule, const std::vector<SubQueryKnowledge>& knowledge,
                                                    AgentBackend& backend, const std::vector<CovariateMeta>& meta,
                                                    const std::vector<std::string>& validated, const AgentContext& ctx,
                                                    int sample) {
    std::vector<EvidenceRef> evidence;
    std::string knowledge_text;
    std::size_t item_count = 0;
    for (std::size_t q = 0; q < knowledge.size(); ++q) {
        for (const auto& item : knowledge[q].items) {
            ++item_count;
            knowledge_text += "[" + item.chunk.id + " | " + std::string(to_string(item.provenance)) + "] (for: " +
                              knowledge[q].query.text + ")\n" + item.chunk.text + "\n\n";
            evidence.push_back(evidence_from(item));
        }
    }
    if (item_count == 0) knowledge_text = "none retrieved";

    const std::set<std::string> validated_set(validated.begin(), validated.end());
    std::vector<std::string> candidate_lines;
    for (const auto& m : meta)
        if (!validated_set.count(m.name))
            candidate_lines.push_back(m.name + ": " + (m.description.empty() ? m.name : m.description));

    std::string feedback;
    if (!ctx.feedback.empty()) {
        feedback = "\nExpert review of the previous proposal:";
        if (!ctx.feedback.rejected.empty()) feedback += " rejected " + join(ctx.feedback.rejected, ", ") + ".";
        if (!ctx.feedback.text.empty()) feedback += " Comment: " + ctx.feedback.text;
        feedback += "\n";
    }

    Prompt prompt = base_prompt(AgentStage::reason, ctx, rule.leaf_id, sample);
    prompt.user = render(template_text("reason"),
                         {{"treatment", ctx.config.treatment_description},
                          {"outcome", ctx.config.outcome_description},
                          {"leaf_id", std::to_string(rule.leaf_id)},
                          {"rule", rule.described},
                          {"narrative", rule.narrative.empty() ? std::string("(not available)") : rule.narrative},
                          {"cate", fmt_number(rule.cate)},
                          {"knowledge", trim(knowledge_text)},
                          {"candidates", candidate_lines.empty() ? std::string("(none)") : join(candidate_lines, "\n")},
                          {"validated", validated.empty() ? std::string("none") : join(validated, ", ")},
                          {"feedback", feedback}});
    if (ctx.config.self_consistency_samples > 1)
        prompt.user += "\n(Independent sample " + std::to_string(sample + 1) + " of " +
                       std::to_string(ctx.config.self_consistency_samples) + ".)";

    json reply;
    try {
        reply = call_structured(backend, prompt, reason_schema(), ctx.config.max_retries, ctx.trace);
    } catch (const SchemaError& e) {
        log::warn("agent", "leaf " + std::to_string(rule.leaf_id) + ": reasoning failed: " + e.what());
        if (ctx.trace) ctx.trace->record_event(rule.leaf_id, "reason_failed", e.what());
        return {};
    }

    std::vector<CandidateConfounder> out;
    std::set<std::string> seen;
    for (const auto& c : reply.at("confounders")) {
        const std::string name = trim(c.at("covariate").get<std::string>());
        if (!find_meta(meta, name)) {
            log::warn("agent", "leaf " + std::to_string(rule.leaf_id) + ": dropped hallucinated covariate " + name);
            if (ctx.trace) ctx.trace->record_event(rule.leaf_id, "hallucination", name);
            continue;
        }
        if (validated_set.count(name)) {
            if (ctx.trace) ctx.trace->record_event(rule.leaf_id, "already_validated", name);
            continue;
        }
        if (!seen.insert(name).second) continue;
        CandidateConfounder cand;
        cand.covariate = name;
        cand.rationale = c.value("rationale", std::string());
        cand.evidence = evidence;
        cand.rule_leaf_id = rule.leaf_id;
        out.push_back(std::move(cand));
    }
    return out;
}

std::size_t auto_min_votes(std::size_t rule_count) { return rule_count <= 1 ? 1 : 2; }

std::vector<std::string> ConfounderSet::names() const {
    std::vector<std::string> out;
    for (const auto& c : confounders) out.push_back(c.covariate);
    return out;
}

ConfounderSet ensemble(const std::vector<std::vector<CandidateConfounder>>& per_rule, std::size_t min_votes) {
    ConfounderSet cs;
    cs.min_votes = min_votes == 0 ? auto_min_votes(per_rule.size()) : min_votes;

    struct Acc {
        std::set<int> rules;
        std::vector<std::pair<int, std::string>> rationales;
        std::map<std::string, EvidenceRef> evidence;
    };
    std::map<std::string, Acc> acc;
    for (std::size_t r = 0; r < per_rule.size(); ++r) {
        std::set<std::string> names;
        for (const auto& c : per_rule[r]) {
            auto& a = acc[c.covariate];
            if (names.insert(c.covariate).second) {
                a.rules.insert(static_cast<int>(r));
                if (!c.rationale.empty()) a.rationales.emplace_back(c.rule_leaf_id, c.rationale);
            }
            for (const auto& e : c.evidence) a.evidence.emplace(e.chunk_id, e);
            auto& prov = cs.provenance[c.rule_leaf_id];
            if (std::find(prov.begin(), prov.end(), c.covariate) == prov.end()) prov.push_back(c.covariate);
        }
    }
    for (auto& [leaf, names] : cs.provenance) std::sort(names.begin(), names.end());

    for (auto& [name, a] : acc) {
        if (a.rules.size() < cs.min_votes) continue;
        ConfounderMember m;
        m.covariate = name;
        m.vote_count = a.rules.size();
        std::sort(a.rationales.begin(), a.rationales.end());
        for (const auto& [leaf, text] : a.rationales) m.rationales.push_back("leaf " + std::to_string(leaf) + ": " + text);
        for (auto& [id, e] : a.evidence) m.evidence.push_back(e);
        cs.confounders.push_back(std::move(m));
    }
    std::stable_sort(cs.confounders.begin(), cs.confounders.end(), [](const auto& a, const auto& b) {
        if (a.vote_count != b.vote_count) return a.vote_count > b.vote_count;
        return a.covariate < b.covariate;
    });
    return cs;
}

ordered_json to_json(const EvidenceRef& e) {
    ordered_json j;
    j["chunk_id"] = e.chunk_id;
    j["source"] = e.source;
    j["provenance"] = to_string(e.provenance);
    j["snippet"] = e.snippet;
    return j;
}

ordered_json to_json(const ConfounderSet& cs) {
    ordered_json j;
    j["min_votes"] = cs.min_votes;
    auto members = ordered_json::array();
    for (const auto& m : cs.confounders) {
        ordered_json mj;
        mj["covariate"] = m.covariate;
        mj["vote_count"] = m.vote_count;
        mj["rationales"] = m.rationales;
        auto ev = ordered_json::array();
        for (const auto& e : m.evidence) ev.push_back(to_json(e));
        mj["evidence"] = std::move(ev);
        members.push_back(std::move(mj));
    }
    j["confounders"] = std::move(members);
    ordered_json prov = ordered_json::object();
    for (const auto& [leaf, names] : cs.provenance) prov[std::to_string(leaf)] = names;
    j["provenance"] = std::move(prov);
    return j;
}

ConfounderSet confounder_set_from_json(const json& doc) {
    ConfounderSet cs;
    cs.min_votes = doc.value("min_votes", std::size_t{1});
    for (const auto& mj : doc.at("confounders")) {
        ConfounderMember m;
        m.covariate = mj.at("covariate").get<std::string>();
        m.vote_count = mj.at("vote_count").get<std::size_t>();
        m.rationales = mj.value("rationales", std::vector<std::string>{});
        for (const auto& ej : mj.value("evidence", json::array())) {
            EvidenceRef e;
            e.chunk_id = ej.at("chunk_id").get<std::string>();
            e.source = ej.value("source", "");
            e.provenance = ej.value("provenance", "rag") == "tool" ? Provenance::tool : Provenance::rag;
            e.snippet = ej.value("snippet", "");
            m.evidence.push_back(std::move(e));
        }
        cs.confounders.push_back(std::move(m));
    }
    if (doc.contains("provenance"))
        for (const auto& [leaf, names] : doc.at("provenance").items())
            cs.provenance[std::stoi(leaf)] = names.get<std::vector<std::string>>();
    return cs;
}

// ---------------------------------------------------------------------------
// Full workflow

AgentResult run_agent_iteration(const Partition& p, const KnowledgeBase& kb, AgentBackend& backend,
                                const std::vector<CovariateMeta>& meta, const std::vector<std::string>& validated,
                                const AgentContext& ctx) {
    AgentTrace local;
    AgentContext c = ctx;
    if (!c.trace) c.trace = &local;
    const int samples = std::max(1, c.config.self_consistency_samples);

    AgentResult result;
    result.rules = explain_partition(p, backend, meta, c);
    const auto& rules = result.rules;

    struct PerRule {
        std::vector<SubQueryKnowledge> knowledge;
        std::vector<CandidateConfounder> candidates;
    };
    std::vector<PerRule> per(rules.size());

    parallel_for(rules.size(), c.config.parallel_rules, [&](std::size_t i) {
        const Rule& rule = rules[i];
        const std::string where = "agent: leaf " + std::to_string(rule.leaf_id);
        std::vector<SubQuery> queries;
        try {
            queries = decompose(rule, backend, meta, c);
        } catch (const std::exception& e) {
            throw Error(where + " decompose: " + e.what());
        }
        for (auto& q : queries) {
            SubQueryKnowledge sk;
            try {
                auto g = gather(kb, q.text, q.source_pref);
                sk.items = std::move(g.items);
                sk.trace = std::move(g.trace);
            } catch (const std::exception& e) {
                throw Error(where + " gather: " + e.what());
            }
            sk.query = std::move(q);
            per[i].knowledge.push_back(std::move(sk));
        }
        try {
            if (samples == 1) {
                per[i].candidates = reason_confounders(rule, per[i].knowledge, backend, meta, validated, c, 0);
                return;
            }
            std::map<std::string, int> counts;
            std::map<std::string, CandidateConfounder> first;
            for (int s = 0; s < samples; ++s)
                for (auto& cand : reason_confounders(rule, per[i].knowledge, backend, meta, validated, c, s)) {
                    ++counts[cand.covariate];
                    first.emplace(cand.covariate, std::move(cand));
                }
            for (auto& [name, n] : counts)
                if (2 * n > samples) per[i].candidates.push_back(std::move(first.at(name)));
        } catch (const std::exception& e) {
            throw Error(where + " reason: " + e.what());
        }
    });

    std::vector<std::vector<CandidateConfounder>> per_rule;
    for (const auto& pr : per) per_rule.push_back(pr.candidates);
    result.confounders = ensemble(per_rule, c.config.min_votes);

    ordered_json trace;
    trace["iteration"] = c.iteration;
    trace["rework"] = c.rework;
    trace["backend"] = backend.name();
    ordered_json hashes = ordered_json::object();
    for (const auto& [name, h] : prompt_template_hashes()) hashes[name] = h;
    trace["prompt_templates"] = std::move(hashes);
    trace["validated_before"] = validated;
    trace["feedback"] = {{"rejected", c.feedback.rejected}, {"text", c.feedback.text}};
    auto rules_json = ordered_json::array();
    for (std::size_t i = 0; i < rules.size(); ++i) {
        auto rj = rule_json(rules[i]);
        auto subs = ordered_json::array();
        for (const auto& sk : per[i].knowledge) {
            ordered_json sj;
            sj["text"] = sk.query.text;
            sj["source"] = to_string(sk.query.source_pref);
            sj["templated"] = sk.query.templated;
            sj["gather"] = to_json(sk.trace);
            auto items = ordered_json::array();
            for (const auto& item : sk.items) items.push_back(to_json(item));
            sj["knowledge"] = std::move(items);
            subs.push_back(std::move(sj));
        }
        rj["subqueries"] = std::move(subs);
        auto cands = ordered_json::array();
        for (const auto& cand : per[i].candidates) cands.push_back({{"covariate", cand.covariate}, {"rationale", cand.rationale}});
        rj["candidates"] = std::move(cands);
        rules_json.push_back(std::move(rj));
    }
    trace["rules"] = std::move(rules_json);
    trace["calls"] = c.trace->calls_json();
    trace["events"] = c.trace->events_json();
    trace["confounder_set"] = to_json(result.confounders);
    result.trace = std::move(trace);
    return result;
}

}  // namespace confloop
