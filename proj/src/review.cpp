#include "confloop/review.hpp"

#include <algorithm>
#include <ctime>
#include <fstream>
#include <set>

#include <httplib.h>

#include "confloop/error.hpp"
#include "confloop/log.hpp"

namespace confloop {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Decision d) { return d == Decision::accept ? "accept" : "reject"; }

Decision parse_decision(std::string_view text) {
    if (text == "accept") return Decision::accept;
    if (text == "reject") return Decision::reject;
    throw DataError("decision must be \"accept\" or \"reject\", got \"" + std::string(text) + "\"");
}

std::string_view to_string(ReviewStatus s) { return s == ReviewStatus::pending ? "pending" : "decided"; }

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

ordered_json to_json(const ReviewItem& item) {
    ordered_json j;
    j["run_id"] = item.run_id;
    j["item_id"] = item.item_id;
    j["iteration"] = item.iteration;
    j["rework"] = item.rework;
    j["status"] = to_string(item.status);
    j["candidates"] = to_json(item.candidates);
    ordered_json decisions = ordered_json::object();
    for (const auto& m : item.candidates.confounders) {
        auto it = item.decisions.find(m.covariate);
        if (it != item.decisions.end()) decisions[m.covariate] = to_string(it->second);
    }
    j["decisions"] = std::move(decisions);
    j["decided_by"] = item.decided_by;
    j["feedback"] = item.feedback;
    j["created_at"] = item.created_at;
    j["decided_at"] = item.decided_at;
    return j;
}

// ---------------------------------------------------------------------------
// Policies

namespace {

ReviewOutcome outcome_from(const ReviewItem& item, const std::map<std::string, Decision>& decisions,
                           std::string feedback, std::string decided_by) {
    ReviewOutcome out;
    for (const auto& m : item.candidates.confounders) {
        auto it = decisions.find(m.covariate);
        if (it == decisions.end()) throw ConfigError("no decision for candidate " + m.covariate);
        (it->second == Decision::accept ? out.accepted : out.rejected).push_back(m.covariate);
    }
    out.feedback = std::move(feedback);
    out.decided_by = std::move(decided_by);
    return out;
}

std::optional<int> wildcard_int(const json& e, const char* key) {
    if (!e.contains(key)) return std::nullopt;
    const auto& v = e.at(key);
    if (v.is_string() && v.get<std::string>() == "*") return std::nullopt;
    if (!v.is_number_integer()) throw ConfigError(std::string("review fixture: ") + key + " must be an integer or \"*\"");
    return v.get<int>();
}

}  // namespace

ReviewOutcome AutoAcceptPolicy::decide(const ReviewItem& item) {
    ReviewOutcome out;
    for (const auto& m : item.candidates.confounders) out.accepted.push_back(m.covariate);
    out.decided_by = name();
    return out;
}

ScriptedPolicy::ScriptedPolicy(std::vector<Entry> entries, std::optional<Decision> fallback)
    : entries_(std::move(entries)), fallback_(fallback) {}

ScriptedPolicy ScriptedPolicy::from_json(const json& doc) {
    if (!doc.is_object() || doc.value("format", "") != "confloop-review/1")
        throw ConfigError("review fixture: expected format \"confloop-review/1\"");
    std::optional<Decision> fallback;
    if (doc.contains("default")) {
        try {
            fallback = parse_decision(doc.at("default").get<std::string>());
        } catch (const DataError& e) {
            throw ConfigError(std::string("review fixture: ") + e.what());
        }
    }
    std::vector<Entry> entries;
    for (const auto& e : doc.value("decisions", json::array())) {
        Entry entry;
        entry.iteration = wildcard_int(e, "iteration");
        entry.rework = wildcard_int(e, "rework");
        entry.accept = e.value("accept", std::vector<std::string>{});
        entry.reject = e.value("reject", std::vector<std::string>{});
        entry.feedback = e.value("feedback", "");
        entries.push_back(std::move(entry));
    }
    return ScriptedPolicy(std::move(entries), fallback);
}

ScriptedPolicy ScriptedPolicy::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open review fixture " + path.string());
    try {
        return from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw ConfigError("review fixture " + path.string() + ": " + e.what());
    }
}

ReviewOutcome ScriptedPolicy::decide(const ReviewItem& item) {
    std::map<std::string, Decision> decisions;
    std::string feedback;
    const Entry* best = nullptr;
    int best_score = -1;
    for (const auto& e : entries_) {
        if (e.iteration && *e.iteration != item.iteration) continue;
        if (e.rework && *e.rework != item.rework) continue;
        const int score = (e.iteration ? 1 : 0) + (e.rework ? 1 : 0);
        if (score > best_score) {
            best = &e;
            best_score = score;
        }
    }
    if (best) {
        for (const auto& n : best->accept) decisions[n] = Decision::accept;
        for (const auto& n : best->reject) decisions[n] = Decision::reject;
        feedback = best->feedback;
    }
    for (const auto& m : item.candidates.confounders) {
        if (decisions.count(m.covariate)) continue;
        if (!fallback_)
            throw ConfigError("review fixture has no decision for " + m.covariate + " at iteration " +
                              std::to_string(item.iteration) + " rework " + std::to_string(item.rework));
        decisions[m.covariate] = *fallback_;
    }
    return outcome_from(item, decisions, feedback, name());
}

InteractivePolicy::InteractivePolicy(std::shared_ptr<ReviewStore> store, std::optional<std::chrono::milliseconds> timeout)
    : store_(std::move(store)), timeout_(timeout) {
    if (!store_) throw ConfigError("interactive review needs a review store");
}

ReviewOutcome InteractivePolicy::decide(const ReviewItem& item) {
    const std::string id = store_->submit(item);
    log::info("review", "waiting for expert decision on run " + item.run_id + " item " + id);
    const ReviewItem decided = store_->wait(item.run_id, id, timeout_);
    return outcome_from(decided, decided.decisions, decided.feedback, decided.decided_by);
}

ReviewOutcome request_decision(const ConfounderSet& cs, ExpertPolicy& policy, const ReviewRequest& request) {
    if (cs.empty()) throw Error("request_decision: empty confounder set");
    ReviewItem item;
    item.run_id = request.run_id;
    item.iteration = request.iteration;
    item.rework = request.rework;
    item.item_id = std::to_string(request.iteration) + "-" + std::to_string(request.rework);
    item.candidates = cs;
    item.created_at = utc_timestamp();
    ReviewOutcome out = policy.decide(item);

    std::set<std::string> names;
    for (const auto& m : cs.confounders) names.insert(m.covariate);
    std::set<std::string> seen;
    for (const auto* list : {&out.accepted, &out.rejected})
        for (const auto& n : *list) {
            if (!names.count(n)) throw ConfigError("policy " + policy.name() + " decided on non-candidate " + n);
            if (!seen.insert(n).second) throw ConfigError("policy " + policy.name() + " decided twice on " + n);
        }
    if (seen.size() != names.size())
        throw ConfigError("policy " + policy.name() + " left candidates undecided");
    if (out.decided_by.empty()) out.decided_by = policy.name();
    return out;
}

// ---------------------------------------------------------------------------
// Store

void ReviewStore::update_run(const std::string& run_id, const std::string& status, ordered_json report) {
    std::lock_guard lock(mutex_);
    auto& run = runs_[run_id];
    run.status = status;
    run.report = std::move(report);
}

void ReviewStore::set_trace(const std::string& run_id, int iteration, int rework, ordered_json trace) {
    std::lock_guard lock(mutex_);
    runs_[run_id].traces[{iteration, rework}] = std::move(trace);
}

std::string ReviewStore::submit(ReviewItem item) {
    std::lock_guard lock(mutex_);
    auto& run = runs_[item.run_id];
    if (run.status.empty()) run.status = "running";
    if (item.item_id.empty()) item.item_id = std::to_string(item.iteration) + "-" + std::to_string(item.rework);
    if (run.items.count(item.item_id)) throw ConflictError("review item " + item.item_id + " already exists");
    item.status = ReviewStatus::pending;
    item.decisions.clear();
    if (item.created_at.empty()) item.created_at = utc_timestamp();
    const std::string id = item.item_id;
    run.order.push_back(id);
    run.items.emplace(id, std::move(item));
    cv_.notify_all();
    return id;
}

ReviewItem ReviewStore::decide(const std::string& run_id, const std::string& item_id,
                               const std::map<std::string, Decision>& decisions, const std::string& feedback,
                               const std::string& decided_by) {
    std::lock_guard lock(mutex_);
    auto run = runs_.find(run_id);
    if (run == runs_.end()) throw NotFoundError("unknown run " + run_id);
    auto it = run->second.items.find(item_id);
    if (it == run->second.items.end()) throw NotFoundError("unknown review item " + item_id);
    ReviewItem& item = it->second;
    if (item.status != ReviewStatus::pending) throw ConflictError("review item " + item_id + " is already decided");
    std::set<std::string> names;
    for (const auto& m : item.candidates.confounders) names.insert(m.covariate);
    for (const auto& [n, d] : decisions)
        if (!names.count(n)) throw DataError("\"" + n + "\" is not a candidate of item " + item_id);
    for (const auto& n : names)
        if (!decisions.count(n)) throw DataError("missing decision for " + n);
    item.decisions = decisions;
    item.feedback = feedback;
    item.decided_by = decided_by;
    item.decided_at = utc_timestamp();
    item.status = ReviewStatus::decided;
    cv_.notify_all();
    return item;
}

ReviewItem ReviewStore::wait(const std::string& run_id, const std::string& item_id,
                             std::optional<std::chrono::milliseconds> timeout) {
    std::unique_lock lock(mutex_);
    auto ready = [&] {
        if (shutdown_) return true;
        auto run = runs_.find(run_id);
        if (run == runs_.end()) return false;
        auto it = run->second.items.find(item_id);
        return it != run->second.items.end() && it->second.status == ReviewStatus::decided;
    };
    if (timeout) {
        if (!cv_.wait_for(lock, *timeout, ready))
            throw TimeoutError("no expert decision for item " + item_id + " within " +
                               std::to_string(timeout->count()) + " ms");
    } else {
        cv_.wait(lock, ready);
    }
    auto run = runs_.find(run_id);
    if (run != runs_.end()) {
        auto it = run->second.items.find(item_id);
        if (it != run->second.items.end() && it->second.status == ReviewStatus::decided) return it->second;
    }
    throw Error("review store shut down while waiting for item " + item_id);
}

void ReviewStore::shutdown() {
    std::lock_guard lock(mutex_);
    shutdown_ = true;
    cv_.notify_all();
}

ordered_json ReviewStore::runs_json() const {
    std::lock_guard lock(mutex_);
    auto arr = ordered_json::array();
    for (const auto& [id, run] : runs_) {
        std::size_t pending = 0;
        for (const auto& [iid, item] : run.items)
            if (item.status == ReviewStatus::pending) ++pending;
        ordered_json j;
        j["run_id"] = id;
        j["status"] = run.status;
        j["pending_reviews"] = pending;
        arr.push_back(std::move(j));
    }
    ordered_json out;
    out["runs"] = std::move(arr);
    return out;
}

std::optional<ordered_json> ReviewStore::run_report(const std::string& run_id) const {
    std::lock_guard lock(mutex_);
    auto run = runs_.find(run_id);
    if (run == runs_.end()) return std::nullopt;
    ordered_json j = run->second.report.is_object() ? run->second.report : ordered_json::object();
    j["run_id"] = run_id;
    j["status"] = run->second.status;
    return j;
}

std::vector<ReviewItem> ReviewStore::items(const std::string& run_id) const {
    std::lock_guard lock(mutex_);
    std::vector<ReviewItem> out;
    auto run = runs_.find(run_id);
    if (run == runs_.end()) return out;
    for (const auto& id : run->second.order) out.push_back(run->second.items.at(id));
    return out;
}

std::vector<ReviewItem> ReviewStore::pending(const std::string& run_id) const {
    auto all = items(run_id);
    std::erase_if(all, [](const ReviewItem& i) { return i.status != ReviewStatus::pending; });
    return all;
}

std::optional<ReviewItem> ReviewStore::item(const std::string& run_id, const std::string& item_id) const {
    std::lock_guard lock(mutex_);
    auto run = runs_.find(run_id);
    if (run == runs_.end()) return std::nullopt;
    auto it = run->second.items.find(item_id);
    if (it == run->second.items.end()) return std::nullopt;
    return it->second;
}

std::optional<ordered_json> ReviewStore::trace(const std::string& run_id, int iteration) const {
    std::lock_guard lock(mutex_);
    auto run = runs_.find(run_id);
    if (run == runs_.end()) return std::nullopt;
    auto arr = ordered_json::array();
    for (const auto& [key, t] : run->second.traces)
        if (key.first == iteration) arr.push_back(t);
    if (arr.empty()) return std::nullopt;
    return arr;
}

bool ReviewStore::has_run(const std::string& run_id) const {
    std::lock_guard lock(mutex_);
    return runs_.count(run_id) > 0;
}

void ReviewStore::load_runs_dir(const std::filesystem::path& runs_dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(runs_dir)) return;
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(runs_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "report.json")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
        try {
            std::ifstream in(dir / "report.json");
            ordered_json report = ordered_json::parse(in);
            const std::string id = report.value("run_id", dir.filename().string());
            update_run(id, report.value("status", std::string("finished")), report);
            if (fs::is_directory(dir / "traces"))
                for (const auto& t : fs::directory_iterator(dir / "traces")) {
                    std::ifstream tin(t.path());
                    ordered_json traces = ordered_json::parse(tin);
                    if (!traces.is_array()) traces = ordered_json::array({traces});
                    for (const auto& tr : traces)
                        set_trace(id, tr.at("iteration").get<int>(), tr.value("rework", 0), tr);
                }
        } catch (const std::exception& e) {
            log::warn("review", "skipping run directory " + dir.string() + ": " + e.what());
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP service

std::pair<std::string, int> parse_bind(const std::string& bind) {
    const auto colon = bind.rfind(':');
    if (colon == std::string::npos || colon == 0) throw ConfigError("bind address must be host:port, got " + bind);
    const std::string host = bind.substr(0, colon);
    int port = 0;
    try {
        std::size_t used = 0;
        port = std::stoi(bind.substr(colon + 1), &used);
        if (used != bind.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
        throw ConfigError("bind address has an invalid port: " + bind);
    }
    if (port < 0 || port > 65535) throw ConfigError("bind port out of range: " + bind);
    return {host, port};
}

struct ReviewServer::Impl {
    httplib::Server server;
    std::shared_ptr<ReviewStore> store;
    std::mutex join_mutex;
};

namespace {

void send_json(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(2), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, ordered_json{{"error", message}});
}

std::map<std::string, Decision> parse_decisions(const json& body) {
    if (!body.is_object() || !body.contains("decisions")) throw DataError("body needs a \"decisions\" field");
    std::map<std::string, Decision> out;
    const auto& d = body.at("decisions");
    if (d.is_object()) {
        for (const auto& [name, v] : d.items()) {
            if (!v.is_string()) throw DataError("decision for " + name + " must be a string");
            out[name] = parse_decision(v.get<std::string>());
        }
    } else if (d.is_array()) {
        for (const auto& e : d) {
            if (!e.is_object() || !e.contains("covariate") || !e.contains("decision") || !e.at("covariate").is_string() ||
                !e.at("decision").is_string())
                throw DataError("each decision needs string \"covariate\" and \"decision\"");
            const auto name = e.at("covariate").get<std::string>();
            if (out.count(name)) throw DataError("duplicate decision for " + name);
            out[name] = parse_decision(e.at("decision").get<std::string>());
        }
    } else {
        throw DataError("\"decisions\" must be an object or an array");
    }
    return out;
}

}  // namespace

ReviewServer::ReviewServer(std::shared_ptr<ReviewStore> store, const ServeOptions& options)
    : impl_(std::make_unique<Impl>()) {
    if (!store) throw ConfigError("review service needs a store");
    impl_->store = store;
    auto& svr = impl_->server;
    auto [host, port] = parse_bind(options.bind);
    host_ = host;

    svr.set_default_headers({{"Access-Control-Allow-Origin", options.cors_origin},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                             {"Access-Control-Allow-Headers", "Content-Type"}});
    svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    if (options.ui_dir) {
        if (!std::filesystem::is_directory(*options.ui_dir))
            throw ConfigError("ui directory does not exist: " + options.ui_dir->string());
        svr.set_mount_point("/", options.ui_dir->string());
    }

    svr.Get("/runs", [store](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, store->runs_json());
    });

    svr.Get(R"(/runs/([^/]+))", [store](const httplib::Request& req, httplib::Response& res) {
        auto report = store->run_report(req.matches[1]);
        if (!report) return send_error(res, 404, "unknown run " + std::string(req.matches[1]));
        send_json(res, 200, *report);
    });

    auto list_items = [store](const httplib::Request& req, httplib::Response& res, bool pending_only) {
        const std::string run_id = req.matches[1];
        if (!store->has_run(run_id)) return send_error(res, 404, "unknown run " + run_id);
        auto arr = ordered_json::array();
        for (const auto& item : pending_only ? store->pending(run_id) : store->items(run_id))
            arr.push_back(to_json(item));
        send_json(res, 200, ordered_json{{"run_id", run_id}, {"items", std::move(arr)}});
    };
    svr.Get(R"(/runs/([^/]+)/reviews/pending)",
            [list_items](const httplib::Request& req, httplib::Response& res) { list_items(req, res, true); });
    svr.Get(R"(/runs/([^/]+)/reviews)",
            [list_items](const httplib::Request& req, httplib::Response& res) { list_items(req, res, false); });

    svr.Post(R"(/runs/([^/]+)/reviews/([^/]+)/decision)", [store](const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded()) return send_error(res, 400, "body is not valid JSON");
        try {
            const auto decisions = parse_decisions(body);
            std::string feedback;
            if (body.contains("feedback")) {
                if (!body.at("feedback").is_string()) throw DataError("\"feedback\" must be a string");
                feedback = body.at("feedback").get<std::string>();
            }
            const auto item = store->decide(req.matches[1], req.matches[2], decisions, feedback, "human");
            send_json(res, 200, to_json(item));
        } catch (const NotFoundError& e) {
            send_error(res, 404, e.what());
        } catch (const ConflictError& e) {
            send_error(res, 409, e.what());
        } catch (const DataError& e) {
            send_error(res, 400, e.what());
        }
    });

    svr.Get(R"(/runs/([^/]+)/trace/(\d+))", [store](const httplib::Request& req, httplib::Response& res) {
        const std::string run_id = req.matches[1];
        const int iteration = std::stoi(req.matches[2]);
        if (!store->has_run(run_id)) return send_error(res, 404, "unknown run " + run_id);
        auto traces = store->trace(run_id, iteration);
        if (!traces) return send_error(res, 404, "no agent trace for iteration " + std::to_string(iteration));
        send_json(res, 200, ordered_json{{"run_id", run_id}, {"iteration", iteration}, {"traces", std::move(*traces)}});
    });

    svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        } catch (...) {
            send_error(res, 500, "internal error");
        }
    });

    if (port == 0) {
        port_ = svr.bind_to_any_port(host);
        if (port_ <= 0) throw ConfigError("cannot bind review service to " + host);
    } else {
        if (!svr.bind_to_port(host, port)) throw ConfigError("cannot bind review service to " + options.bind);
        port_ = port;
    }
    thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    log::info("review", "review API listening on " + host_ + ":" + std::to_string(port_));
}

ReviewServer::~ReviewServer() { stop(); }

void ReviewServer::stop() {
    impl_->server.stop();
    std::lock_guard lock(impl_->join_mutex);
    if (thread_.joinable()) thread_.join();
}

void ReviewServer::wait() {
    std::lock_guard lock(impl_->join_mutex);
    if (thread_.joinable()) thread_.join();
}

std::unique_ptr<ReviewServer> serve_review_api(std::shared_ptr<ReviewStore> store, const ServeOptions& options) {
    return std::make_unique<ReviewServer>(std::move(store), options);
}

}  // namespace confloop
