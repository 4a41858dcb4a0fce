#include "confloop/cli.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include "confloop/dataset.hpp"
#include "confloop/error.hpp"
#include "confloop/log.hpp"
#include "confloop/orchestrator.hpp"
#include "confloop/synth.hpp"

namespace confloop {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

RunConfig load_config(const fs::path& path, const ConfigOverrides& overrides) {
    RunConfig cfg;
    if (!path.empty()) cfg = load_run_config(path);
    if (overrides.seed) cfg.seed = *overrides.seed;
    if (overrides.out) cfg.output_dir = fs::absolute(*overrides.out).string();
    if (overrides.data) cfg.data.csv = fs::absolute(*overrides.data).string();
    if (overrides.meta) cfg.data.metadata = fs::absolute(*overrides.meta).string();
    cfg.validate();
    return cfg;
}

std::unique_ptr<AgentBackend> make_backend(const RunConfig& cfg) {
    if (cfg.backend.kind == "mock")
        return std::unique_ptr<AgentBackend>(new MockBackend(MockBackend::from_file(cfg.resolve(cfg.backend.mock_fixture))));
    if (cfg.backend.kind == "http") return std::make_unique<HttpChatBackend>(cfg.backend.http);
    if (cfg.backend.kind == "replay") {
        const fs::path p = cfg.resolve(cfg.backend.replay_trace);
        json traces = json::array();
        std::vector<fs::path> files;
        if (fs::is_directory(p)) {
            const fs::path dir = fs::is_directory(p / "traces") ? p / "traces" : p;
            for (const auto& e : fs::directory_iterator(dir))
                if (e.path().extension() == ".json") files.push_back(e.path());
            std::sort(files.begin(), files.end());
        } else {
            files.push_back(p);
        }
        for (const auto& f : files) {
            std::ifstream in(f);
            if (!in) throw ConfigError("backend.replay_trace: cannot open " + f.string());
            json doc = json::parse(in, nullptr, false);
            if (doc.is_discarded()) throw ConfigError("backend.replay_trace: " + f.string() + " is not valid JSON");
            if (doc.is_array())
                for (auto& t : doc) traces.push_back(std::move(t));
            else
                traces.push_back(std::move(doc));
        }
        return std::make_unique<ReplayBackend>(traces);
    }
    throw ConfigError("backend.kind: unknown backend " + cfg.backend.kind);
}

std::unique_ptr<ExpertPolicy> make_policy(const RunConfig& cfg, std::shared_ptr<ReviewStore> store) {
    if (cfg.review.policy == "auto_accept") return std::make_unique<AutoAcceptPolicy>();
    if (cfg.review.policy == "scripted")
        return std::unique_ptr<ExpertPolicy>(new ScriptedPolicy(ScriptedPolicy::from_file(cfg.resolve(cfg.review.fixture))));
    if (cfg.review.policy == "interactive") {
        if (!store) throw ConfigError("interactive policy requires review service");
        std::optional<std::chrono::milliseconds> timeout;
        if (cfg.review.timeout_ms) timeout = std::chrono::milliseconds(*cfg.review.timeout_ms);
        return std::make_unique<InteractivePolicy>(std::move(store), timeout);
    }
    throw ConfigError("review.policy: unknown policy " + cfg.review.policy);
}

KnowledgeBase make_knowledge_base(const RunConfig& cfg) {
    const auto& k = cfg.knowledge;
    std::shared_ptr<const EmbeddingBackend> embedding;
    if (k.embedding == "remote") {
        RemoteEmbedding::Config rc;
        rc.model = k.embedding_model;
        rc.dimension = k.embedding_dim;
        embedding = std::make_shared<RemoteEmbedding>(rc);
    } else {
        embedding = std::make_shared<HashedTokenEmbedding>(k.embedding_dim);
    }
    KnowledgeBase kb;
    if (k.corpus_dir.empty())
        kb.index = std::make_shared<Index>();
    else
        kb.index = std::make_shared<Index>(ingest(cfg.resolve(k.corpus_dir), embedding, {k.chunk_size, k.chunk_overlap}));
    if (!k.tool_dir.empty()) kb.tools.push_back(std::make_shared<LocalFixtureTool>(cfg.resolve(k.tool_dir)));
    if (!k.tool_url.empty()) kb.tools.push_back(std::make_shared<HttpSearchTool>(k.tool_url));
    kb.config = k.gather;
    return kb;
}

int cmd_synth(const SynthOptions& opt, std::ostream& out, std::ostream& err) {
    try {
        SynthConfig cfg = opt.config.empty() ? default_synth_config() : load_synth_config(opt.config);
        if (opt.seed) cfg.seed = *opt.seed;
        cfg.validate();
        const auto result = generate(cfg);
        write_synth_outputs(result, opt.out_dir);
        out << "wrote " << (opt.out_dir / "data.csv").string() << ", metadata.json, truth.json (n=" << cfg.n
            << ", true ATE " << result.truth.ate << ")\n";
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "synth: invalid config: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "synth: " << e.what() << "\n";
        return kExitFailure;
    }
}

namespace {

struct Prepared {
    RunConfig cfg;
    Dataset ds;
    std::string run_id;
    fs::path run_dir;
};

Prepared prepare(const RunOptions& opt) {
    Prepared p;
    p.cfg = load_config(opt.config, opt.overrides);
    if (p.cfg.data.csv.empty() || p.cfg.data.metadata.empty())
        throw ConfigError("data: both csv and metadata are required (config data section or --data/--meta)");
    p.ds = load_dataset(p.cfg.resolve(p.cfg.data.csv), p.cfg.resolve(p.cfg.data.metadata));
    p.run_id = compute_run_id(p.ds, p.cfg);
    p.run_dir = p.cfg.resolve(p.cfg.output_dir) / p.run_id;
    return p;
}

void summarize(const ordered_json& report, const fs::path& run_dir, std::ostream& out) {
    out << "run " << report.value("run_id", "") << " " << report.value("status", "") << ": "
        << report.value("termination_reason", "") << "\n";
    out << "validated: ";
    const auto v = report.value("validated", json::array());
    if (v.empty()) out << "-";
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i].get<std::string>();
    out << "\nrun directory: " << run_dir.string() << "\n";
}

}  // namespace

int cmd_run(const RunOptions& opt, std::ostream& out, std::ostream& err) {
    if (opt.serve) {
        ServeCommandOptions s;
        s.run = opt;
        s.exit_after_run = true;
        return cmd_serve(s, out, err);
    }
    std::optional<Prepared> p;
    std::unique_ptr<AgentBackend> backend;
    std::unique_ptr<ExpertPolicy> policy;
    KnowledgeBase kb;
    try {
        p = prepare(opt);
        policy = make_policy(p->cfg, nullptr);
        backend = make_backend(p->cfg);
        kb = make_knowledge_base(p->cfg);
    } catch (const ConfigError& e) {
        err << "run: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "run: " << e.what() << "\n";
        return kExitFailure;
    }
    PipelineHooks hooks;
    hooks.persist_dir = p->run_dir;
    hooks.stop = opt.stop;
    try {
        auto result = run_pipeline(p->ds, p->cfg, *backend, *policy, kb, hooks, p->run_id);
        summarize(result.report, p->run_dir, out);
        return kExitOk;
    } catch (const PipelineError& e) {
        err << "run aborted: " << e.what() << "\n";
        err << "partial results in " << p->run_dir.string() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        err << "run: " << e.what() << "\n";
        return kExitFailure;
    }
}

json read_report(const fs::path& run_dir) {
    const fs::path path = run_dir / "report.json";
    if (!fs::exists(path)) throw DataError("no report.json in " + run_dir.string());
    std::ifstream in(path);
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_object() || !doc.contains("iterations") || !doc.at("iterations").is_array())
        throw DataError("corrupt report " + path.string());
    for (const auto& row : doc.at("iterations"))
        if (!row.is_object() || !row.contains("index") || !row.contains("validated") ||
            !row.contains("mean_ci_width") || !row.contains("n_stable") || !row.contains("n_unstable"))
            throw DataError("corrupt report " + path.string() + ": iteration row is missing fields");
    return doc;
}

namespace {

std::string joined(const json& names) {
    std::string s;
    for (const auto& n : names) s += (s.empty() ? "" : ",") + n.get<std::string>();
    return s;
}

}  // namespace

std::string report_table(const json& report) {
    std::ostringstream os;
    os << std::left << std::setw(10) << "iteration" << std::setw(32) << "validated" << std::setw(16)
       << "mean_ci_width" << std::setw(8) << "stable" << "unstable\n";
    for (const auto& row : report.at("iterations")) {
        std::string v = joined(row.at("validated"));
        std::ostringstream w;
        w << std::fixed << std::setprecision(4) << row.at("mean_ci_width").get<double>();
        os << std::left << std::setw(10) << row.at("index").get<int>() << std::setw(32) << (v.empty() ? "-" : v)
           << std::setw(16) << w.str() << std::setw(8) << row.at("n_stable").get<std::size_t>()
           << row.at("n_unstable").get<std::size_t>() << "\n";
    }
    os << "termination: " << report.value("termination_reason", "");
    const std::string detail = report.value("termination_detail", "");
    if (!detail.empty()) os << " (" << detail << ")";
    os << "\n";
    if (report.contains("baseline_ate") && report.contains("final_ate"))
        os << "ATE: baseline " << report.at("baseline_ate").get<double>() << ", final "
           << report.at("final_ate").get<double>() << "\n";
    return os.str();
}

std::string report_csv(const json& report) {
    std::ostringstream os;
    os << "iteration,validated,mean_ci_width,n_stable,n_unstable\n";
    os << std::setprecision(17);
    for (const auto& row : report.at("iterations")) {
        std::string v;
        for (const auto& n : row.at("validated")) v += (v.empty() ? "" : ";") + n.get<std::string>();
        os << row.at("index").get<int>() << "," << v << "," << row.at("mean_ci_width").get<double>() << ","
           << row.at("n_stable").get<std::size_t>() << "," << row.at("n_unstable").get<std::size_t>() << "\n";
    }
    return os.str();
}

int cmd_report(const ReportOptions& opt, std::ostream& out, std::ostream& err) {
    try {
        const json report = read_report(opt.run_dir);
        out << report_table(report);
        if (opt.csv) {
            std::ofstream f(*opt.csv, std::ios::binary | std::ios::trunc);
            if (!f) throw Error("cannot write " + opt.csv->string());
            f << report_csv(report);
        }
        return kExitOk;
    } catch (const std::exception& e) {
        err << "report: " << e.what() << "\n";
        return kExitFailure;
    }
}

int cmd_serve(const ServeCommandOptions& opt, std::ostream& out, std::ostream& err) {
    auto store = std::make_shared<ReviewStore>();
    RunConfig cfg;
    std::optional<Prepared> p;
    std::unique_ptr<AgentBackend> backend;
    std::unique_ptr<ExpertPolicy> policy;
    KnowledgeBase kb;
    try {
        cfg = load_config(opt.run.config, opt.run.overrides);
        const bool has_data = !cfg.data.csv.empty() && !cfg.data.metadata.empty();
        if (has_data) {
            p = prepare(opt.run);
            policy = make_policy(p->cfg, store);
            backend = make_backend(p->cfg);
            kb = make_knowledge_base(p->cfg);
        } else if (opt.exit_after_run) {
            throw ConfigError("data: both csv and metadata are required (config data section or --data/--meta)");
        }
        const fs::path runs_dir = cfg.resolve(cfg.output_dir);
        if (fs::is_directory(runs_dir)) store->load_runs_dir(runs_dir);
    } catch (const ConfigError& e) {
        err << "serve: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "serve: " << e.what() << "\n";
        return kExitFailure;
    }

    std::unique_ptr<ReviewServer> server;
    try {
        ServeOptions so;
        so.bind = opt.run.bind;
        so.ui_dir = opt.run.ui_dir;
        server = serve_review_api(store, so);
    } catch (const std::exception& e) {
        err << "serve: " << e.what() << "\n";
        return kExitFailure;
    }
    out << "review API listening on http://" << server->host() << ":" << server->port() << "\n" << std::flush;
    if (opt.on_ready) opt.on_ready(server->port());

    std::atomic<bool> pipeline_stop{false};
    std::atomic<bool> pipeline_done{!p.has_value()};
    int exit_code = kExitOk;
    std::thread worker;
    PipelineHooks hooks;
    if (p) {
        hooks.persist_dir = p->run_dir;
        hooks.stop = &pipeline_stop;
        hooks.on_progress = [&](const ordered_json& report) {
            store->update_run(p->run_id, report.value("status", "running"), report);
        };
        hooks.on_trace = [&](int iteration, int rework, const ordered_json& trace) {
            store->set_trace(p->run_id, iteration, rework, trace);
        };
        store->update_run(p->run_id, "running", ordered_json::object());
        worker = std::thread([&] {
            try {
                auto result = run_pipeline(p->ds, p->cfg, *backend, *policy, kb, hooks, p->run_id);
                summarize(result.report, p->run_dir, out);
            } catch (const PipelineError& e) {
                err << "run aborted: " << e.what() << "\npartial results in " << p->run_dir.string() << "\n";
                exit_code = kExitFailure;
            } catch (const std::exception& e) {
                err << "run: " << e.what() << "\n";
                exit_code = kExitFailure;
            }
            pipeline_done = true;
        });
    }

    for (;;) {
        if (opt.stop && opt.stop->load()) break;
        if (opt.exit_after_run && pipeline_done.load()) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    if (!pipeline_done.load()) log::info("serve", "shutting down; stopping the pipeline");
    pipeline_stop = true;
    store->shutdown();
    if (worker.joinable()) worker.join();
    server->stop();
    return exit_code;
}

}  // namespace confloop
