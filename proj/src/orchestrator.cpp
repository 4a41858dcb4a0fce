#include "confloop/orchestrator.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include "confloop/error.hpp"
#include "confloop/hash.hpp"
#include "confloop/log.hpp"
#include "confloop/parallel.hpp"
#include "confloop/random.hpp"

namespace confloop {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Final model

ordered_json FinalModel::to_json() const {
    ordered_json j;
    j["format"] = "confloop-model/1";
    j["run_id"] = run_id;
    auto iters = ordered_json::array();
    for (const auto& it : iterations) {
        ordered_json ij;
        ij["index"] = it.index;
        ij["validated"] = it.validated;
        auto strata = ordered_json::array();
        for (const auto& s : it.strata) {
            ordered_json sj;
            sj["key"] = s.key;
            ordered_json ctx;
            ctx["confounders"] = s.context.confounders;
            ordered_json levels = ordered_json::object();
            for (const auto& [name, level] : s.context.stratum) levels[name] = level;
            ctx["stratum"] = std::move(levels);
            sj["context"] = std::move(ctx);
            sj["tree"] = s.tree.to_json();
            strata.push_back(std::move(sj));
        }
        ij["strata"] = std::move(strata);
        ij["stable_ids"] = it.stable_ids;
        iters.push_back(std::move(ij));
    }
    j["iterations"] = std::move(iters);
    return j;
}

FinalModel FinalModel::from_json(const json& doc) {
    if (doc.value("format", "") != "confloop-model/1") throw DataError("not a confloop model document");
    FinalModel m;
    m.run_id = doc.value("run_id", "");
    for (const auto& ij : doc.at("iterations")) {
        IterationModel it;
        it.index = ij.at("index").get<int>();
        it.validated = ij.at("validated").get<std::vector<std::string>>();
        for (const auto& sj : ij.at("strata")) {
            StratumModel s;
            s.key = sj.at("key").get<std::string>();
            s.context.confounders = sj.at("context").at("confounders").get<std::vector<std::string>>();
            for (const auto& [name, level] : sj.at("context").at("stratum").items()) s.context.stratum[name] = level.get<double>();
            s.tree = CausalTree::from_json(sj.at("tree"));
            it.strata.push_back(std::move(s));
        }
        it.stable_ids = ij.value("stable_ids", std::vector<std::string>{});
        m.iterations.push_back(std::move(it));
    }
    if (m.iterations.empty() || m.iterations.front().index != 0)
        throw DataError("model has no iteration 0");
    return m;
}

namespace {

std::optional<FinalPrediction> predict_at(const IterationModel& it, const CovariateMap& x) {
    for (const auto& s : it.strata) {
        if (!in_stratum(x, s.context)) continue;
        const Leaf& leaf = s.tree.assign_leaf(x);
        return FinalPrediction{leaf.cate, it.index, leaf.id, s.key};
    }
    return std::nullopt;
}

}  // namespace

FinalPrediction predict_final(const FinalModel& model, const CovariateMap& x) {
    if (model.iterations.empty()) throw Error("predict_final: empty model");
    for (auto it = model.iterations.rbegin(); it != model.iterations.rend(); ++it)
        if (auto p = predict_at(*it, x)) return *p;
    throw Error("predict_final: iteration 0 did not match; model is malformed");
}

double mean_prediction(const FinalModel& model, const Dataset& ds, std::span<const SampleIndex> ids,
                       int max_iteration) {
    if (ids.empty()) throw Error("mean_prediction: no samples");
    FinalModel truncated;
    for (const auto& it : model.iterations)
        if (it.index <= max_iteration) truncated.iterations.push_back(it);
    double sum = 0.0;
    for (auto i : ids) sum += predict_final(truncated, ds.covariate_map(i)).cate;
    return sum / static_cast<double>(ids.size());
}

double mean_prediction(const FinalModel& model, const Dataset& ds, std::span<const SampleIndex> ids) {
    if (ids.empty()) throw Error("mean_prediction: no samples");
    double sum = 0.0;
    for (auto i : ids) sum += predict_final(model, ds.covariate_map(i)).cate;
    return sum / static_cast<double>(ids.size());
}

// ---------------------------------------------------------------------------
// Run identity and persistence

std::string compute_run_id(const Dataset& ds, const RunConfig& cfg) {
    auto cj = to_json(cfg);
    cj.erase("output_dir");
    cj.erase("threads");
    std::uint64_t h = fnv1a64(metadata_to_json(ds.meta()).dump());
    h = fnv1a64(dataset_to_csv(ds), h);
    h = fnv1a64(cj.dump(), h);
    return "run-" + to_hex(h).substr(0, 12);
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

void persist_run(const PipelineResult& result, const std::filesystem::path& run_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir / "traces");
    fs::create_directories(run_dir / "ci");
    write_text(run_dir / "report.json", result.report.dump(2) + "\n");
    write_text(run_dir / "model.json", result.model.to_json().dump(2) + "\n");

    std::map<int, ordered_json> traces;
    for (const auto& t : result.traces) {
        auto& arr = traces[t.at("iteration").get<int>()];
        if (arr.is_null()) arr = ordered_json::array();
        arr.push_back(t);
    }
    for (const auto& [k, arr] : traces)
        write_text(run_dir / "traces" / ("iteration_" + std::to_string(k) + ".json"), arr.dump(2) + "\n");

    const auto& rows = result.report.at("iterations");
    for (std::size_t r = 0; r < rows.size() && r < result.ci.size(); ++r)
        write_text(run_dir / "ci" / ("iteration_" + std::to_string(rows[r].at("index").get<int>()) + ".json"),
                   to_json(result.ci[r]).dump(2) + "\n");

    ordered_json stamps;
    const auto stamp_path = run_dir / "timestamps.json";
    std::string created = utc_timestamp();
    if (fs::exists(stamp_path)) {
        std::ifstream in(stamp_path);
        const json old = json::parse(in, nullptr, false);
        if (old.is_object() && old.contains("created_at")) created = old.at("created_at").get<std::string>();
    }
    stamps["created_at"] = created;
    stamps["updated_at"] = utc_timestamp();
    stamps["status"] = result.report.value("status", "");
    write_text(stamp_path, stamps.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct StratumRow {
    std::string key;
    std::size_t n_train = 0, n_est = 0, n_test = 0;
    std::string tree_id;
    std::size_t n_leaves = 0;
    int redraws = 0;
};

struct IterRow {
    int index = 0;
    std::vector<std::string> validated;
    std::vector<std::string> new_confounders;
    std::string partition_tree_id;
    std::vector<StratumRow> strata;
    std::vector<std::pair<std::string, std::string>> dropped_strata;
    std::size_t restriction_dropped = 0;
    std::size_t n_train = 0, n_est = 0, n_test = 0;
    double mean_width = 0.0;
    std::size_t n_stable = 0, n_unstable = 0;
    double mean_point = 0.0;
    std::size_t next_active_train = 0;
};

struct AgentRun {
    int iteration = 0;
    int rework = 0;
    std::vector<std::pair<std::string, std::size_t>> candidates;
    std::vector<std::string> accepted, rejected, unrestrictable;
    std::string decided_by;
    std::string feedback;
};

class Pipeline {
public:
    Pipeline(const Dataset& ds, const RunConfig& cfg, AgentBackend& backend, ExpertPolicy& policy,
             const KnowledgeBase& kb, const PipelineHooks& hooks, std::string run_id)
        : ds_(ds), cfg_(cfg), backend_(backend), policy_(policy), kb_(kb), hooks_(hooks) {
        result_.run_id = std::move(run_id);
        result_.model.run_id = result_.run_id;
        threads_ = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.threads;
    }

    PipelineResult run() {
        try {
            status_ = "running";
            execute();
            status_ = reason_ == termination::stopped ? "stopped" : "completed";
            finalize();
            publish();
            return std::move(result_);
        } catch (const std::exception& e) {
            if (stop_requested()) {
                status_ = "stopped";
                terminate(termination::stopped, e.what());
                try {
                    finalize();
                } catch (const std::exception&) {
                }
                publish();
                return std::move(result_);
            }
            status_ = "aborted";
            error_ = e.what();
            log::error("orchestrator", "run " + result_.run_id + " aborted: " + error_);
            try {
                finalize();
            } catch (const std::exception&) {
            }
            publish();
            throw PipelineError(error_, std::move(result_));
        }
    }

private:
    std::uint64_t seed_for(const std::string& tag) const { return derive_seed(cfg_.seed, fnv1a64(tag)); }

    bool stop_requested() const { return hooks_.stop && hooks_.stop->load(); }

    TreeParams params_with(std::uint64_t seed) const {
        TreeParams p = cfg_.tree;
        p.seed = seed;
        return p;
    }

    std::vector<std::string> ids_of(const IdSet& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (auto i : ids) out.push_back(ds_.id(i));
        return out;
    }

    void execute() {
        split_ = split_dataset(ds_, cfg_.split, cfg_.seed);
        for (const auto& m : ds_.meta()) pool_.push_back(m.name);
        publish();
        baseline();
        for (int k = 1;; ++k) {
            if (stop_requested()) return terminate(termination::stopped, "stop requested");
            if (k > cfg_.max_iterations) return terminate(termination::max_iterations, "");
            if (active_test_.size() < cfg_.min_active_samples)
                return terminate(termination::min_active_samples,
                                 std::to_string(active_test_.size()) + " unstable test samples remain");
            if (pool_.empty()) return terminate(termination::pool_exhausted, "");
            if (!iteration(k)) return;
        }
    }

    void terminate(const std::string& reason, const std::string& detail) {
        reason_ = reason;
        detail_ = detail;
        log::info("orchestrator", "run " + result_.run_id + " terminated: " + reason + (detail.empty() ? "" : " (" + detail + ")"));
    }

    void baseline() {
        IterRow row;
        row.index = 0;
        CausalTree tree;
        try {
            tree = fit_tree(ds_, split_.train, pool_, params_with(seed_for("iter0/tree")));
        } catch (const FitError& e) {
            throw FitError(std::string("iteration 0 tree could not be fitted: ") + e.what());
        }
        EnsembleOptions opt;
        opt.threads = threads_;
        const auto bags = bag(split_.estimation, cfg_.bootstrap_b, seed_for("iter0/bags"));
        BootstrapEnsemble ens;
        try {
            ens = fit_ensemble(ds_, split_.estimation, bags, pool_, cfg_.tree, seed_for("iter0/ensemble"), opt);
        } catch (const FitError& e) {
            throw FitError(std::string("iteration 0 bootstrap ensemble failed: ") + e.what());
        }
        auto report = stability_filter(predict_ci(ens, ds_, split_.test, cfg_.alpha));
        const auto train_records = predict_ci(ens, ds_, split_.train, cfg_.alpha);

        active_train_.clear();
        for (const auto& r : train_records)
            if (r.width > report.threshold) active_train_.push_back(r.index);
        active_est_ = split_.estimation;
        active_test_ = report.unstable_ids;
        partition_tree_ = tree;

        row.partition_tree_id = tree.tree_id();
        StratumRow sr;
        sr.tree_id = tree.tree_id();
        sr.n_leaves = tree.leaves().size();
        sr.n_train = split_.train.size();
        sr.n_est = split_.estimation.size();
        sr.n_test = split_.test.size();
        for (int r : ens.redraws) sr.redraws += r;
        row.strata.push_back(sr);
        fill_row(row, report, split_.train.size(), split_.estimation.size(), split_.test.size());
        row.next_active_train = active_train_.size();

        IterationModel im;
        im.index = 0;
        im.strata.push_back(StratumModel{"", RestrictionContext{}, std::move(tree)});
        im.stable_ids = ids_of(report.stable_ids);
        result_.model.iterations.push_back(std::move(im));
        result_.ci.push_back(std::move(report));
        rows_.push_back(std::move(row));
        publish();
    }

    void fill_row(IterRow& row, const StabilityReport& report, std::size_t n_train, std::size_t n_est,
                  std::size_t n_test) const {
        row.n_train = n_train;
        row.n_est = n_est;
        row.n_test = n_test;
        row.mean_width = report.threshold;
        row.n_stable = report.stable_ids.size();
        row.n_unstable = report.unstable_ids.size();
        double sum = 0.0;
        for (const auto& r : report.records) sum += r.point;
        row.mean_point = report.records.empty() ? 0.0 : sum / static_cast<double>(report.records.size());
    }

    /// One confounder iteration; false when the loop must stop.
    bool iteration(int k) {
        Partition partition;
        if (k == 1) {
            partition = partition_tree_.partition();
        } else {
            try {
                partition_tree_ =
                    fit_tree(ds_, active_train_, pool_, params_with(seed_for("iter" + std::to_string(k) + "/partition")));
                partition = partition_tree_.partition();
            } catch (const FitError& e) {
                terminate(termination::partition_unfittable, e.what());
                return false;
            }
        }

        std::vector<std::string> accepted;
        ExpertFeedback feedback;
        bool rework_exhausted = false;
        for (int rework = 0; rework <= cfg_.max_rework; ++rework) {
            if (stop_requested()) {
                terminate(termination::stopped, "stop requested");
                return false;
            }
            AgentContext ctx;
            ctx.config = cfg_.agent;
            ctx.iteration = k;
            ctx.rework = rework;
            ctx.feedback = feedback;
            AgentResult agent;
            try {
                agent = run_agent_iteration(partition, kb_, backend_, ds_.meta(), validated_, ctx);
            } catch (const std::exception& e) {
                throw Error("iteration " + std::to_string(k) + " agent: " + e.what());
            }
            result_.traces.push_back(agent.trace);
            if (hooks_.on_trace) hooks_.on_trace(k, rework, agent.trace);

            AgentRun run;
            run.iteration = k;
            run.rework = rework;
            for (const auto& m : agent.confounders.confounders) run.candidates.emplace_back(m.covariate, m.vote_count);
            if (agent.confounders.empty()) {
                agent_runs_.push_back(std::move(run));
                publish();
                break;
            }
            publish();
            const auto outcome =
                request_decision(agent.confounders, policy_, ReviewRequest{result_.run_id, k, rework});
            run.rejected = outcome.rejected;
            run.decided_by = outcome.decided_by;
            run.feedback = outcome.feedback;
            for (const auto& name : outcome.accepted) {
                if (ds_.covariate(name).is_discrete()) {
                    run.accepted.push_back(name);
                } else {
                    log::warn("orchestrator", "accepted confounder " + name + " is continuous and cannot be restricted");
                    run.unrestrictable.push_back(name);
                }
            }
            accepted = run.accepted;
            agent_runs_.push_back(std::move(run));
            if (!outcome.accepted.empty()) break;
            for (const auto& n : outcome.rejected)
                if (std::find(feedback.rejected.begin(), feedback.rejected.end(), n) == feedback.rejected.end())
                    feedback.rejected.push_back(n);
            feedback.text = outcome.feedback;
            if (rework == cfg_.max_rework) rework_exhausted = true;
        }
        if (accepted.empty()) {
            terminate(termination::empty_set, rework_exhausted ? "all candidates rejected after max_rework re-runs"
                                                                : "no new confounders accepted");
            return false;
        }
        restrict_and_estimate(k, accepted);
        return reason_.empty();
    }

    void restrict_and_estimate(int k, const std::vector<std::string>& accepted) {
        for (const auto& n : accepted) validated_.push_back(n);
        pool_ = remaining_covariates(ds_, validated_);

        IterRow row;
        row.index = k;
        row.validated = validated_;
        row.new_confounders = accepted;
        row.partition_tree_id = partition_tree_.tree_id();

        RestrictionContext ctx{validated_, {}};
        const auto rtrain = apply_restriction(active_train_, ctx, ds_, cfg_.min_stratum_size);
        const auto rest = apply_restriction(active_est_, ctx, ds_, cfg_.min_stratum_size);
        const auto rtest = apply_restriction(active_test_, ctx, ds_, 1);

        std::vector<std::string> keys;
        for (const auto& [key, s] : rtest.strata) {
            const bool in_train = rtrain.strata.count(key) > 0;
            const bool in_est = rest.strata.count(key) > 0;
            if (in_train && in_est) {
                keys.push_back(key);
            } else {
                row.dropped_strata.emplace_back(key, !in_train ? "train stratum below min_stratum_size"
                                                               : "estimation stratum below min_stratum_size");
            }
        }
        row.restriction_dropped = rtest.dropped.size();

        struct Fitted {
            bool ok = false;
            std::string error;
            CausalTree tree;
            BootstrapEnsemble ens;
            std::vector<CIRecord> test_records;
            std::vector<CIRecord> train_records;
        };
        std::vector<Fitted> fitted(keys.size());
        parallel_for(keys.size(), threads_, [&](std::size_t s) {
            const auto& key = keys[s];
            const auto& tr = rtrain.strata.at(key).ids;
            const auto& es = rest.strata.at(key).ids;
            const auto& te = rtest.strata.at(key).ids;
            const std::string tag = "iter" + std::to_string(k) + "/" + key;
            auto& f = fitted[s];
            try {
                f.tree = fit_tree(ds_, tr, pool_, params_with(seed_for(tag + "/tree")));
                const auto bags = bag(es, cfg_.bootstrap_b, seed_for(tag + "/bags"));
                f.ens = fit_ensemble(ds_, es, bags, pool_, cfg_.tree, seed_for(tag + "/ensemble"));
                f.test_records = predict_ci(f.ens, ds_, te, cfg_.alpha);
                f.train_records = predict_ci(f.ens, ds_, tr, cfg_.alpha);
                f.ok = true;
            } catch (const FitError& e) {
                f.error = e.what();
            }
        });

        IterationModel im;
        im.index = k;
        im.validated = validated_;
        std::vector<CIRecord> pooled;
        std::vector<const CIRecord*> pooled_train;
        IdSet next_est;
        std::size_t n_train = 0, n_est = 0, n_test = 0;
        for (std::size_t s = 0; s < keys.size(); ++s) {
            auto& f = fitted[s];
            const auto& key = keys[s];
            if (!f.ok) {
                log::warn("orchestrator", "iteration " + std::to_string(k) + ": stratum " + key + " dropped: " + f.error);
                row.dropped_strata.emplace_back(key, f.error);
                continue;
            }
            StratumRow sr;
            sr.key = key;
            sr.n_train = rtrain.strata.at(key).ids.size();
            sr.n_est = rest.strata.at(key).ids.size();
            sr.n_test = rtest.strata.at(key).ids.size();
            sr.tree_id = f.tree.tree_id();
            sr.n_leaves = f.tree.leaves().size();
            for (int r : f.ens.redraws) sr.redraws += r;
            n_train += sr.n_train;
            n_est += sr.n_est;
            n_test += sr.n_test;
            row.strata.push_back(sr);
            const auto& es = rest.strata.at(key).ids;
            next_est.insert(next_est.end(), es.begin(), es.end());
            for (auto& r : f.test_records) pooled.push_back(r);
            for (const auto& r : f.train_records) pooled_train.push_back(&r);
            im.strata.push_back(StratumModel{key, rtest.strata.at(key).context, f.tree});
        }
        std::sort(row.dropped_strata.begin(), row.dropped_strata.end());

        if (pooled.empty()) {
            rows_.push_back(std::move(row));
            terminate(termination::no_fittable_strata, "no stratum at iteration " + std::to_string(k) + " could be fitted");
            return;
        }
        auto report = stability_filter(std::move(pooled));
        active_train_.clear();
        for (const auto* r : pooled_train)
            if (r->width > report.threshold) active_train_.push_back(r->index);
        std::sort(active_train_.begin(), active_train_.end());
        std::sort(next_est.begin(), next_est.end());
        active_est_ = std::move(next_est);
        active_test_ = report.unstable_ids;

        fill_row(row, report, n_train, n_est, n_test);
        row.next_active_train = active_train_.size();
        im.stable_ids = ids_of(report.stable_ids);
        result_.model.iterations.push_back(std::move(im));
        result_.ci.push_back(std::move(report));
        rows_.push_back(std::move(row));
        publish();
    }

    void finalize() {
        final_.clear();
        if (result_.model.iterations.empty() || split_.test.empty()) return;
        double sum = 0.0, sum0 = 0.0;
        const auto& it0 = result_.model.iterations.front();
        for (auto i : split_.test) {
            const auto x = ds_.covariate_map(i);
            const auto p = predict_final(result_.model, x);
            sum += p.cate;
            sum0 += it0.strata.front().tree.assign_leaf(x).cate;
            final_.push_back({i, p});
        }
        final_ate_ = sum / static_cast<double>(split_.test.size());
        baseline_ate_ = sum0 / static_cast<double>(split_.test.size());
    }

    ordered_json build_report() const {
        ordered_json j;
        j["format"] = "confloop-report/1";
        j["run_id"] = result_.run_id;
        j["status"] = status_;
        j["config"] = to_json(cfg_);
        ordered_json hashes = ordered_json::object();
        for (const auto& [name, h] : prompt_template_hashes()) hashes[name] = h;
        j["prompt_templates"] = std::move(hashes);
        j["backend"] = backend_.name();
        j["review_policy"] = policy_.name();
        j["dataset"] = {{"n", ds_.size()},
                        {"hash", hash_hex(dataset_to_csv(ds_))},
                        {"split",
                         {{"train", split_.train.size()},
                          {"estimation", split_.estimation.size()},
                          {"test", split_.test.size()}}}};

        auto iters = ordered_json::array();
        for (const auto& r : rows_) {
            ordered_json ij;
            ij["index"] = r.index;
            ij["validated"] = r.validated;
            ij["new_confounders"] = r.new_confounders;
            ij["partition_tree"] = r.partition_tree_id;
            ij["n_active_train"] = r.n_train;
            ij["n_active_estimation"] = r.n_est;
            ij["n_active_test"] = r.n_test;
            ij["mean_ci_width"] = r.mean_width;
            ij["n_stable"] = r.n_stable;
            ij["n_unstable"] = r.n_unstable;
            ij["mean_cate"] = r.mean_point;
            ij["next_active_train"] = r.next_active_train;
            auto strata = ordered_json::array();
            for (const auto& s : r.strata)
                strata.push_back({{"key", s.key},
                                  {"n_train", s.n_train},
                                  {"n_estimation", s.n_est},
                                  {"n_test", s.n_test},
                                  {"tree_id", s.tree_id},
                                  {"leaves", s.n_leaves},
                                  {"bootstrap_redraws", s.redraws}});
            ij["strata"] = std::move(strata);
            auto dropped = ordered_json::array();
            for (const auto& [key, why] : r.dropped_strata) dropped.push_back({{"key", key}, {"reason", why}});
            ij["dropped_strata"] = std::move(dropped);
            ij["restriction_dropped_test"] = r.restriction_dropped;
            ij["ci_records"] = "ci/iteration_" + std::to_string(r.index) + ".json";
            iters.push_back(std::move(ij));
        }
        j["iterations"] = std::move(iters);

        auto runs = ordered_json::array();
        for (const auto& a : agent_runs_) {
            ordered_json aj;
            aj["iteration"] = a.iteration;
            aj["rework"] = a.rework;
            auto cands = ordered_json::array();
            for (const auto& [name, votes] : a.candidates) cands.push_back({{"covariate", name}, {"votes", votes}});
            aj["candidates"] = std::move(cands);
            aj["accepted"] = a.accepted;
            aj["rejected"] = a.rejected;
            aj["unrestrictable"] = a.unrestrictable;
            aj["decided_by"] = a.decided_by;
            aj["feedback"] = a.feedback;
            runs.push_back(std::move(aj));
        }
        j["agent_runs"] = std::move(runs);
        j["validated"] = validated_;
        j["termination_reason"] = reason_;
        j["termination_detail"] = detail_;
        if (!final_.empty()) {
            j["baseline_ate"] = baseline_ate_;
            j["final_ate"] = final_ate_;
            auto assign = ordered_json::array();
            for (const auto& [i, p] : final_)
                assign.push_back({{"id", ds_.id(i)},
                                  {"iteration", p.iteration},
                                  {"stratum", p.stratum},
                                  {"leaf_id", p.leaf_id},
                                  {"cate", p.cate}});
            j["final_assignments"] = std::move(assign);
        }
        if (!error_.empty()) j["error"] = error_;
        return j;
    }

    void publish() {
        result_.report = build_report();
        if (hooks_.on_progress) hooks_.on_progress(result_.report);
        if (hooks_.persist_dir) persist_run(result_, *hooks_.persist_dir);
    }

    const Dataset& ds_;
    const RunConfig& cfg_;
    AgentBackend& backend_;
    ExpertPolicy& policy_;
    const KnowledgeBase& kb_;
    const PipelineHooks& hooks_;
    std::size_t threads_ = 1;

    PipelineResult result_;
    DataSplit split_;
    std::vector<std::string> pool_;
    std::vector<std::string> validated_;
    IdSet active_train_, active_est_, active_test_;
    CausalTree partition_tree_;
    std::vector<IterRow> rows_;
    std::vector<AgentRun> agent_runs_;
    std::vector<std::pair<SampleIndex, FinalPrediction>> final_;
    double final_ate_ = 0.0, baseline_ate_ = 0.0;
    std::string status_ = "pending";
    std::string reason_;
    std::string detail_;
    std::string error_;
};

}  // namespace

PipelineResult run_pipeline(const Dataset& ds, const RunConfig& cfg, AgentBackend& backend, ExpertPolicy& policy,
                            const KnowledgeBase& kb, const PipelineHooks& hooks, std::string run_id) {
    cfg.validate();
    if (ds.empty()) throw DataError("run_pipeline: empty dataset");
    if (run_id.empty()) run_id = compute_run_id(ds, cfg);
    Pipeline p(ds, cfg, backend, policy, kb, hooks, std::move(run_id));
    return p.run();
}

}  // namespace confloop
