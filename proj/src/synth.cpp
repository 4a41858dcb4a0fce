#include "confloop/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "confloop/error.hpp"
#include "confloop/orchestrator.hpp"
#include "confloop/random.hpp"

namespace confloop {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

const SynthCovariate* find_cov(const SynthConfig& cfg, const std::string& name) {
    for (const auto& c : cfg.covariates)
        if (c.meta.name == name) return &c;
    return nullptr;
}

std::size_t level_index(const CovariateMeta& meta, const std::string& level) {
    auto it = std::find(meta.levels.begin(), meta.levels.end(), level);
    if (it == meta.levels.end()) throw ConfigError("effect: covariate " + meta.name + " has no level \"" + level + "\"");
    return static_cast<std::size_t>(it - meta.levels.begin());
}

void check(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field + ": " + what);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

void SynthConfig::validate() const {
    check(n >= 1, "n", "must be at least 1");
    check(noise_sd >= 0.0 && std::isfinite(noise_sd), "noise_sd", "must be a finite value >= 0");
    check(base_rate_treated > 0.0 && base_rate_treated < 1.0, "base_rate_treated", "must lie in (0, 1)");
    check(!covariates.empty(), "covariates", "at least one covariate is required");
    std::set<std::string> names;
    for (std::size_t i = 0; i < covariates.size(); ++i) {
        const auto& c = covariates[i];
        const std::string f = "covariates[" + std::to_string(i) + "]";
        check(!c.meta.name.empty(), f + ".name", "must not be empty");
        check(names.insert(c.meta.name).second, f + ".name", "duplicate covariate " + c.meta.name);
        switch (c.meta.kind) {
            case CovariateKind::binary:
                check(c.meta.levels.size() == 2, f + ".levels", "binary covariates need exactly 2 levels");
                check(c.prevalence >= 0.0 && c.prevalence <= 1.0, f + ".prevalence", "must lie in [0, 1]");
                break;
            case CovariateKind::categorical: {
                check(c.meta.levels.size() >= 2, f + ".levels", "categorical covariates need at least 2 levels");
                check(c.level_probs.size() == c.meta.levels.size(), f + ".level_probs", "one probability per level");
                double sum = 0.0;
                for (double p : c.level_probs) {
                    check(p >= 0.0, f + ".level_probs", "must be non-negative");
                    sum += p;
                }
                check(std::abs(sum - 1.0) < 1e-9, f + ".level_probs", "must sum to 1");
                break;
            }
            case CovariateKind::continuous:
                check(c.sd >= 0.0, f + ".sd", "must be >= 0");
                break;
        }
    }
    std::set<std::string> conf_names;
    for (std::size_t i = 0; i < confounders.size(); ++i) {
        const auto& c = confounders[i];
        const std::string f = "confounders[" + std::to_string(i) + "]";
        const auto* cov = find_cov(*this, c.name);
        check(cov != nullptr, f + ".name", "unknown covariate " + c.name);
        check(cov->meta.kind == CovariateKind::binary, f + ".name", c.name + " must be binary");
        check(conf_names.insert(c.name).second, f + ".name", "duplicate confounder " + c.name);
    }
    for (std::size_t i = 0; i < effect_terms.size(); ++i) {
        const auto& t = effect_terms[i];
        const std::string f = "effect.terms[" + std::to_string(i) + "]";
        const auto* cov = find_cov(*this, t.covariate);
        check(cov != nullptr, f + ".covariate", "unknown covariate " + t.covariate);
        if (cov->meta.is_discrete()) level_index(cov->meta, t.level);
    }
}

SynthConfig default_synth_config() {
    SynthConfig cfg;
    static const std::pair<const char*, const char*> vocab[] = {
        {"HTN", "hypertension"},
        {"DM", "diabetes mellitus"},
        {"CHF", "congestive heart failure"},
        {"AF", "atrial fibrillation"},
        {"CAD", "coronary artery disease"},
        {"CVAD", "cerebrovascular disease"},
        {"CKD", "chronic kidney disease"},
        {"COPDA", "chronic obstructive pulmonary disease or asthma"},
        {"GOUT", "gout"},
    };
    for (const auto& [name, desc] : vocab) {
        SynthCovariate c;
        c.meta.name = name;
        c.meta.description = desc;
        c.meta.kind = CovariateKind::binary;
        c.meta.levels = {"0", "1"};
        c.prevalence = 0.5;
        cfg.covariates.push_back(std::move(c));
    }
    cfg.effect_base = 1.0;
    return cfg;
}

ordered_json to_json(const SynthConfig& cfg) {
    ordered_json j;
    j["n"] = cfg.n;
    j["seed"] = cfg.seed;
    j["noise_sd"] = cfg.noise_sd;
    j["base_rate_treated"] = cfg.base_rate_treated;
    auto covs = ordered_json::array();
    for (const auto& c : cfg.covariates) {
        ordered_json cj;
        cj["name"] = c.meta.name;
        cj["description"] = c.meta.description;
        cj["kind"] = to_string(c.meta.kind);
        cj["levels"] = c.meta.levels;
        if (c.meta.kind == CovariateKind::binary) cj["prevalence"] = c.prevalence;
        if (c.meta.kind == CovariateKind::categorical) cj["level_probs"] = c.level_probs;
        if (c.meta.kind == CovariateKind::continuous) {
            cj["mean"] = c.mean;
            cj["sd"] = c.sd;
        }
        covs.push_back(std::move(cj));
    }
    j["covariates"] = std::move(covs);
    auto confs = ordered_json::array();
    for (const auto& c : cfg.confounders)
        confs.push_back({{"name", c.name},
                         {"treatment_log_odds_shift", c.treatment_log_odds_shift},
                         {"outcome_shift", c.outcome_shift}});
    j["confounders"] = std::move(confs);
    auto terms = ordered_json::array();
    for (const auto& t : cfg.effect_terms) {
        ordered_json tj;
        tj["covariate"] = t.covariate;
        if (!t.level.empty()) tj["level"] = t.level;
        else tj["threshold"] = t.threshold;
        tj["shift"] = t.shift;
        terms.push_back(std::move(tj));
    }
    j["effect"] = {{"base", cfg.effect_base}, {"terms", std::move(terms)}};
    return j;
}

SynthConfig synth_config_from_json(const json& doc) {
    if (!doc.is_object()) throw ConfigError("synth config: expected an object");
    static const std::set<std::string> known = {"n", "seed", "noise_sd", "base_rate_treated", "covariates",
                                                "confounders", "effect"};
    for (const auto& [key, v] : doc.items())
        if (!known.count(key)) throw ConfigError(key + ": unknown key");
    SynthConfig cfg = default_synth_config();
    try {
        if (doc.contains("n")) {
            const auto& n = doc.at("n");
            if (!n.is_number_integer() || n.get<long long>() < 0) throw ConfigError("n: must be a non-negative integer");
            cfg.n = n.get<std::size_t>();
        }
        cfg.seed = doc.value("seed", cfg.seed);
        cfg.noise_sd = doc.value("noise_sd", cfg.noise_sd);
        cfg.base_rate_treated = doc.value("base_rate_treated", cfg.base_rate_treated);
        if (doc.contains("covariates")) {
            cfg.covariates.clear();
            for (const auto& cj : doc.at("covariates")) {
                SynthCovariate c;
                c.meta.name = cj.at("name").get<std::string>();
                c.meta.description = cj.value("description", "");
                c.meta.kind = parse_covariate_kind(cj.value("kind", "binary"));
                c.meta.levels = cj.value("levels", std::vector<std::string>{});
                if (c.meta.kind == CovariateKind::binary && c.meta.levels.empty()) c.meta.levels = {"0", "1"};
                c.prevalence = cj.value("prevalence", 0.5);
                c.level_probs = cj.value("level_probs", std::vector<double>{});
                c.mean = cj.value("mean", 0.0);
                c.sd = cj.value("sd", 1.0);
                cfg.covariates.push_back(std::move(c));
            }
        }
        for (const auto& cj : doc.value("confounders", json::array())) {
            SynthConfounder c;
            c.name = cj.at("name").get<std::string>();
            c.treatment_log_odds_shift = cj.value("treatment_log_odds_shift", 0.0);
            c.outcome_shift = cj.value("outcome_shift", 0.0);
            cfg.confounders.push_back(std::move(c));
        }
        if (doc.contains("effect")) {
            const auto& e = doc.at("effect");
            cfg.effect_base = e.value("base", 0.0);
            for (const auto& tj : e.value("terms", json::array())) {
                EffectTerm t;
                t.covariate = tj.at("covariate").get<std::string>();
                t.level = tj.value("level", "");
                t.threshold = tj.value("threshold", 0.0);
                t.shift = tj.at("shift").get<double>();
                cfg.effect_terms.push_back(std::move(t));
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    } catch (const DataError& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

SynthConfig load_synth_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open synth config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("synth config " + path.string() + " is not valid JSON: " + e.what());
    }
    return synth_config_from_json(doc);
}

double true_effect(const SynthConfig& cfg, const CovariateMap& x) {
    double tau = cfg.effect_base;
    for (const auto& t : cfg.effect_terms) {
        const auto* cov = find_cov(cfg, t.covariate);
        auto it = x.find(t.covariate);
        if (!cov || it == x.end()) throw DataError("missing covariate value " + t.covariate);
        const bool on = cov->meta.is_discrete() ? it->second == static_cast<double>(level_index(cov->meta, t.level))
                                                : it->second > t.threshold;
        if (on) tau += t.shift;
    }
    return tau;
}

double GroundTruth::tau_of(const std::string& id) const {
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == id) return tau[i];
    throw DataError("ground truth has no sample " + id);
}

ordered_json to_json(const GroundTruth& truth) {
    ordered_json j;
    j["ate"] = truth.ate;
    auto confs = ordered_json::array();
    for (const auto& c : truth.confounders)
        confs.push_back({{"name", c.name},
                         {"treatment_log_odds_shift", c.treatment_log_odds_shift},
                         {"outcome_shift", c.outcome_shift},
                         {"prevalence_gap", c.prevalence_gap},
                         {"naive_bias", c.naive_bias}});
    j["confounders"] = std::move(confs);
    auto samples = ordered_json::array();
    for (std::size_t i = 0; i < truth.ids.size(); ++i) samples.push_back({{"id", truth.ids[i]}, {"tau", truth.tau[i]}});
    j["samples"] = std::move(samples);
    return j;
}

GroundTruth ground_truth_from_json(const json& doc) {
    GroundTruth t;
    t.ate = doc.at("ate").get<double>();
    for (const auto& cj : doc.value("confounders", json::array())) {
        ConfounderBias c;
        c.name = cj.at("name").get<std::string>();
        c.treatment_log_odds_shift = cj.value("treatment_log_odds_shift", 0.0);
        c.outcome_shift = cj.value("outcome_shift", 0.0);
        c.prevalence_gap = cj.value("prevalence_gap", 0.0);
        c.naive_bias = cj.value("naive_bias", 0.0);
        t.confounders.push_back(std::move(c));
    }
    for (const auto& sj : doc.at("samples")) {
        t.ids.push_back(sj.at("id").get<std::string>());
        t.tau.push_back(sj.at("tau").get<double>());
    }
    return t;
}

SynthResult generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const std::size_t p = cfg.covariates.size();
    std::vector<CovariateMeta> meta;
    for (const auto& c : cfg.covariates) meta.push_back(c.meta);

    std::vector<std::size_t> conf_col;
    for (const auto& c : cfg.confounders)
        for (std::size_t k = 0; k < p; ++k)
            if (cfg.covariates[k].meta.name == c.name) conf_col.push_back(k);

    const std::size_t width = std::to_string(cfg.n).size();
    std::vector<std::string> ids(cfg.n);
    std::vector<double> y(cfg.n);
    std::vector<int> w(cfg.n);
    std::vector<std::vector<double>> columns(p, std::vector<double>(cfg.n));
    GroundTruth truth;
    truth.tau.resize(cfg.n);
    const double base_logit = std::log(cfg.base_rate_treated / (1.0 - cfg.base_rate_treated));

    double tau_sum = 0.0;
    for (std::size_t i = 0; i < cfg.n; ++i) {
        std::string id = std::to_string(i + 1);
        ids[i] = "s" + std::string(width - id.size(), '0') + id;
        CovariateMap x;
        for (std::size_t k = 0; k < p; ++k) {
            const auto& c = cfg.covariates[k];
            double v = 0.0;
            switch (c.meta.kind) {
                case CovariateKind::binary:
                    v = rng.bernoulli(c.prevalence) ? 1.0 : 0.0;
                    break;
                case CovariateKind::categorical: {
                    const double u = rng.uniform();
                    double acc = 0.0;
                    v = static_cast<double>(c.level_probs.size() - 1);
                    for (std::size_t l = 0; l < c.level_probs.size(); ++l) {
                        acc += c.level_probs[l];
                        if (u < acc) {
                            v = static_cast<double>(l);
                            break;
                        }
                    }
                    break;
                }
                case CovariateKind::continuous:
                    v = std::round(rng.normal(c.mean, c.sd) * 10.0) / 10.0;
                    break;
            }
            columns[k][i] = v;
            x[c.meta.name] = v;
        }
        double logit = base_logit;
        double shift = 0.0;
        for (std::size_t c = 0; c < cfg.confounders.size(); ++c) {
            const double flag = columns[conf_col[c]][i];
            logit += flag * cfg.confounders[c].treatment_log_odds_shift;
            shift += flag * cfg.confounders[c].outcome_shift;
        }
        w[i] = rng.bernoulli(sigmoid(logit)) ? 1 : 0;
        const double tau = true_effect(cfg, x);
        truth.tau[i] = tau;
        tau_sum += tau;
        const double noise = cfg.noise_sd > 0.0 ? rng.normal(0.0, cfg.noise_sd) : 0.0;
        y[i] = shift + w[i] * tau + noise;
    }

    const auto n_treated = static_cast<std::size_t>(std::count(w.begin(), w.end(), 1));
    if (n_treated == 0 || n_treated == cfg.n)
        throw DataError("synthetic draw put every sample in one arm; try a different seed or base_rate_treated");

    truth.ids = ids;
    truth.ate = tau_sum / static_cast<double>(cfg.n);
    for (std::size_t c = 0; c < cfg.confounders.size(); ++c) {
        double flag_t = 0.0, flag_c = 0.0;
        for (std::size_t i = 0; i < cfg.n; ++i) (w[i] ? flag_t : flag_c) += columns[conf_col[c]][i];
        ConfounderBias b;
        b.name = cfg.confounders[c].name;
        b.treatment_log_odds_shift = cfg.confounders[c].treatment_log_odds_shift;
        b.outcome_shift = cfg.confounders[c].outcome_shift;
        b.prevalence_gap = flag_t / static_cast<double>(n_treated) - flag_c / static_cast<double>(cfg.n - n_treated);
        b.naive_bias = b.outcome_shift * b.prevalence_gap;
        truth.confounders.push_back(b);
    }
    return SynthResult{Dataset(std::move(meta), std::move(ids), std::move(y), std::move(w), std::move(columns)),
                       std::move(truth)};
}

ModelEvaluation evaluate_model(const FinalModel& model, const Dataset& ds, const GroundTruth& truth,
                               std::span<const SampleIndex> ids) {
    if (ids.empty()) throw Error("evaluate_model: no samples");
    std::map<std::string, double> tau;
    for (std::size_t i = 0; i < truth.ids.size(); ++i) tau[truth.ids[i]] = truth.tau[i];
    double sq = 0.0, pred_sum = 0.0;
    for (auto i : ids) {
        auto it = tau.find(ds.id(i));
        if (it == tau.end()) throw DataError("ground truth has no sample " + ds.id(i));
        const double pred = predict_final(model, ds.covariate_map(i)).cate;
        sq += (pred - it->second) * (pred - it->second);
        pred_sum += pred;
    }
    const double n = static_cast<double>(ids.size());
    ModelEvaluation ev;
    ev.pehe = std::sqrt(sq / n);
    ev.mean_predicted = pred_sum / n;
    ev.ate_error = std::abs(ev.mean_predicted - truth.ate);
    return ev;
}

void write_synth_outputs(const SynthResult& result, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    auto write = [&](const char* name, const std::string& text) {
        std::ofstream out(out_dir / name, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + (out_dir / name).string());
        out << text;
    };
    write("data.csv", dataset_to_csv(result.dataset));
    write("metadata.json", metadata_to_json(result.dataset.meta()).dump(2) + "\n");
    write("truth.json", to_json(result.truth).dump(2) + "\n");
}

}  // namespace confloop
