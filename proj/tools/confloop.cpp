#include <atomic>
#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "confloop/cli.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"confloop: iterative confounder discovery for heterogeneous treatment effects"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string bind = "127.0.0.1:8080";
    std::string csv;
    std::string data, meta, ui_dir;
    bool serve = false;

    app.add_option("--config", config, "run or synth configuration file (JSON)");
    app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--out", out, "output directory");
    app.add_option("--bind", bind, "review API address host:port")->capture_default_str();
    app.add_option("--csv", csv, "also write the report table as CSV");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with ground truth");

    auto* run = app.add_subcommand("run", "run the confounder loop and persist the run directory");
    run->add_option("--data", data, "dataset CSV (overrides config)");
    run->add_option("--meta", meta, "covariate metadata JSON (overrides config)");
    run->add_flag("--serve", serve, "host the review API during the run");
    run->add_option("--ui-dir", ui_dir, "static UI assets served at /");

    auto* report = app.add_subcommand("report", "print per-iteration CI widths of a run");
    std::string run_dir;
    report->add_option("run_dir", run_dir, "run directory")->required();

    auto* srv = app.add_subcommand("serve", "serve the review API, running the configured pipeline");
    srv->add_option("--data", data, "dataset CSV (overrides config)");
    srv->add_option("--meta", meta, "covariate metadata JSON (overrides config)");
    srv->add_option("--ui-dir", ui_dir, "static UI assets served at /");

    CLI11_PARSE(app, argc, argv);

    confloop::RunOptions ro;
    ro.config = config;
    ro.overrides.seed = seed;
    if (!out.empty()) ro.overrides.out = out;
    if (!data.empty()) ro.overrides.data = data;
    if (!meta.empty()) ro.overrides.meta = meta;
    ro.serve = serve;
    ro.bind = bind;
    if (!ui_dir.empty()) ro.ui_dir = ui_dir;

    if (synth->parsed()) {
        confloop::SynthOptions so;
        so.config = config;
        so.out_dir = out.empty() ? "." : out;
        so.seed = seed;
        return confloop::cmd_synth(so, std::cout, std::cerr);
    }
    if (report->parsed()) {
        confloop::ReportOptions rep;
        rep.run_dir = run_dir;
        if (!csv.empty()) rep.csv = csv;
        return confloop::cmd_report(rep, std::cout, std::cerr);
    }

    std::signal(SIGTERM, on_signal);
    std::signal(SIGINT, on_signal);
    if (run->parsed()) {
        ro.stop = &g_stop;
        if (!serve) return confloop::cmd_run(ro, std::cout, std::cerr);
        confloop::ServeCommandOptions s;
        s.run = ro;
        s.stop = &g_stop;
        s.exit_after_run = true;
        return confloop::cmd_serve(s, std::cout, std::cerr);
    }
    confloop::ServeCommandOptions s;
    s.run = ro;
    s.stop = &g_stop;
    return confloop::cmd_serve(s, std::cout, std::cerr);
}
