#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "confloop/agent.hpp"
#include "confloop/config.hpp"
#include "confloop/knowledge.hpp"
#include "confloop/review.hpp"

namespace confloop {

/// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> data;
    std::optional<std::string> meta;
};

/// Loads the config file (or defaults when path is empty) and applies flag
/// overrides; flag paths stay relative to the working directory.
RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});

std::unique_ptr<AgentBackend> make_backend(const RunConfig& cfg);
/// `store` is the review service's store, null when nothing is serving.
std::unique_ptr<ExpertPolicy> make_policy(const RunConfig& cfg, std::shared_ptr<ReviewStore> store);
KnowledgeBase make_knowledge_base(const RunConfig& cfg);

struct SynthOptions {
    std::filesystem::path config;  // empty: default vocabulary
    std::filesystem::path out_dir = ".";
    std::optional<std::uint64_t> seed;
};

struct RunOptions {
    std::filesystem::path config;
    ConfigOverrides overrides;
    /// Host the review API while the run executes (required for the
    /// interactive policy).
    bool serve = false;
    std::string bind = "127.0.0.1:8080";
    std::optional<std::filesystem::path> ui_dir;
    /// Checked between stages; a stopped run persists a partial report.
    const std::atomic<bool>* stop = nullptr;
};

struct ServeCommandOptions {
    RunOptions run;
    /// Set by a signal handler or a test; the service shuts down once true.
    const std::atomic<bool>* stop = nullptr;
    /// Called once the listener is up, with the bound port.
    std::function<void(int port)> on_ready;
    /// Shut down after the pipeline finishes instead of serving until stop.
    bool exit_after_run = false;
};

struct ReportOptions {
    std::filesystem::path run_dir;
    std::optional<std::filesystem::path> csv;
};

int cmd_synth(const SynthOptions& opt, std::ostream& out, std::ostream& err);
int cmd_run(const RunOptions& opt, std::ostream& out, std::ostream& err);
int cmd_report(const ReportOptions& opt, std::ostream& out, std::ostream& err);
int cmd_serve(const ServeCommandOptions& opt, std::ostream& out, std::ostream& err);

/// Per-iteration rows of a report: index, validated confounders, mean CI
/// width, stable and unstable counts.
std::string report_table(const nlohmann::json& report);
std::string report_csv(const nlohmann::json& report);
/// Reads <run_dir>/report.json; throws DataError when missing or corrupt.
nlohmann::json read_report(const std::filesystem::path& run_dir);

}  // namespace confloop
