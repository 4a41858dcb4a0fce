#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "confloop/agent.hpp"
#include "confloop/causal_tree.hpp"
#include "confloop/dataset.hpp"

namespace confloop {

struct RunConfig {
    std::uint64_t seed = 42;
    SplitRatios split;
    TreeParams tree;

    std::size_t bootstrap_b = 64;
    double alpha = 0.05;

    struct Data {
        std::string csv;
        std::string metadata;
    } data;

    struct Backend {
        std::string kind = "mock";  // mock | http | replay
        std::string mock_fixture;
        std::string replay_trace;
        BackendConfig http;
    } backend;

    AgentConfig agent;

    struct Knowledge {
        std::string corpus_dir;
        std::string embedding = "hashed";  // hashed | remote
        std::size_t embedding_dim = 256;
        std::string embedding_model;
        std::size_t chunk_size = 400;
        std::size_t chunk_overlap = 100;
        std::string tool_dir;
        std::string tool_url;
        GatherConfig gather;
    } knowledge;

    struct Review {
        std::string policy = "auto_accept";  // auto_accept | scripted | interactive
        std::string fixture;
        std::optional<long long> timeout_ms;
    } review;

    int max_iterations = 5;
    std::size_t min_active_samples = 100;
    int max_rework = 2;
    std::size_t min_stratum_size = 30;

    std::size_t threads = 1;
    std::string output_dir = "runs";

    /// Directory that relative paths are resolved against; not serialized.
    std::filesystem::path base_dir;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    std::filesystem::path resolve(const std::string& path) const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& doc);
/// Parses the file and sets base_dir to its directory.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace confloop
