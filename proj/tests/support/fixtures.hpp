#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "confloop/dataset.hpp"
#include "confloop/knowledge.hpp"
#include "confloop/synth.hpp"

namespace fixtures {

std::filesystem::path source_dir();
std::filesystem::path configs_dir();
std::filesystem::path test_fixture(const std::string& name);

// Fresh empty directory under the system temp dir, unique per call.
std::filesystem::path temp_dir(const std::string& tag);

void write_file(const std::filesystem::path& path, const std::string& text);
std::string read_file(const std::filesystem::path& path);

confloop::CovariateMeta binary(const std::string& name, const std::string& description = "");
confloop::CovariateMeta categorical(const std::string& name, std::vector<std::string> levels);
confloop::CovariateMeta continuous(const std::string& name);

struct Row {
    double y;
    int w;
    std::vector<double> x;
};
confloop::Dataset make_dataset(std::vector<confloop::CovariateMeta> meta, const std::vector<Row>& rows);

// Mixed binary / 3-level categorical / continuous covariates with a
// heterogeneous effect and noise; n rows, seeded.
confloop::Dataset random_dataset(std::uint64_t seed, std::size_t n);

// Binary G; tau = 2 when G = 1 and 0 otherwise; y = w * tau exactly.
confloop::Dataset noiseless_g(std::size_t n);

confloop::SynthConfig confounded_config();
confloop::SynthConfig schedule_config();

std::vector<std::size_t> iota(std::size_t n);

// Hashed-embedding index over configs/corpus.
confloop::KnowledgeBase corpus_kb();

nlohmann::json load_json(const std::filesystem::path& path);

}  // namespace fixtures
