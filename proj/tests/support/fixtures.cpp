#include "fixtures.hpp"

#include <atomic>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

#include "confloop/random.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using confloop::CovariateKind;
using confloop::CovariateMeta;

fs::path source_dir() { return fs::path(CONFLOOP_SOURCE_DIR); }
fs::path configs_dir() { return source_dir() / "configs"; }
fs::path test_fixture(const std::string& name) { return source_dir() / "tests" / "fixtures" / name; }

fs::path temp_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const fs::path dir = fs::temp_directory_path() /
                         ("confloop-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CovariateMeta binary(const std::string& name, const std::string& description) {
    return CovariateMeta{name, description, CovariateKind::binary, {"0", "1"}};
}

CovariateMeta categorical(const std::string& name, std::vector<std::string> levels) {
    return CovariateMeta{name, name, CovariateKind::categorical, std::move(levels)};
}

CovariateMeta continuous(const std::string& name) { return CovariateMeta{name, name, CovariateKind::continuous, {}}; }

confloop::Dataset make_dataset(std::vector<CovariateMeta> meta, const std::vector<Row>& rows) {
    std::vector<std::string> ids;
    std::vector<double> y;
    std::vector<int> w;
    std::vector<std::vector<double>> cols(meta.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        ids.push_back("r" + std::to_string(r));
        y.push_back(rows[r].y);
        w.push_back(rows[r].w);
        for (std::size_t c = 0; c < meta.size(); ++c) cols[c].push_back(rows[r].x.at(c));
    }
    return confloop::Dataset(std::move(meta), std::move(ids), std::move(y), std::move(w), std::move(cols));
}

confloop::Dataset random_dataset(std::uint64_t seed, std::size_t n) {
    confloop::Rng rng(seed);
    std::vector<CovariateMeta> meta = {binary("A"), categorical("B", {"low", "mid", "high"}), continuous("C"),
                                       binary("D")};
    std::vector<Row> rows;
    const double effect_a = rng.normal(0.0, 2.0);
    const double effect_c = rng.normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = rng.bernoulli(0.5) ? 1 : 0;
        const double b = static_cast<double>(rng.below(3));
        const double c = std::round(rng.normal(0.0, 1.0) * 4.0) / 4.0;
        const double d = rng.bernoulli(0.3) ? 1 : 0;
        const int w = rng.bernoulli(0.5) ? 1 : 0;
        const double tau = 1.0 + effect_a * a + effect_c * (c > 0 ? 1 : 0) + (b == 2 ? 0.5 : 0.0);
        rows.push_back({w * tau + 0.3 * d + rng.normal(0.0, 1.0), w, {a, b, c, d}});
    }
    return make_dataset(std::move(meta), rows);
}

confloop::Dataset noiseless_g(std::size_t n) {
    std::vector<Row> rows;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = (i / 2) % 2;
        const int w = static_cast<int>(i % 2);
        rows.push_back({w * (g == 1 ? 2.0 : 0.0), w, {g}});
    }
    return make_dataset({binary("G", "group flag")}, rows);
}

confloop::SynthConfig confounded_config() { return confloop::load_synth_config(configs_dir() / "synth_confounded.json"); }
confloop::SynthConfig schedule_config() { return confloop::load_synth_config(configs_dir() / "synth_schedule.json"); }

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

nlohmann::json load_json(const fs::path& path) { return nlohmann::json::parse(read_file(path)); }

confloop::KnowledgeBase corpus_kb() {
    confloop::KnowledgeBase kb;
    kb.index = std::make_shared<confloop::Index>(
        confloop::ingest(configs_dir() / "corpus", std::make_shared<confloop::HashedTokenEmbedding>(256)));
    return kb;
}

}  // namespace fixtures
