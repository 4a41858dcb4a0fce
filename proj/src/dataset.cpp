#include "confloop/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "confloop/error.hpp"
#include "confloop/log.hpp"
#include "confloop/random.hpp"

namespace confloop {
namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::optional<double> parse_double(std::string_view text) {
    text = trim(text);
    if (text.empty()) return std::nullopt;
    double value = 0.0;
    const char* first = text.data();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(value)) return std::nullopt;
    return value;
}

// Minimal RFC 4180 field splitter: quoted fields with doubled quotes.
std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    fields.push_back(std::move(field));
    return fields;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string format_number(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    return out + "\"";
}

void validate_meta(const std::vector<CovariateMeta>& meta) {
    std::set<std::string, std::less<>> seen;
    for (const auto& m : meta) {
        if (m.name.empty()) throw DataError("covariate with empty name");
        if (m.name == "id" || m.name == "y" || m.name == "w")
            throw DataError("covariate name '" + m.name + "' collides with a reserved column");
        if (!seen.insert(m.name).second) throw DataError("duplicate covariate name " + m.name);
        switch (m.kind) {
            case CovariateKind::binary:
                if (m.levels.size() != 2)
                    throw DataError("binary covariate " + m.name + " must have exactly two levels");
                break;
            case CovariateKind::categorical:
                if (m.levels.empty())
                    throw DataError("categorical covariate " + m.name + " has no levels");
                break;
            case CovariateKind::continuous:
                if (!m.levels.empty())
                    throw DataError("continuous covariate " + m.name + " must not list levels");
                break;
        }
        std::set<std::string> levels(m.levels.begin(), m.levels.end());
        if (levels.size() != m.levels.size()) throw DataError("duplicate level in covariate " + m.name);
    }
}

}  // namespace

std::string_view to_string(CovariateKind kind) {
    switch (kind) {
        case CovariateKind::binary: return "binary";
        case CovariateKind::categorical: return "categorical";
        case CovariateKind::continuous: return "continuous";
    }
    return "continuous";
}

CovariateKind parse_covariate_kind(std::string_view text) {
    if (text == "binary") return CovariateKind::binary;
    if (text == "categorical") return CovariateKind::categorical;
    if (text == "continuous") return CovariateKind::continuous;
    throw DataError("unknown covariate kind '" + std::string(text) + "'");
}

Dataset::Dataset(std::vector<CovariateMeta> meta, std::vector<std::string> ids,
                 std::vector<double> outcomes, std::vector<int> treatments,
                 std::vector<std::vector<double>> columns)
    : meta_(std::move(meta)),
      ids_(std::move(ids)),
      outcomes_(std::move(outcomes)),
      treatments_(std::move(treatments)),
      columns_(std::move(columns)) {
    validate_meta(meta_);
    const std::size_t n = ids_.size();
    if (outcomes_.size() != n || treatments_.size() != n)
        throw DataError("outcome/treatment length does not match id count");
    if (columns_.size() != meta_.size()) throw DataError("column count does not match metadata");
    for (std::size_t c = 0; c < meta_.size(); ++c) {
        name_index_.emplace(meta_[c].name, c);
        if (columns_[c].size() != n) throw DataError("column " + meta_[c].name + " has wrong length");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!id_index_.emplace(ids_[i], i).second)
            throw DataError("duplicate id '" + ids_[i] + "' at row " + std::to_string(i + 1));
        if (treatments_[i] != 0 && treatments_[i] != 1)
            throw DataError("row " + std::to_string(i + 1) + ": treatment must be 0 or 1");
        if (!std::isfinite(outcomes_[i]))
            throw DataError("row " + std::to_string(i + 1) + ": outcome is not finite");
        for (std::size_t c = 0; c < meta_.size(); ++c) {
            const double v = columns_[c][i];
            if (meta_[c].is_discrete()) {
                if (v < 0 || v != std::floor(v) || v >= static_cast<double>(meta_[c].levels.size()))
                    throw DataError("row " + std::to_string(i + 1) + ": value of " + meta_[c].name +
                                    " is not a valid level code");
            } else if (!std::isfinite(v)) {
                throw DataError("row " + std::to_string(i + 1) + ": value of " + meta_[c].name +
                                " is not finite");
            }
        }
    }
}

std::optional<std::size_t> Dataset::covariate_index(std::string_view name) const {
    auto it = name_index_.find(name);
    if (it == name_index_.end()) return std::nullopt;
    return it->second;
}

std::size_t Dataset::require_covariate(std::string_view name) const {
    auto idx = covariate_index(name);
    if (!idx) throw DataError("unknown covariate " + std::string(name));
    return *idx;
}

const CovariateMeta& Dataset::covariate(std::string_view name) const {
    return meta_[require_covariate(name)];
}

std::optional<SampleIndex> Dataset::find_id(std::string_view id) const {
    auto it = id_index_.find(id);
    if (it == id_index_.end()) return std::nullopt;
    return it->second;
}

Sample Dataset::sample(SampleIndex i) const {
    return Sample{ids_[i], outcomes_[i], treatments_[i], covariate_map(i)};
}

CovariateMap Dataset::covariate_map(SampleIndex i) const {
    CovariateMap m;
    for (std::size_t c = 0; c < meta_.size(); ++c) m.emplace(meta_[c].name, columns_[c][i]);
    return m;
}

std::string Dataset::format_value(std::size_t column, double code) const {
    const auto& m = meta_[column];
    if (m.is_discrete()) {
        const auto idx = static_cast<std::size_t>(code);
        if (code >= 0 && idx < m.levels.size()) return m.levels[idx];
    }
    return format_number(code);
}

double Dataset::parse_value(std::size_t column, std::string_view text) const {
    const auto& m = meta_[column];
    text = trim(text);
    if (m.is_discrete()) {
        for (std::size_t l = 0; l < m.levels.size(); ++l)
            if (m.levels[l] == text) return static_cast<double>(l);
        throw DataError("value '" + std::string(text) + "' is not a level of " + m.name);
    }
    auto v = parse_double(text);
    if (!v) throw DataError("value '" + std::string(text) + "' of " + m.name + " is not a number");
    return *v;
}

IdSet Dataset::all_ids() const {
    IdSet ids(size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return ids;
}

std::vector<CovariateMeta> parse_metadata(const nlohmann::json& doc) {
    if (!doc.is_array()) throw DataError("metadata must be a JSON array");
    std::vector<CovariateMeta> meta;
    for (const auto& entry : doc) {
        if (!entry.is_object() || !entry.contains("name") || !entry.contains("kind"))
            throw DataError("metadata entry needs at least 'name' and 'kind'");
        CovariateMeta m;
        m.name = entry.at("name").get<std::string>();
        m.description = entry.value("description", std::string{});
        m.kind = parse_covariate_kind(entry.at("kind").get<std::string>());
        if (entry.contains("levels")) {
            for (const auto& level : entry.at("levels"))
                m.levels.push_back(level.is_string() ? level.get<std::string>() : level.dump());
        }
        meta.push_back(std::move(m));
    }
    validate_meta(meta);
    return meta;
}

nlohmann::ordered_json metadata_to_json(const std::vector<CovariateMeta>& meta) {
    auto doc = nlohmann::ordered_json::array();
    for (const auto& m : meta) {
        nlohmann::ordered_json e;
        e["name"] = m.name;
        e["description"] = m.description;
        e["kind"] = to_string(m.kind);
        e["levels"] = m.levels;
        doc.push_back(std::move(e));
    }
    return doc;
}

std::vector<CovariateMeta> load_metadata(const std::filesystem::path& meta_path) {
    const std::string text = read_file(meta_path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("metadata " + meta_path.string() + ": " + e.what());
    }
    return parse_metadata(doc);
}

Dataset parse_dataset(std::string_view csv_text, std::vector<CovariateMeta> meta) {
    validate_meta(meta);
    std::vector<std::string_view> lines;
    {
        std::size_t start = 0;
        while (start <= csv_text.size()) {
            std::size_t end = csv_text.find('\n', start);
            if (end == std::string_view::npos) end = csv_text.size();
            std::string_view line = csv_text.substr(start, end - start);
            if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
            lines.push_back(line);
            start = end + 1;
        }
        while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
    }
    if (lines.empty()) throw DataError("empty CSV: missing header row");

    std::string_view header_line = lines[0];
    if (header_line.starts_with("\xEF\xBB\xBF")) header_line.remove_prefix(3);
    auto header = split_csv_line(header_line);
    for (auto& h : header) h = std::string(trim(h));

    std::map<std::string, std::size_t, std::less<>> position;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (!position.emplace(header[i], i).second) throw DataError("duplicate column " + header[i]);
    }
    for (const char* required : {"id", "y", "w"})
        if (!position.contains(required)) throw DataError(std::string("missing column ") + required);

    std::map<std::string, std::size_t, std::less<>> meta_index;
    for (std::size_t c = 0; c < meta.size(); ++c) meta_index.emplace(meta[c].name, c);
    for (const auto& h : header) {
        if (h == "id" || h == "y" || h == "w") continue;
        if (!meta_index.contains(h)) throw DataError("unknown covariate " + h);
    }
    for (const auto& m : meta)
        if (!position.contains(m.name)) throw DataError("missing column " + m.name);

    const std::size_t rows = lines.size() - 1;
    std::vector<std::string> ids;
    std::vector<double> y;
    std::vector<int> w;
    std::vector<std::vector<double>> columns(meta.size());
    ids.reserve(rows);
    y.reserve(rows);
    w.reserve(rows);
    for (auto& col : columns) col.reserve(rows);
    std::set<std::string, std::less<>> seen_ids;

    const std::size_t pid = position.at("id"), py = position.at("y"), pw = position.at("w");
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const std::string row = "row " + std::to_string(r);
        auto fields = split_csv_line(lines[r]);
        if (fields.size() != header.size())
            throw DataError(row + ": expected " + std::to_string(header.size()) + " fields, found " +
                            std::to_string(fields.size()));
        std::string id(trim(fields[pid]));
        if (id.empty()) throw DataError(row + ": empty id");
        if (!seen_ids.insert(id).second) throw DataError(row + ": duplicate id '" + id + "'");
        auto outcome = parse_double(fields[py]);
        if (!outcome) throw DataError(row + ": y is not a number");
        auto treat = parse_double(fields[pw]);
        if (!treat || (*treat != 0.0 && *treat != 1.0))
            throw DataError(row + ": w must be 0 or 1, found '" + std::string(trim(fields[pw])) + "'");
        ids.push_back(std::move(id));
        y.push_back(*outcome);
        w.push_back(static_cast<int>(*treat));
        for (std::size_t c = 0; c < meta.size(); ++c) {
            const auto& m = meta[c];
            std::string_view cell = trim(fields[position.at(m.name)]);
            if (m.is_discrete()) {
                auto it = std::find(m.levels.begin(), m.levels.end(), cell);
                if (it == m.levels.end())
                    throw DataError(row + ": value '" + std::string(cell) + "' is not a level of " + m.name);
                columns[c].push_back(static_cast<double>(it - m.levels.begin()));
            } else {
                auto v = parse_double(cell);
                if (!v) throw DataError(row + ": value of " + m.name + " is not a number");
                columns[c].push_back(*v);
            }
        }
    }
    return Dataset(std::move(meta), std::move(ids), std::move(y), std::move(w), std::move(columns));
}

Dataset load_dataset(const std::filesystem::path& data_path, const std::filesystem::path& meta_path) {
    auto meta = load_metadata(meta_path);
    const std::string text = read_file(data_path);
    try {
        return parse_dataset(text, std::move(meta));
    } catch (const DataError& e) {
        throw DataError(data_path.string() + ": " + e.what());
    }
}

std::string dataset_to_csv(const Dataset& ds) {
    std::string out = "id,y,w";
    for (const auto& m : ds.meta()) out += "," + csv_escape(m.name);
    out += '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out += csv_escape(ds.id(i));
        out += ',' + format_number(ds.outcome(i));
        out += ',' + std::to_string(ds.treatment(i));
        for (std::size_t c = 0; c < ds.covariate_count(); ++c)
            out += ',' + csv_escape(ds.format_value(c, ds.value(i, c)));
        out += '\n';
    }
    return out;
}

DataSplit split_dataset(const Dataset& ds, const SplitRatios& ratios, std::uint64_t seed) {
    const double parts[3] = {ratios.train, ratios.estimation, ratios.test};
    for (double r : parts)
        if (!(r >= 0.0) || r > 1.0) throw ConfigError("split ratios must lie in [0, 1]");
    if (std::abs(parts[0] + parts[1] + parts[2] - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");
    if (ds.empty()) throw DataError("cannot split an empty dataset");

    const std::size_t n = ds.size();
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    const auto share = [n](double r) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
    };
    const std::size_t n_train = share(parts[0]);
    const std::size_t n_est = std::min(share(parts[1]), n - n_train);
    const std::size_t n_test = n - n_train - n_est;
    const std::size_t sizes[3] = {n_train, n_est, n_test};
    const char* names[3] = {"train", "estimation", "test"};
    for (int s = 0; s < 3; ++s)
        if (parts[s] > 0.0 && sizes[s] == 0)
            throw DataError(std::string(names[s]) + " split is empty for n=" + std::to_string(n));

    IdSet order = ds.all_ids();
    Rng rng(seed);
    rng.shuffle(std::span<SampleIndex>(order));

    DataSplit split;
    split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.estimation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                            order.begin() + static_cast<std::ptrdiff_t>(n_train + n_est));
    split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_est), order.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.estimation.begin(), split.estimation.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

std::string stratum_key(const RestrictionContext& ctx, const Dataset& ds) {
    std::string key;
    for (const auto& name : ctx.confounders) {
        if (!key.empty()) key += '&';
        const auto col = ds.require_covariate(name);
        auto it = ctx.stratum.find(name);
        key += name + "=" + (it == ctx.stratum.end() ? std::string("?") : ds.format_value(col, it->second));
    }
    return key;
}

bool in_stratum(const Dataset& ds, SampleIndex i, const RestrictionContext& ctx) {
    for (const auto& [name, level] : ctx.stratum)
        if (ds.value(i, ds.require_covariate(name)) != level) return false;
    return true;
}

bool in_stratum(const CovariateMap& x, const RestrictionContext& ctx) {
    for (const auto& [name, level] : ctx.stratum) {
        auto it = x.find(name);
        if (it == x.end() || it->second != level) return false;
    }
    return true;
}

RestrictionResult apply_restriction(std::span<const SampleIndex> ids, const RestrictionContext& ctx,
                                    const Dataset& ds, std::size_t min_stratum_size) {
    std::vector<std::size_t> cols;
    std::set<std::string> unique_names;
    for (const auto& name : ctx.confounders) {
        const auto col = ds.require_covariate(name);
        if (!ds.meta()[col].is_discrete())
            throw RestrictionError("unsupported restriction on continuous covariate " + name);
        if (!unique_names.insert(name).second)
            throw RestrictionError("confounder " + name + " listed twice");
        cols.push_back(col);
    }

    // Joint level codes -> members, ordered lexicographically by level index.
    std::map<std::vector<double>, IdSet> groups;
    for (SampleIndex i : ids) {
        std::vector<double> levels;
        levels.reserve(cols.size());
        for (auto c : cols) levels.push_back(ds.value(i, c));
        groups[levels].push_back(i);
    }

    RestrictionResult result;
    for (auto& [levels, members] : groups) {
        std::sort(members.begin(), members.end());
        members.erase(std::unique(members.begin(), members.end()), members.end());
        RestrictionContext stratum_ctx;
        stratum_ctx.confounders = ctx.confounders;
        for (std::size_t k = 0; k < cols.size(); ++k) stratum_ctx.stratum.emplace(ctx.confounders[k], levels[k]);
        std::string key = stratum_key(stratum_ctx, ds);
        if (members.size() < min_stratum_size) {
            log::warn("dataset", "dropping stratum " + (key.empty() ? std::string("(all)") : key) + " with " +
                                     std::to_string(members.size()) + " samples (< " +
                                     std::to_string(min_stratum_size) + ")");
            result.dropped.insert(result.dropped.end(), members.begin(), members.end());
            continue;
        }
        result.strata.emplace(std::move(key), Stratum{std::move(stratum_ctx), std::move(members)});
    }
    std::sort(result.dropped.begin(), result.dropped.end());
    return result;
}

std::vector<std::string> remaining_covariates(const Dataset& ds, const std::vector<std::string>& validated) {
    std::set<std::string, std::less<>> excluded;
    for (const auto& name : validated) {
        ds.require_covariate(name);
        excluded.insert(name);
    }
    std::vector<std::string> out;
    for (const auto& m : ds.meta())
        if (!excluded.contains(m.name)) out.push_back(m.name);
    return out;
}

}  // namespace confloop
