#include "confloop/knowledge.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "confloop/error.hpp"
#include "confloop/hash.hpp"
#include "confloop/log.hpp"
#include "http_util.hpp"

namespace confloop {
namespace {

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::vector<std::filesystem::path> text_files(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) return files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::set<std::string> token_set(std::string_view text) {
    auto tokens = tokenize(text);
    return {tokens.begin(), tokens.end()};
}

}  // namespace

std::string_view to_string(Provenance p) { return p == Provenance::rag ? "rag" : "tool"; }

std::string_view to_string(SourcePreference p) { return p == SourcePreference::rag ? "rag" : "tool"; }

SourcePreference parse_source_preference(std::string_view text) {
    if (text == "rag") return SourcePreference::rag;
    if (text == "tool") return SourcePreference::tool;
    throw SchemaError("unknown source preference '" + std::string(text) + "'");
}

nlohmann::ordered_json to_json(const KnowledgeItem& item) {
    nlohmann::ordered_json j;
    j["chunk_id"] = item.chunk.id;
    j["source"] = item.chunk.source;
    j["document"] = item.chunk.position.document;
    j["chunk_index"] = item.chunk.position.chunk;
    j["text"] = item.chunk.text;
    j["retrieval_score"] = item.retrieval_score;
    j["rerank_score"] = item.rerank_score ? nlohmann::ordered_json(*item.rerank_score) : nlohmann::ordered_json();
    j["provenance"] = to_string(item.provenance);
    return j;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) != 0 && c < 128) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

HashedTokenEmbedding::HashedTokenEmbedding(std::size_t dimension) : dimension_(dimension) {
    if (dimension_ == 0) throw ConfigError("embedding dimension must be positive");
}

std::vector<double> HashedTokenEmbedding::embed(std::string_view text) const {
    std::vector<double> v(dimension_, 0.0);
    for (const auto& token : tokenize(text)) v[fnv1a64(token) % dimension_] += 1.0;
    return v;
}

std::string HashedTokenEmbedding::name() const { return "hashed-token:" + std::to_string(dimension_); }

RemoteEmbedding::RemoteEmbedding(Config config) : config_(std::move(config)) {
    if (config_.url.empty()) config_.url = detail::env_or("CONFLOOP_EMBED_URL", "");
    if (config_.api_key.empty()) config_.api_key = detail::env_or("CONFLOOP_EMBED_KEY", "");
    if (config_.url.empty()) throw ConfigError("remote embedding needs a URL (config or CONFLOOP_EMBED_URL)");
}

std::vector<double> RemoteEmbedding::embed(std::string_view text) const {
    nlohmann::json body{{"model", config_.model}, {"input", std::string(text)}};
    const auto reply = detail::post_json(config_.url, body, config_.api_key, config_.timeout_seconds);
    std::vector<double> v;
    try {
        v = reply.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const nlohmann::json::exception&) {
        throw BackendError("embedding reply lacks data[0].embedding");
    }
    if (config_.dimension != 0 && v.size() != config_.dimension)
        throw BackendError("embedding dimension " + std::to_string(v.size()) + " != configured " +
                           std::to_string(config_.dimension));
    return v;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error("cosine_similarity: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<std::size_t> chunk_offsets(std::size_t length, const ChunkingConfig& chunking) {
    if (chunking.size == 0 || chunking.overlap >= chunking.size)
        throw ConfigError("chunking needs size > overlap >= 0");
    const std::size_t stride = chunking.size - chunking.overlap;
    std::vector<std::size_t> offsets;
    for (std::size_t start = 0; start < length; start += stride) offsets.push_back(start);
    return offsets;
}

Index::Index(std::shared_ptr<const EmbeddingBackend> backend, std::vector<DocumentChunk> chunks,
             std::vector<std::vector<double>> vectors)
    : backend_(std::move(backend)), chunks_(std::move(chunks)), vectors_(std::move(vectors)) {
    if (!backend_) throw ConfigError("index needs an embedding backend");
    if (chunks_.size() != vectors_.size()) throw DataError("index: chunk/vector count mismatch");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < chunks_.size(); ++i) {
        if (chunks_[i].text.empty()) throw DataError("index: empty chunk text");
        if (!ids.insert(chunks_[i].id).second) throw DataError("index: duplicate chunk id " + chunks_[i].id);
        if (vectors_[i].size() != backend_->dimension())
            throw DataError("index: vector dimension does not match backend");
    }
}

void Index::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json doc;
    doc["format"] = "confloop-index/1";
    doc["backend"] = backend_ ? backend_->name() : "";
    doc["dimension"] = backend_ ? backend_->dimension() : 0;
    auto chunks = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < chunks_.size(); ++i) {
        const auto& c = chunks_[i];
        chunks.push_back({{"id", c.id},
                          {"source", c.source},
                          {"document", c.position.document},
                          {"chunk", c.position.chunk},
                          {"offset", c.position.offset},
                          {"text", c.text},
                          {"vector", vectors_[i]}});
    }
    doc["chunks"] = std::move(chunks);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << doc.dump() << '\n';
}

Index Index::load(const std::filesystem::path& path, std::shared_ptr<const EmbeddingBackend> backend) {
    const auto doc = nlohmann::json::parse(read_text(path));
    if (doc.value("format", "") != "confloop-index/1") throw DataError("unsupported index format in " + path.string());
    if (backend && doc.at("backend").get<std::string>() != backend->name())
        throw ConfigError("index was built with backend " + doc.at("backend").get<std::string>());
    std::vector<DocumentChunk> chunks;
    std::vector<std::vector<double>> vectors;
    for (const auto& c : doc.at("chunks")) {
        DocumentChunk chunk;
        chunk.id = c.at("id").get<std::string>();
        chunk.source = c.at("source").get<std::string>();
        chunk.position.document = c.at("document").get<std::string>();
        chunk.position.chunk = c.at("chunk").get<std::size_t>();
        chunk.position.offset = c.at("offset").get<std::size_t>();
        chunk.text = c.at("text").get<std::string>();
        chunks.push_back(std::move(chunk));
        vectors.push_back(c.at("vector").get<std::vector<double>>());
    }
    return Index(std::move(backend), std::move(chunks), std::move(vectors));
}

Index ingest(const std::filesystem::path& corpus_dir, std::shared_ptr<const EmbeddingBackend> backend,
             const ChunkingConfig& chunking) {
    std::vector<DocumentChunk> chunks;
    std::vector<std::vector<double>> vectors;
    for (const auto& file : text_files(corpus_dir)) {
        const std::string text = read_text(file);
        const std::string doc = file.filename().string();
        std::size_t k = 0;
        for (auto offset : chunk_offsets(text.size(), chunking)) {
            DocumentChunk chunk;
            chunk.text = text.substr(offset, chunking.size);
            if (tokenize(chunk.text).empty()) continue;
            chunk.id = doc + "#" + std::to_string(k);
            chunk.source = "corpus";
            chunk.position = ChunkPosition{doc, k, offset};
            vectors.push_back(backend->embed(chunk.text));
            chunks.push_back(std::move(chunk));
            ++k;
        }
    }
    if (chunks.empty())
        log::warn("knowledge", "corpus " + corpus_dir.string() + " produced no chunks; retrieval will fall back to tools");
    return Index(std::move(backend), std::move(chunks), std::move(vectors));
}

std::vector<KnowledgeItem> retrieve(const Index& index, std::string_view query, std::size_t k) {
    if (k < 1) throw Error("retrieve: k must be >= 1");
    std::vector<KnowledgeItem> items;
    if (index.empty()) return items;
    const auto q = index.backend()->embed(query);
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) scored.emplace_back(cosine_similarity(q, index.vectors()[i]), i);
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    const std::size_t n = std::min(k, scored.size());
    for (std::size_t r = 0; r < n; ++r) {
        KnowledgeItem item;
        item.chunk = index.chunks()[scored[r].second];
        item.retrieval_score = scored[r].first;
        item.provenance = Provenance::rag;
        items.push_back(std::move(item));
    }
    return items;
}

double token_jaccard(std::string_view a, std::string_view b) {
    const auto sa = token_set(a);
    const auto sb = token_set(b);
    if (sa.empty() && sb.empty()) return 0.0;
    std::size_t shared = 0;
    for (const auto& t : sa) shared += sb.count(t);
    return static_cast<double>(shared) / static_cast<double>(sa.size() + sb.size() - shared);
}

double LexicalReranker::score(std::string_view query, const DocumentChunk& chunk) const {
    return token_jaccard(query, chunk.text);
}

std::vector<KnowledgeItem> rerank(std::vector<KnowledgeItem> items, std::string_view query, const Reranker& reranker) {
    for (auto& item : items) item.rerank_score = reranker.score(query, item.chunk);
    std::stable_sort(items.begin(), items.end(), [](const KnowledgeItem& a, const KnowledgeItem& b) {
        if (*a.rerank_score != *b.rerank_score) return *a.rerank_score > *b.rerank_score;
        if (a.retrieval_score != b.retrieval_score) return a.retrieval_score > b.retrieval_score;
        return a.chunk.id < b.chunk.id;
    });
    return items;
}

std::vector<KnowledgeItem> top_k(std::vector<KnowledgeItem> items, std::size_t k) {
    if (items.size() > k) items.resize(k);
    return items;
}

LocalFixtureTool::LocalFixtureTool(std::filesystem::path dir, std::string name) : name_(std::move(name)) {
    for (const auto& file : text_files(dir)) {
        DocumentChunk doc;
        doc.text = read_text(file);
        if (doc.text.empty()) continue;
        doc.position.document = file.filename().string();
        doc.id = name_ + ":" + doc.position.document;
        doc.source = name_;
        documents_.push_back(std::move(doc));
    }
}

std::vector<DocumentChunk> LocalFixtureTool::fetch(std::string_view query, std::size_t k) const {
    const auto q = token_set(query);
    std::vector<std::pair<std::size_t, std::size_t>> hits;  // (matches, doc)
    for (std::size_t d = 0; d < documents_.size(); ++d) {
        const auto doc_tokens = token_set(documents_[d].text);
        std::size_t matches = 0;
        for (const auto& t : q) matches += doc_tokens.count(t);
        if (matches > 0) hits.emplace_back(matches, d);
    }
    std::stable_sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<DocumentChunk> out;
    for (std::size_t r = 0; r < hits.size() && r < k; ++r) out.push_back(documents_[hits[r].second]);
    return out;
}

HttpSearchTool::HttpSearchTool(std::string url, std::string name, int timeout_seconds)
    : url_(std::move(url)), name_(std::move(name)), timeout_seconds_(timeout_seconds) {}

std::vector<DocumentChunk> HttpSearchTool::fetch(std::string_view query, std::size_t k) const {
    const auto reply = detail::post_json(url_, {{"query", std::string(query)}, {"k", k}}, "", timeout_seconds_);
    std::vector<DocumentChunk> out;
    try {
        for (const auto& r : reply.at("results")) {
            if (out.size() >= k) break;
            DocumentChunk c;
            c.id = name_ + ":" + r.at("id").get<std::string>();
            c.source = r.value("source", name_);
            c.text = r.at("text").get<std::string>();
            c.position.document = r.at("id").get<std::string>();
            if (!c.text.empty()) out.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception&) {
        throw BackendError("search reply from " + url_ + " is malformed");
    }
    return out;
}

std::string GatherTrace::describe() const {
    std::string s;
    auto step = [&s](const std::string& part) {
        if (!s.empty()) s += " -> ";
        s += part;
    };
    if (preference == SourcePreference::tool) step("prefer(tool)");
    if (rag_attempted) {
        step("retrieve(" + std::to_string(retrieve_k) + ")");
        if (reranked) step("rerank");
        if (kept_k > 0 && !fallback) step("top_k(" + std::to_string(kept_k) + ")");
    }
    if (fallback) step("fallback");
    if (!tool.empty()) step("tools(" + std::to_string(tool_k) + ")");
    if (no_knowledge) step("none");
    return s;
}

nlohmann::ordered_json to_json(const GatherTrace& t) {
    nlohmann::ordered_json j;
    j["query"] = t.query;
    j["preference"] = to_string(t.preference);
    j["pipeline"] = t.describe();
    j["rag_attempted"] = t.rag_attempted;
    j["retrieve_k"] = t.retrieve_k;
    j["retrieved"] = t.retrieved;
    j["reranked"] = t.reranked;
    j["best_rerank_score"] = t.best_rerank_score ? nlohmann::ordered_json(*t.best_rerank_score) : nlohmann::ordered_json();
    j["kept_k"] = t.kept_k;
    j["fallback"] = t.fallback;
    j["tool"] = t.tool;
    j["tool_k"] = t.tool_k;
    j["returned"] = t.returned;
    j["provenance"] = to_string(t.provenance);
    j["no_knowledge"] = t.no_knowledge;
    return j;
}

GatherResult gather(const KnowledgeBase& kb, std::string_view query, SourcePreference preference) {
    GatherResult result;
    auto& trace = result.trace;
    trace.query = std::string(query);
    trace.preference = preference;
    const auto& cfg = kb.config;

    auto run_tools = [&]() -> bool {
        for (const auto& tool : kb.tools) {
            std::vector<DocumentChunk> chunks;
            try {
                chunks = tool->fetch(query, cfg.k_keep);
            } catch (const Error& e) {
                log::warn("knowledge", "tool " + tool->name() + " failed: " + e.what());
                continue;
            }
            if (chunks.empty()) continue;
            if (chunks.size() > cfg.k_keep) chunks.resize(cfg.k_keep);
            trace.tool = tool->name();
            trace.tool_k = cfg.k_keep;
            result.items.clear();
            for (auto& c : chunks) {
                KnowledgeItem item;
                item.chunk = std::move(c);
                item.provenance = Provenance::tool;
                result.items.push_back(std::move(item));
            }
            trace.provenance = Provenance::tool;
            return true;
        }
        return false;
    };

    auto run_rag = [&]() -> bool {
        if (!kb.index) return false;
        trace.rag_attempted = true;
        trace.retrieve_k = cfg.k_retrieve;
        auto items = retrieve(*kb.index, query, cfg.k_retrieve);
        trace.retrieved = items.size();
        if (items.empty()) return false;
        items = rerank(std::move(items), query, *kb.reranker);
        trace.reranked = true;
        trace.best_rerank_score = items.front().rerank_score;
        if (*items.front().rerank_score < cfg.min_effective_score) return false;
        trace.kept_k = cfg.k_keep;
        result.items = top_k(std::move(items), cfg.k_keep);
        trace.provenance = Provenance::rag;
        return true;
    };

    bool ok = false;
    if (preference == SourcePreference::tool) {
        ok = run_tools() || run_rag();
    } else {
        ok = run_rag();
        if (!ok) {
            trace.fallback = true;
            ok = run_tools();
        }
    }
    if (!ok) {
        result.items.clear();
        trace.no_knowledge = true;
        log::info("knowledge", "no knowledge for query: " + std::string(query));
    }
    trace.returned = result.items.size();
    return result;
}

}  // namespace confloop
