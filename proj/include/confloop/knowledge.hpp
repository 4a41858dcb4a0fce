#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace confloop {

struct ChunkPosition {
    std::string document;
    std::size_t chunk = 0;
    std::size_t offset = 0;

    friend bool operator==(const ChunkPosition&, const ChunkPosition&) = default;
};

struct DocumentChunk {
    std::string id;
    std::string source;
    std::string text;
    ChunkPosition position;

    friend bool operator==(const DocumentChunk&, const DocumentChunk&) = default;
};

enum class Provenance { rag, tool };
std::string_view to_string(Provenance p);

struct KnowledgeItem {
    DocumentChunk chunk;
    double retrieval_score = 0.0;
    std::optional<double> rerank_score;
    Provenance provenance = Provenance::rag;
};

nlohmann::ordered_json to_json(const KnowledgeItem& item);

/// Lowercased ASCII alphanumeric tokens, in order of appearance.
std::vector<std::string> tokenize(std::string_view text);

class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    /// Same text must always map to the same vector.
    virtual std::vector<double> embed(std::string_view text) const = 0;
    virtual std::size_t dimension() const = 0;
    /// Identifies the backend configuration in persisted indexes.
    virtual std::string name() const = 0;
};

/// Offline backend: token counts hashed (FNV-1a) into `dimension` buckets.
class HashedTokenEmbedding final : public EmbeddingBackend {
public:
    explicit HashedTokenEmbedding(std::size_t dimension = 256);
    std::vector<double> embed(std::string_view text) const override;
    std::size_t dimension() const override { return dimension_; }
    std::string name() const override;

private:
    std::size_t dimension_;
};

/// Remote embedding API: POST {"model", "input"} to the endpoint and read
/// data[0].embedding from the reply (OpenAI-compatible shape).
class RemoteEmbedding final : public EmbeddingBackend {
public:
    struct Config {
        std::string url;  // http://host:port/path
        std::string model;
        std::string api_key;
        std::size_t dimension = 0;
        int timeout_seconds = 30;
    };
    /// Reads url and key from CONFLOOP_EMBED_URL / CONFLOOP_EMBED_KEY when the
    /// config leaves them empty.
    explicit RemoteEmbedding(Config config);
    std::vector<double> embed(std::string_view text) const override;
    std::size_t dimension() const override { return config_.dimension; }
    std::string name() const override { return "remote:" + config_.model; }

private:
    Config config_;
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

struct ChunkingConfig {
    std::size_t size = 400;
    std::size_t overlap = 100;
};

/// Character offsets at which chunks start: 0, stride, 2*stride, ... < length.
std::vector<std::size_t> chunk_offsets(std::size_t length, const ChunkingConfig& chunking);

/// Exact-scan vector index; immutable once built.
class Index {
public:
    Index() = default;
    Index(std::shared_ptr<const EmbeddingBackend> backend, std::vector<DocumentChunk> chunks,
          std::vector<std::vector<double>> vectors);

    std::size_t size() const { return chunks_.size(); }
    bool empty() const { return chunks_.empty(); }
    const std::vector<DocumentChunk>& chunks() const { return chunks_; }
    const std::vector<std::vector<double>>& vectors() const { return vectors_; }
    const EmbeddingBackend* backend() const { return backend_.get(); }

    void save(const std::filesystem::path& path) const;
    static Index load(const std::filesystem::path& path, std::shared_ptr<const EmbeddingBackend> backend);

private:
    std::shared_ptr<const EmbeddingBackend> backend_;
    std::vector<DocumentChunk> chunks_;
    std::vector<std::vector<double>> vectors_;
};

/// Chunks every .txt file of corpus_dir (sorted by file name) and embeds the
/// chunks. A missing or empty directory yields an empty index and a warning.
Index ingest(const std::filesystem::path& corpus_dir, std::shared_ptr<const EmbeddingBackend> backend,
             const ChunkingConfig& chunking = {});

/// Top-k chunks by cosine similarity to the query, descending (ties by
/// position in the index).
std::vector<KnowledgeItem> retrieve(const Index& index, std::string_view query, std::size_t k = 10);

class Reranker {
public:
    virtual ~Reranker() = default;
    virtual double score(std::string_view query, const DocumentChunk& chunk) const = 0;
    virtual std::string name() const = 0;
};

/// Jaccard similarity between the query and chunk token sets.
class LexicalReranker final : public Reranker {
public:
    double score(std::string_view query, const DocumentChunk& chunk) const override;
    std::string name() const override { return "lexical-jaccard"; }
};

double token_jaccard(std::string_view a, std::string_view b);

/// Sets rerank_score and sorts by it descending; ties by retrieval_score then
/// chunk id.
std::vector<KnowledgeItem> rerank(std::vector<KnowledgeItem> items, std::string_view query, const Reranker& reranker);

std::vector<KnowledgeItem> top_k(std::vector<KnowledgeItem> items, std::size_t k);

class ToolSource {
public:
    virtual ~ToolSource() = default;
    /// At most k chunks.
    virtual std::vector<DocumentChunk> fetch(std::string_view query, std::size_t k) const = 0;
    virtual std::string name() const = 0;
};

/// Directory of .txt files ranked by how many distinct query tokens they
/// contain; files with no shared token are never returned.
class LocalFixtureTool final : public ToolSource {
public:
    explicit LocalFixtureTool(std::filesystem::path dir, std::string name = "local-fixture");
    std::vector<DocumentChunk> fetch(std::string_view query, std::size_t k) const override;
    std::string name() const override { return name_; }

private:
    std::string name_;
    std::vector<DocumentChunk> documents_;
};

/// Search service reached over HTTP: POST {"query", "k"} and read
/// {"results": [{"id", "source", "text"}]}. Stands in for literature search
/// (e.g. a PubMed proxy).
class HttpSearchTool final : public ToolSource {
public:
    HttpSearchTool(std::string url, std::string name = "http-search", int timeout_seconds = 30);
    std::vector<DocumentChunk> fetch(std::string_view query, std::size_t k) const override;
    std::string name() const override { return name_; }

private:
    std::string url_;
    std::string name_;
    int timeout_seconds_;
};

enum class SourcePreference { rag, tool };
std::string_view to_string(SourcePreference p);
SourcePreference parse_source_preference(std::string_view text);

struct GatherConfig {
    std::size_t k_retrieve = 10;
    std::size_t k_keep = 3;
    double min_effective_score = 0.05;
};

/// Observable pipeline shape of one gather call.
struct GatherTrace {
    std::string query;
    SourcePreference preference = SourcePreference::rag;
    bool rag_attempted = false;
    std::size_t retrieve_k = 0;
    std::size_t retrieved = 0;
    bool reranked = false;
    std::optional<double> best_rerank_score;
    std::size_t kept_k = 0;
    bool fallback = false;
    std::string tool;  // tool that produced the items, empty if none
    std::size_t tool_k = 0;
    std::size_t returned = 0;
    Provenance provenance = Provenance::rag;
    bool no_knowledge = false;

    /// e.g. "retrieve(10) -> rerank -> top_k(3)" or "... -> fallback -> tools(3)".
    std::string describe() const;
};

nlohmann::ordered_json to_json(const GatherTrace& trace);

/// Retrieval context handed to the agent.
struct KnowledgeBase {
    std::shared_ptr<const Index> index;
    std::vector<std::shared_ptr<const ToolSource>> tools;
    std::shared_ptr<const Reranker> reranker = std::make_shared<LexicalReranker>();
    GatherConfig config;
};

struct GatherResult {
    std::vector<KnowledgeItem> items;
    GatherTrace trace;
};

/// retrieve -> rerank -> top_k; falls back to the first tool that returns
/// anything (fetched with k_keep) when retrieval is empty or the best rerank
/// score is below min_effective_score, or when the query prefers tools.
GatherResult gather(const KnowledgeBase& kb, std::string_view query,
                    SourcePreference preference = SourcePreference::rag);

}  // namespace confloop
