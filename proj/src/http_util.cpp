#include "http_util.hpp"

#include <cstdlib>

#include <httplib.h>

#include "confloop/error.hpp"

namespace confloop::detail {

UrlParts split_url(std::string_view url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string_view::npos) throw ConfigError("URL without scheme: " + std::string(url));
    const auto path_start = url.find('/', scheme_end + 3);
    UrlParts parts;
    if (path_start == std::string_view::npos) {
        parts.origin = std::string(url);
        parts.path = "/";
    } else {
        parts.origin = std::string(url.substr(0, path_start));
        parts.path = std::string(url.substr(path_start));
    }
    return parts;
}

std::string post_text(std::string_view url, const nlohmann::json& body, std::string_view bearer_token,
                      int timeout_seconds) {
    const auto parts = split_url(url);
    httplib::Client client(parts.origin);
    client.set_connection_timeout(timeout_seconds, 0);
    client.set_read_timeout(timeout_seconds, 0);
    client.set_write_timeout(timeout_seconds, 0);
    httplib::Headers headers;
    if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + std::string(bearer_token));
    auto res = client.Post(parts.path, headers, body.dump(), "application/json");
    if (!res) throw BackendError("POST " + std::string(url) + " failed: " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300)
        throw BackendError("POST " + std::string(url) + " returned HTTP " + std::to_string(res->status));
    return res->body;
}

nlohmann::json post_json(std::string_view url, const nlohmann::json& body, std::string_view bearer_token,
                         int timeout_seconds) {
    const std::string text = post_text(url, body, bearer_token, timeout_seconds);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        throw BackendError("POST " + std::string(url) + " returned a non-JSON body");
    }
}

std::string env_or(const char* name, std::string fallback) {
    if (const char* v = std::getenv(name); v != nullptr && *v != '\0') return v;
    return fallback;
}

}  // namespace confloop::detail
