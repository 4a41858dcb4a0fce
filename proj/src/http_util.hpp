#pragma once

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace confloop::detail {

struct UrlParts {
    std::string origin;  // scheme://host[:port]
    std::string path;    // starts with '/'
};

UrlParts split_url(std::string_view url);

/// POST a JSON body and parse a JSON reply. Throws BackendError on transport
/// failures, non-2xx statuses and unparsable bodies.
nlohmann::json post_json(std::string_view url, const nlohmann::json& body, std::string_view bearer_token,
                         int timeout_seconds);

/// POST returning the raw body text (status checked).
std::string post_text(std::string_view url, const nlohmann::json& body, std::string_view bearer_token,
                      int timeout_seconds);

std::string env_or(const char* name, std::string fallback);

}  // namespace confloop::detail
