#pragma once

#include "qstar/error.hpp"

#include <json.hpp>

#include <string>

namespace qstar {

/// A JSON-over-HTTP endpoint with retry policy.
struct HttpEndpoint {
  std::string url;        ///< e.g. http://127.0.0.1:8080/v1/completions
  std::string auth_token; ///< sent as a Bearer token when non-empty
  int timeout_ms = 30000;
  int max_retries = 3;  ///< extra attempts after the first
  int backoff_ms = 200; ///< first retry delay; doubles on each further retry
};

/// Raised when an endpoint stays unreachable (or keeps failing with 429/5xx) after all retries,
/// or answers with a non-retriable status or malformed JSON.
class TransportError : public Error {
public:
  using Error::Error;
};

/// POSTs `body` and parses the JSON reply. Connection errors, 429 and 5xx are retried with
/// exponential backoff.
nlohmann::json post_json(const HttpEndpoint& endpoint, const nlohmann::json& body);

} // namespace qstar
