#include "qstar/http.hpp"

#include <httplib.h>

#include <chrono>
#include <thread>

namespace qstar {

namespace {

struct SplitUrl {
  std::string origin; ///< scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw UsageError("endpoint url '" + url + "' lacks a scheme");
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

} // namespace

nlohmann::json post_json(const HttpEndpoint& endpoint, const nlohmann::json& body) {
  const auto [origin, path] = split_url(endpoint.url);
  const auto payload = body.dump();
  std::string last_error;
  for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    if (attempt > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long>(endpoint.backoff_ms) << (attempt - 1)));
    httplib::Client client(origin);
    const auto timeout = std::chrono::milliseconds(endpoint.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    if (!endpoint.auth_token.empty()) client.set_bearer_token_auth(endpoint.auth_token);
    auto res = client.Post(path, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw TransportError(endpoint.url + " answered HTTP " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(endpoint.url + " returned malformed JSON: " + e.what());
    }
  }
  throw TransportError(endpoint.url + " unavailable after " + std::to_string(endpoint.max_retries + 1) +
                       " attempts (" + last_error + ")");
}

} // namespace qstar
