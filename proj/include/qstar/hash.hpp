#pragma once

#include <string>
#include <string_view>

namespace qstar {

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

/// Short content hash used for keys and fingerprints (first 16 hex digits of SHA-256).
std::string content_hash(std::string_view data);

} // namespace qstar
