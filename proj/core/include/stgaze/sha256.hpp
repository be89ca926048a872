#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace stgaze {

// FIPS 180-4 SHA-256; returns the lowercase hex digest.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

}  // namespace stgaze
