#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fmdt {

std::string base64_encode(const unsigned char* data, std::size_t len);
std::vector<unsigned char> base64_decode(const std::string& text);

std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& text);
std::string to_hex(std::uint64_t v, int digits = 16);

std::string read_file(const std::filesystem::path& file);
void write_file(const std::filesystem::path& file, const std::string& content);

// %.17g rendering, enough digits to round-trip a double exactly
std::string format_double(double v);

}  // namespace fmdt
