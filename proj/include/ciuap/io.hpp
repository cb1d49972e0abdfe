#pragma once

#include "ciuap/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ciuap::io {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string sha256_hex(std::span<const char> bytes);
std::string sha256_file(const fs::path& path);
std::string sha256_text(const std::string& text);

std::vector<char> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, std::span<const char> bytes);
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

Json read_json(const fs::path& path);
void write_json(const fs::path& path, const Json& j);

// Throws DependencyError when the file is missing or its digest differs.
void verify_checksum(const fs::path& path, const std::string& expected_sha256);

// Portable float map: lossless float32 storage of a single (1, c, h, w)
// sample with c in {1, 3}.
void write_pfm(const fs::path& path, const Tensor& image);
Tensor read_pfm(const fs::path& path);

// 8-bit PNG of a single sample (c in {1, 3}); values are mapped linearly
// from [lo, hi] to [0, 255] and clamped.
void write_png(const fs::path& path, const Tensor& image, float lo, float hi);

} // namespace ciuap::io
