#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prosona/common.hpp"

namespace prosona::io {

/// 8-bit raster, 1 (gray) or 3 (RGB) channels, interleaved row-major.
struct Raster {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

[[nodiscard]] std::vector<std::uint8_t> encode_png(const Raster& r);
[[nodiscard]] Raster decode_png(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_png(const std::filesystem::path& path, const Raster& r);
[[nodiscard]] Raster read_png(const std::filesystem::path& path);

/// Image in [0,1] → 8-bit gray (round to nearest).
[[nodiscard]] Raster to_raster(const Image& img);
/// Mask {0,1} → 8-bit gray {0,255}.
[[nodiscard]] Raster to_raster(const Mask& m);
[[nodiscard]] Image image_from_raster(const Raster& r);
/// Accepts only 0/255 pixels; anything else is a FormatError.
[[nodiscard]] Mask mask_from_raster(const Raster& r, const std::string& origin);

void write_bytes(const std::filesystem::path& path, const std::string& bytes);
[[nodiscard]] std::string read_text(const std::filesystem::path& path);

[[nodiscard]] std::string sha256_hex(const void* data, std::size_t size);
[[nodiscard]] std::string sha256_hex(const std::string& s);
[[nodiscard]] std::string sha256_file(const std::filesystem::path& path);

[[nodiscard]] std::string base64_encode(const std::vector<std::uint8_t>& bytes);
[[nodiscard]] std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace prosona::io
