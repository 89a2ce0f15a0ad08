#include "prosona/image_io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace prosona::io {

namespace {

struct WriteBuffer {
  std::vector<std::uint8_t>* out;
};

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* buf = static_cast<WriteBuffer*>(png_get_io_ptr(png));
  buf->out->insert(buf->out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

struct ReadBuffer {
  const std::vector<std::uint8_t>* in;
  std::size_t pos = 0;
};

void png_read_from_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* buf = static_cast<ReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + length > buf->in->size()) png_error(png, "truncated PNG stream");
  std::memcpy(data, buf->in->data() + buf->pos, length);
  buf->pos += length;
}

[[noreturn]] void png_error_to_exception(png_structp, png_const_charp msg) { throw FormatError(std::string("PNG: ") + msg); }
void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw ValidationError("encode_png: channels must be 1 or 3");
  if (r.pixels.size() != static_cast<std::size_t>(r.height) * r.width * r.channels)
    throw ValidationError("encode_png: pixel buffer size does not match dimensions");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_exception, png_warning_ignore);
  if (png == nullptr) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_write_struct(png, info); }
  } guard{&png, &info};
  WriteBuffer buf{&out};
  png_set_write_fn(png, &buf, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8,
               r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
  for (int y = 0; y < r.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(r.pixels.data() + stride * y));
  }
  png_write_end(png, nullptr);
  return out;
}

Raster decode_png(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError(origin + ": not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_exception, png_warning_ignore);
  if (png == nullptr) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};
  ReadBuffer buf{&bytes};
  png_set_read_fn(png, &buf, png_read_from_vector);
  Raster r;
  try {
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if ((color & PNG_COLOR_MASK_ALPHA) != 0) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    r.width = static_cast<int>(png_get_image_width(png, info));
    r.height = static_cast<int>(png_get_image_height(png, info));
    r.channels = static_cast<int>(png_get_channels(png, info));
    r.pixels.resize(static_cast<std::size_t>(r.width) * r.height * r.channels);
    std::vector<png_bytep> rows(static_cast<std::size_t>(r.height));
    for (int y = 0; y < r.height; ++y) rows[y] = r.pixels.data() + static_cast<std::size_t>(y) * r.width * r.channels;
    png_read_image(png, rows.data());
  } catch (const FormatError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return r;
}

void write_png(const std::filesystem::path& path, const Raster& r) {
  const auto bytes = encode_png(r);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Raster read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_png(bytes, path.string());
}

Raster to_raster(const Image& img) {
  Raster r{img.height, img.width, 1, std::vector<std::uint8_t>(img.size())};
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img.values[i], 0.0, 1.0);
    r.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return r;
}

Raster to_raster(const Mask& m) {
  Raster r{m.height, m.width, 1, std::vector<std::uint8_t>(m.size())};
  for (std::size_t i = 0; i < m.size(); ++i) r.pixels[i] = m.values[i] != 0 ? 255 : 0;
  return r;
}

Image image_from_raster(const Raster& r) {
  if (r.channels != 1) throw FormatError("expected a single-channel image");
  Image img(r.height, r.width);
  for (std::size_t i = 0; i < img.size(); ++i) img.values[i] = r.pixels[i] / 255.0;
  return img;
}

Mask mask_from_raster(const Raster& r, const std::string& origin) {
  if (r.channels != 1) throw FormatError(origin + ": expected a single-channel mask");
  Mask m(r.height, r.width);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto p = r.pixels[i];
    if (p != 0 && p != 255) throw FormatError(origin + ": mask pixels must be 0 or 255");
    m.values[i] = p == 255 ? 1 : 0;
  }
  return m;
}

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << bytes;
  if (!f) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return ss.str();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text(path)); }

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (c != '\n' && c != '\r' && c != ' ') clean.push_back(c);
  }
  if (clean.size() % 4 != 0) throw ValidationError("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw ValidationError("base64: invalid input");
  std::size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() >= 2 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace prosona::io
