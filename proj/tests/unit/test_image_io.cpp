#include <doctest.h>

#include <random>

#include "prosona/image_io.hpp"

using namespace prosona;

TEST_SUITE("image_io") {
  TEST_CASE("PNG round trip is lossless for gray and RGB") {
    std::mt19937_64 rng(1);
    for (int ch : {1, 3}) {
      io::Raster r{7, 5, ch, std::vector<std::uint8_t>(7 * 5 * ch)};
      for (auto& p : r.pixels) p = static_cast<std::uint8_t>(rng());
      const auto back = io::decode_png(io::encode_png(r));
      CHECK(back.height == 7);
      CHECK(back.width == 5);
      CHECK(back.channels == ch);
      CHECK(back.pixels == r.pixels);
    }
  }

  TEST_CASE("PNG encoding is byte-deterministic") {
    io::Raster r{4, 4, 1, std::vector<std::uint8_t>(16, 77)};
    CHECK(io::encode_png(r) == io::encode_png(r));
  }

  TEST_CASE("garbage bytes are a format error") {
    CHECK_THROWS_AS((void)io::decode_png({1, 2, 3, 4}), FormatError);
  }

  TEST_CASE("image quantisation stays within half a level") {
    Image img(3, 3);
    for (std::size_t i = 0; i < img.size(); ++i) img.values[i] = static_cast<double>(i) / 8.0;
    const Image back = io::image_from_raster(io::to_raster(img));
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back.values[i] - img.values[i]) <= 0.5 / 255.0 + 1e-12);
  }

  TEST_CASE("mask rasters must be 0 or 255") {
    Mask m(2, 2);
    m.values = {0, 1, 1, 0};
    CHECK(io::mask_from_raster(io::to_raster(m), "m") == m);
    io::Raster bad{1, 1, 1, {128}};
    CHECK_THROWS_AS((void)io::mask_from_raster(bad, "bad"), FormatError);
  }

  TEST_CASE("sha256 and base64 known vectors") {
    CHECK(io::sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const std::vector<std::uint8_t> foobar{'f', 'o', 'o', 'b', 'a', 'r'};
    CHECK(io::base64_encode(foobar) == "Zm9vYmFy");
    CHECK(io::base64_encode({'f', 'o'}) == "Zm8=");
    CHECK(io::base64_decode("Zm9vYmFy") == foobar);
    CHECK_THROWS_AS((void)io::base64_decode("@@@"), ValidationError);
  }
}
