#include <gtest/gtest.h>

#include <png.h>

#include <fstream>

#include "esf/error.hpp"
#include "esf/image.hpp"
#include "helpers.hpp"

using namespace esf;

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::uint8_t> rgb_png(std::size_t w, std::size_t h) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(w);
  img.height = png_uint_32(h);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(w * h * 3, 90);
  png_alloc_size_t size = 0;
  png_image_write_to_memory(&img, nullptr, &size, 0, px.data(), 0, nullptr);
  std::vector<std::uint8_t> out(size);
  png_image_write_to_memory(&img, out.data(), &size, 0, px.data(), 0, nullptr);
  out.resize(size);
  return out;
}

}  // namespace

TEST(Pgm, DecodesRawPayload) {
  const std::string file = "P5\n2 2\n255\n";
  std::vector<std::uint8_t> bytes(file.begin(), file.end());
  for (int v : {0, 255, 128, 64}) bytes.push_back(std::uint8_t(v));
  const auto img = decode_pgm(bytes);
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 255, 128, 64}));
}

TEST(Pgm, HeaderCommentsAccepted) {
  const std::string file = "P5 # made by hand\n3 1\n# depth\n255\nabc";
  const auto img = decode_pgm(std::vector<std::uint8_t>(file.begin(), file.end()));
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{'a', 'b', 'c'}));
}

TEST(Pgm, RoundTripIsExact) {
  const auto img = fixtures::random_image(17, 9, 40);
  EXPECT_EQ(decode_pgm(encode_pgm(img)), img);
}

TEST(Pgm, RejectsBadInput) {
  const std::string ascii = "P2\n1 1\n255\n7\n";
  EXPECT_THROW(decode_pgm(std::vector<std::uint8_t>(ascii.begin(), ascii.end())), FormatError);
  const std::string deep = "P5\n1 1\n65535\n\x01\x02";
  EXPECT_THROW(decode_pgm(std::vector<std::uint8_t>(deep.begin(), deep.end())), FormatError);
  const std::string truncated = "P5\n4 4\n255\nab";
  EXPECT_THROW(decode_pgm(std::vector<std::uint8_t>(truncated.begin(), truncated.end())),
               FormatError);
}

TEST(Png, RoundTripIsExact) {
  const auto img = fixtures::random_image(23, 11, 41);
  EXPECT_EQ(decode_png(encode_png(img)), img);
}

TEST(Png, ColorRejectedWithFileName) {
  const auto dir = fixtures::scratch_dir("png_color");
  const auto path = dir / "color.png";
  const auto bytes = rgb_png(4, 4);
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                              std::streamsize(bytes.size()));
  try {
    load_image(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("color.png"), std::string::npos);
  }
}

TEST(ImageFiles, SaveAndLoadBothFormats) {
  const auto dir = fixtures::scratch_dir("image_files");
  const auto img = fixtures::random_image(8, 5, 42);
  save_image(dir / "a.pgm", img);
  save_image(dir / "a.png", img);
  EXPECT_EQ(load_image(dir / "a.pgm"), img);
  EXPECT_EQ(load_image(dir / "a.png"), img);
  EXPECT_EQ(read_bytes(dir / "a.png").at(1), 'P');
  EXPECT_THROW(load_image(dir / "missing.pgm"), IoError);
}

TEST(UnitConversion, RoundTripWithinOneLevel) {
  const auto img = fixtures::random_image(16, 16, 43);
  const auto unit = img.to_unit();
  EXPECT_EQ(GrayImage::from_unit(unit, 16, 16), img);
  const std::vector<double> wild{-0.5, 0.5, 1.5};
  EXPECT_EQ(GrayImage::from_unit(wild, 3, 1).pixels, (std::vector<std::uint8_t>{0, 128, 255}));
}

TEST(Resample, SameSizeIsIdentity) {
  const auto img = fixtures::random_image(12, 7, 44);
  EXPECT_EQ(resample(img, 12, 7), img);
}

TEST(Resample, ConstantStaysConstant) {
  const GrayImage img(9, 5, 77);
  for (auto [w, h] : {std::pair{18, 10}, {4, 3}, {1, 1}, {33, 2}})
    EXPECT_EQ(resample(img, w, h), GrayImage(w, h, 77));
}

TEST(Resample, UpsampledRampIsMonotone) {
  const GrayImage img(2, 1, std::vector<std::uint8_t>{0, 255});
  const auto up = resample(img, 4, 1);
  for (std::size_t x = 1; x < 4; ++x) EXPECT_GE(up.at(x, 0), up.at(x - 1, 0));
  EXPECT_EQ(up.pixels, (std::vector<std::uint8_t>{0, 64, 191, 255}));
}

TEST(Resample, HalvingAveragesPairs) {
  const std::vector<double> src{0, 2, 4, 6};
  const auto half = resample_bilinear<double>(src, 4, 1, 2, 1);
  EXPECT_EQ(half, (std::vector<double>{1, 5}));
}

TEST(Flip, IsAnInvolution) {
  const auto img = fixtures::random_image(7, 4, 45);
  EXPECT_EQ(flip_horizontal(img).at(0, 2), img.at(6, 2));
  EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
}

TEST(Psnr, KnownValues) {
  const GrayImage a(4, 4, 100);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  const GrayImage b(4, 4, 110);
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(255.0 * 255.0 / 100.0), 1e-12);
}
