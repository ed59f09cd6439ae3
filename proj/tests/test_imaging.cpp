#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "diar/image.hpp"
#include "diar/rng.hpp"

using namespace diar;

namespace {

Image smooth_image(std::size_t h, std::size_t w, std::size_t c, double freq = 0.05) {
  Image img(h, w, c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k)
        img.at(y, x, k) = static_cast<float>(0.5 + 0.3 * std::sin(freq * x + 0.7 * k) * std::cos(freq * 0.8 * y));
  return img;
}

Image random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w, c);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

std::string temp_path(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST(Image, ShapeContract) {
  EXPECT_THROW(Image(0, 4, 3), ShapeError);
  EXPECT_THROW(Image(4, 4, 2), ShapeError);
  EXPECT_THROW(Image(2, 2, 1, std::vector<float>(3)), ShapeError);
  const Image img(2, 3, 3, 0.25f);
  EXPECT_EQ(img.size(), 18u);
  const Image clamped(1, 2, 1, std::vector<float>{-0.5f, 2.0f});
  EXPECT_EQ(clamped.at(0, 0), 0.0f);
  EXPECT_EQ(clamped.at(0, 1), 1.0f);
}

TEST(Ppm, WhitePixelBytes) {
  const std::string bytes = encode_ppm(Image(1, 1, 3, 1.0f));
  EXPECT_EQ(bytes, std::string("P6\n1 1\n255\n") + std::string(3, static_cast<char>(255)));
}

TEST(Ppm, RoundTripIsQuantizationExact) {
  for (std::size_t c : {1u, 3u}) {
    const Image img = random_image(7, 5, c, 10 + c);
    const auto path = temp_path("diar_rt_" + std::to_string(c) + ".ppm");
    write_ppm(img, path);
    const Image back = read_ppm(path);
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::fabs(back.data()[i] - img.data()[i]), 1.0f / 255.0f);
    EXPECT_EQ(back, quantized(img));
    write_ppm(back, path);
    EXPECT_EQ(read_ppm(path), back);
    std::filesystem::remove(path);
  }
}

TEST(Ppm, HeaderCommentsAccepted) {
  const std::string bytes = std::string("P5\n# comment\n2 1\n255\n") + '\x00' + '\xff';
  const Image img = decode_ppm(bytes);
  EXPECT_EQ(img.channels(), 1u);
  EXPECT_EQ(img.at(0, 1), 1.0f);
}

TEST(Ppm, MalformedInputsReportOffsets) {
  const std::string good = encode_ppm(Image(4, 4, 3, 0.5f));
  try {
    decode_ppm(good.substr(0, good.size() - 5), "trunc.ppm");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("trunc.ppm"), std::string::npos);
    EXPECT_NE(m.find("offset"), std::string::npos);
  }
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n000"), ParseError);
  EXPECT_THROW(decode_ppm("P6\n1 1\n65535\n123456"), ParseError);
  EXPECT_THROW(decode_ppm("P6\n1 x\n255\n"), ParseError);
  EXPECT_THROW(decode_ppm(""), ParseError);
  EXPECT_THROW(read_ppm("/nonexistent/diar.ppm"), IoError);
}

TEST(Bilinear, Examples) {
  Image img(2, 2, 1);
  img.at(0, 1) = 1.0f;
  img.at(1, 0) = 0.25f;
  img.at(1, 1) = 0.75f;
  auto s = bilinear_sample(img, 1, 1);
  EXPECT_TRUE(s.in_bounds);
  EXPECT_EQ(s.value[0], 0.75f);
  EXPECT_FLOAT_EQ(bilinear_sample(img, 0.5, 0).value[0], 0.5f);
  EXPECT_FLOAT_EQ(bilinear_sample(img, 0.5, 0.5).value[0], 0.5f);
  for (auto [x, y] : {std::pair{-0.01, 0.0}, {0.0, 1.01}, {2.0, 0.5}, {std::nan(""), 0.0}}) {
    s = bilinear_sample(img, x, y);
    EXPECT_FALSE(s.in_bounds);
    EXPECT_EQ(s.value[0], 0.0f);
  }
}

TEST(Bilinear, IntegerCoordinatesAreExact) {
  const Image img = random_image(9, 6, 3, 2);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 6; ++x)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(bilinear_sample(img, x, y).value[c], img.at(y, x, c));
}

TEST(Warp, IdentityIsExact) {
  const Image img = random_image(12, 17, 3, 3);
  const auto r = warp(img, Homography::identity());
  EXPECT_EQ(r.image, img);
  EXPECT_TRUE(r.mask.all());
}

TEST(Warp, IntegerTranslation) {
  const Image img = random_image(10, 12, 1, 4);
  const auto r = warp(img, Homography::translation(2, 3));
  for (std::size_t y = 0; y < 10; ++y)
    for (std::size_t x = 0; x < 12; ++x) {
      const bool inside = x + 2 < 12 && y + 3 < 10;
      EXPECT_EQ(r.mask.at(y, x), inside);
      if (inside) EXPECT_EQ(r.image.at(y, x), img.at(y + 3, x + 2));
      else EXPECT_EQ(r.image.at(y, x), 0.0f);
    }
}

TEST(Warp, RoundTripRecoversInterior) {
  const Image img = smooth_image(64, 64, 3);
  Mat3 m;
  m << 1.02, 0.03, -1.5, -0.02, 0.98, 2.0, 1e-4, -5e-5, 1.0;
  const Homography h(m);
  const auto fwd = warp(img, h);
  const auto back = warp(fwd.image, h.inverse());
  std::size_t checked = 0;
  for (std::size_t y = 4; y < 60; ++y)
    for (std::size_t x = 4; x < 60; ++x) {
      if (!back.mask.at(y, x)) continue;
      const Vec2 s = apply(h.inverse(), Vec2(x, y));
      if (s.x() < 1 || s.y() < 1 || s.x() > 62 || s.y() > 62 || !fwd.mask.at(std::size_t(s.y()), std::size_t(s.x())))
        continue;
      ++checked;
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(back.image.at(y, x, c), img.at(y, x, c), 2.0 / 255.0);
    }
  EXPECT_GT(checked, 2000u);
}

TEST(Warp, CompositionOnInterior) {
  const Image img = smooth_image(48, 48, 1);
  Mat3 a, b;
  a << 1.01, 0.02, 1.0, -0.01, 0.99, -0.5, 5e-5, 0, 1;
  b << 0.98, -0.03, 0.7, 0.02, 1.03, 1.2, 0, 8e-5, 1;
  const Homography h1(a), h2(b);
  const auto twice = warp(warp(img, h1).image, h2);
  const auto once = warp(img, h1 * h2);
  for (std::size_t y = 3; y < 45; ++y)
    for (std::size_t x = 3; x < 45; ++x) {
      const Vec2 mid = apply(h2, Vec2(x, y));
      if (mid.x() < 1 || mid.y() < 1 || mid.x() > 46 || mid.y() > 46 || !once.mask.at(y, x)) continue;
      EXPECT_NEAR(twice.image.at(y, x), once.image.at(y, x), 2.0 / 255.0);
    }
}

TEST(Resize, Examples) {
  const Image img = random_image(9, 11, 3, 5);
  EXPECT_EQ(resize(img, 1.0), img);
  const Image flat(20, 30, 3, 0.37f);
  for (double s : {0.3, 0.5, 0.75, 1.7}) {
    const Image r = resize(flat, s);
    for (float v : r.data()) EXPECT_FLOAT_EQ(v, 0.37f);
  }
  const Image smooth = smooth_image(64, 64, 1, 0.08);
  const Image round = resize(resize(smooth, 0.5), 2.0);
  ASSERT_TRUE(round.same_shape(smooth));
  for (std::size_t i = 0; i < smooth.size(); ++i) EXPECT_LT(std::fabs(round.data()[i] - smooth.data()[i]), 0.02);
  EXPECT_THROW(resize(img, 0.01), ShapeError);
  EXPECT_THROW(resize(img, -1.0), ShapeError);
  EXPECT_THROW(resize(img, 0.0), ShapeError);
}

TEST(Gray, LumaWeights) {
  Image img(1, 1, 3);
  img.at(0, 0, 1) = 1.0f;
  const Image g = to_gray(img);
  EXPECT_EQ(g.channels(), 1u);
  EXPECT_GT(g.at(0, 0), 0.5f);
  EXPECT_EQ(to_gray(g), g);
}
