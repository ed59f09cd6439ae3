#include <gtest/gtest.h>

#include <cmath>

#include "diar/datagen.hpp"
#include "diar/descriptors.hpp"
#include "diar/matching.hpp"

using namespace diar;

namespace {

Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Image out(h, w, img.channels());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(y + y0, x + x0, c);
  return out;
}

}  // namespace

TEST(PatchDescriptors, ArgumentChecks) {
  const Image img(16, 16, 3, 0.5f);
  EXPECT_THROW(patch_descriptors(img, 4), ShapeError);
  EXPECT_THROW(patch_descriptors(img, 17), ShapeError);
  EXPECT_THROW(patch_descriptors(img, 3, 0), ShapeError);
  const FeatureMap fm = patch_descriptors(img, 5, 3);
  EXPECT_EQ(fm.grid_h, 6u);
  EXPECT_EQ(fm.channels, 75u);
  EXPECT_EQ(fm.image_coord(2, 5), Vec2(15, 6));
}

TEST(PatchDescriptors, SinglePixelGrayIsZero) {
  const Image g = to_gray(procedural_base(12, 12, 1));
  const FeatureMap fm = patch_descriptors(g, 1);
  for (float v : fm.data) EXPECT_EQ(v, 0.0f);
}

TEST(PatchDescriptors, ConstantImageIsRejectedByMatching) {
  const Image flat(20, 20, 3, 0.4f);
  const KeypointMatrix km = pyramid_keypoints(flat, {1.0}, patch_provider(5));
  EXPECT_LT(km.x.cwiseAbs().maxCoeff(), 1e-6f);
  EXPECT_EQ(drop_degenerate(km).size(), 0u);
  EXPECT_THROW(score_matrix(km, km), ShapeError);
}

TEST(PatchDescriptors, SelfMatchAudit) {
  const Image img = procedural_base(64, 64, 31);
  const KeypointMatrix km = pyramid_keypoints(img, {1.0}, patch_provider(7));
  const KeypointMatrix nz = drop_degenerate(km);
  const ScoreMatrix s = score_matrix(nz, nz);
  std::size_t considered = 0, own = 0;
  for (Eigen::Index j = 0; j < s.s.rows(); ++j) {
    if (nz.x.row(j).norm() < 1e-3f) continue;  // flat neighbourhood
    ++considered;
    Eigen::Index best;
    s.s.row(j).maxCoeff(&best);
    own += best == j;
  }
  ASSERT_GT(considered, 3000u);
  EXPECT_GE(static_cast<double>(own) / considered, 0.99);
}

TEST(PatchDescriptors, TranslationEquivariantOnInterior) {
  const Image big = procedural_base(48, 48, 32);
  const Image a = crop(big, 0, 0, 40, 40), b = crop(big, 3, 5, 40, 40);
  const FeatureMap fa = patch_descriptors(a, 5), fb = patch_descriptors(b, 5);
  for (std::size_t i = 2; i + 2 + 3 < 40; ++i)
    for (std::size_t j = 2; j + 2 + 5 < 40; ++j)
      for (std::size_t c = 0; c < fa.channels; ++c) ASSERT_EQ(fb.row(i, j)[c], fa.row(i + 3, j + 5)[c]);
}

TEST(PatchDescriptors, Deterministic) {
  const Image img = procedural_base(30, 30, 33);
  EXPECT_EQ(patch_descriptors(img, 7, 2).data, patch_descriptors(img, 7, 2).data);
}

TEST(CnnDescriptors, ShapeContract) {
  const auto w = cnn_descriptor_params(3, 1);
  const FeatureMap fm = cnn_descriptors(procedural_base(128, 128, 34), w);
  EXPECT_EQ(fm.grid_h, 16u);
  EXPECT_EQ(fm.grid_w, 16u);
  EXPECT_EQ(fm.channels, 64u);
  EXPECT_EQ(fm.scale_x, 8.0);
  EXPECT_EQ(fm.offset_x, 3.5);
  for (float v : fm.data) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(fm.image_coord(15, 15), Vec2(123.5, 123.5));
}

TEST(CnnDescriptors, DeterministicAndSeeded) {
  const Image img = procedural_base(64, 64, 35);
  const auto w = cnn_descriptor_params(3, 2);
  EXPECT_EQ(cnn_descriptors(img, w).data, cnn_descriptors(img, w).data);
  EXPECT_NE(cnn_descriptors(img, cnn_descriptor_params(3, 3)).data, cnn_descriptors(img, w).data);
}

TEST(CnnDescriptors, MismatchedWeightsNamed) {
  const Image img = procedural_base(32, 32, 36);
  auto gray = cnn_descriptor_params(1, 0);
  try {
    cnn_descriptors(img, gray);
    FAIL() << "expected a mismatch";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("desc.conv1.w"), std::string::npos);
  }
  ParamStore<float> partial;
  partial.add("desc.conv1.w", cnn_descriptor_params(3, 0).get("desc.conv1.w"));
  try {
    cnn_descriptors(img, partial);
    FAIL() << "expected a mismatch";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("desc.conv3.b"), std::string::npos);
  }
}

TEST(CnnDescriptors, RandomWeightsTrackTranslation) {
  // Single draws range widely; the property is on the mean over draws.
  double total = 0;
  for (std::uint64_t t = 0; t < 10; ++t) {
    const Image big = procedural_base(144, 144, 37 + t);
    const Image a = crop(big, 8, 8, 128, 128), b = crop(big, 8, 12, 128, 128);  // b(x) = a(x + 4)
    const auto w = cnn_descriptor_params(3, 4 + t);
    const KeypointMatrix ka = drop_degenerate(pyramid_keypoints(a, {1.0}, cnn_provider(w)));
    const KeypointMatrix kb = drop_degenerate(pyramid_keypoints(b, {1.0}, cnn_provider(w)));
    const MatchSet m = mutual_matches(score_matrix(ka, kb), 0.0f);
    ASSERT_GT(m.size(), 20u);
    std::size_t good = 0;
    for (const auto& mt : m) {
      const Vec2 expect = ka.coords[mt.i1] - Vec2(4, 0);
      good += (kb.coords[mt.i2] - expect).cwiseAbs().maxCoeff() <= 8.0;
    }
    total += static_cast<double>(good) / m.size();
  }
  EXPECT_GE(total / 10, 0.70);
}

TEST(Pyramid, SingleScaleIsFlattening) {
  const Image img = procedural_base(20, 24, 38);
  const FeatureMap fm = patch_descriptors(img, 3, 2);
  const KeypointMatrix km = pyramid_keypoints(img, {1.0}, patch_provider(3, 2));
  ASSERT_EQ(km.size(), fm.grid_h * fm.grid_w);
  for (std::size_t i = 0; i < fm.grid_h; ++i)
    for (std::size_t j = 0; j < fm.grid_w; ++j) {
      const auto r = static_cast<Eigen::Index>(i * fm.grid_w + j);
      EXPECT_EQ(km.coords[r], fm.image_coord(i, j));
      for (std::size_t c = 0; c < fm.channels; ++c) EXPECT_EQ(km.x(r, c), fm.row(i, j)[c]);
    }
}

TEST(Pyramid, CountsAndCoordinates) {
  const Image img = procedural_base(128, 128, 39);
  const KeypointMatrix km = pyramid_keypoints(img, {1.0, 0.5}, patch_provider(7));
  EXPECT_EQ(km.size(), 128u * 128u + 64u * 64u);
  for (const auto& c : km.coords) {
    EXPECT_GE(c.x(), 0.0);
    EXPECT_GE(c.y(), 0.0);
    EXPECT_LE(c.x(), 127.0);
    EXPECT_LE(c.y(), 127.0);
  }
  EXPECT_THROW(pyramid_keypoints(img, {}, patch_provider(7)), ConfigError);
  EXPECT_THROW(pyramid_keypoints(img, {1.0, -0.5}, patch_provider(7)), ConfigError);
}

TEST(Pyramid, CellsMapWithinHalfACell) {
  const Image img = procedural_base(128, 96, 40);
  const std::size_t step = 2;
  for (double s : {1.0, 0.75, 0.5}) {
    const KeypointMatrix km = pyramid_keypoints(img, {s}, patch_provider(7, step));
    const Image level = s == 1.0 ? img : resize(img, s);
    const FeatureMap fm = patch_descriptors(level, 7, step);
    for (std::size_t i = 0; i < fm.grid_h; ++i)
      for (std::size_t j = 0; j < fm.grid_w; ++j) {
        const Vec2 c = km.coords[i * fm.grid_w + j];
        const double half = 0.5 * step / s + 1e-9;
        EXPECT_LE(std::fabs(c.x() - j * step / s), half);
        EXPECT_LE(std::fabs(c.y() - i * step / s), half);
      }
  }
}
