#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "ccd/datagen.hpp"
#include "ccd/imaging.hpp"

using namespace ccd;

namespace {

Homography rotation_about_center(double deg, double scale, int h, int w) {
  const double a = deg * std::numbers::pi / 180.0;
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  r(0, 0) = scale * std::cos(a);
  r(0, 1) = -scale * std::sin(a);
  r(1, 0) = scale * std::sin(a);
  r(1, 1) = scale * std::cos(a);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  return compose(Homography::translation(cx, cy),
                 compose(Homography::from_matrix(r), Homography::translation(-cx, -cy)));
}

BinaryMask block(int h, int w, int y0, int x0, int bh, int bw) {
  BinaryMask m(h, w);
  for (int y = y0; y < y0 + bh; ++y)
    for (int x = x0; x < x0 + bw; ++x) m.at(y, x) = 1;
  return m;
}

}  // namespace

TEST(Grayscale, WhiteRgbStaysWhite) {
  ImageBuffer img(4, 5, 3, 1.0f);
  const auto g = to_grayscale(img);
  EXPECT_EQ(g.channels, 1);
  for (float v : g.data) EXPECT_NEAR(v, 1.0f, 1e-6f);
}

TEST(Grayscale, SingleChannelIsIdentity) {
  ImageBuffer img(3, 3, 1);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(i) / 10.0f;
  EXPECT_EQ(to_grayscale(img), img);
}

TEST(Grayscale, PureRedIsLumaWeight) {
  ImageBuffer img(1, 1, 3);
  img.at(0, 0, 0) = 1.0f;
  EXPECT_NEAR(to_grayscale(img).data[0], 0.299f, 1e-6f);
}

TEST(Homography, ComposeWithIdentity) {
  const Homography h = rotation_about_center(10, 1.1, 32, 128);
  EXPECT_TRUE(compose(Homography::identity(), h).m.isApprox(h.m, 1e-15));
}

TEST(Homography, InvertTranslation) {
  const Homography inv = invert(Homography::translation(4, 0));
  EXPECT_LT((inv.m - Homography::translation(-4, 0).m).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Homography, InverseTimesMatrixIsIdentity) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const Homography h = sample_geometry(rng, GeometryRanges{}, 32, 128);
    const Eigen::Matrix3d prod = invert(h).m * h.m;
    // from_matrix scales the bottom-right entry to 1, so compare up to scale.
    const Eigen::Matrix3d normalized = prod / prod(2, 2);
    EXPECT_LT((normalized - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Homography, SingularMatrixRejected) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(1, 1) = 0.0;
  m(1, 0) = 0.0;
  m(1, 2) = 0.0;
  try {
    invert(Homography{m});
    FAIL();
  } catch (const RuntimeError& e) {
    EXPECT_STREQ(e.what(), "non-invertible transform");
  }
  EXPECT_THROW(warp_mask(BinaryMask(4, 4), Homography{m}), RuntimeError);
}

TEST(SampleGeometry, ZeroRangesGiveIdentity) {
  Rng rng(1);
  const Homography h = sample_geometry(rng, GeometryRanges::none(), 32, 128);
  EXPECT_LT((h.m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SampleGeometry, Deterministic) {
  Rng a(9), b(9);
  EXPECT_EQ(sample_geometry(a, GeometryRanges{}, 32, 128).m, sample_geometry(b, GeometryRanges{}, 32, 128).m);
}

TEST(SampleGeometry, RotationAnglesWithinRange) {
  GeometryRanges g = GeometryRanges::none();
  g.rotation_deg = 15.0;
  Rng rng(2);
  double lo = 0.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Homography h = sample_geometry(rng, g, 32, 128);
    const double deg = std::atan2(h.m(1, 0), h.m(0, 0)) * 180.0 / std::numbers::pi;
    ASSERT_LE(std::abs(deg), 15.0 + 1e-9);
    EXPECT_NEAR(std::hypot(h.m(0, 0), h.m(1, 0)), 1.0, 1e-12);
    lo = std::min(lo, deg);
    hi = std::max(hi, deg);
  }
  EXPECT_LT(lo, -14.0);
  EXPECT_GT(hi, 14.0);
}

TEST(WarpImage, IdentityIsBitwiseEqual) {
  Rng rng(4);
  ImageBuffer img(32, 128);
  for (auto& v : img.data) v = float(rng.uniform());
  EXPECT_EQ(warp_image(img, Homography::identity()), img);
}

TEST(WarpImage, IntegerTranslationMovesDelta) {
  ImageBuffer img(8, 16);
  img.at(3, 5) = 1.0f;
  const ImageBuffer out = warp_image(img, Homography::translation(4, 0));
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x) EXPECT_EQ(out.at(y, x), (y == 3 && x == 9) ? 1.0f : 0.0f);
}

TEST(WarpImage, RoundTripOnRampIsAccurateInInterior) {
  ImageBuffer img(32, 128);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 128; ++x) img.at(y, x) = float(0.1 + 0.5 * x / 127.0 + 0.3 * y / 31.0);
  const Homography h = rotation_about_center(6.0, 1.05, 32, 128);
  const ImageBuffer back = warp_image(warp_image(img, h), invert(h));
  for (int y = 8; y < 24; ++y)
    for (int x = 24; x < 104; ++x) EXPECT_LT(std::abs(back.at(y, x) - img.at(y, x)), 0.02f);
}

TEST(WarpMask, IdentityIsEqual) {
  const BinaryMask m = block(32, 128, 5, 7, 10, 40);
  EXPECT_EQ(warp_mask(m, Homography::identity()), m);
}

TEST(WarpMask, IntegerTranslationShiftsBlock) {
  const BinaryMask m = block(32, 128, 5, 7, 10, 40);
  const BinaryMask out = warp_mask(m, Homography::translation(3, 2));
  EXPECT_EQ(out, block(32, 128, 7, 10, 10, 40));
  EXPECT_EQ(out.area(), 400u);
}

TEST(WarpMask, TranslationCompositionLaw) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    BinaryMask m(20, 30);
    for (auto& v : m.data) v = rng.bernoulli(0.3);
    const Homography t1 = Homography::translation(rng.uniform_int(-6, 6), rng.uniform_int(-4, 4));
    const Homography t2 = Homography::translation(rng.uniform_int(-6, 6), rng.uniform_int(-4, 4));
    const BinaryMask twice = warp_mask(warp_mask(m, t1), t2);
    // Brute-force reference: shift each pixel twice with zero fill.
    BinaryMask ref(20, 30);
    const int dx1 = int(t1.m(0, 2)), dy1 = int(t1.m(1, 2)), dx2 = int(t2.m(0, 2)), dy2 = int(t2.m(1, 2));
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 30; ++x) {
        const int my = y - dy2, mx = x - dx2;
        if (my < 0 || my >= 20 || mx < 0 || mx >= 30) continue;
        const int sy = my - dy1, sx = mx - dx1;
        if (sy < 0 || sy >= 20 || sx < 0 || sx >= 30) continue;
        ref.at(y, x) = m.at(sy, sx);
      }
    EXPECT_EQ(twice, ref);
    // Pixels pushed out by t1 stay lost, so compare with the composed warp only
    // on pixels whose intermediate position is in frame.
    const BinaryMask composed = warp_mask(m, compose(t2, t1));
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 30; ++x) {
        const int my = y - dy2, mx = x - dx2;
        if (my >= 0 && my < 20 && mx >= 0 && mx < 30) EXPECT_EQ(composed.at(y, x), twice.at(y, x));
      }
  }
}

TEST(WarpMask, OutputIsBinary) {
  Rng rng(12);
  BinaryMask m(32, 128);
  for (auto& v : m.data) v = rng.bernoulli(0.5);
  const BinaryMask out = warp_mask(m, sample_geometry(rng, GeometryRanges{}, 32, 128));
  EXPECT_EQ(out.height, 32);
  EXPECT_EQ(out.width, 128);
  for (auto v : out.data) EXPECT_TRUE(v == 0 || v == 1);
}

TEST(ColorJitter, NoneIsIdentity) {
  Rng rng(1);
  ImageBuffer img(4, 4);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(i) / 16.0f;
  EXPECT_EQ(color_jitter(img, rng, ColorJitterConfig::none()), img);
}

TEST(ColorJitter, BrightnessShift) {
  const ImageBuffer out = adjust_brightness_contrast(ImageBuffer(4, 4, 1, 0.5f), 0.3, 1.0);
  for (float v : out.data) EXPECT_NEAR(v, 0.8f, 1e-6f);
}

TEST(ColorJitter, OutputAlwaysInUnitRange) {
  Rng rng(21);
  ColorJitterConfig cfg{0.9, 0.9, 0.5, 0.5};
  for (int t = 0; t < 200; ++t) {
    ImageBuffer img(6, 7, t % 2 ? 3 : 1);
    for (auto& v : img.data) v = float(rng.uniform());
    const ImageBuffer out = color_jitter(img, rng, cfg);
    EXPECT_TRUE(out.valid());
  }
}

TEST(ViewPair, NoGeometryGivesIdentityTransform) {
  Rng rng(3);
  AugmentConfig cfg;
  cfg.geometry = GeometryRanges::none();
  const GlyphSample s = render_sample(std::uint64_t{5}, DataGenConfig{});
  const ViewPair v = make_view_pair(s.image, rng, cfg);
  EXPECT_LT((v.pi_irr.m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(v.x_reg.same_shape(v.x_irr));
}

TEST(ViewPair, Deterministic) {
  const GlyphSample s = render_sample(std::uint64_t{5}, DataGenConfig{});
  Rng a(17), b(17);
  const ViewPair va = make_view_pair(s.image, a, AugmentConfig{});
  const ViewPair vb = make_view_pair(s.image, b, AugmentConfig{});
  EXPECT_EQ(va.x_reg, vb.x_reg);
  EXPECT_EQ(va.x_irr, vb.x_irr);
  EXPECT_EQ(va.pi_irr.m, vb.pi_irr.m);
}

TEST(ViewPair, WarpedMaskTracksWarpedGlyphs) {
  DataGenConfig dcfg;
  dcfg.text = {1.0, 1.0};
  dcfg.background = {0.0, 0.0};
  dcfg.dark_text_probability = 0.0;
  AugmentConfig acfg;
  acfg.color = ColorJitterConfig::none();
  Rng rng(99);
  for (int t = 0; t < 100; ++t) {
    const GlyphSample s = render_sample(std::uint64_t(t), dcfg);
    const ViewPair v = make_view_pair(s.image, rng, acfg);
    const BinaryMask warped = warp_mask(s.text_mask(), v.pi_irr);
    BinaryMask glyphs(v.x_irr.height, v.x_irr.width);
    for (std::size_t i = 0; i < glyphs.data.size(); ++i) glyphs.data[i] = v.x_irr.data[i] >= 0.5f;
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < glyphs.data.size(); ++i) {
      inter += warped.data[i] && glyphs.data[i];
      uni += warped.data[i] || glyphs.data[i];
    }
    if (uni == 0) continue;
    EXPECT_GE(double(inter) / double(uni), 0.95) << "sample " << t;
  }
}
