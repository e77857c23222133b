#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ccd/checkpoint.hpp"
#include "ccd/datagen.hpp"
#include "ccd/model.hpp"
#include "ccd/pseudolabel.hpp"

using namespace ccd;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.encoder.embed_dim = 24;
  c.encoder.depth = 3;
  c.encoder.heads = 2;
  c.encoder.input_h = 16;
  c.encoder.input_w = 32;
  c.head.seg_channels = 4;
  c.head.proj_hidden = 32;
  c.head.proj_bottleneck = 16;
  c.head.out_dim = 40;
  return c;
}

ImageBuffer random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  ImageBuffer img(h, w);
  for (auto& v : img.data) v = float(rng.uniform());
  return img;
}

BinaryMask rect(int h, int w, int y0, int x0, int bh, int bw) {
  BinaryMask m(h, w);
  for (int y = y0; y < y0 + bh; ++y)
    for (int x = x0; x < x0 + bw; ++x) m.at(y, x) = 1;
  return m;
}

FeatureGrid<double> random_grid(int h, int w, int d, std::uint64_t seed) {
  FeatureGrid<double> g{h, w, d, Mat<double>(h * w, d)};
  Rng rng(seed);
  for (int i = 0; i < g.data.size(); ++i) g.data.data()[i] = rng.normal();
  return g;
}

}  // namespace

TEST(Encoder, VitTinyShapes) {
  ModelConfig cfg;
  cfg.encoder = EncoderConfig::preset("tiny");
  EXPECT_EQ(cfg.encoder.embed_dim, 192);
  EXPECT_EQ(cfg.encoder.depth, 12);
  EXPECT_EQ(cfg.encoder.heads, 3);
  EXPECT_EQ(cfg.encoder.tokens(), 256);
  const auto p = init_params(cfg, 1);
  const Model<float> m(cfg, p);
  const auto out = m.encoder.forward(random_image(32, 128, 2), p);
  EXPECT_EQ(out.features.h, 8);
  EXPECT_EQ(out.features.w, 32);
  EXPECT_EQ(out.features.data.rows(), 256);
  EXPECT_EQ(out.features.data.cols(), 192);
  for (const auto& t : out.taps) {
    EXPECT_EQ(t.h, 8);
    EXPECT_EQ(t.w, 32);
    EXPECT_EQ(t.data.cols(), 192);
  }
  EXPECT_EQ(cfg.encoder.tap_blocks(), (std::array<int, 3>{2, 4, 6}));
}

TEST(Encoder, PresetsFollowTable) {
  const auto s = EncoderConfig::preset("small");
  EXPECT_EQ(s.embed_dim, 384);
  EXPECT_EQ(s.heads, 6);
  const auto b = EncoderConfig::preset("base");
  EXPECT_EQ(b.embed_dim, 512);
  EXPECT_EQ(b.heads, 8);
  EXPECT_THROW(EncoderConfig::preset("huge"), ValidationError);
}

TEST(Encoder, DeterministicAndPerSample) {
  const ModelConfig cfg = small_config();
  const auto p = init_params(cfg, 3);
  const Model<float> m(cfg, p);
  const ImageBuffer a = random_image(16, 32, 1), b = random_image(16, 32, 2);
  const auto fa = m.encoder.forward(a, p).features.data;
  EXPECT_EQ(m.encoder.forward(a, p).features.data, fa);
  // Batch order cannot matter: each image is encoded independently.
  const auto fb = m.encoder.forward(b, p).features.data;
  EXPECT_EQ(m.encoder.forward(a, p).features.data, fa);
  EXPECT_NE(fa, fb);
}

TEST(Encoder, RejectsWrongImageShape) {
  const ModelConfig cfg = small_config();
  const auto p = init_params(cfg, 3);
  const Model<float> m(cfg, p);
  EXPECT_THROW(m.encoder.forward(random_image(16, 36, 1), p), ValidationError);
}

TEST(SegHead, RestoresInputResolution) {
  ModelConfig cfg = small_config();
  const auto p = init_params(cfg, 5);
  const Model<float> m(cfg, p);
  const auto out = m.encoder.forward(random_image(16, 32, 4), p, nullptr, true);
  const std::vector<TapSet<float>> taps{{&out.taps[0].data, &out.taps[1].data, &out.taps[2].data}};
  const auto logits = m.seg->forward(taps, p, false);
  ASSERT_EQ(logits.size(), 1u);
  EXPECT_EQ(logits[0].rows(), 16 * 32);
  EXPECT_EQ(logits[0].cols(), 2);
  EXPECT_EQ(m.seg->forward(taps, p, false)[0], logits[0]);
  const BinaryMask mask = logits_to_mask(logits[0], 16, 32);
  EXPECT_EQ(mask.height, 16);
  EXPECT_EQ(mask.width, 32);
  char_masks_from_seg(mask, ClusterConfig{});
}

TEST(SegHead, RequiresPatchFour) {
  ModelConfig cfg = small_config();
  cfg.encoder.patch = 8;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Pooling, ConstantGridGivesConstant) {
  FeatureGrid<double> g{4, 8, 3, Mat<double>(32, 3)};
  g.data.rowwise() = RowVec<double>::LinSpaced(3, 1.0, 3.0);
  const Mat<double> v = pool_characters(g, {rect(16, 32, 2, 5, 7, 9)}, 4);
  ASSERT_EQ(v.rows(), 1);
  EXPECT_LT((v.row(0) - RowVec<double>::LinSpaced(3, 1.0, 3.0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pooling, SingleTokenMask) {
  const auto g = random_grid(4, 8, 5, 1);
  const Mat<double> v = pool_characters(g, {rect(16, 32, 8, 12, 4, 4)}, 4);
  EXPECT_LT((v.row(0) - g.data.row(2 * 8 + 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pooling, FractionalWeights) {
  const auto g = random_grid(4, 8, 5, 2);
  // 4 pixels in token (0,0) and 12 in token (0,1): weights 0.25 and 0.75.
  BinaryMask m(16, 32);
  for (int y = 0; y < 4; ++y) m.at(y, 3) = 1;
  for (int y = 0; y < 4; ++y)
    for (int x = 4; x < 7; ++x) m.at(y, x) = 1;
  const Mat<double> w = token_weights({m}, 4, 8, 4);
  EXPECT_DOUBLE_EQ(w(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(w(0, 1), 0.75);
  const Mat<double> v = pool_characters(g, {m}, 4);
  const RowVec<double> expect = (0.25 * g.data.row(0) + 0.75 * g.data.row(1)) / 1.0;
  EXPECT_LT((v.row(0) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pooling, EmptyMasksDropped) {
  const auto g = random_grid(4, 8, 3, 3);
  std::vector<std::size_t> kept;
  const Mat<double> v = pool_characters(g, {BinaryMask(16, 32), rect(16, 32, 0, 0, 2, 2)}, 4, &kept);
  EXPECT_EQ(v.rows(), 1);
  EXPECT_EQ(kept, std::vector<std::size_t>{1});
  EXPECT_EQ(pool_characters(g, {BinaryMask(16, 32)}, 4).rows(), 0);
}

TEST(Pooling, ConvexCombinationAndScaleInvariance) {
  Rng rng(8);
  const auto g = random_grid(4, 8, 6, 4);
  for (int t = 0; t < 30; ++t) {
    BinaryMask m(16, 32);
    for (auto& v : m.data) v = rng.bernoulli(0.1);
    if (m.empty()) continue;
    const Mat<double> w = token_weights({m}, 4, 8, 4);
    const Mat<double> v = pool_characters(g, {m}, 4);
    for (int d = 0; d < 6; ++d) {
      double lo = 1e300, hi = -1e300;
      for (int k = 0; k < 32; ++k)
        if (w(0, k) > 0) lo = std::min(lo, g.data(k, d)), hi = std::max(hi, g.data(k, d));
      EXPECT_GE(v(0, d), lo - 1e-12);
      EXPECT_LE(v(0, d), hi + 1e-12);
    }
    // Scaling the weights by c > 0 is cancelled by the normalization.
    const Mat<double> scaled = (3.7 * w) / (3.7 * w).sum();
    const Mat<double> direct = scaled * g.data;
    EXPECT_LT((direct - v).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Projection, ShapesAndUnitBottleneck) {
  const ModelConfig cfg = small_config();
  const auto p = init_params(cfg, 6).cast<double>();
  const Model<double> m(cfg, p);
  for (int l : {0, 1, 5}) {
    Mat<double> v = Mat<double>::Random(l, 24);
    EXPECT_EQ(m.proj.forward(v, p).rows(), l);
    EXPECT_EQ(m.proj.forward(v, p).cols(), 40);
    const Mat<double> z = m.proj.bottleneck(v, p);
    for (int i = 0; i < l; ++i) EXPECT_NEAR(z.row(i).norm(), 1.0, 1e-6);
  }
}

TEST(Projection, RescaledBottleneckLeavesOutputUnchanged) {
  const ModelConfig cfg = small_config();
  const auto p = init_params(cfg, 7).cast<double>();
  const Model<double> m(cfg, p);
  const Mat<double> v = Mat<double>::Random(4, 24);
  const Mat<double> z = m.proj.bottleneck(v, p);
  const Mat<double> ref = m.proj.output_layer(z, p);
  EXPECT_LT((ref - m.proj.forward(v, p)).cwiseAbs().maxCoeff(), 1e-12);
  for (double c : {0.01, 2.5, 1e3}) EXPECT_LT((m.proj.output_layer(c * z, p) - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Params, InitDeterministicAndTeacherCopy) {
  const ModelConfig cfg = small_config();
  const auto a = init_params(cfg, 11), b = init_params(cfg, 11);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == init_params(cfg, 12));
  const auto t = make_teacher(a);
  EXPECT_FALSE(t.find("seg.out.weight").has_value());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.values(i), a.values(a.index(t.spec(i).name)));
  check_layout(cfg, a, true);
  check_layout(cfg, t, false);
}

TEST(Params, InitConventions) {
  const ModelConfig cfg = small_config();
  const auto p = init_params(cfg, 1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& s = p.spec(i);
    const auto& v = p.values(i);
    if (s.unit_rows) {
      const auto mat = p.mat(i);
      for (int r = 0; r < mat.rows(); ++r) EXPECT_NEAR(mat.row(r).norm(), 1.0f, 1e-5f);
    } else if (s.name.ends_with(".bias") || s.name.ends_with("running_mean")) {
      for (float x : v) EXPECT_EQ(x, 0.0f) << s.name;
    } else if (s.shape.size() >= 2) {
      for (float x : v) EXPECT_LE(std::abs(x), 0.04f) << s.name;
    }
    EXPECT_EQ(s.decay, s.trainable && s.shape.size() >= 2) << s.name;
  }
  EXPECT_FALSE(p.spec(p.index("seg.branch0.bn1.running_var")).trainable);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const ModelConfig cfg = small_config();
  Checkpoint ck{cfg, init_params(cfg, 2), make_teacher(init_params(cfg, 3)), std::vector<float>(40, 0.125f),
                "seed = 4\n", 17};
  const fs::path path = fs::temp_directory_path() / "ccd_test_ckpt.bin";
  save_checkpoint(ck, path);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.cfg, cfg);
  EXPECT_TRUE(back.student == ck.student);
  ASSERT_TRUE(back.teacher.has_value());
  EXPECT_TRUE(*back.teacher == *ck.teacher);
  EXPECT_EQ(back.center, ck.center);
  EXPECT_EQ(back.run_config, ck.run_config);
  EXPECT_EQ(back.step, 17);
  const fs::path again = fs::temp_directory_path() / "ccd_test_ckpt2.bin";
  save_checkpoint(back, again);
  std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(s1, s2);
  fs::remove(path);
  fs::remove(again);
}

TEST(Checkpoint, CorruptionNamesTheField) {
  const ModelConfig cfg = small_config();
  const fs::path path = fs::temp_directory_path() / "ccd_test_ckpt_bad.bin";
  save_checkpoint(Checkpoint{cfg, init_params(cfg, 2), std::nullopt, {}, "", 0}, path);
  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign((std::istreambuf_iterator<char>(is)), {});
  }
  auto expect_error = [&](const std::string& content, const std::string& needle) {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << content;
    try {
      load_checkpoint(path);
      ADD_FAILURE() << "no error for " << needle;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  const auto nl = bytes.find('\n');
  std::string header = bytes.substr(0, nl);
  const std::string body = bytes.substr(nl);
  std::string v2 = header;
  v2.replace(v2.find("\"format_version\":1"), 18, "\"format_version\":2");
  expect_error(v2 + body, "format_version");
  expect_error(bytes.substr(0, bytes.size() - 8), "truncated");
  expect_error(bytes + "x", "trailing");
  std::string renamed = header;
  renamed.replace(renamed.find("encoder.pos_embed"), 17, "encoder.pos_embex");
  expect_error(renamed + body, "encoder.pos_embex");
  fs::remove(path);
}
