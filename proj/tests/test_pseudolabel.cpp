#include <gtest/gtest.h>

#include <cmath>
#include <iterator>
#include <set>
#include <sstream>

#include "ccd/datagen.hpp"
#include "ccd/pseudolabel.hpp"
#include "oracles.hpp"

using namespace ccd;

namespace {

BinaryMask rect(int h, int w, int y0, int x0, int bh, int bw) {
  BinaryMask m(h, w);
  for (int y = y0; y < y0 + bh; ++y)
    for (int x = x0; x < x0 + bw; ++x) m.at(y, x) = 1;
  return m;
}

BinaryMask unite(const std::vector<BinaryMask>& parts) {
  BinaryMask out = parts.front();
  for (const auto& p : parts)
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] |= p.data[i];
  return out;
}

}  // namespace

TEST(KMeans, SymmetricBimodal) {
  ImageBuffer img(10, 100);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = i < 500 ? 0.1f : 0.9f;
  const KMeansResult r = kmeans2(img);
  EXPECT_NEAR(r.low_center, 0.1, 1e-6);
  EXPECT_NEAR(r.high_center, 0.9, 1e-6);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_EQ(r.theta.data[i], i < 500 ? 0 : 1);
}

TEST(KMeans, InversionSwapsPartition) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    ImageBuffer img(8, 20);
    for (auto& v : img.data) v = float(rng.uniform_int(0, 255)) / 255.0f;
    ImageBuffer inv = img;
    for (auto& v : inv.data) v = 1.0f - v;
    EXPECT_EQ(kmeans2(inv).theta, kmeans2(img).theta.inverted());
  }
}

namespace {

// Partition is a Lloyd fixpoint: every pixel sits with its nearer cluster mean.
bool is_fixpoint(const ImageBuffer& img, const BinaryMask& m) {
  double s[2] = {0, 0};
  long n[2] = {0, 0};
  for (std::size_t i = 0; i < img.data.size(); ++i) s[m.data[i]] += img.data[i], ++n[m.data[i]];
  if (!n[0] || !n[1]) return false;
  const double c0 = s[0] / n[0], c1 = s[1] / n[1];
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double d0 = std::abs(img.data[i] - c0), d1 = std::abs(img.data[i] - c1);
    if (m.data[i] ? d1 > d0 : d0 > d1) return false;
  }
  return true;
}

double split_sse(const ImageBuffer& img, const BinaryMask& m) {
  double s[2] = {0, 0};
  long n[2] = {0, 0};
  for (std::size_t i = 0; i < img.data.size(); ++i) s[m.data[i]] += img.data[i], ++n[m.data[i]];
  double sse = 0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double d = img.data[i] - s[m.data[i]] / n[m.data[i]];
    sse += d * d;
  }
  return sse;
}

}  // namespace

TEST(KMeans, MatchesExhaustiveThresholdOnThreeLevels) {
  Rng rng(13);
  int unique_optimum = 0;
  for (int t = 0; t < 200; ++t) {
    const float levels[3] = {float(rng.uniform(0.0, 0.3)), float(rng.uniform(0.35, 0.65)),
                             float(rng.uniform(0.7, 1.0))};
    const double w0 = rng.uniform(0.1, 0.6), w1 = rng.uniform(0.1, 0.3);
    ImageBuffer img(16, 32);
    for (auto& v : img.data) {
      const double u = rng.uniform();
      v = levels[u < w0 ? 0 : (u < w0 + w1 ? 1 : 2)];
    }
    const std::set<float> distinct(img.data.begin(), img.data.end());
    if (distinct.size() < 3) continue;
    double best = 0;
    const BinaryMask opt = oracle::best_threshold_split(img, &best);
    BinaryMask other(img.height, img.width);
    const float mid = *std::next(distinct.begin());
    // the only other two-level split of a three-level image
    for (std::size_t i = 0; i < img.data.size(); ++i) other.data[i] = opt.data[i] ? img.data[i] > mid : img.data[i] >= mid;
    const BinaryMask got = kmeans2(img).theta;
    ASSERT_TRUE(is_fixpoint(img, got)) << "trial " << t;
    if (!is_fixpoint(img, other)) {
      ++unique_optimum;
      EXPECT_EQ(got, opt) << "trial " << t;
    } else {
      EXPECT_GE(split_sse(img, got), best - 1e-9) << "trial " << t;
    }
  }
  EXPECT_GT(unique_optimum, 50);
}

TEST(KMeans, CentersAreClusterMeans) {
  Rng rng(2);
  ImageBuffer img(12, 40);
  for (auto& v : img.data) v = float(rng.bernoulli(0.3) ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.4));
  const KMeansResult r = kmeans2(img);
  double s0 = 0, s1 = 0;
  int n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < img.data.size(); ++i) (r.theta.data[i] ? (s1 += img.data[i], ++n1) : (s0 += img.data[i], ++n0));
  EXPECT_NEAR(r.low_center, s0 / n0, 1e-9);
  EXPECT_NEAR(r.high_center, s1 / n1, 1e-9);
}

TEST(KMeans, ConstantImageRejected) {
  try {
    kmeans2(ImageBuffer(4, 4, 1, 0.3f));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_STREQ(e.what(), "degenerate intensity distribution");
  }
}

TEST(Polarity, CenteredBlockKept) {
  const BinaryMask m = rect(32, 128, 11, 44, 10, 40);
  const auto [out, rep] = select_text_polarity(m);
  EXPECT_EQ(rep.gamma, 0);
  EXPECT_EQ(out, m);
}

TEST(Polarity, AllOnesInverted) {
  const auto [out, rep] = select_text_polarity(BinaryMask(32, 128, 1));
  EXPECT_EQ(rep.gamma, 4);
  EXPECT_EQ(out, BinaryMask(32, 128, 0));
}

TEST(Polarity, TopHalfHandEvaluation) {
  const BinaryMask m = rect(32, 128, 0, 0, 16, 128);
  const auto [out, rep] = select_text_polarity(m);
  EXPECT_EQ(rep.top, 128);
  EXPECT_EQ(rep.left, 16);
  EXPECT_EQ(rep.right, 16);
  EXPECT_EQ(rep.bottom, 0);
  EXPECT_EQ(rep.gamma, 3);
  EXPECT_TRUE(rep.inverted);
  EXPECT_EQ(out, m.inverted());
}

TEST(Polarity, MatchesTranscriptionOnRandomMasks) {
  Rng rng(31);
  for (int t = 0; t < 500; ++t) {
    BinaryMask m(rng.uniform_int(2, 12), rng.uniform_int(2, 12));
    const double p = rng.uniform();
    for (auto& v : m.data) v = rng.bernoulli(p);
    EXPECT_EQ(select_text_polarity(m).first, oracle::select_polarity(m));
  }
}

TEST(Polarity, OutputHasAtMostTwoHighSidesOffTies) {
  Rng rng(32);
  for (int t = 0; t < 500; ++t) {
    BinaryMask m(9, 15);  // odd sides: no border sum can equal exactly half
    const double p = rng.uniform();
    for (auto& v : m.data) v = rng.bernoulli(p);
    const BinaryMask out = select_text_polarity(m).first;
    EXPECT_TRUE(out == m || out == m.inverted());
    EXPECT_LE(select_text_polarity(out).second.gamma, 2);
  }
}

TEST(Dbscan, EmptyAndSinglePoint) {
  EXPECT_TRUE(dbscan({}, ClusterConfig{}).empty());
  EXPECT_EQ(dbscan({{3, 4}}, ClusterConfig{1.5, 2}), std::vector<int>{kNoise});
}

TEST(Dbscan, TwoBlobsTwelveApart) {
  std::vector<Point> pts;
  for (int cx : {5, 17})
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) pts.push_back({cx + dx, 5 + dy});
  const auto labels = dbscan(pts, ClusterConfig{1.5, 4});
  EXPECT_EQ(labels, oracle::dbscan(pts, 1.5, 4));
  EXPECT_EQ(std::count(labels.begin(), labels.end(), 0), 9);
  EXPECT_EQ(std::count(labels.begin(), labels.end(), 1), 9);
  EXPECT_EQ(std::count(labels.begin(), labels.end(), kNoise), 0);
}

TEST(Dbscan, AgreesWithBruteForceReference) {
  Rng rng(71);
  for (int t = 0; t < 200; ++t) {
    const int w = rng.uniform_int(5, 40), h = rng.uniform_int(5, 20);
    std::vector<Point> pts;
    const double p = rng.uniform(0.05, 0.5);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (rng.bernoulli(p)) pts.push_back({x, y});
    // Shuffle so input order differs from the canonical order.
    for (std::size_t i = pts.size(); i > 1; --i) std::swap(pts[i - 1], pts[std::size_t(rng.uniform_int(0, int(i) - 1))]);
    const double eps = std::vector<double>{1.0, 1.5, 2.0, 3.0}[std::size_t(rng.uniform_int(0, 3))];
    const int ms = rng.uniform_int(1, 8);
    ASSERT_EQ(dbscan(pts, ClusterConfig{eps, ms}), oracle::dbscan(pts, eps, ms)) << "trial " << t;
  }
}

TEST(Dbscan, DeterministicForSameInput) {
  Rng rng(4);
  std::vector<Point> pts;
  for (int i = 0; i < 300; ++i) pts.push_back({rng.uniform_int(0, 60), rng.uniform_int(0, 20)});
  std::sort(pts.begin(), pts.end(), [](Point a, Point b) { return a.y != b.y ? a.y < b.y : a.x < b.x; });
  pts.erase(std::unique(pts.begin(), pts.end(), [](Point a, Point b) { return a.x == b.x && a.y == b.y; }), pts.end());
  EXPECT_EQ(dbscan(pts, ClusterConfig{2.0, 3}), dbscan(pts, ClusterConfig{2.0, 3}));
}

TEST(CharMasks, ThreeSeparatedBlobsLeftToRight) {
  const BinaryMask a = rect(32, 128, 10, 80, 8, 6), b = rect(32, 128, 12, 10, 6, 6), c = rect(32, 128, 8, 45, 9, 5);
  const CharMaskSet masks = char_masks_from_seg(unite({a, b, c}), ClusterConfig{1.5, 4});
  ASSERT_EQ(masks.size(), 3u);
  EXPECT_EQ(masks[0], b);
  EXPECT_EQ(masks[1], c);
  EXPECT_EQ(masks[2], a);
}

TEST(CharMasks, EmptyAndSingleBlob) {
  EXPECT_TRUE(char_masks_from_seg(BinaryMask(32, 128), ClusterConfig{}).empty());
  const BinaryMask blob = rect(32, 128, 5, 5, 7, 7);
  const CharMaskSet one = char_masks_from_seg(blob, ClusterConfig{1.5, 4});
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], blob);
}

TEST(CharMasks, AllNoiseFallsBackToForeground) {
  BinaryMask sparse(16, 16);
  sparse.at(2, 2) = sparse.at(10, 10) = 1;
  const CharMaskSet out = char_masks_from_seg(sparse, ClusterConfig{1.5, 4});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], sparse);
}

TEST(CharMasks, DisjointAndInsideForeground) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    BinaryMask m(20, 60);
    for (auto& v : m.data) v = rng.bernoulli(0.35);
    const CharMaskSet masks = char_masks_from_seg(m, ClusterConfig{1.5, 3});
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      int owners = 0;
      for (const auto& c : masks) owners += c.data[i];
      EXPECT_LE(owners, 1);
      if (owners) EXPECT_EQ(m.data[i], 1);
    }
  }
}

TEST(MaskSetIou, HandCases) {
  const CharMaskSet gt{rect(8, 20, 0, 0, 4, 5), rect(8, 20, 0, 10, 4, 5)};
  EXPECT_DOUBLE_EQ(mask_set_iou(gt, gt), 1.0);
  EXPECT_DOUBLE_EQ(mask_set_iou({rect(8, 20, 5, 0, 2, 20)}, gt), 0.0);
  // 20-pixel gt, prediction shares 10 pixels and adds 10 more.
  const CharMaskSet one_gt{rect(8, 20, 0, 0, 4, 5)};
  const CharMaskSet pred{rect(8, 20, 2, 0, 4, 5)};
  EXPECT_NEAR(mask_set_iou(pred, one_gt), 1.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(mask_set_iou({}, {}), 1.0);
  EXPECT_THROW(mask_set_iou({BinaryMask(3, 3)}, {BinaryMask(4, 4)}), ValidationError);
}

TEST(MaskSetIou, BoundedAndSymmetricForIdenticalSets) {
  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    CharMaskSet a, b;
    for (int k = 0; k < 3; ++k) {
      BinaryMask m(6, 6), n(6, 6);
      for (auto& v : m.data) v = rng.bernoulli(0.3);
      for (auto& v : n.data) v = rng.bernoulli(0.3);
      a.push_back(m);
      b.push_back(n);
    }
    const double s = mask_set_iou(a, b);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
    EXPECT_DOUBLE_EQ(mask_set_iou(a, a), 1.0);
  }
}

TEST(GridSearch, SingleCellGrid) {
  std::vector<SegmentationCase> data;
  for (const auto& s : generate_corpus(10, 4, DataGenConfig{})) data.push_back({s.text_mask(), s.gt_masks});
  const GridSearchResult r = grid_search(data, {2.0}, {4});
  ASSERT_EQ(r.table.size(), 1u);
  EXPECT_EQ(r.best.eps, 2.0);
  EXPECT_EQ(r.best.min_samples, 4);
  EXPECT_EQ(r.best_iou, r.table[0].mean_iou);
}

TEST(GridSearch, SmallEpsBeatsMergingEps) {
  DataGenConfig cfg;
  cfg.min_gap = cfg.max_gap = 3;
  std::vector<SegmentationCase> data;
  for (const auto& s : generate_corpus(40, 8, cfg)) data.push_back({s.text_mask(), s.gt_masks});
  const GridSearchResult r = grid_search(data, {1.5, 6.0}, {4});
  EXPECT_GT(r.table[0].mean_iou, r.table[1].mean_iou);
  // Cross-check the winning cell against the brute-force clustering.
  double total = 0.0;
  for (const auto& c : data) {
    std::vector<Point> pts;
    for (int y = 0; y < c.m_seg.height; ++y)
      for (int x = 0; x < c.m_seg.width; ++x)
        if (c.m_seg.at(y, x)) pts.push_back({x, y});
    const auto labels = oracle::dbscan(pts, 1.5, 4);
    const int k = *std::max_element(labels.begin(), labels.end()) + 1;
    CharMaskSet pred(std::size_t(k), BinaryMask(c.m_seg.height, c.m_seg.width));
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (labels[i] >= 0) pred[std::size_t(labels[i])].at(pts[i].y, pts[i].x) = 1;
    total += mask_set_iou(pred, c.gt);
  }
  EXPECT_NEAR(r.table[0].mean_iou, total / double(data.size()), 1e-12);
}

TEST(GridSearch, DuplicatedDatasetSameResult) {
  std::vector<SegmentationCase> data;
  for (const auto& s : generate_corpus(15, 6, DataGenConfig{})) data.push_back({s.text_mask(), s.gt_masks});
  auto twice = data;
  twice.insert(twice.end(), data.begin(), data.end());
  const auto a = grid_search(data, kDefaultEpsGrid, kDefaultMinSamplesGrid);
  const auto b = grid_search(twice, kDefaultEpsGrid, kDefaultMinSamplesGrid);
  EXPECT_EQ(a.best.eps, b.best.eps);
  EXPECT_EQ(a.best.min_samples, b.best.min_samples);
  for (std::size_t i = 0; i < a.table.size(); ++i) EXPECT_NEAR(a.table[i].mean_iou, b.table[i].mean_iou, 1e-12);
}

TEST(GridSearch, WorkerCountDoesNotChangeCsv) {
  std::vector<SegmentationCase> data;
  for (const auto& s : generate_corpus(12, 2, DataGenConfig{})) data.push_back({s.text_mask(), s.gt_masks});
  std::ostringstream a, b;
  write_grid_csv(a, grid_search(data, kDefaultEpsGrid, kDefaultMinSamplesGrid, 1));
  write_grid_csv(b, grid_search(data, kDefaultEpsGrid, kDefaultMinSamplesGrid, 3));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().rfind("eps,min_samples,mean_iou\n", 0), 0u);
}

TEST(PseudoLabel, RecoversTextOnCleanData) {
  DataGenConfig cfg;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const GlyphSample s = render_sample(seed, cfg);
    EXPECT_EQ(pseudo_label(s.image), s.text_mask()) << "seed " << seed;
  }
}
