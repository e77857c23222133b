#pragma once

#include <filesystem>
#include <ostream>
#include <vector>

#include "ccd/imaging.hpp"

namespace ccd {

struct KMeansResult {
  BinaryMask theta;    ///< 1 = cluster with the higher center
  double low_center = 0.0;
  double high_center = 0.0;
  int iterations = 0;
};

/// 1-D Lloyd 2-means on gray intensities, initialized at the min and max
/// intensity, run to an assignment fixpoint (at most 100 iterations).
/// Throws ValidationError("degenerate intensity distribution") on constant images.
KMeansResult kmeans2(const ImageBuffer& gray);

struct PolarityReport {
  long left = 0, right = 0, top = 0, bottom = 0;  ///< border sums L, R, T, B
  int gamma = 0;
  bool inverted = false;
};

/// Border vote: Gamma counts the borders at least half covered by theta;
/// Gamma >= 3 means theta labelled the background, so it is inverted.
std::pair<BinaryMask, PolarityReport> select_text_polarity(const BinaryMask& theta);

/// M_pl for one image: grayscale, 2-means, border vote.
BinaryMask pseudo_label(const ImageBuffer& img, PolarityReport* report = nullptr);

struct ClusterConfig {
  double eps = 1.5;
  int min_samples = 4;

  void validate() const;
};

struct Point {
  int x = 0;
  int y = 0;
};

inline constexpr int kNoise = -1;

/// DBSCAN over integer pixel coordinates with Euclidean distance (dist <= eps).
/// A point is core when at least min_samples points (itself included) lie
/// within eps. Points are visited in row-major order (y, then x); cluster ids
/// follow discovery order. Labels are returned in input order. Input points
/// must be distinct.
std::vector<int> dbscan(const std::vector<Point>& points, const ClusterConfig& cfg);

/// Clusters the foreground pixels of m_seg into per-character masks ordered
/// by centroid x. Noise is discarded; when nothing clusters but foreground
/// exists, the whole foreground is returned as a single mask.
CharMaskSet char_masks_from_seg(const BinaryMask& m_seg, const ClusterConfig& cfg);

double mask_iou(const BinaryMask& a, const BinaryMask& b);

/// Greedy one-to-one matching by descending IoU; mean matched IoU over gt
/// masks (unmatched gt masks count 0). Both sets empty scores 1.
double mask_set_iou(const CharMaskSet& pred, const CharMaskSet& gt);

struct SegmentationCase {
  BinaryMask m_seg;
  CharMaskSet gt;
};

struct GridPoint {
  double eps = 0.0;
  int min_samples = 0;
  double mean_iou = 0.0;
};

struct GridSearchResult {
  ClusterConfig best;
  double best_iou = 0.0;
  std::vector<GridPoint> table;  ///< eps-major order
};

inline const std::vector<double> kDefaultEpsGrid = {1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
inline const std::vector<int> kDefaultMinSamplesGrid = {2, 4, 6, 8, 10, 12};

/// Mean mask_set_iou of char_masks_from_seg for every grid point; the best
/// point breaks ties by smaller eps, then smaller min_samples.
GridSearchResult grid_search(const std::vector<SegmentationCase>& data, const std::vector<double>& eps_grid,
                             const std::vector<int>& min_samples_grid, std::size_t workers = 0);

/// CSV with header eps,min_samples,mean_iou.
void write_grid_csv(std::ostream& os, const GridSearchResult& result);

}  // namespace ccd
