#include "ccd/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <unordered_map>

#include "ccd/common.hpp"

namespace ccd {

KMeansResult kmeans2(const ImageBuffer& input) {
  const ImageBuffer gray = to_grayscale(input);
  const auto& v = gray.data;
  if (v.empty()) throw ValidationError("degenerate intensity distribution");
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  if (*mn == *mx) throw ValidationError("degenerate intensity distribution");

  KMeansResult res;
  res.theta = BinaryMask(gray.height, gray.width);
  double c0 = *mn, c1 = *mx;
  std::vector<std::uint8_t> assign(v.size(), 2);
  for (int it = 0; it < 100; ++it) {
    bool changed = false;
    double s0 = 0.0, s1 = 0.0;
    std::size_t n0 = 0, n1 = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = v[i];
      const std::uint8_t a = std::abs(x - c1) < std::abs(x - c0) ? 1 : 0;
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
      if (a) {
        s1 += x;
        ++n1;
      } else {
        s0 += x;
        ++n0;
      }
    }
    res.iterations = it + 1;
    // Both clusters stay nonempty: the min pixel always joins c0 and the max joins c1.
    c0 = s0 / static_cast<double>(n0);
    c1 = s1 / static_cast<double>(n1);
    if (!changed) break;
  }
  res.low_center = c0;
  res.high_center = c1;
  res.theta.data = std::move(assign);
  return res;
}

std::pair<BinaryMask, PolarityReport> select_text_polarity(const BinaryMask& theta) {
  PolarityReport r;
  const int h = theta.height, w = theta.width;
  if (h > 0 && w > 0) {
    for (int y = 0; y < h; ++y) {
      r.left += theta.at(y, 0) ? 1 : 0;
      r.right += theta.at(y, w - 1) ? 1 : 0;
    }
    for (int x = 0; x < w; ++x) {
      r.top += theta.at(0, x) ? 1 : 0;
      r.bottom += theta.at(h - 1, x) ? 1 : 0;
    }
  }
  // T >= W/2 etc., evaluated in integers as 2T >= W.
  r.gamma = (2 * r.top >= w) + (2 * r.bottom >= w) + (2 * r.left >= h) + (2 * r.right >= h);
  r.inverted = r.gamma >= 3;
  return {r.inverted ? theta.inverted() : theta, r};
}

BinaryMask pseudo_label(const ImageBuffer& img, PolarityReport* report) {
  auto [m_pl, rep] = select_text_polarity(kmeans2(img).theta);
  if (report) *report = rep;
  return m_pl;
}

void ClusterConfig::validate() const {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ValidationError("eps must be > 0");
  if (min_samples < 1) throw ValidationError("min_samples must be >= 1");
}

std::vector<int> dbscan(const std::vector<Point>& points, const ClusterConfig& cfg) {
  cfg.validate();
  const std::size_t n = points.size();
  std::vector<int> labels(n, kNoise);
  if (n == 0) return labels;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return points[a].y != points[b].y ? points[a].y < points[b].y : points[a].x < points[b].x;
  });
  // rank[i] = canonical position of input point i
  std::vector<std::size_t> rank(n);
  for (std::size_t r = 0; r < n; ++r) rank[order[r]] = r;

  // Uniform grid with cell size >= eps; neighbours lie in the 3x3 cell block.
  const double cell = std::max(1.0, std::ceil(cfg.eps));
  auto cell_of = [&](int c) { return static_cast<std::int64_t>(std::floor(c / cell)); };
  auto key = [](std::int64_t cx, std::int64_t cy) {
    return (static_cast<std::uint64_t>(cx) << 32) ^ (static_cast<std::uint64_t>(cy) & 0xffffffffULL);
  };
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid;
  grid.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& p = points[order[r]];
    grid[key(cell_of(p.x), cell_of(p.y))].push_back(r);
  }
  const double eps2 = cfg.eps * cfg.eps;
  std::vector<std::vector<std::size_t>> nbrs(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& p = points[order[r]];
    const auto cx = cell_of(p.x), cy = cell_of(p.y);
    auto& out = nbrs[r];
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        const auto it = grid.find(key(cx + dx, cy + dy));
        if (it == grid.end()) continue;
        for (std::size_t q : it->second) {
          const auto& o = points[order[q]];
          const double ddx = o.x - p.x, ddy = o.y - p.y;
          if (ddx * ddx + ddy * ddy <= eps2) out.push_back(q);
        }
      }
    }
    std::sort(out.begin(), out.end());
  }

  constexpr int kUnvisited = -2;
  std::vector<int> lab(n, kUnvisited);
  auto is_core = [&](std::size_t r) { return nbrs[r].size() >= static_cast<std::size_t>(cfg.min_samples); };
  int cluster = 0;
  std::deque<std::size_t> queue;
  for (std::size_t r = 0; r < n; ++r) {
    if (lab[r] != kUnvisited) continue;
    if (!is_core(r)) {
      lab[r] = kNoise;
      continue;
    }
    lab[r] = cluster;
    queue.assign(1, r);
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      if (!is_core(q)) continue;
      for (std::size_t s : nbrs[q]) {
        if (lab[s] == kNoise) {
          lab[s] = cluster;
        } else if (lab[s] == kUnvisited) {
          lab[s] = cluster;
          queue.push_back(s);
        }
      }
    }
    ++cluster;
  }
  for (std::size_t i = 0; i < n; ++i) labels[i] = lab[rank[i]];
  return labels;
}

CharMaskSet char_masks_from_seg(const BinaryMask& m_seg, const ClusterConfig& cfg) {
  std::vector<Point> pts;
  for (int y = 0; y < m_seg.height; ++y) {
    for (int x = 0; x < m_seg.width; ++x) {
      if (m_seg.at(y, x)) pts.push_back({x, y});
    }
  }
  if (pts.empty()) return {};
  const auto labels = dbscan(pts, cfg);
  const int clusters = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  if (clusters <= 0) {
    BinaryMask all(m_seg.height, m_seg.width);
    for (std::size_t i = 0; i < m_seg.data.size(); ++i) all.data[i] = m_seg.data[i] ? 1 : 0;
    return {all};
  }
  CharMaskSet masks(static_cast<std::size_t>(clusters), BinaryMask(m_seg.height, m_seg.width));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (labels[i] >= 0) masks[static_cast<std::size_t>(labels[i])].at(pts[i].y, pts[i].x) = 1;
  }
  std::vector<std::pair<Eigen::Vector2d, std::size_t>> keyed;
  for (std::size_t k = 0; k < masks.size(); ++k) keyed.emplace_back(mask_centroid(masks[k]), k);
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    if (a.first(0) != b.first(0)) return a.first(0) < b.first(0);
    return a.first(1) < b.first(1);
  });
  CharMaskSet ordered;
  ordered.reserve(masks.size());
  for (const auto& [c, k] : keyed) ordered.push_back(std::move(masks[k]));
  return ordered;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw ValidationError("mask dimension mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double mask_set_iou(const CharMaskSet& pred, const CharMaskSet& gt) {
  const BinaryMask* ref = !gt.empty() ? &gt.front() : (!pred.empty() ? &pred.front() : nullptr);
  for (const auto* set : {&pred, &gt}) {
    for (const auto& m : *set) {
      if (!m.same_shape(*ref)) throw ValidationError("mask dimension mismatch");
    }
  }
  if (gt.empty()) return pred.empty() ? 1.0 : 0.0;
  if (pred.empty()) return 0.0;

  struct Pair {
    double iou;
    std::size_t g, p;
  };
  std::vector<Pair> pairs;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    for (std::size_t p = 0; p < pred.size(); ++p) {
      std::size_t inter = 0, uni = 0;
      const auto& a = gt[g].data;
      const auto& b = pred[p].data;
      for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] && b[i]) ? 1 : 0;
        uni += (a[i] || b[i]) ? 1 : 0;
      }
      if (inter > 0) pairs.push_back({static_cast<double>(inter) / static_cast<double>(uni), g, p});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<bool> g_used(gt.size(), false), p_used(pred.size(), false);
  double total = 0.0;
  for (const auto& pr : pairs) {
    if (g_used[pr.g] || p_used[pr.p]) continue;
    g_used[pr.g] = p_used[pr.p] = true;
    total += pr.iou;
  }
  return total / static_cast<double>(gt.size());
}

GridSearchResult grid_search(const std::vector<SegmentationCase>& data, const std::vector<double>& eps_grid,
                             const std::vector<int>& min_samples_grid, std::size_t workers) {
  if (data.empty() || eps_grid.empty() || min_samples_grid.empty()) {
    throw ValidationError("grid search needs a non-empty dataset and grids");
  }
  GridSearchResult res;
  for (double e : eps_grid) {
    for (int m : min_samples_grid) {
      ClusterConfig{e, m}.validate();
      res.table.push_back({e, m, 0.0});
    }
  }
  parallel_for(res.table.size(), workers, [&](std::size_t g) {
    const ClusterConfig cfg{res.table[g].eps, res.table[g].min_samples};
    double sum = 0.0;
    for (const auto& c : data) sum += mask_set_iou(char_masks_from_seg(c.m_seg, cfg), c.gt);
    res.table[g].mean_iou = sum / static_cast<double>(data.size());
  });
  const GridPoint* best = nullptr;
  for (const auto& gp : res.table) {
    if (!best || gp.mean_iou > best->mean_iou ||
        (gp.mean_iou == best->mean_iou &&
         (gp.eps < best->eps || (gp.eps == best->eps && gp.min_samples < best->min_samples)))) {
      best = &gp;
    }
  }
  res.best = {best->eps, best->min_samples};
  res.best_iou = best->mean_iou;
  return res;
}

void write_grid_csv(std::ostream& os, const GridSearchResult& result) {
  os << "eps,min_samples,mean_iou\n";
  char buf[96];
  for (const auto& gp : result.table) {
    std::snprintf(buf, sizeof buf, "%g,%d,%.6f\n", gp.eps, gp.min_samples, gp.mean_iou);
    os << buf;
  }
}

}  // namespace ccd
