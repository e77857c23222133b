#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <vector>

#include "ccd/pseudolabel.hpp"

namespace oracle {

/// Text-region selection rule transcribed literally with 1-based indices.
inline ccd::BinaryMask select_polarity(const ccd::BinaryMask& theta) {
  const int H = theta.height, W = theta.width;
  auto at = [&](int i, int j) { return int(theta.at(i - 1, j - 1)); };
  long L = 0, R = 0, T = 0, B = 0;
  for (int i = 1; i <= H; ++i) L += at(i, 1);
  for (int i = 1; i <= H; ++i) R += at(i, W);
  for (int j = 1; j <= W; ++j) T += at(1, j);
  for (int j = 1; j <= W; ++j) B += at(H, j);
  const int gamma = int(2 * T >= W) + int(2 * B >= W) + int(2 * L >= H) + int(2 * R >= H);
  if (gamma >= 3) {
    ccd::BinaryMask out(H, W);
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] = 1 - theta.data[k];
    return out;
  }
  return theta;
}

/// Best 2-way split of 1-D intensities: tries every threshold between
/// consecutive distinct values and keeps the lowest within-cluster SSE.
/// Returns the mask of values above the threshold.
inline ccd::BinaryMask best_threshold_split(const ccd::ImageBuffer& gray, double* sse_out = nullptr) {
  std::vector<double> vals(gray.data.begin(), gray.data.end());
  std::vector<double> sorted = vals;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  double best = std::numeric_limits<double>::infinity();
  double best_t = sorted.front();
  for (std::size_t k = 0; k + 1 < sorted.size(); ++k) {
    const double t = 0.5 * (sorted[k] + sorted[k + 1]);
    double s0 = 0, s1 = 0;
    long n0 = 0, n1 = 0;
    for (double v : vals) (v > t ? (s1 += v, ++n1) : (s0 += v, ++n0));
    const double m0 = s0 / n0, m1 = s1 / n1;
    double sse = 0;
    for (double v : vals) sse += v > t ? (v - m1) * (v - m1) : (v - m0) * (v - m0);
    if (sse < best) {
      best = sse;
      best_t = t;
    }
  }
  if (sse_out) *sse_out = best;
  ccd::BinaryMask out(gray.height, gray.width);
  for (std::size_t k = 0; k < vals.size(); ++k) out.data[k] = vals[k] > best_t;
  return out;
}

/// Textbook DBSCAN over a full pairwise distance matrix, seeds taken in
/// row-major (y, x) order.
inline std::vector<int> dbscan(const std::vector<ccd::Point>& pts, double eps, int min_samples) {
  const std::size_t n = pts.size();
  std::vector<std::vector<char>> near(n, std::vector<char>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = pts[i].x - pts[j].x, dy = pts[i].y - pts[j].y;
      near[i][j] = std::sqrt(dx * dx + dy * dy) <= eps;
    }
  std::vector<int> count(n, 0);
  for (std::size_t i = 0; i < n; ++i) count[i] = int(std::count(near[i].begin(), near[i].end(), 1));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pts[a].y != pts[b].y ? pts[a].y < pts[b].y : pts[a].x < pts[b].x;
  });
  constexpr int kUnset = -2;
  std::vector<int> label(n, kUnset);
  int next = 0;
  for (std::size_t seed : order) {
    if (label[seed] != kUnset) continue;
    if (count[seed] < min_samples) {
      label[seed] = ccd::kNoise;
      continue;
    }
    const int id = next++;
    std::deque<std::size_t> queue{seed};
    label[seed] = id;
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      if (count[p] < min_samples) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (!near[p][q]) continue;
        if (label[q] == kUnset || label[q] == ccd::kNoise) {
          const bool fresh = label[q] == kUnset;
          label[q] = id;
          if (fresh) queue.push_back(q);
        }
      }
    }
  }
  return label;
}

}  // namespace oracle
