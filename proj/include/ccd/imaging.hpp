#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <vector>

#include "ccd/common.hpp"

namespace ccd {

/// H x W x C intensity grid, row-major with interleaved channels, values in [0,1].
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> data;

  ImageBuffer() = default;
  ImageBuffer(int h, int w, int c = 1, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  float& at(int y, int x, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  /// Size consistency and every intensity in [0,1].
  bool valid() const;

  bool operator==(const ImageBuffer&) const = default;
};

/// Binary H x W map; 1 = foreground.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t area() const;
  bool empty() const { return area() == 0; }
  bool same_shape(const BinaryMask& o) const { return height == o.height && width == o.width; }
  BinaryMask inverted() const;

  bool operator==(const BinaryMask&) const = default;
};

/// Ordered per-character masks (ascending centroid x when produced by clustering).
using CharMaskSet = std::vector<BinaryMask>;

/// Foreground centroid (x, y); (0, 0) for an empty mask.
Eigen::Vector2d mask_centroid(const BinaryMask& mask);

/// 3x3 projective transform on homogeneous pixel coordinates (x = column, y = row).
struct Homography {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();

  static Homography identity() { return {}; }
  static Homography translation(double dx, double dy);
  /// Normalizes the bottom-right entry to 1 when it is nonzero.
  static Homography from_matrix(const Eigen::Matrix3d& m);

  Eigen::Vector2d apply(double x, double y) const;
};

/// b first, then a.
Homography compose(const Homography& a, const Homography& b);
/// Throws RuntimeError("non-invertible transform") for singular matrices.
Homography invert(const Homography& a);

/// Homography mapping four source points onto four destination points.
Homography homography_from_points(const std::array<Eigen::Vector2d, 4>& src,
                                  const std::array<Eigen::Vector2d, 4>& dst);

struct GeometryRanges {
  double rotation_deg = 15.0;
  double shear_deg = 10.0;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double translate_frac = 0.1;    ///< of each dimension
  double perspective_frac = 0.1;  ///< max corner displacement, fraction of each dimension

  static GeometryRanges none() { return {0.0, 0.0, 1.0, 1.0, 0.0, 0.0}; }
  void validate() const;
};

struct ColorJitterConfig {
  double brightness = 0.4;  ///< additive shift drawn from [-b, b]
  double contrast = 0.4;    ///< factor drawn from [1-c, 1+c]
  double grayscale_prob = 0.2;
  double dropout_prob = 0.1;

  static ColorJitterConfig none() { return {0.0, 0.0, 0.0, 0.0}; }
  void validate() const;
};

struct AugmentConfig {
  GeometryRanges geometry;
  ColorJitterConfig color;
};

struct ViewPair {
  ImageBuffer x_reg;
  ImageBuffer x_irr;
  Homography pi_irr;
};

/// Rec.601 luma; single-channel images pass through unchanged.
ImageBuffer to_grayscale(const ImageBuffer& img);

/// Random rotation, shear, isotropic scale and translation about the image
/// center, followed by a random four-corner perspective distortion.
Homography sample_geometry(Rng& rng, const GeometryRanges& cfg, int height, int width);

/// Inverse-mapped bilinear resampling; samples outside the source read 0.
ImageBuffer warp_image(const ImageBuffer& img, const Homography& h);

/// Inverse-mapped nearest-neighbour resampling; out-of-source pixels are 0.
BinaryMask warp_mask(const BinaryMask& mask, const Homography& h);

/// u = clamp(v + shift), then v -> clamp(mean + factor * (u - mean)) with mean over u.
ImageBuffer adjust_brightness_contrast(const ImageBuffer& img, double shift, double factor);

ImageBuffer color_jitter(const ImageBuffer& img, Rng& rng, const ColorJitterConfig& cfg);

/// x_reg: color jitter only. x_irr: color jitter, then a freshly sampled warp.
ViewPair make_view_pair(const ImageBuffer& img, Rng& rng, const AugmentConfig& cfg);

}  // namespace ccd
