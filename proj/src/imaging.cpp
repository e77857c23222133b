#include "ccd/imaging.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace ccd {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

Eigen::Matrix3d translation_matrix(double dx, double dy) {
  Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
  t(0, 2) = dx;
  t(1, 2) = dy;
  return t;
}

// Maps an output pixel back into the source image; false when the point
// lands at or behind the projective horizon.
bool source_point(const Eigen::Matrix3d& inv, int x, int y, double& u, double& v) {
  const double w = inv(2, 0) * x + inv(2, 1) * y + inv(2, 2);
  if (!(w > 1e-12)) return false;
  u = (inv(0, 0) * x + inv(0, 1) * y + inv(0, 2)) / w;
  v = (inv(1, 0) * x + inv(1, 1) * y + inv(1, 2)) / w;
  return std::isfinite(u) && std::isfinite(v);
}

}  // namespace

bool ImageBuffer::valid() const {
  if (height < 0 || width < 0 || (channels != 1 && channels != 3)) return false;
  if (data.size() != static_cast<std::size_t>(height) * width * channels) return false;
  return std::all_of(data.begin(), data.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
}

std::size_t BinaryMask::area() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

BinaryMask BinaryMask::inverted() const {
  BinaryMask out(height, width);
  for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = data[i] ? 0 : 1;
  return out;
}

Eigen::Vector2d mask_centroid(const BinaryMask& mask) {
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x)) {
        sx += x;
        sy += y;
        ++n;
      }
    }
  }
  if (n == 0) return Eigen::Vector2d::Zero();
  return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

Homography Homography::translation(double dx, double dy) { return {translation_matrix(dx, dy)}; }

Homography Homography::from_matrix(const Eigen::Matrix3d& m) {
  Homography h{m};
  if (m(2, 2) != 0.0) h.m /= m(2, 2);
  return h;
}

Eigen::Vector2d Homography::apply(double x, double y) const {
  const Eigen::Vector3d p = m * Eigen::Vector3d(x, y, 1.0);
  return {p(0) / p(2), p(1) / p(2)};
}

Homography compose(const Homography& a, const Homography& b) { return Homography::from_matrix(a.m * b.m); }

Homography invert(const Homography& a) {
  const double scale = a.m.cwiseAbs().maxCoeff();
  const double det = a.m.determinant();
  if (!(scale > 0.0) || !std::isfinite(det) || std::abs(det) <= 1e-12 * scale * scale * scale) {
    throw RuntimeError("non-invertible transform");
  }
  return Homography::from_matrix(a.m.inverse());
}

Homography homography_from_points(const std::array<Eigen::Vector2d, 4>& src,
                                  const std::array<Eigen::Vector2d, 4>& dst) {
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = src[i](0), y = src[i](1), u = dst[i](0), v = dst[i](1);
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = a.fullPivLu().solve(b);
  Eigen::Matrix3d m;
  m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return Homography::from_matrix(m);
}

void GeometryRanges::validate() const {
  if (rotation_deg < 0 || shear_deg < 0 || shear_deg >= 60 || translate_frac < 0 || perspective_frac < 0 ||
      perspective_frac >= 0.5 || !(scale_min > 0) || scale_max < scale_min) {
    throw ValidationError("invalid geometry augmentation ranges");
  }
}

void ColorJitterConfig::validate() const {
  if (brightness < 0 || contrast < 0 || contrast > 1 || grayscale_prob < 0 || grayscale_prob > 1 ||
      dropout_prob < 0 || dropout_prob > 1) {
    throw ValidationError("invalid color jitter configuration");
  }
}

ImageBuffer to_grayscale(const ImageBuffer& img) {
  if (img.channels == 1) return img;
  ImageBuffer out(img.height, img.width, 1);
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    const float* px = &img.data[p * img.channels];
    out.data[p] = clamp01(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
  }
  return out;
}

Homography sample_geometry(Rng& rng, const GeometryRanges& cfg, int height, int width) {
  cfg.validate();
  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0;
  const double angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * kDegToRad;
  const double shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg) * kDegToRad;
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * width;
  const double ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * height;

  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
  rot(0, 0) = std::cos(angle);
  rot(0, 1) = -std::sin(angle);
  rot(1, 0) = std::sin(angle);
  rot(1, 1) = std::cos(angle);
  Eigen::Matrix3d sh = Eigen::Matrix3d::Identity();
  sh(0, 1) = std::tan(shear);
  Eigen::Matrix3d sc = Eigen::Matrix3d::Identity();
  sc(0, 0) = scale;
  sc(1, 1) = scale;
  const Eigen::Matrix3d affine = translation_matrix(cx + tx, cy + ty) * rot * sh * sc * translation_matrix(-cx, -cy);

  Homography result = Homography::from_matrix(affine);
  if (cfg.perspective_frac > 0.0) {
    const double px = cfg.perspective_frac * width;
    const double py = cfg.perspective_frac * height;
    const std::array<Eigen::Vector2d, 4> corners = {Eigen::Vector2d(0, 0), Eigen::Vector2d(width - 1, 0),
                                                    Eigen::Vector2d(width - 1, height - 1),
                                                    Eigen::Vector2d(0, height - 1)};
    std::array<Eigen::Vector2d, 4> moved = corners;
    for (auto& c : moved) {
      c(0) += rng.uniform(-px, px);
      c(1) += rng.uniform(-py, py);
    }
    result = compose(homography_from_points(corners, moved), result);
  }
  return result;
}

ImageBuffer warp_image(const ImageBuffer& img, const Homography& h) {
  const Eigen::Matrix3d inv = invert(h).m;
  ImageBuffer out(img.height, img.width, img.channels, 0.0f);
  const int c = img.channels;
  auto sample = [&](int yy, int xx, int ch) -> double {
    if (xx < 0 || yy < 0 || xx >= img.width || yy >= img.height) return 0.0;
    return img.at(yy, xx, ch);
  };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double u = 0.0, v = 0.0;
      if (!source_point(inv, x, y, u, v)) continue;
      if (u <= -1.0 || v <= -1.0 || u >= img.width || v >= img.height) continue;
      const double fu = std::floor(u), fv = std::floor(v);
      const int x0 = static_cast<int>(fu), y0 = static_cast<int>(fv);
      const double ax = u - fu, ay = v - fv;
      for (int ch = 0; ch < c; ++ch) {
        double value;
        if (ax == 0.0 && ay == 0.0) {
          value = sample(y0, x0, ch);
        } else {
          value = (1 - ax) * (1 - ay) * sample(y0, x0, ch) + ax * (1 - ay) * sample(y0, x0 + 1, ch) +
                  (1 - ax) * ay * sample(y0 + 1, x0, ch) + ax * ay * sample(y0 + 1, x0 + 1, ch);
        }
        out.at(y, x, ch) = clamp01(value);
      }
    }
  }
  return out;
}

BinaryMask warp_mask(const BinaryMask& mask, const Homography& h) {
  const Eigen::Matrix3d inv = invert(h).m;
  BinaryMask out(mask.height, mask.width, 0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      double u = 0.0, v = 0.0;
      if (!source_point(inv, x, y, u, v)) continue;
      const double ru = std::floor(u + 0.5), rv = std::floor(v + 0.5);
      if (ru < 0 || rv < 0 || ru >= mask.width || rv >= mask.height) continue;
      out.at(y, x) = mask.at(static_cast<int>(rv), static_cast<int>(ru)) ? 1 : 0;
    }
  }
  return out;
}

ImageBuffer adjust_brightness_contrast(const ImageBuffer& img, double shift, double factor) {
  ImageBuffer out = img;
  double mean = 0.0;
  for (float& v : out.data) {
    v = clamp01(v + shift);
    mean += v;
  }
  if (factor == 1.0) return out;
  mean /= std::max<std::size_t>(out.data.size(), 1);
  for (float& v : out.data) v = clamp01(mean + factor * (v - mean));
  return out;
}

ImageBuffer color_jitter(const ImageBuffer& img, Rng& rng, const ColorJitterConfig& cfg) {
  cfg.validate();
  const double shift = rng.uniform(-cfg.brightness, cfg.brightness);
  const double factor = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
  ImageBuffer out = adjust_brightness_contrast(img, shift, factor);
  // Grayscale conversion and channel dropout are no-ops on single-channel
  // input (dropping the only channel would erase the image).
  if (out.channels == 3) {
    if (rng.bernoulli(cfg.grayscale_prob)) {
      const ImageBuffer gray = to_grayscale(out);
      for (std::size_t p = 0; p < out.pixel_count(); ++p) {
        for (int ch = 0; ch < 3; ++ch) out.data[p * 3 + ch] = gray.data[p];
      }
    }
    if (rng.bernoulli(cfg.dropout_prob)) {
      const int drop = rng.uniform_int(0, 2);
      for (std::size_t p = 0; p < out.pixel_count(); ++p) out.data[p * 3 + drop] = 0.0f;
    }
  }
  return out;
}

ViewPair make_view_pair(const ImageBuffer& img, Rng& rng, const AugmentConfig& cfg) {
  ViewPair pair;
  pair.x_reg = color_jitter(img, rng, cfg.color);
  const ImageBuffer jittered = color_jitter(img, rng, cfg.color);
  pair.pi_irr = sample_geometry(rng, cfg.geometry, img.height, img.width);
  pair.x_irr = warp_image(jittered, pair.pi_irr);
  return pair;
}

}  // namespace ccd
