#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ccd/common.hpp"
#include "ccd/imaging.hpp"

namespace ccd {

/// Built-in 5x7 bitmap font: 26 uppercase Latin glyphs, class id = letter - 'A'.
inline constexpr int kGlyphClasses = 26;
inline constexpr int kGlyphCols = 5;
inline constexpr int kGlyphRows = 7;

/// Row strings of the bitmap for class id `cls` ('#' = ink).
const std::array<const char*, kGlyphRows>& glyph_bitmap(int cls);

struct IntensityRange {
  double lo = 0.0;
  double hi = 1.0;
};

struct DataGenConfig {
  int height = 32;
  int width = 128;
  int min_length = 3;
  int max_length = 6;
  std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
  int scale = 3;             ///< pixels per bitmap cell
  int min_stroke = 3;        ///< inked square per cell, in pixels (<= scale)
  int max_stroke = 3;
  int min_gap = 2;           ///< empty columns between adjacent glyph cells
  int max_gap = 5;
  int vertical_jitter = 1;   ///< per-glyph baseline offset in pixels
  IntensityRange text{0.6, 1.0};
  IntensityRange background{0.0, 0.4};
  double dark_text_probability = 0.5;  ///< invert the whole image (v -> 1 - v)
  double min_noise = 0.0;
  double max_noise = 0.0;
  double touching_probability = 0.0;   ///< per adjacent pair, render with zero gap

  void validate() const;
};

struct GlyphSample {
  ImageBuffer image;
  CharMaskSet gt_masks;     ///< one per glyph, left to right
  std::vector<int> labels;  ///< class ids, one per mask
  std::uint64_t seed = 0;

  std::string text() const;
  /// Union of all glyph masks.
  BinaryMask text_mask() const;
};

GlyphSample render_sample(Rng& rng, const DataGenConfig& cfg);
/// Pure function of (seed, cfg).
GlyphSample render_sample(std::uint64_t seed, const DataGenConfig& cfg);
/// Seed of the i-th sample of a corpus generated from `base_seed`.
std::uint64_t sample_seed(std::uint64_t base_seed, std::size_t index);
std::vector<GlyphSample> generate_corpus(std::size_t count, std::uint64_t base_seed, const DataGenConfig& cfg);

// --- on-disk format -------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string image;  ///< path relative to the dataset directory
  std::string mask;
  std::string text;
};

using DatasetManifest = std::vector<ManifestRecord>;

inline constexpr const char* kManifestName = "manifest.jsonl";

/// 8-bit binary PGM (P5); intensity = round(255 * value).
void write_pgm(const std::filesystem::path& path, const ImageBuffer& img);
void write_pgm_bytes(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& px);
/// Reads an 8-bit P5 file; throws RuntimeError naming the path on failure.
std::vector<std::uint8_t> read_pgm_bytes(const std::filesystem::path& path, int& height, int& width);
ImageBuffer read_pgm(const std::filesystem::path& path);

/// Label map: 0 = background, k = glyph k (1-based).
std::vector<std::uint8_t> encode_label_map(const CharMaskSet& masks, int height, int width);

DatasetManifest write_dataset(const std::vector<GlyphSample>& samples, const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);

/// Random-access reader over a dataset directory.
class DatasetReader {
 public:
  explicit DatasetReader(std::filesystem::path dir);

  std::size_t size() const { return manifest_.size(); }
  const ManifestRecord& record(std::size_t i) const { return manifest_.at(i); }
  GlyphSample read(std::size_t i) const;
  ImageBuffer read_image(std::size_t i) const;
  std::vector<GlyphSample> read_all() const;

 private:
  std::filesystem::path dir_;
  DatasetManifest manifest_;
};

std::vector<GlyphSample> read_dataset(const std::filesystem::path& dir);

}  // namespace ccd
