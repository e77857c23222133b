#include "ccd/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include "json.hpp"
#include <sstream>

namespace ccd {

namespace {

using Bitmap = std::array<const char*, kGlyphRows>;

// clang-format off
const std::array<Bitmap, kGlyphClasses> kFont = {{
  {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},  // A
  {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."},  // B
  {".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."},  // C
  {"####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."},  // D
  {"#####", "#....", "#....", "####.", "#....", "#....", "#####"},  // E
  {"#####", "#....", "#....", "####.", "#....", "#....", "#...."},  // F
  {".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"},  // G
  {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},  // H
  {".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."},  // I
  {"..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."},  // J
  {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"},  // K
  {"#....", "#....", "#....", "#....", "#....", "#....", "#####"},  // L
  {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"},  // M
  {"#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"},  // N
  {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},  // O
  {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."},  // P
  {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"},  // Q
  {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"},  // R
  {".####", "#....", "#....", ".###.", "....#", "....#", "####."},  // S
  {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."},  // T
  {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},  // U
  {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."},  // V
  {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."},  // W
  {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"},  // X
  {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."},  // Y
  {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"},  // Z
}};
// clang-format on

float quantize8(double v) {
  const long k = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<float>(static_cast<double>(k) / 255.0);
}

std::string index_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

const std::array<const char*, kGlyphRows>& glyph_bitmap(int cls) {
  if (cls < 0 || cls >= kGlyphClasses) throw ValidationError("glyph class out of range: " + std::to_string(cls));
  return kFont[static_cast<std::size_t>(cls)];
}

void DataGenConfig::validate() const {
  if (alphabet.empty()) throw ValidationError("alphabet is empty");
  for (char ch : alphabet) {
    if (ch < 'A' || ch > 'Z') throw ValidationError(std::string("alphabet has no bitmap for '") + ch + "'");
  }
  if (min_length < 1 || max_length < min_length) throw ValidationError("word length range must satisfy 1 <= min <= max");
  if (scale < 1 || min_stroke < 1 || max_stroke < min_stroke || max_stroke > scale) {
    throw ValidationError("stroke thickness must lie in [1, scale]");
  }
  if (min_gap < 0 || max_gap < min_gap) throw ValidationError("gap range must satisfy 0 <= min <= max");
  if (vertical_jitter < 0) throw ValidationError("vertical_jitter must be non-negative");
  if (text.lo > text.hi || background.lo > background.hi || text.lo < 0 || text.hi > 1 || background.lo < 0 ||
      background.hi > 1) {
    throw ValidationError("intensity ranges must lie in [0,1]");
  }
  if (text.lo - background.hi < 0.2 - 1e-12) {
    throw ValidationError("text and background intensity ranges must be separated by at least 0.2");
  }
  if (min_noise < 0 || max_noise < min_noise) throw ValidationError("noise range must satisfy 0 <= min <= max");
  if (touching_probability < 0 || touching_probability > 1 || dark_text_probability < 0 ||
      dark_text_probability > 1) {
    throw ValidationError("probabilities must lie in [0,1]");
  }
  const int widest = max_length * kGlyphCols * scale + (max_length - 1) * max_gap;
  if (widest > width - 2 || kGlyphRows * scale > height) throw ValidationError("layout overflow");
}

std::string GlyphSample::text() const {
  std::string s;
  s.reserve(labels.size());
  for (int c : labels) s.push_back(static_cast<char>('A' + c));
  return s;
}

BinaryMask GlyphSample::text_mask() const {
  BinaryMask out = gt_masks.empty() ? BinaryMask(image.height, image.width)
                                    : BinaryMask(gt_masks.front().height, gt_masks.front().width);
  for (const auto& m : gt_masks) {
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] |= m.data[i];
  }
  return out;
}

GlyphSample render_sample(Rng& rng, const DataGenConfig& cfg) {
  cfg.validate();
  GlyphSample s;
  const int len = rng.uniform_int(cfg.min_length, cfg.max_length);
  for (int i = 0; i < len; ++i) {
    const char ch = cfg.alphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cfg.alphabet.size()) - 1))];
    s.labels.push_back(ch - 'A');
  }
  const int stroke = rng.uniform_int(cfg.min_stroke, cfg.max_stroke);
  std::vector<int> gaps(static_cast<std::size_t>(len - 1), 0);
  for (int& g : gaps) g = rng.bernoulli(cfg.touching_probability) ? 0 : rng.uniform_int(cfg.min_gap, cfg.max_gap);

  const int cell_w = kGlyphCols * cfg.scale;
  const int cell_h = kGlyphRows * cfg.scale;
  int total = len * cell_w;
  for (int g : gaps) total += g;
  if (total > cfg.width - 2) throw RuntimeError("layout overflow");
  int x = rng.uniform_int(1, cfg.width - 1 - total);
  const int top0 = (cfg.height - cell_h) / 2;

  const double text_value = rng.uniform(cfg.text.lo, cfg.text.hi);
  const double bg_value = rng.uniform(cfg.background.lo, cfg.background.hi);
  const bool dark = rng.bernoulli(cfg.dark_text_probability);
  const double sigma = rng.uniform(cfg.min_noise, cfg.max_noise);

  const int inset = (cfg.scale - stroke) / 2;
  for (int i = 0; i < len; ++i) {
    const int top = std::clamp(top0 + rng.uniform_int(-cfg.vertical_jitter, cfg.vertical_jitter), 0,
                               cfg.height - cell_h);
    BinaryMask mask(cfg.height, cfg.width);
    const auto& bitmap = kFont[static_cast<std::size_t>(s.labels[static_cast<std::size_t>(i)])];
    for (int r = 0; r < kGlyphRows; ++r) {
      for (int c = 0; c < kGlyphCols; ++c) {
        if (bitmap[static_cast<std::size_t>(r)][c] != '#') continue;
        for (int dy = 0; dy < stroke; ++dy) {
          for (int dx = 0; dx < stroke; ++dx) mask.at(top + r * cfg.scale + inset + dy, x + c * cfg.scale + inset + dx) = 1;
        }
      }
    }
    s.gt_masks.push_back(std::move(mask));
    x += cell_w + (i + 1 < len ? gaps[static_cast<std::size_t>(i)] : 0);
  }

  const BinaryMask ink = s.text_mask();
  s.image = ImageBuffer(cfg.height, cfg.width, 1);
  for (std::size_t p = 0; p < s.image.data.size(); ++p) {
    double v = ink.data[p] ? text_value : bg_value;
    if (dark) v = 1.0 - v;
    if (sigma > 0.0) v += sigma * rng.normal();
    s.image.data[p] = quantize8(v);
  }
  return s;
}

GlyphSample render_sample(std::uint64_t seed, const DataGenConfig& cfg) {
  Rng rng(seed);
  GlyphSample s = render_sample(rng, cfg);
  s.seed = seed;
  return s;
}

std::uint64_t sample_seed(std::uint64_t base_seed, std::size_t index) {
  return splitmix64(splitmix64(base_seed) + static_cast<std::uint64_t>(index));
}

std::vector<GlyphSample> generate_corpus(std::size_t count, std::uint64_t base_seed, const DataGenConfig& cfg) {
  cfg.validate();
  std::vector<GlyphSample> out(count);
  parallel_for(count, 0, [&](std::size_t i) { out[i] = render_sample(sample_seed(base_seed, i), cfg); });
  return out;
}

// --- PGM ------------------------------------------------------------------

void write_pgm_bytes(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& px) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot open for writing: " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw RuntimeError("write failed: " + path.string());
}

void write_pgm(const std::filesystem::path& path, const ImageBuffer& img) {
  const ImageBuffer gray = to_grayscale(img);
  std::vector<std::uint8_t> px(gray.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(gray.data[i]), 0.0, 1.0) * 255.0));
  }
  write_pgm_bytes(path, gray.height, gray.width, px);
}

std::vector<std::uint8_t> read_pgm_bytes(const std::filesystem::path& path, int& height, int& width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot open: " + path.string());
  auto fail = [&](const std::string& why) { return RuntimeError("corrupt PGM " + path.string() + ": " + why); };
  auto next_token = [&]() {
    std::string tok;
    char c = 0;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        tok.push_back(c);
        break;
      }
    }
    while (is.get(c) && !std::isspace(static_cast<unsigned char>(c))) tok.push_back(c);
    return tok;
  };
  if (next_token() != "P5") throw fail("not a binary P5 file");
  int maxval = 0;
  try {
    width = std::stoi(next_token());
    height = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw fail("malformed header");
  }
  if (width <= 0 || height <= 0 || maxval != 255) throw fail("unsupported dimensions or maxval");
  std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (is.gcount() != static_cast<std::streamsize>(px.size())) throw fail("truncated pixel data");
  return px;
}

ImageBuffer read_pgm(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto px = read_pgm_bytes(path, h, w);
  ImageBuffer img(h, w, 1);
  for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = static_cast<float>(px[i] / 255.0);
  return img;
}

std::vector<std::uint8_t> encode_label_map(const CharMaskSet& masks, int height, int width) {
  if (masks.size() > 255) throw ValidationError("at most 255 characters per label map");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(height) * width, 0);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (masks[k].height != height || masks[k].width != width) throw ValidationError("mask dimension mismatch");
    for (std::size_t p = 0; p < out.size(); ++p) {
      if (masks[k].data[p]) out[p] = static_cast<std::uint8_t>(k + 1);
    }
  }
  return out;
}

// --- dataset directory ------------------------------------------------------

DatasetManifest write_dataset(const std::vector<GlyphSample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest manifest;
  manifest.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ManifestRecord rec{index_name(i), index_name(i) + ".pgm", index_name(i) + "_mask.pgm", s.text()};
    write_pgm(dir / rec.image, s.image);
    write_pgm_bytes(dir / rec.mask, s.image.height, s.image.width,
                    encode_label_map(s.gt_masks, s.image.height, s.image.width));
    manifest.push_back(std::move(rec));
  }
  const auto mpath = dir / kManifestName;
  std::ofstream os(mpath, std::ios::binary);
  if (!os) throw RuntimeError("cannot open for writing: " + mpath.string());
  for (const auto& r : manifest) {
    nlohmann::json j = {{"id", r.id}, {"image", r.image}, {"mask", r.mask}, {"text", r.text}};
    os << j.dump() << '\n';
  }
  if (!os) throw RuntimeError("write failed: " + mpath.string());
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto mpath = dir / kManifestName;
  std::ifstream is(mpath, std::ios::binary);
  if (!is) throw RuntimeError("cannot open manifest: " + mpath.string());
  DatasetManifest manifest;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      manifest.push_back({j.at("id").get<std::string>(), j.at("image").get<std::string>(),
                          j.at("mask").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw RuntimeError("corrupt manifest " + mpath.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return manifest;
}

DatasetReader::DatasetReader(std::filesystem::path dir) : dir_(std::move(dir)), manifest_(read_manifest(dir_)) {}

ImageBuffer DatasetReader::read_image(std::size_t i) const { return read_pgm(dir_ / record(i).image); }

GlyphSample DatasetReader::read(std::size_t i) const {
  const auto& rec = record(i);
  GlyphSample s;
  s.image = read_image(i);
  const auto mask_path = dir_ / rec.mask;
  int h = 0, w = 0;
  const auto labels = read_pgm_bytes(mask_path, h, w);
  if (h != s.image.height || w != s.image.width) {
    throw RuntimeError("dimension mismatch between image and mask: " + mask_path.string());
  }
  const std::size_t len = rec.text.size();
  for (char ch : rec.text) {
    if (ch < 'A' || ch > 'Z') throw RuntimeError("unsupported character in record " + rec.id);
    s.labels.push_back(ch - 'A');
  }
  s.gt_masks.assign(len, BinaryMask(h, w));
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const std::size_t k = labels[p];
    if (k == 0) continue;
    if (k > len) {
      throw RuntimeError("mask value " + std::to_string(k) + " exceeds word length " + std::to_string(len) + ": " +
                         mask_path.string());
    }
    s.gt_masks[k - 1].data[p] = 1;
  }
  for (std::size_t k = 0; k < len; ++k) {
    if (s.gt_masks[k].empty()) {
      throw RuntimeError("character " + std::to_string(k + 1) + " has an empty mask: " + mask_path.string());
    }
  }
  return s;
}

std::vector<GlyphSample> DatasetReader::read_all() const {
  std::vector<GlyphSample> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = read(i);
  return out;
}

std::vector<GlyphSample> read_dataset(const std::filesystem::path& dir) { return DatasetReader(dir).read_all(); }

}  // namespace ccd
