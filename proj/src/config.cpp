#include "ccd/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "ccd/common.hpp"

namespace ccd {

namespace {

// key, default
const std::vector<std::pair<std::string, std::string>> kDefaults = {
    {"encoder", "tiny"},
    {"embed_dim", "preset"},
    {"depth", "preset"},
    {"heads", "preset"},
    {"patch", "4"},
    {"input_h", "32"},
    {"input_w", "128"},
    {"seg_channels", "32"},
    {"proj_hidden", "2048"},
    {"proj_bottleneck", "256"},
    {"n", "1024"},
    {"tau_s", "0.1"},
    {"tau_t", "0.04"},
    {"lambda_start", "0.996"},
    {"lambda_end", "1"},
    {"center_momentum", "0.9"},
    {"seg_weight", "1"},
    {"distill_weight", "1"},
    {"lr", "0.0005"},
    {"min_lr", "1e-06"},
    {"wd_start", "0.04"},
    {"wd_end", "0.4"},
    {"warmup_fraction", "0.1"},
    {"batch", "16"},
    {"steps", "2000"},
    {"eps", "1.5"},
    {"min_samples", "4"},
    {"rotation", "15"},
    {"shear", "10"},
    {"scale_min", "0.8"},
    {"scale_max", "1.2"},
    {"translate", "0.1"},
    {"perspective", "0.1"},
    {"brightness", "0.4"},
    {"contrast", "0.4"},
    {"grayscale_prob", "0.2"},
    {"dropout_prob", "0.1"},
    {"log_every", "10"},
    {"bootstrap_iou", "0.5"},
    {"bootstrap_eval_every", "50"},
    {"bootstrap_eval_samples", "32"},
    {"gradcheck_batch", "2"},
    {"gradcheck_params", "200"},
    {"gradcheck_step", "1e-05"},
    {"seed", "0"},
    {"workers", "1"},
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

RunConfig::RunConfig() : entries_(kDefaults) {}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  cfg.parse(ss.str(), path.string());
  return cfg;
}

void RunConfig::parse(std::string_view text, const std::string& origin) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    try {
      set(key, value);
    } catch (const ValidationError& e) {
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      if (value.empty()) throw ValidationError("empty value for config key " + key);
      v = value;
      return;
    }
  }
  throw ValidationError("unknown config key: " + key);
}

const std::string& RunConfig::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw ValidationError("unknown config key: " + key);
}

bool RunConfig::has(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return true;
  }
  return false;
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

double RunConfig::number(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError("config key " + key + " expects a number, got '" + s + "'");
  }
  return v;
}

long RunConfig::integer(const std::string& key) const {
  const std::string& s = get(key);
  long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError("config key " + key + " expects an integer, got '" + s + "'");
  }
  return v;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.encoder = EncoderConfig::preset(get("encoder"));
  if (get("embed_dim") != "preset") m.encoder.embed_dim = static_cast<int>(integer("embed_dim"));
  if (get("depth") != "preset") m.encoder.depth = static_cast<int>(integer("depth"));
  if (get("heads") != "preset") m.encoder.heads = static_cast<int>(integer("heads"));
  m.encoder.patch = static_cast<int>(integer("patch"));
  m.encoder.input_h = static_cast<int>(integer("input_h"));
  m.encoder.input_w = static_cast<int>(integer("input_w"));
  m.head.seg_channels = static_cast<int>(integer("seg_channels"));
  m.head.proj_hidden = static_cast<int>(integer("proj_hidden"));
  m.head.proj_bottleneck = static_cast<int>(integer("proj_bottleneck"));
  m.head.out_dim = static_cast<int>(integer("n"));
  m.validate();
  return m;
}

namespace {

DistillConfig distill_from(const RunConfig& rc, const std::function<double(const std::string&)>& num) {
  DistillConfig d;
  d.tau_s = num("tau_s");
  d.tau_t = num("tau_t");
  d.lambda_start = num("lambda_start");
  d.lambda_end = num("lambda_end");
  if (rc.get("center_momentum") == "off") {
    d.centering = false;
  } else {
    d.center_momentum = num("center_momentum");
  }
  d.seg_weight = num("seg_weight");
  d.distill_weight = num("distill_weight");
  d.validate();
  return d;
}

}  // namespace

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  auto num = [this](const std::string& k) { return number(k); };
  t.model = model_config();
  t.distill = distill_from(*this, num);
  t.cluster.eps = number("eps");
  t.cluster.min_samples = static_cast<int>(integer("min_samples"));
  auto& g = t.augment.geometry;
  g.rotation_deg = number("rotation");
  g.shear_deg = number("shear");
  g.scale_min = number("scale_min");
  g.scale_max = number("scale_max");
  g.translate_frac = number("translate");
  g.perspective_frac = number("perspective");
  auto& c = t.augment.color;
  c.brightness = number("brightness");
  c.contrast = number("contrast");
  c.grayscale_prob = number("grayscale_prob");
  c.dropout_prob = number("dropout_prob");
  t.batch = static_cast<int>(integer("batch"));
  t.steps = integer("steps");
  t.lr = number("lr");
  t.min_lr = number("min_lr");
  t.wd_start = number("wd_start");
  t.wd_end = number("wd_end");
  t.warmup_fraction = number("warmup_fraction");
  t.log_every = static_cast<int>(integer("log_every"));
  t.bootstrap_iou = number("bootstrap_iou");
  t.bootstrap_eval_every = static_cast<int>(integer("bootstrap_eval_every"));
  t.bootstrap_eval_samples = static_cast<int>(integer("bootstrap_eval_samples"));
  const long seed = integer("seed");
  if (seed < 0) throw ValidationError("config key seed must be >= 0");
  t.seed = static_cast<std::uint64_t>(seed);
  const long workers = integer("workers");
  if (workers < 0) throw ValidationError("config key workers must be >= 0");
  t.workers = static_cast<std::size_t>(workers);
  t.validate();
  return t;
}

GradCheckConfig RunConfig::gradcheck_config() const {
  GradCheckConfig g;
  auto num = [this](const std::string& k) { return number(k); };
  g.model = model_config();
  g.distill = distill_from(*this, num);
  g.batch = static_cast<int>(integer("gradcheck_batch"));
  g.min_params = static_cast<int>(integer("gradcheck_params"));
  g.step = number("gradcheck_step");
  const long seed = integer("seed");
  if (seed < 0) throw ValidationError("config key seed must be >= 0");
  g.seed = static_cast<std::uint64_t>(seed);
  g.validate();
  return g;
}

}  // namespace ccd
