#include "ccd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ccd/common.hpp"
#include "ccd/datagen.hpp"
#include "ccd/pseudolabel.hpp"
#include "ccd/trainer.hpp"

namespace ccd {

GradCheckConfig GradCheckConfig::tiny() {
  GradCheckConfig c;
  c.model.encoder.embed_dim = 16;
  c.model.encoder.depth = 2;
  c.model.encoder.heads = 2;
  c.model.encoder.input_h = 8;
  c.model.encoder.input_w = 16;
  c.model.head.seg_channels = 4;
  c.model.head.proj_hidden = 32;
  c.model.head.proj_bottleneck = 16;
  c.model.head.out_dim = 32;
  return c;
}

void GradCheckConfig::validate() const {
  model.validate();
  distill.validate();
  if (batch < 1) throw ValidationError("gradcheck batch must be >= 1");
  if (min_params < 1) throw ValidationError("gradcheck needs at least one probe");
  if (!(step > 0.0)) throw ValidationError("finite-difference step must be positive");
}

std::vector<std::string> GradCheckReport::failing(double tolerance) const {
  std::vector<std::string> out;
  for (const auto& t : tensors) {
    if (!(t.max_rel_error < tolerance)) out.push_back(t.name);
  }
  return out;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace {

DataGenConfig small_glyphs(int h, int w) {
  DataGenConfig g;
  g.height = h;
  g.width = w;
  g.min_length = 1;
  g.max_length = std::max(1, std::min(2, (w - 2 + 2) / (kGlyphCols + 2)));
  g.scale = std::max(1, h / kGlyphRows);
  g.min_stroke = g.max_stroke = g.scale;
  g.min_gap = g.max_gap = 2;
  g.vertical_jitter = 0;
  g.min_noise = g.max_noise = 0.05;
  return g;
}

// Scaled so that activations and gradients are O(1) everywhere; the default
// 0.02 initialization leaves many gradients near the finite-difference noise.
void randomize(ParamStore<double>& p, Rng& rng) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& s = p.spec(i);
    auto& v = p.values(i);
    if (s.shape.size() == 1) {
      const bool gain = s.name.size() > 7 && s.name.compare(s.name.size() - 7, 7, ".weight") == 0;
      for (auto& x : v) x = (gain ? 1.0 : 0.0) + 0.2 * rng.normal();
      if (s.name.find("running_var") != std::string::npos) std::fill(v.begin(), v.end(), 1.0);
      if (s.name.find("running_mean") != std::string::npos) std::fill(v.begin(), v.end(), 0.0);
    } else {
      const double fan_in = static_cast<double>(s.numel()) / static_cast<double>(s.shape.back());
      const double sd = 1.0 / std::sqrt(fan_in);
      for (auto& x : v) x = sd * rng.normal();
    }
  }
  normalize_unit_rows(p);
}

}  // namespace

GradCheckReport grad_check(const GradCheckConfig& cfg) {
  cfg.validate();
  const auto& enc = cfg.model.encoder;
  Rng rng(cfg.seed);

  ParamStore<double> student = build_layout(cfg.model).cast<double>();
  randomize(student, rng);
  ParamStore<double> teacher = make_teacher(student);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    for (auto& x : teacher.values(i)) x += 0.05 * std::abs(x) * rng.normal();
  }
  CenterVector center(cfg.model.head.out_dim);
  for (Eigen::Index j = 0; j < center.size(); ++j) center(j) = 0.1 * rng.normal();

  const DataGenConfig gen = small_glyphs(enc.input_h, enc.input_w);
  AugmentConfig aug;
  aug.geometry.rotation_deg = 5.0;
  aug.geometry.perspective_frac = 0.05;
  std::vector<BatchItem> batch;
  std::vector<CharMaskSet> fixed;
  for (int b = 0; b < cfg.batch; ++b) {
    const GlyphSample sample = render_sample(rng.fork_seed(static_cast<std::uint64_t>(b)), gen);
    batch.push_back(make_batch_item(sample.image, rng.fork_seed(100 + static_cast<std::uint64_t>(b)), aug));
    fixed.push_back(sample.gt_masks);
  }
  const MaskProvider masks = [&](std::size_t s, const BinaryMask&) { return fixed[s]; };

  // The finite-difference reference runs in extended precision: some true
  // gradients are exactly zero (key biases under softmax shift invariance)
  // and double rounding in the loss would dominate the relative error there.
  ParamStore<long double> probe = student.cast<long double>();
  const ParamStore<long double> teacher_wide = teacher.cast<long double>();
  auto loss = [&](const ParamStore<long double>& p) {
    return compute_loss<long double>(cfg.model, cfg.distill, p, teacher_wide, center, batch, masks, nullptr).l_total;
  };
  ParamStore<double> grads = student.zeros_like();
  compute_loss<double>(cfg.model, cfg.distill, student, teacher, center, batch, masks, &grads);
  if (!cfg.zero_tensor.empty()) {
    auto& g = grads.values(grads.index(cfg.zero_tensor));
    std::fill(g.begin(), g.end(), 0.0);
  }

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (student.spec(i).trainable) trainable.push_back(i);
  }
  const int per_tensor =
      std::max(2, static_cast<int>((cfg.min_params + trainable.size() - 1) / trainable.size()));

  GradCheckReport report;
  for (std::size_t i : trainable) {
    TensorCheck tc;
    tc.name = student.spec(i).name;
    tc.role = student.spec(i).role;
    const std::size_t numel = student.values(i).size();
    std::vector<std::size_t> idx(numel);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(per_tensor), numel);
    for (std::size_t k = 0; k < take; ++k) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(k), static_cast<int>(numel - 1)));
      std::swap(idx[k], idx[j]);
    }
    for (std::size_t k = 0; k < take; ++k) {
      long double& x = probe.values(i)[idx[k]];
      const long double orig = x;
      x = orig + cfg.step;
      const long double up = loss(probe);
      x = orig - cfg.step;
      const long double down = loss(probe);
      x = orig;
      const double numeric = static_cast<double>((up - down) / (2.0L * cfg.step));
      const double err = relative_error(grads.values(i)[idx[k]], numeric);
      tc.max_rel_error = std::max(tc.max_rel_error, err);
      ++tc.probes;
    }
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    report.probes += tc.probes;
    report.tensors.push_back(tc);
  }
  return report;
}

}  // namespace ccd
