#include "ccd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "ccd/common.hpp"

namespace ccd {

// --- schedules and optimizer -------------------------------------------------

double Schedule::value(long step) const {
  if (step < 0 || step > total_steps) throw ValidationError("schedule step out of range");
  if (step == total_steps) return final;
  if (step < warmup_steps) return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const long t = step - warmup_steps, span = total_steps - warmup_steps;
  if (t == 0) return base;
  return final + 0.5 * (base - final) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / span));
}

OptState OptState::for_store(const ParamStore<float>& params, AdamConfig cfg) {
  OptState s;
  s.cfg = cfg;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.values(i).size(), 0.0f);
    s.v.emplace_back(params.values(i).size(), 0.0f);
  }
  return s;
}

void adamw_step(ParamStore<float>& params, const ParamStore<float>& grads, OptState& opt, double lr, double wd) {
  if (!params.same_layout(grads) || opt.m.size() != params.size()) {
    throw ValidationError("optimizer state does not match the parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!params.spec(i).trainable) continue;
    for (float g : grads.values(i)) {
      if (!std::isfinite(g)) throw RuntimeError("non-finite gradient in tensor " + grads.spec(i).name);
    }
  }
  ++opt.step;
  const float b1 = static_cast<float>(opt.cfg.beta1), b2 = static_cast<float>(opt.cfg.beta2);
  const double c1 = 1.0 - std::pow(opt.cfg.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.cfg.beta2, static_cast<double>(opt.step));
  const float step_size = static_cast<float>(lr / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(opt.cfg.eps);
  const float decay = static_cast<float>(1.0 - lr * wd);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& spec = params.spec(i);
    if (!spec.trainable) continue;
    auto& p = params.values(i);
    const auto& g = grads.values(i);
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (spec.decay) p[k] *= decay;
      m[k] = b1 * m[k] + (1.0f - b1) * g[k];
      v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
      p[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  }
  normalize_unit_rows(params);
}

// --- configuration ----------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  distill.validate();
  cluster.validate();
  augment.geometry.validate();
  augment.color.validate();
  if (batch < 1) throw ValidationError("batch must be >= 1");
  if (steps < 0) throw ValidationError("steps must be >= 0");
  if (!(lr >= 0.0) || !(min_lr >= 0.0)) throw ValidationError("learning rates must be >= 0");
  if (!(wd_start >= 0.0) || !(wd_end >= 0.0)) throw ValidationError("weight decay must be >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ValidationError("warmup_fraction must lie in [0, 1]");
  if (log_every < 1) throw ValidationError("log_every must be >= 1");
  if (bootstrap_eval_every < 1) throw ValidationError("bootstrap_eval_every must be >= 1");
  if (bootstrap_eval_samples < 0) throw ValidationError("bootstrap_eval_samples must be >= 0");
}

namespace {

long schedule_span(long steps) { return std::max(steps - 1, 0L); }

}  // namespace

Schedule TrainConfig::lr_schedule() const {
  const long total = schedule_span(steps);
  const long warm = std::min(total, static_cast<long>(std::lround(warmup_fraction * static_cast<double>(steps))));
  return {lr, min_lr, total, warm};
}

Schedule TrainConfig::wd_schedule() const { return {wd_start, wd_end, schedule_span(steps), 0}; }

Schedule TrainConfig::lambda_schedule() const {
  return {distill.lambda_start, distill.lambda_end, schedule_span(steps), 0};
}

// --- objective ----------------------------------------------------------------

template <class T>
LossOutput<T> compute_loss(const ModelConfig& cfg, const DistillConfig& dcfg, const ParamStore<T>& student,
                           const ParamStore<T>& teacher, const CenterVector& center,
                           const std::vector<BatchItem>& batch, const MaskProvider& masks, ParamStore<T>* grads,
                           ParamStore<T>* bn_running, std::size_t workers, ParamStore<T>* teacher_grads) {
  const std::size_t n = batch.size();
  const Model<T> sm(cfg, student), tm(cfg, teacher);
  if (!sm.seg) throw ValidationError("student store has no segmentation head");
  const bool want = grads != nullptr;
  const bool distill = dcfg.distill_weight > 0.0;
  const int gh = cfg.encoder.grid_h(), gw = cfg.encoder.grid_w(), patch = cfg.encoder.patch;
  const int d = cfg.encoder.embed_dim;
  if (teacher_grads) *teacher_grads = teacher.zeros_like();

  std::vector<EncoderCache<T>> c_reg(n), c_irr(n);
  std::vector<EncoderOutput<T>> s_reg(n), s_irr(n), t_reg(n), t_irr(n);
  parallel_for(n, workers, [&](std::size_t s) {
    const auto& v = batch[s].views;
    s_reg[s] = sm.encoder.forward(v.x_reg, student, want ? &c_reg[s] : nullptr, !distill);
    if (distill) {
      s_irr[s] = sm.encoder.forward(v.x_irr, student, want ? &c_irr[s] : nullptr);
      t_reg[s] = tm.encoder.forward(v.x_reg, teacher);
      t_irr[s] = tm.encoder.forward(v.x_irr, teacher);
    }
  });

  LossOutput<T> out;
  std::vector<TapSet<T>> taps(n);
  for (std::size_t s = 0; s < n; ++s) {
    taps[s] = {&s_reg[s].taps[0].data, &s_reg[s].taps[1].data, &s_reg[s].taps[2].data};
  }
  SegCache<T> seg_cache;
  const auto logits = sm.seg->forward(taps, student, true, want ? &seg_cache : nullptr, bn_running);
  std::vector<Mat<T>> d_logits(n);
  out.seg_pred.resize(n);
  const double seg_scale = n > 0 ? dcfg.seg_weight / static_cast<double>(n) : 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    auto sl = seg_loss<T>(logits[s], batch[s].m_pl);
    out.l_seg += sl.value;
    d_logits[s] = sl.grad * T(seg_scale);
    out.seg_pred[s] = logits_to_mask(logits[s], cfg.encoder.input_h, cfg.encoder.input_w);
  }
  if (n > 0) out.l_seg /= static_cast<LossScalar<T>>(n);

  std::vector<Mat<T>> pool_reg(n), pool_irr(n);
  std::vector<Eigen::Index> offset(n + 1, 0);
  ProjCache<T> cache_r, cache_i;
  DistillLoss<T> dl;
  if (distill) {
    for (std::size_t s = 0; s < n; ++s) {
      const AlignedMaskQuad quad = align_masks(masks(s, out.seg_pred[s]), batch[s].views.pi_irr);
      pool_reg[s] = pooling_matrix<T>(quad.s_reg, gh, gw, patch);
      pool_irr[s] = pooling_matrix<T>(quad.s_irr, gh, gw, patch);
      if (pool_reg[s].rows() != static_cast<Eigen::Index>(quad.size()) || pool_irr[s].rows() != pool_reg[s].rows()) {
        throw RuntimeError("aligned character sets lost a member during pooling");
      }
      offset[s + 1] = offset[s] + pool_reg[s].rows();
    }
    const Eigen::Index l = offset[n];
    Mat<T> v_sr(l, d), v_si(l, d), v_tr(l, d), v_ti(l, d);
    for (std::size_t s = 0; s < n; ++s) {
      const Eigen::Index r = pool_reg[s].rows();
      if (r == 0) continue;
      v_sr.middleRows(offset[s], r).noalias() = pool_reg[s] * s_reg[s].features.data;
      v_si.middleRows(offset[s], r).noalias() = pool_irr[s] * s_irr[s].features.data;
      v_tr.middleRows(offset[s], r).noalias() = pool_reg[s] * t_reg[s].features.data;
      v_ti.middleRows(offset[s], r).noalias() = pool_irr[s] * t_irr[s].features.data;
    }
    const Mat<T> r_s = sm.proj.forward(v_sr, student, want ? &cache_r : nullptr);
    const Mat<T> i_s = sm.proj.forward(v_si, student, want ? &cache_i : nullptr);
    const Mat<T> r_t = tm.proj.forward(v_tr, teacher);
    const Mat<T> i_t = tm.proj.forward(v_ti, teacher);
    dl = distill_loss<T>(r_t, i_t, r_s, i_s, dcfg, dcfg.centering ? &center : nullptr);
    out.l_dis = dl.value;
    out.chars = static_cast<std::size_t>(l);
    out.teacher_logits.resize(2 * l, r_t.cols());
    out.teacher_logits << r_t, i_t;
  }
  out.l_total = LossScalar<T>(dcfg.distill_weight) * out.l_dis + LossScalar<T>(dcfg.seg_weight) * out.l_seg;
  if (!want) return out;

  Mat<T> d_vsr, d_vsi;
  if (distill) {
    d_vsr = sm.proj.backward(cache_r, dl.d_reg_student * T(dcfg.distill_weight), student, *grads);
    d_vsi = sm.proj.backward(cache_i, dl.d_irr_student * T(dcfg.distill_weight), student, *grads);
  }
  std::vector<std::array<Mat<T>, 3>> d_taps;
  sm.seg->backward(seg_cache, d_logits, student, *grads, d_taps);

  // Per-sample encoder gradients, reduced into grads in sample order.
  const std::size_t lanes = std::max<std::size_t>(1, std::min(resolve_workers(workers), n));
  std::vector<ParamStore<T>> lane_grads(lanes, grads->zeros_like());
  std::vector<std::size_t> enc_tensors;
  for (std::size_t i = 0; i < grads->size(); ++i) {
    if (grads->spec(i).role == ParamRole::encoder) enc_tensors.push_back(i);
  }
  for (std::size_t base = 0; base < n; base += lanes) {
    const std::size_t count = std::min(lanes, n - base);
    parallel_for(count, lanes, [&](std::size_t j) {
      const std::size_t s = base + j;
      auto& buf = lane_grads[j];
      for (std::size_t i : enc_tensors) std::fill(buf.values(i).begin(), buf.values(i).end(), T(0));
      const std::array<const Mat<T>*, 3> dt{&d_taps[s][0], &d_taps[s][1], &d_taps[s][2]};
      if (distill) {
        const Eigen::Index r = pool_reg[s].rows();
        const Mat<T> dh_reg = pool_reg[s].transpose() * d_vsr.middleRows(offset[s], r);
        const Mat<T> dh_irr = pool_irr[s].transpose() * d_vsi.middleRows(offset[s], r);
        sm.encoder.backward(c_reg[s], &dh_reg, dt, student, buf);
        sm.encoder.backward(c_irr[s], &dh_irr, {nullptr, nullptr, nullptr}, student, buf);
      } else {
        sm.encoder.backward(c_reg[s], nullptr, dt, student, buf);
      }
    });
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t i : enc_tensors) {
        auto& dst = grads->values(i);
        const auto& src = lane_grads[j].values(i);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }
  return out;
}

template <class T>
double output_std(const Mat<T>& logits) {
  if (logits.rows() < 2 || logits.cols() == 0) return 0.0;
  const Mat<double> x = logits.template cast<double>();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::RowVectorXd var = (x.rowwise() - mean).array().square().colwise().mean();
  return var.array().sqrt().mean();
}

// --- training -----------------------------------------------------------------

namespace {

constexpr std::uint64_t kInitTag = 0x1a2b3c4d5e6f7788ULL;
constexpr std::uint64_t kOrderTag = 0x0badc0ffee123457ULL;
constexpr std::uint64_t kViewTag = 0x51de5eed0ddba11ULL;

std::uint64_t item_seed(std::uint64_t seed, long step, std::size_t index) {
  return splitmix64(splitmix64(splitmix64(seed ^ kViewTag) + static_cast<std::uint64_t>(step)) + index);
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i - 1)));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

TrainState TrainState::init(const TrainConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.cfg = cfg;
  st.student = init_params(cfg.model, splitmix64(cfg.seed ^ kInitTag));
  st.teacher = make_teacher(st.student);
  st.opt = OptState::for_store(st.student);
  st.center = CenterVector::Zero(cfg.model.head.out_dim);
  return st;
}

BatchItem make_batch_item(const ImageBuffer& img, std::uint64_t seed, const AugmentConfig& aug) {
  Rng rng(seed);
  BatchItem item;
  item.views = make_view_pair(img, rng, aug);
  try {
    item.m_pl = pseudo_label(item.views.x_reg);
  } catch (const ValidationError&) {
    item.m_pl = BinaryMask(img.height, img.width);  // constant view: no text evidence
  }
  return item;
}

StepMetrics pretrain_step(const std::vector<ImageBuffer>& images, TrainState& st) {
  const auto& cfg = st.cfg;
  const long step = st.step;
  StepMetrics m;
  m.step = step;
  m.lr = cfg.lr_schedule().value(step);
  m.wd = cfg.wd_schedule().value(step);
  m.lambda = cfg.lambda_schedule().value(step);

  std::vector<BatchItem> items(images.size());
  parallel_for(items.size(), cfg.workers, [&](std::size_t s) {
    items[s] = make_batch_item(images[s], item_seed(cfg.seed, step, s), cfg.augment);
  });
  const bool predicted = st.predicted_masks;
  const MaskProvider provider = [&](std::size_t s, const BinaryMask& pred) {
    return char_masks_from_seg(predicted ? pred : items[s].m_pl, cfg.cluster);
  };
  ParamStore<float> grads = st.student.zeros_like();
  const auto out = compute_loss<float>(cfg.model, cfg.distill, st.student, st.teacher, st.center, items, provider,
                                       &grads, &st.student, cfg.workers);

  adamw_step(st.student, grads, st.opt, m.lr, m.wd);
  if (cfg.distill.centering) update_center(st.center, out.teacher_logits, cfg.distill.center_momentum);
  ema_update(st.teacher, st.student, m.lambda);
  ++st.step;

  m.l_dis = out.l_dis;
  m.l_seg = out.l_seg;
  m.l_total = out.l_total;
  m.chars = out.chars;
  m.teacher_std = output_std(out.teacher_logits);
  return m;
}

std::vector<BinaryMask> predict_text_masks(const ModelConfig& cfg, const ParamStore<float>& student,
                                           const std::vector<ImageBuffer>& images, std::size_t workers) {
  const Model<float> model(cfg, student);
  if (!model.seg) throw ValidationError("checkpoint has no segmentation head");
  std::vector<BinaryMask> out(images.size());
  parallel_for(images.size(), workers, [&](std::size_t i) {
    const auto enc = model.encoder.forward(images[i], student, nullptr, true);
    const std::vector<TapSet<float>> taps{{&enc.taps[0].data, &enc.taps[1].data, &enc.taps[2].data}};
    const auto logits = model.seg->forward(taps, student, false);
    out[i] = logits_to_mask(logits[0], cfg.encoder.input_h, cfg.encoder.input_w);
  });
  return out;
}

double seg_iou_vs_pseudo(const ModelConfig& cfg, const ParamStore<float>& student,
                         const std::vector<ImageBuffer>& images, std::size_t workers) {
  if (images.empty()) return 0.0;
  const auto pred = predict_text_masks(cfg, student, images, workers);
  double total = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    BinaryMask pl;
    try {
      pl = pseudo_label(images[i]);
    } catch (const ValidationError&) {
      pl = BinaryMask(images[i].height, images[i].width);
    }
    total += mask_iou(pred[i], pl);
  }
  return total / static_cast<double>(images.size());
}

void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu\n", m.step, m.lr, m.wd, m.lambda, m.l_dis,
                m.l_seg, m.teacher_std, m.chars);
  os << buf;
}

TrainState pretrain(const std::vector<ImageBuffer>& dataset, const TrainConfig& cfg, std::ostream* metrics,
                    const std::function<void(const StepMetrics&)>& on_step) {
  cfg.validate();
  if (dataset.empty()) throw ValidationError("dataset is empty");
  const std::size_t holdout =
      std::min(static_cast<std::size_t>(cfg.bootstrap_eval_samples), dataset.size() / 5);
  const std::size_t n_train = dataset.size() - holdout;
  const std::vector<ImageBuffer> held(dataset.end() - static_cast<std::ptrdiff_t>(holdout), dataset.end());

  TrainState st = TrainState::init(cfg);
  if (metrics) *metrics << kMetricsHeader << '\n';

  Rng order_rng(splitmix64(cfg.seed ^ kOrderTag));
  std::vector<std::size_t> order(n_train);
  std::size_t cursor = n_train;
  for (long step = 0; step < cfg.steps; ++step) {
    if (!st.predicted_masks && holdout > 0 && step > 0 && step % cfg.bootstrap_eval_every == 0) {
      if (seg_iou_vs_pseudo(cfg.model, st.student, held, cfg.workers) > cfg.bootstrap_iou) {
        st.predicted_masks = true;
        st.predicted_masks_since = step;
      }
    }
    std::vector<ImageBuffer> images;
    images.reserve(static_cast<std::size_t>(cfg.batch));
    for (int k = 0; k < cfg.batch; ++k) {
      if (cursor == n_train) {
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        shuffle(order, order_rng);
        cursor = 0;
      }
      images.push_back(dataset[order[cursor++]]);
    }
    const StepMetrics m = pretrain_step(images, st);
    if (metrics && (step % cfg.log_every == 0 || step == cfg.steps - 1)) {
      write_metrics_row(*metrics, m);
      metrics->flush();
    }
    if (on_step) on_step(m);
  }
  return st;
}

#define CCD_INSTANTIATE(T)                                                                                         \
  template LossOutput<T> compute_loss<T>(const ModelConfig&, const DistillConfig&, const ParamStore<T>&,          \
                                         const ParamStore<T>&, const CenterVector&, const std::vector<BatchItem>&, \
                                         const MaskProvider&, ParamStore<T>*, ParamStore<T>*, std::size_t,         \
                                         ParamStore<T>*);                                                          \
  template double output_std<T>(const Mat<T>&);

CCD_INSTANTIATE(float)
CCD_INSTANTIATE(double)
template LossOutput<long double> compute_loss<long double>(
    const ModelConfig&, const DistillConfig&, const ParamStore<long double>&, const ParamStore<long double>&,
    const CenterVector&, const std::vector<BatchItem>&, const MaskProvider&, ParamStore<long double>*,
    ParamStore<long double>*, std::size_t, ParamStore<long double>*);

}  // namespace ccd
