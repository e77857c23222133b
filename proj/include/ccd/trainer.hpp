#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include "ccd/distill.hpp"
#include "ccd/model.hpp"
#include "ccd/pseudolabel.hpp"

namespace ccd {

/// Linear warmup from 0 to base, then cosine from base to final.
struct Schedule {
  double base = 0.0;
  double final = 0.0;
  long total_steps = 0;
  long warmup_steps = 0;

  /// Throws ValidationError when step lies outside [0, total_steps].
  double value(long step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  std::vector<std::vector<float>> m, v;
  long step = 0;
  AdamConfig cfg;

  static OptState for_store(const ParamStore<float>& params, AdamConfig cfg = {});
};

/// Decoupled decay (p -= lr*wd*p on decayed tensors), then the bias-corrected
/// Adam update; unit_rows tensors are renormalized afterwards. Throws
/// RuntimeError naming the tensor on a non-finite gradient, before any update.
void adamw_step(ParamStore<float>& params, const ParamStore<float>& grads, OptState& opt, double lr, double wd);

struct TrainConfig {
  ModelConfig model;
  DistillConfig distill;
  ClusterConfig cluster;
  AugmentConfig augment;
  int batch = 16;
  long steps = 2000;
  double lr = 5e-4;
  double min_lr = 1e-6;
  double wd_start = 0.04;
  double wd_end = 0.4;
  double warmup_fraction = 0.1;
  int log_every = 10;
  double bootstrap_iou = 0.5;     ///< switch to predicted masks above this held-out IoU
  int bootstrap_eval_every = 50;
  int bootstrap_eval_samples = 32;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
  Schedule lr_schedule() const;
  Schedule wd_schedule() const;
  Schedule lambda_schedule() const;
};

struct BatchItem {
  ViewPair views;
  BinaryMask m_pl;
};

/// Character masks S_reg for a sample, given its predicted text mask.
using MaskProvider = std::function<CharMaskSet(std::size_t sample, const BinaryMask& seg_pred)>;

template <class T>
struct LossOutput {
  LossScalar<T> l_dis = 0;
  LossScalar<T> l_seg = 0;
  LossScalar<T> l_total = 0;
  std::size_t chars = 0;
  Mat<T> teacher_logits;  ///< R_t stacked over I_t, before centering
  std::vector<BinaryMask> seg_pred;
};

/// Full objective for one batch. When `grads` is given (same layout as the
/// student, zeroed by the caller), student gradients are accumulated into it.
/// When `teacher_grads` is given it is filled with zeros: teacher outputs are
/// constants of the loss. `bn_running` receives the running batch-norm
/// statistics update. Per-sample encoder gradients are reduced in sample
/// order, so results do not depend on `workers`.
template <class T>
LossOutput<T> compute_loss(const ModelConfig& cfg, const DistillConfig& dcfg, const ParamStore<T>& student,
                           const ParamStore<T>& teacher, const CenterVector& center, const std::vector<BatchItem>& batch,
                           const MaskProvider& masks, ParamStore<T>* grads, ParamStore<T>* bn_running = nullptr,
                           std::size_t workers = 1, ParamStore<T>* teacher_grads = nullptr);

struct TrainState {
  TrainConfig cfg;
  ParamStore<float> student;
  ParamStore<float> teacher;
  OptState opt;
  CenterVector center;
  long step = 0;
  bool predicted_masks = false;  ///< bootstrap phase over
  long predicted_masks_since = -1;

  static TrainState init(const TrainConfig& cfg);
};

struct StepMetrics {
  long step = 0;
  double lr = 0.0, wd = 0.0, lambda = 0.0;
  double l_dis = 0.0, l_seg = 0.0, l_total = 0.0;
  double teacher_std = 0.0;
  std::size_t chars = 0;
};

/// Mean over output dimensions of the per-dimension standard deviation across rows.
template <class T>
double output_std(const Mat<T>& logits);

/// Views and pseudo-labels for one image; a pure function of (img, seed).
BatchItem make_batch_item(const ImageBuffer& img, std::uint64_t seed, const AugmentConfig& aug);

/// One iteration: loss and gradients, AdamW on the student, center update,
/// then the teacher EMA.
StepMetrics pretrain_step(const std::vector<ImageBuffer>& images, TrainState& state);

/// Mean IoU of the segmentation head's prediction (inference mode) against
/// pseudo-labels.
double seg_iou_vs_pseudo(const ModelConfig& cfg, const ParamStore<float>& student,
                         const std::vector<ImageBuffer>& images, std::size_t workers);

/// Segmentation-head text masks (inference mode).
std::vector<BinaryMask> predict_text_masks(const ModelConfig& cfg, const ParamStore<float>& student,
                                           const std::vector<ImageBuffer>& images, std::size_t workers);

inline constexpr const char* kMetricsHeader = "step,lr,wd,lambda,l_dis,l_seg,teacher_std,chars_per_batch";
void write_metrics_row(std::ostream& os, const StepMetrics& m);

/// Runs cfg.steps iterations. The last bootstrap_eval_samples images are held
/// out for the bootstrap switch; the rest are visited in per-epoch shuffled
/// order. Metrics go to `metrics` every log_every steps and at the last step.
TrainState pretrain(const std::vector<ImageBuffer>& dataset, const TrainConfig& cfg, std::ostream* metrics = nullptr,
                    const std::function<void(const StepMetrics&)>& on_step = {});

}  // namespace ccd
