#pragma once

#include <Eigen/Core>
#include <type_traits>

#include "ccd/imaging.hpp"
#include "ccd/params.hpp"

namespace ccd {

struct DistillConfig {
  double tau_s = 0.1;
  double tau_t = 0.04;
  double lambda_start = 0.996;
  double lambda_end = 1.0;
  bool centering = true;
  double center_momentum = 0.9;
  double seg_weight = 1.0;
  double distill_weight = 1.0;  ///< 0 leaves only the segmentation loss

  void validate() const;
};

using CenterVector = Eigen::RowVectorXd;

/// Four aligned character mask sets; entry k of each refers to the same glyph.
struct AlignedMaskQuad {
  CharMaskSet s_reg, s_irr, t_reg, t_irr;

  std::size_t size() const { return s_reg.size(); }
};

/// s_irr[k] = warp_mask(s_reg[k], pi_irr); teacher sets copy the student
/// sets. Characters empty in either view are dropped from all four sets.
AlignedMaskQuad align_masks(const CharMaskSet& s_reg, const Homography& pi_irr);

/// Loss accumulation type: double, or T when T is wider.
template <class T>
using LossScalar = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

template <class T>
struct LossGrad {
  LossScalar<T> value = 0;
  Mat<T> grad;  ///< gradient with respect to the student (or logit) input
};

/// Sum over rows of the cross-entropy between softmax((a - c) / tau_t) and
/// softmax(b / tau_s). `center` may be null (no centering). The teacher rows
/// are constants; only the student gradient is returned.
template <class T>
LossGrad<T> xi_loss(const Mat<T>& teacher, const Mat<T>& student, double tau_t, double tau_s,
                    const CenterVector* center = nullptr);

template <class T>
struct DistillLoss {
  LossScalar<T> value = 0;
  Mat<T> d_reg_student;  ///< gradient for R_s
  Mat<T> d_irr_student;  ///< gradient for I_s
};

/// (xi(R_t, I_s) + xi(I_t, R_s)) / max(l, 1).
template <class T>
DistillLoss<T> distill_loss(const Mat<T>& r_t, const Mat<T>& i_t, const Mat<T>& r_s, const Mat<T>& i_s,
                            const DistillConfig& cfg, const CenterVector* center);

/// Mean per-pixel two-class cross-entropy against m_pl; logits are
/// (height*width) x 2 in row-major pixel order.
template <class T>
LossGrad<T> seg_loss(const Mat<T>& logits, const BinaryMask& m_pl);

/// theta_t <- lambda * theta_t + (1 - lambda) * theta_s for every teacher tensor.
template <class T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, double lambda);

/// c <- momentum * c + (1 - momentum) * mean of the rows; no-op without rows.
template <class T>
void update_center(CenterVector& center, const Mat<T>& teacher_logits, double momentum);

}  // namespace ccd
