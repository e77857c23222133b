#include "ccd/distill.hpp"

#include <cmath>
#include <type_traits>

#include "ccd/common.hpp"

namespace ccd {

void DistillConfig::validate() const {
  if (!(tau_t > 0.0) || !(tau_s > 0.0)) throw ValidationError("temperatures must be positive");
  if (!(tau_t < tau_s)) throw ValidationError("tau_t must be smaller than tau_s");
  for (double l : {lambda_start, lambda_end}) {
    if (!(l >= 0.0 && l <= 1.0)) throw ValidationError("lambda endpoints must lie in [0, 1]");
  }
  if (!(center_momentum >= 0.0 && center_momentum <= 1.0)) throw ValidationError("center_momentum must lie in [0, 1]");
  if (!(seg_weight >= 0.0) || !(distill_weight >= 0.0)) throw ValidationError("loss weights must be >= 0");
}

AlignedMaskQuad align_masks(const CharMaskSet& s_reg, const Homography& pi_irr) {
  invert(pi_irr);  // rejects singular transforms
  AlignedMaskQuad q;
  for (const auto& m : s_reg) {
    if (m.empty()) continue;
    BinaryMask w = warp_mask(m, pi_irr);
    if (w.empty()) continue;
    q.s_reg.push_back(m);
    q.s_irr.push_back(std::move(w));
  }
  q.t_reg = q.s_reg;
  q.t_irr = q.s_irr;
  return q;
}

template <class T>
LossGrad<T> xi_loss(const Mat<T>& teacher, const Mat<T>& student, double tau_t, double tau_s,
                    const CenterVector* center) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols()) {
    throw ValidationError("xi_loss shape mismatch");
  }
  if (center && center->size() != teacher.cols()) throw ValidationError("center length mismatch");
  if (!teacher.allFinite() || !student.allFinite()) throw RuntimeError("non-finite logits in xi_loss");
  using A = LossScalar<T>;
  const Eigen::Index n = teacher.cols();
  LossGrad<T> out;
  out.grad.resize(student.rows(), n);
  RowVec<A> p(n), ls(n);
  A total = 0;
  for (Eigen::Index i = 0; i < teacher.rows(); ++i) {
    p = teacher.row(i).template cast<A>();
    if (center) p -= center->template cast<A>();
    p /= A(tau_t);
    p = (p.array() - p.maxCoeff()).exp().matrix();
    p /= p.sum();

    ls = student.row(i).template cast<A>() / A(tau_s);
    const A mx = ls.maxCoeff();
    const A lse = mx + std::log((ls.array() - mx).exp().sum());
    ls.array() -= lse;  // log q
    total -= p.dot(ls);
    out.grad.row(i) = ((ls.array().exp() - p.array()) / A(tau_s)).matrix().template cast<T>();
  }
  out.value = total;
  return out;
}

template <class T>
DistillLoss<T> distill_loss(const Mat<T>& r_t, const Mat<T>& i_t, const Mat<T>& r_s, const Mat<T>& i_s,
                            const DistillConfig& cfg, const CenterVector* center) {
  const Eigen::Index l = r_t.rows();
  for (const Mat<T>* m : {&i_t, &r_s, &i_s}) {
    if (m->rows() != l || m->cols() != r_t.cols()) throw ValidationError("distill_loss shape mismatch");
  }
  DistillLoss<T> out;
  const auto a = xi_loss<T>(r_t, i_s, cfg.tau_t, cfg.tau_s, center);
  const auto b = xi_loss<T>(i_t, r_s, cfg.tau_t, cfg.tau_s, center);
  const LossScalar<T> scale = LossScalar<T>(1) / static_cast<LossScalar<T>>(std::max<Eigen::Index>(l, 1));
  out.value = (a.value + b.value) * scale;
  out.d_irr_student = a.grad * T(scale);
  out.d_reg_student = b.grad * T(scale);
  return out;
}

template <class T>
LossGrad<T> seg_loss(const Mat<T>& logits, const BinaryMask& m_pl) {
  const Eigen::Index n = static_cast<Eigen::Index>(m_pl.data.size());
  if (logits.rows() != n || logits.cols() != 2) throw ValidationError("seg_loss shape mismatch");
  using A = LossScalar<T>;
  LossGrad<T> out;
  out.grad.resize(n, 2);
  const A inv_n = n > 0 ? A(1) / static_cast<A>(n) : A(0);
  A total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const A z0 = logits(i, 0), z1 = logits(i, 1);
    const A mx = std::max(z0, z1);
    const A lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
    const int target = m_pl.data[static_cast<std::size_t>(i)] ? 1 : 0;
    total += lse - (target ? z1 : z0);
    const A p1 = std::exp(z1 - lse);
    out.grad(i, 0) = static_cast<T>(((A(1) - p1) - (target == 0 ? A(1) : A(0))) * inv_n);
    out.grad(i, 1) = static_cast<T>((p1 - (target == 1 ? A(1) : A(0))) * inv_n);
  }
  out.value = total * inv_n;
  return out;
}

template <class T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("lambda must lie in [0, 1]");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const auto& name = teacher.spec(i).name;
    const auto j = student.find(name);
    if (!j) throw ValidationError("student has no tensor " + name);
    if (student.spec(*j).shape != teacher.spec(i).shape) throw ValidationError("shape mismatch for tensor " + name);
    auto& t = teacher.values(i);
    const auto& s = student.values(*j);
    for (std::size_t k = 0; k < t.size(); ++k) {
      t[k] = static_cast<T>(lambda * static_cast<double>(t[k]) + (1.0 - lambda) * static_cast<double>(s[k]));
    }
  }
}

template <class T>
void update_center(CenterVector& center, const Mat<T>& teacher_logits, double momentum) {
  if (teacher_logits.rows() == 0) return;
  if (center.size() != teacher_logits.cols()) throw ValidationError("center length mismatch");
  const Eigen::RowVectorXd mean = teacher_logits.template cast<double>().colwise().mean();
  center = momentum * center + (1.0 - momentum) * mean;
}

#define CCD_INSTANTIATE(T)                                                                                   \
  template LossGrad<T> xi_loss<T>(const Mat<T>&, const Mat<T>&, double, double, const CenterVector*);       \
  template DistillLoss<T> distill_loss<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&,       \
                                          const DistillConfig&, const CenterVector*);                       \
  template LossGrad<T> seg_loss<T>(const Mat<T>&, const BinaryMask&);                                        \
  template void ema_update<T>(ParamStore<T>&, const ParamStore<T>&, double);                                 \
  template void update_center<T>(CenterVector&, const Mat<T>&, double);

CCD_INSTANTIATE(float)
CCD_INSTANTIATE(double)
CCD_INSTANTIATE(long double)

}  // namespace ccd
