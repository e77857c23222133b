#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ccd/distill.hpp"
#include "ccd/model.hpp"

namespace ccd {

struct GradCheckConfig {
  ModelConfig model;
  DistillConfig distill;
  int batch = 2;
  int min_params = 200;  ///< total finite-difference probes, spread over every trainable tensor
  double step = 1e-5;
  std::uint64_t seed = 0;
  std::string zero_tensor;  ///< fault injection: zero this tensor's analytic gradient

  /// depth 2, dim 16, 2 heads, n 32, 8x16 input, small heads.
  static GradCheckConfig tiny();
  void validate() const;
};

struct TensorCheck {
  std::string name;
  ParamRole role = ParamRole::encoder;
  int probes = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  int probes = 0;
  std::vector<TensorCheck> tensors;

  std::vector<std::string> failing(double tolerance) const;
};

/// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double analytic, double numeric);

/// Analytic gradients of l_total (double precision) against central
/// differences on a fixed batch with fixed character masks and center.
GradCheckReport grad_check(const GradCheckConfig& cfg);

}  // namespace ccd
