#pragma once

#include <vector>

#include "ccd/datagen.hpp"
#include "ccd/model.hpp"

namespace ccd {

struct ProbeConfig {
  int iterations = 1000;  ///< full-batch Adam steps
  double lr = 0.05;
  double l2 = 1e-4;
  int classes = kGlyphClasses;
};

struct ProbeFeatures {
  Mat<double> x;  ///< one row per character
  std::vector<int> y;
};

/// Final encoder features mean-pooled under each ground-truth character
/// mask. Works with student or teacher stores (encoder tensors only).
ProbeFeatures extract_probe_features(const ModelConfig& cfg, const ParamStore<float>& store,
                                     const std::vector<GlyphSample>& samples, std::size_t workers = 1);

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
};

/// Multinomial logistic regression on standardized features (statistics from
/// the training split). Throws ValidationError when a class present in either
/// split has no training example.
ProbeResult fit_linear_probe(const ProbeFeatures& train, const ProbeFeatures& test, const ProbeConfig& cfg);

}  // namespace ccd
