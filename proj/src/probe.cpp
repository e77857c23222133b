#include "ccd/probe.hpp"

#include <cmath>
#include <string>

#include "ccd/common.hpp"

namespace ccd {

ProbeFeatures extract_probe_features(const ModelConfig& cfg, const ParamStore<float>& store,
                                     const std::vector<GlyphSample>& samples, std::size_t workers) {
  const Encoder<float> encoder(cfg.encoder, store);
  std::vector<Mat<double>> rows(samples.size());
  std::vector<std::vector<int>> labels(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    const auto out = encoder.forward(samples[i].image, store);
    std::vector<std::size_t> kept;
    rows[i] = pool_characters<float>(out.features, samples[i].gt_masks, cfg.encoder.patch, &kept).cast<double>();
    for (std::size_t k : kept) labels[i].push_back(samples[i].labels.at(k));
  });
  ProbeFeatures f;
  Eigen::Index total = 0;
  for (const auto& r : rows) total += r.rows();
  f.x.resize(total, cfg.encoder.embed_dim);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    f.x.middleRows(at, rows[i].rows()) = rows[i];
    at += rows[i].rows();
    f.y.insert(f.y.end(), labels[i].begin(), labels[i].end());
  }
  return f;
}

namespace {

double accuracy(const Mat<double>& logits, const std::vector<int>& y) {
  if (y.empty()) return 0.0;
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    hit += arg == y[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

}  // namespace

ProbeResult fit_linear_probe(const ProbeFeatures& train, const ProbeFeatures& test, const ProbeConfig& cfg) {
  if (cfg.classes < 2) throw ValidationError("probe needs at least two classes");
  if (train.x.rows() == 0) throw ValidationError("probe training split is empty");
  if (train.x.cols() != test.x.cols() && test.x.rows() > 0) throw ValidationError("probe feature width mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(cfg.classes), false);
  for (int y : train.y) {
    if (y < 0 || y >= cfg.classes) throw ValidationError("probe label out of range");
    seen[static_cast<std::size_t>(y)] = true;
  }
  for (int y : test.y) {
    if (y < 0 || y >= cfg.classes) throw ValidationError("probe label out of range");
    if (!seen[static_cast<std::size_t>(y)]) {
      throw ValidationError("class " + std::to_string(y) + " is absent from the probe training split");
    }
  }

  const Eigen::Index n = train.x.rows(), d = train.x.cols(), k = cfg.classes;
  const Eigen::RowVectorXd mean = train.x.colwise().mean();
  Eigen::RowVectorXd sd = ((train.x.rowwise() - mean).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index j = 0; j < d; ++j) sd(j) = sd(j) > 1e-12 ? sd(j) : 1.0;
  auto standardize = [&](const Mat<double>& x) -> Mat<double> {
    return ((x.rowwise() - mean).array().rowwise() / sd.array()).matrix();
  };
  const Mat<double> xs = standardize(train.x);
  Mat<double> onehot = Mat<double>::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, train.y[static_cast<std::size_t>(i)]) = 1.0;

  Mat<double> w = Mat<double>::Zero(d, k), mw = w, vw = w;
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(k), mb = b, vb = b;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= cfg.iterations; ++it) {
    Mat<double> p = xs * w;
    p.rowwise() += b;
    const Eigen::VectorXd mx = p.rowwise().maxCoeff();
    p = (p.colwise() - mx).array().exp().matrix();
    const Eigen::VectorXd sum = p.rowwise().sum();
    p.array().colwise() /= sum.array();
    const Mat<double> dz = (p - onehot) / static_cast<double>(n);
    const Mat<double> gw = xs.transpose() * dz + cfg.l2 * w;
    const Eigen::RowVectorXd gb = dz.colwise().sum();
    const double c1 = 1.0 - std::pow(b1, it), c2 = 1.0 - std::pow(b2, it);
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    w.array() -= cfg.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    b.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }

  ProbeResult r;
  r.train_count = static_cast<std::size_t>(n);
  r.test_count = test.y.size();
  Mat<double> lt = xs * w;
  lt.rowwise() += b;
  r.train_accuracy = accuracy(lt, train.y);
  if (test.x.rows() > 0) {
    Mat<double> le = standardize(test.x) * w;
    le.rowwise() += b;
    r.test_accuracy = accuracy(le, test.y);
  }
  return r;
}

}  // namespace ccd
