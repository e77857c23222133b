#include "ccd/model.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <unsupported/Eigen/SpecialFunctions>

#include "ccd/common.hpp"

namespace ccd {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kBnEps = 1e-5;
constexpr double kBnKeep = 0.9;
constexpr double kNormEps = 1e-12;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
RowVec<T> row_of(const ParamStore<T>& p, std::size_t i) {
  const auto& v = p.values(i);
  return Eigen::Map<const RowVec<T>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <class T>
Eigen::Map<RowVec<T>> row_of(ParamStore<T>& p, std::size_t i) {
  auto& v = p.values(i);
  return Eigen::Map<RowVec<T>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <class T>
ConstMatMap<T> as_mat(const ParamStore<T>& p, std::size_t i, int rows, int cols) {
  return ConstMatMap<T>(p.values(i).data(), rows, cols);
}

template <class T>
MatMap<T> as_mat(ParamStore<T>& p, std::size_t i, int rows, int cols) {
  return MatMap<T>(p.values(i).data(), rows, cols);
}

// Eigen's vectorized erf is exact enough for float and double only.
template <class T>
auto erf_of(const Mat<T>& x) {
  if constexpr (sizeof(T) > sizeof(double)) {
    return x.array().unaryExpr([](T v) { return std::erf(v); }).eval();
  } else {
    return x.array().erf().eval();
  }
}

template <class T>
Mat<T> gelu(const Mat<T>& u) {
  const Mat<T> scaled = u * T(M_SQRT1_2);
  return (u.array() * (T(0.5) * (T(1) + erf_of<T>(scaled)))).matrix();
}

template <class T>
Mat<T> gelu_grad(const Mat<T>& u) {
  const T inv_sqrt_2pi = T(0.3989422804014327);
  const Mat<T> scaled = u * T(M_SQRT1_2);
  const auto a = u.array();
  return (T(0.5) * (T(1) + erf_of<T>(scaled)) + a * (T(-0.5) * a.square()).exp() * inv_sqrt_2pi).matrix();
}

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const RowVec<T>& g, const RowVec<T>& b, LayerNormCache<T>* cache) {
  const Vec<T> mu = x.rowwise().mean();
  Mat<T> xc = x.colwise() - mu;
  const Vec<T> rstd = ((xc.array().square().rowwise().mean()) + T(kLnEps)).rsqrt().matrix();
  xc.array().colwise() *= rstd.array();
  Mat<T> y = (xc.array().rowwise() * g.array()).rowwise() + b.array();
  if (cache) {
    cache->xhat = std::move(xc);
    cache->rstd = rstd;
  }
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& c, const RowVec<T>& g,
                           Eigen::Map<RowVec<T>> dg, Eigen::Map<RowVec<T>> db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const Mat<T> dxhat = (dy.array().rowwise() * g.array()).matrix();
  const Vec<T> m1 = dxhat.rowwise().mean();
  const Vec<T> m2 = (dxhat.array() * c.xhat.array()).rowwise().mean().matrix();
  Mat<T> dx = dxhat.colwise() - m1;
  dx.array() -= c.xhat.array().colwise() * m2.array();
  dx.array().colwise() *= c.rstd.array();
  return dx;
}

template <class T>
void softmax_rows(Mat<T>& s) {
  const Vec<T> mx = s.rowwise().maxCoeff();
  s = (s.colwise() - mx).array().exp().matrix();
  const Vec<T> sum = s.rowwise().sum();
  s.array().colwise() /= sum.array();
}

template <class T>
FeatureGrid<T> make_grid(const EncoderConfig& cfg, const Mat<T>& x) {
  return {cfg.grid_h(), cfg.grid_w(), cfg.embed_dim, x};
}

// 3x3 same-padded convolution helpers; rows are pixels, columns channels.
template <class T>
Mat<T> im2col3(const Mat<T>& x, int h, int w) {
  const int c = static_cast<int>(x.cols());
  Mat<T> col = Mat<T>::Zero(static_cast<Eigen::Index>(h) * w, 9 * c);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * w + xx;
      for (int k = 0; k < 9; ++k) {
        const int sy = y + k / 3 - 1, sx = xx + k % 3 - 1;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
        col.block(row, k * c, 1, c) = x.row(static_cast<Eigen::Index>(sy) * w + sx);
      }
    }
  }
  return col;
}

template <class T>
Mat<T> col2im3(const Mat<T>& col, int h, int w, int c) {
  Mat<T> x = Mat<T>::Zero(static_cast<Eigen::Index>(h) * w, c);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * w + xx;
      for (int k = 0; k < 9; ++k) {
        const int sy = y + k / 3 - 1, sx = xx + k % 3 - 1;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
        x.row(static_cast<Eigen::Index>(sy) * w + sx) += col.block(row, k * c, 1, c);
      }
    }
  }
  return x;
}

template <class T>
Mat<T> upsample2(const Mat<T>& x, int h, int w) {
  Mat<T> out(static_cast<Eigen::Index>(4) * h * w, x.cols());
  for (int y = 0; y < 2 * h; ++y) {
    for (int xx = 0; xx < 2 * w; ++xx) {
      out.row(static_cast<Eigen::Index>(y) * 2 * w + xx) = x.row(static_cast<Eigen::Index>(y / 2) * w + xx / 2);
    }
  }
  return out;
}

template <class T>
Mat<T> upsample2_backward(const Mat<T>& d, int h, int w) {
  Mat<T> out = Mat<T>::Zero(static_cast<Eigen::Index>(h) * w, d.cols());
  for (int y = 0; y < 2 * h; ++y) {
    for (int xx = 0; xx < 2 * w; ++xx) {
      out.row(static_cast<Eigen::Index>(y / 2) * w + xx / 2) += d.row(static_cast<Eigen::Index>(y) * 2 * w + xx);
    }
  }
  return out;
}

template <class T>
std::vector<Mat<T>> conv_bn_relu(const typename SegHead<T>::ConvBn& L, const std::vector<Mat<T>>& xs,
                                 const ParamStore<T>& p, bool training, ConvBnCache<T>* cache,
                                 ParamStore<T>* running) {
  const auto W = as_mat(p, L.weight, 9 * L.cin, L.cout);
  std::vector<Mat<T>> z(xs.size());
  for (std::size_t s = 0; s < xs.size(); ++s) {
    if (xs[s].rows() != static_cast<Eigen::Index>(L.h) * L.w || xs[s].cols() != L.cin) {
      throw ValidationError("segmentation head input shape mismatch");
    }
    z[s] = im2col3(xs[s], L.h, L.w) * W;
  }
  RowVec<T> mean, var;
  if (training) {
    using A = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;
    const A count = static_cast<A>(xs.size()) * L.h * L.w;
    RowVec<A> sum = RowVec<A>::Zero(L.cout);
    for (const auto& zs : z) sum += zs.colwise().sum().template cast<A>();
    const RowVec<A> mu = sum / count;
    RowVec<A> sq = RowVec<A>::Zero(L.cout);
    for (const auto& zs : z) {
      sq += (zs.template cast<A>().rowwise() - mu).array().square().colwise().sum().matrix();
    }
    mean = mu.template cast<T>();
    var = (sq / count).template cast<T>();
    if (running) {
      auto rm = row_of(*running, L.mean);
      auto rv = row_of(*running, L.var);
      const double unbias = count > 1 ? static_cast<double>(count / (count - 1)) : 1.0;
      rm = (T(kBnKeep) * rm + T(1.0 - kBnKeep) * mean).eval();
      rv = (T(kBnKeep) * rv + T((1.0 - kBnKeep) * unbias) * var).eval();
    }
  } else {
    mean = row_of(p, L.mean);
    var = row_of(p, L.var);
  }
  const RowVec<T> rstd = (var.array() + T(kBnEps)).rsqrt().matrix();
  const RowVec<T> g = row_of(p, L.gamma), b = row_of(p, L.beta);
  std::vector<Mat<T>> out(xs.size());
  if (cache) {
    cache->input = xs;
    cache->xhat.resize(xs.size());
    cache->rstd = rstd;
  }
  for (std::size_t s = 0; s < xs.size(); ++s) {
    Mat<T> xhat = ((z[s].rowwise() - mean).array().rowwise() * rstd.array()).matrix();
    out[s] = ((xhat.array().rowwise() * g.array()).rowwise() + b.array()).max(T(0)).matrix();
    if (cache) cache->xhat[s] = std::move(xhat);
  }
  if (cache) cache->out = out;
  return out;
}

template <class T>
std::vector<Mat<T>> conv_bn_relu_backward(const typename SegHead<T>::ConvBn& L, const ConvBnCache<T>& c,
                                          const std::vector<Mat<T>>& dout, const ParamStore<T>& p,
                                          ParamStore<T>& grads) {
  const std::size_t n = dout.size();
  const T count = T(static_cast<double>(n) * L.h * L.w);
  const RowVec<T> g = row_of(p, L.gamma);
  std::vector<Mat<T>> dy(n);
  RowVec<T> sum_dy = RowVec<T>::Zero(L.cout), sum_dy_xhat = RowVec<T>::Zero(L.cout);
  for (std::size_t s = 0; s < n; ++s) {
    dy[s] = (c.out[s].array() > T(0)).select(dout[s].array(), T(0)).matrix();
    sum_dy += dy[s].colwise().sum();
    sum_dy_xhat += (dy[s].array() * c.xhat[s].array()).colwise().sum().matrix();
  }
  row_of(grads, L.gamma) += sum_dy_xhat;
  row_of(grads, L.beta) += sum_dy;
  const RowVec<T> m1 = (sum_dy.array() * g.array() / count).matrix();
  const RowVec<T> m2 = (sum_dy_xhat.array() * g.array() / count).matrix();
  const auto W = as_mat(p, L.weight, 9 * L.cin, L.cout);
  auto dW = as_mat(grads, L.weight, 9 * L.cin, L.cout);
  std::vector<Mat<T>> dx(n);
  for (std::size_t s = 0; s < n; ++s) {
    Mat<T> dz = (dy[s].array().rowwise() * g.array()).matrix();
    dz.rowwise() -= m1;
    dz.array() -= c.xhat[s].array().rowwise() * m2.array();
    dz.array().rowwise() *= c.rstd.array();
    const Mat<T> col = im2col3(c.input[s], L.h, L.w);
    dW.noalias() += col.transpose() * dz;
    dx[s] = col2im3<T>(dz * W.transpose(), L.h, L.w, L.cin);
  }
  return dx;
}

struct LayoutBuilder {
  ParamStore<float> store;
  ParamRole role = ParamRole::encoder;

  void add(const std::string& name, std::vector<int> shape, bool trainable = true, bool unit_rows = false) {
    TensorSpec s;
    s.name = name;
    s.shape = std::move(shape);
    s.role = role;
    s.trainable = trainable;
    s.decay = trainable && s.shape.size() >= 2;
    s.unit_rows = unit_rows;
    store.add(std::move(s));
  }
  void bn(const std::string& prefix, int c) {
    add(prefix + ".weight", {c});
    add(prefix + ".bias", {c});
    add(prefix + ".running_mean", {c}, false);
    add(prefix + ".running_var", {c}, false);
  }
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

// --- configuration ----------------------------------------------------------

EncoderConfig EncoderConfig::preset(const std::string& name) {
  EncoderConfig c;
  if (name == "tiny") {
    c.embed_dim = 192, c.depth = 12, c.heads = 3;
  } else if (name == "small") {
    c.embed_dim = 384, c.depth = 12, c.heads = 6;
  } else if (name == "base") {
    c.embed_dim = 512, c.depth = 12, c.heads = 8;
  } else {
    throw ValidationError("unknown encoder preset: " + name);
  }
  return c;
}

void EncoderConfig::validate() const {
  if (embed_dim <= 0 || depth <= 0 || heads <= 0 || patch <= 0 || input_h <= 0 || input_w <= 0 || channels <= 0 ||
      mlp_ratio <= 0) {
    throw ValidationError("encoder dimensions must be positive");
  }
  if (embed_dim % heads != 0) throw ValidationError("embed_dim must be divisible by heads");
  if (input_h % patch != 0 || input_w % patch != 0) throw ValidationError("input dims must be divisible by patch");
}

std::array<int, 3> EncoderConfig::tap_blocks() const {
  return {std::min(2, depth), std::min(4, depth), std::min(6, depth)};
}

void HeadConfig::validate() const {
  if (seg_channels <= 0 || proj_hidden <= 0 || proj_bottleneck <= 0 || out_dim <= 0) {
    throw ValidationError("head dimensions must be positive");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  head.validate();
  if (encoder.patch != 4) {
    throw ValidationError("segmentation head restores resolution with two 2x upsamplings and needs patch 4");
  }
}

// --- parameters -------------------------------------------------------------

ParamStore<float> build_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto& e = cfg.encoder;
  const int d = e.embed_dim, hid = e.embed_dim * e.mlp_ratio;
  LayoutBuilder b;
  b.role = ParamRole::encoder;
  b.add("encoder.patch_embed.weight", {e.patch * e.patch * e.channels, d});
  b.add("encoder.patch_embed.bias", {d});
  b.add("encoder.pos_embed", {e.tokens(), d});
  for (int i = 0; i < e.depth; ++i) {
    const std::string p = "encoder.blocks." + std::to_string(i) + ".";
    b.add(p + "norm1.weight", {d});
    b.add(p + "norm1.bias", {d});
    b.add(p + "attn.qkv.weight", {d, 3 * d});
    b.add(p + "attn.qkv.bias", {3 * d});
    b.add(p + "attn.proj.weight", {d, d});
    b.add(p + "attn.proj.bias", {d});
    b.add(p + "norm2.weight", {d});
    b.add(p + "norm2.bias", {d});
    b.add(p + "mlp.fc1.weight", {d, hid});
    b.add(p + "mlp.fc1.bias", {hid});
    b.add(p + "mlp.fc2.weight", {hid, d});
    b.add(p + "mlp.fc2.bias", {d});
  }
  b.add("encoder.norm.weight", {d});
  b.add("encoder.norm.bias", {d});

  const int c = cfg.head.seg_channels;
  b.role = ParamRole::seg_head;
  for (int i = 0; i < 3; ++i) {
    const std::string p = "seg.branch" + std::to_string(i) + ".";
    b.add(p + "conv1.weight", {3, 3, d, c});
    b.bn(p + "bn1", c);
    b.add(p + "conv2.weight", {3, 3, c, c});
    b.bn(p + "bn2", c);
  }
  b.add("seg.up1.conv.weight", {3, 3, 3 * c, c});
  b.bn("seg.up1.bn", c);
  b.add("seg.up2.conv.weight", {3, 3, c, c});
  b.bn("seg.up2.bn", c);
  b.add("seg.out.weight", {c, 2});
  b.add("seg.out.bias", {2});

  const auto& h = cfg.head;
  b.role = ParamRole::projection;
  b.add("proj.fc1.weight", {d, h.proj_hidden});
  b.add("proj.fc1.bias", {h.proj_hidden});
  b.add("proj.fc2.weight", {h.proj_hidden, h.proj_hidden});
  b.add("proj.fc2.bias", {h.proj_hidden});
  b.add("proj.fc3.weight", {h.proj_hidden, h.proj_bottleneck});
  b.add("proj.fc3.bias", {h.proj_bottleneck});
  b.add("proj.last.direction", {h.out_dim, h.proj_bottleneck}, true, true);
  return std::move(b.store);
}

ParamStore<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore<float> store = build_layout(cfg);
  Rng rng(seed);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& s = store.spec(i);
    auto& v = store.values(i);
    if (ends_with(s.name, ".bias") || ends_with(s.name, ".running_mean")) {
      std::fill(v.begin(), v.end(), 0.0f);
    } else if (s.shape.size() == 1) {
      std::fill(v.begin(), v.end(), 1.0f);  // norm gains, running variances
    } else {
      for (auto& x : v) x = static_cast<float>(rng.truncated_normal(0.02));
    }
  }
  normalize_unit_rows(store);
  return store;
}

template <class T>
ParamStore<T> make_teacher(const ParamStore<T>& student) {
  return student.filter([](const TensorSpec& s) { return s.role != ParamRole::seg_head; });
}

template <class T>
void check_layout(const ModelConfig& cfg, const ParamStore<T>& store, bool with_seg_head) {
  const ParamStore<float> ref = build_layout(cfg);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& s = ref.spec(i);
    if (!with_seg_head && s.role == ParamRole::seg_head) continue;
    const auto j = store.find(s.name);
    if (!j) throw ValidationError("missing tensor: " + s.name);
    if (store.spec(*j).shape != s.shape) throw ValidationError("shape mismatch for tensor: " + s.name);
  }
}

template <class T>
void normalize_unit_rows(ParamStore<T>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.spec(i).unit_rows) continue;
    auto m = store.mat(i);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const T nrm = m.row(r).norm();
      if (nrm > T(0)) m.row(r) /= nrm;
    }
  }
}

// --- encoder ----------------------------------------------------------------

template <class T>
Mat<T> patchify(const ImageBuffer& img, int patch) {
  const int gh = img.height / patch, gw = img.width / patch, c = img.channels;
  Mat<T> out(static_cast<Eigen::Index>(gh) * gw, patch * patch * c);
  for (int ty = 0; ty < gh; ++ty) {
    for (int tx = 0; tx < gw; ++tx) {
      const Eigen::Index row = static_cast<Eigen::Index>(ty) * gw + tx;
      for (int py = 0; py < patch; ++py) {
        for (int px = 0; px < patch; ++px) {
          for (int ch = 0; ch < c; ++ch) {
            out(row, (py * patch + px) * c + ch) = static_cast<T>(img.at(ty * patch + py, tx * patch + px, ch));
          }
        }
      }
    }
  }
  return out;
}

template <class T>
Encoder<T>::Encoder(const EncoderConfig& cfg, const ParamStore<T>& s) : cfg_(cfg) {
  cfg_.validate();
  pe_w_ = s.index("encoder.patch_embed.weight");
  pe_b_ = s.index("encoder.patch_embed.bias");
  pos_ = s.index("encoder.pos_embed");
  norm_w_ = s.index("encoder.norm.weight");
  norm_b_ = s.index("encoder.norm.bias");
  for (int i = 0; i < cfg_.depth; ++i) {
    const std::string p = "encoder.blocks." + std::to_string(i) + ".";
    blocks_.push_back({s.index(p + "norm1.weight"), s.index(p + "norm1.bias"), s.index(p + "attn.qkv.weight"),
                       s.index(p + "attn.qkv.bias"), s.index(p + "attn.proj.weight"), s.index(p + "attn.proj.bias"),
                       s.index(p + "norm2.weight"), s.index(p + "norm2.bias"), s.index(p + "mlp.fc1.weight"),
                       s.index(p + "mlp.fc1.bias"), s.index(p + "mlp.fc2.weight"), s.index(p + "mlp.fc2.bias")});
  }
}

template <class T>
EncoderOutput<T> Encoder<T>::forward(const ImageBuffer& img, const ParamStore<T>& p, EncoderCache<T>* cache,
                                     bool taps_only) const {
  if (img.height != cfg_.input_h || img.width != cfg_.input_w || img.channels != cfg_.channels ||
      img.data.size() != img.pixel_count() * static_cast<std::size_t>(img.channels)) {
    throw ValidationError("image shape does not match encoder input");
  }
  const int d = cfg_.embed_dim, dh = cfg_.head_dim(), hid = d * cfg_.mlp_ratio;
  const int n_tok = cfg_.tokens();
  const T scale = T(1) / std::sqrt(T(dh));
  const auto taps = cfg_.tap_blocks();
  const int last = taps_only ? taps[2] : cfg_.depth;

  Mat<T> patches = patchify<T>(img, cfg_.patch);
  Mat<T> x = patches * as_mat(p, pe_w_, static_cast<int>(patches.cols()), d);
  x.rowwise() += row_of(p, pe_b_);
  x += as_mat(p, pos_, n_tok, d);
  if (cache) {
    cache->patches = std::move(patches);
    cache->blocks.assign(static_cast<std::size_t>(last), {});
  }

  EncoderOutput<T> out;
  for (int bi = 0; bi < last; ++bi) {
    const auto& B = blocks_[static_cast<std::size_t>(bi)];
    BlockCache<T> local;
    BlockCache<T>& bc = cache ? cache->blocks[static_cast<std::size_t>(bi)] : local;

    const Mat<T> a = layer_norm<T>(x, row_of(p, B.n1w), row_of(p, B.n1b), &bc.ln1);
    bc.qkv = a * as_mat(p, B.qkvw, d, 3 * d);
    bc.qkv.rowwise() += row_of(p, B.qkvb);
    bc.heads_out.resize(n_tok, d);
    bc.attn.resize(static_cast<std::size_t>(cfg_.heads));
    for (int h = 0; h < cfg_.heads; ++h) {
      Mat<T> s = (bc.qkv.middleCols(h * dh, dh) * bc.qkv.middleCols(d + h * dh, dh).transpose()) * scale;
      softmax_rows(s);
      bc.heads_out.middleCols(h * dh, dh).noalias() = s * bc.qkv.middleCols(2 * d + h * dh, dh);
      bc.attn[static_cast<std::size_t>(h)] = std::move(s);
    }
    x.noalias() += bc.heads_out * as_mat(p, B.projw, d, d);
    x.rowwise() += row_of(p, B.projb);

    const Mat<T> c = layer_norm<T>(x, row_of(p, B.n2w), row_of(p, B.n2b), &bc.ln2);
    bc.hidden_pre = c * as_mat(p, B.fc1w, d, hid);
    bc.hidden_pre.rowwise() += row_of(p, B.fc1b);
    x.noalias() += gelu<T>(bc.hidden_pre) * as_mat(p, B.fc2w, hid, d);
    x.rowwise() += row_of(p, B.fc2b);
    if (!cache) {
      bc.attn.clear();
    }

    for (int t = 0; t < 3; ++t) {
      if (taps[static_cast<std::size_t>(t)] == bi + 1) out.taps[static_cast<std::size_t>(t)] = make_grid(cfg_, x);
    }
  }
  if (!taps_only) {
    out.features = make_grid(cfg_, layer_norm<T>(x, row_of(p, norm_w_), row_of(p, norm_b_),
                                                  cache ? &cache->final_ln : nullptr));
  }
  return out;
}

template <class T>
void Encoder<T>::backward(const EncoderCache<T>& cache, const Mat<T>* d_features,
                          const std::array<const Mat<T>*, 3>& d_taps, const ParamStore<T>& p,
                          ParamStore<T>& g) const {
  const int d = cfg_.embed_dim, dh = cfg_.head_dim(), hid = d * cfg_.mlp_ratio;
  const int n_tok = cfg_.tokens();
  const T scale = T(1) / std::sqrt(T(dh));
  const auto taps = cfg_.tap_blocks();
  const int last = static_cast<int>(cache.blocks.size());
  if (d_features && last != cfg_.depth) throw ValidationError("feature gradient needs a full forward cache");

  Mat<T> dx = Mat<T>::Zero(n_tok, d);
  if (d_features) {
    dx = layer_norm_backward<T>(*d_features, cache.final_ln, row_of(p, norm_w_), row_of(g, norm_w_),
                                row_of(g, norm_b_));
  }
  for (int bi = last - 1; bi >= 0; --bi) {
    for (int t = 0; t < 3; ++t) {
      const auto* dt = d_taps[static_cast<std::size_t>(t)];
      if (dt && taps[static_cast<std::size_t>(t)] == bi + 1) dx += *dt;
    }
    const auto& B = blocks_[static_cast<std::size_t>(bi)];
    const auto& bc = cache.blocks[static_cast<std::size_t>(bi)];

    // MLP branch
    {
      const Mat<T> c = (bc.ln2.xhat.array().rowwise() * row_of(p, B.n2w).array()).rowwise() +
                       row_of(p, B.n2b).array();
      const Mat<T> act = gelu<T>(bc.hidden_pre);
      as_mat(g, B.fc2w, hid, d).noalias() += act.transpose() * dx;
      row_of(g, B.fc2b) += dx.colwise().sum();
      Mat<T> du = dx * as_mat(p, B.fc2w, hid, d).transpose();
      du.array() *= gelu_grad<T>(bc.hidden_pre).array();
      as_mat(g, B.fc1w, d, hid).noalias() += c.transpose() * du;
      row_of(g, B.fc1b) += du.colwise().sum();
      const Mat<T> dc = du * as_mat(p, B.fc1w, d, hid).transpose();
      dx += layer_norm_backward<T>(dc, bc.ln2, row_of(p, B.n2w), row_of(g, B.n2w), row_of(g, B.n2b));
    }
    // attention branch
    {
      as_mat(g, B.projw, d, d).noalias() += bc.heads_out.transpose() * dx;
      row_of(g, B.projb) += dx.colwise().sum();
      const Mat<T> d_heads = dx * as_mat(p, B.projw, d, d).transpose();
      Mat<T> dqkv(n_tok, 3 * d);
      for (int h = 0; h < cfg_.heads; ++h) {
        const auto& P = bc.attn[static_cast<std::size_t>(h)];
        const auto dO = d_heads.middleCols(h * dh, dh);
        const auto Q = bc.qkv.middleCols(h * dh, dh);
        const auto K = bc.qkv.middleCols(d + h * dh, dh);
        const auto V = bc.qkv.middleCols(2 * d + h * dh, dh);
        Mat<T> dP = dO * V.transpose();
        dqkv.middleCols(2 * d + h * dh, dh).noalias() = P.transpose() * dO;
        const Vec<T> rs = (dP.array() * P.array()).rowwise().sum().matrix();
        Mat<T> dS = (P.array() * (dP.colwise() - rs).array()).matrix() * scale;
        dqkv.middleCols(h * dh, dh).noalias() = dS * K;
        dqkv.middleCols(d + h * dh, dh).noalias() = dS.transpose() * Q;
      }
      const Mat<T> a = (bc.ln1.xhat.array().rowwise() * row_of(p, B.n1w).array()).rowwise() +
                       row_of(p, B.n1b).array();
      as_mat(g, B.qkvw, d, 3 * d).noalias() += a.transpose() * dqkv;
      row_of(g, B.qkvb) += dqkv.colwise().sum();
      const Mat<T> da = dqkv * as_mat(p, B.qkvw, d, 3 * d).transpose();
      dx += layer_norm_backward<T>(da, bc.ln1, row_of(p, B.n1w), row_of(g, B.n1w), row_of(g, B.n1b));
    }
  }
  as_mat(g, pos_, n_tok, d) += dx;
  row_of(g, pe_b_) += dx.colwise().sum();
  as_mat(g, pe_w_, static_cast<int>(cache.patches.cols()), d).noalias() += cache.patches.transpose() * dx;
}

// --- segmentation head ------------------------------------------------------

template <class T>
SegHead<T>::SegHead(const ModelConfig& cfg, const ParamStore<T>& s) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg.encoder.embed_dim, c = cfg.head.seg_channels;
  const int gh = cfg.encoder.grid_h(), gw = cfg.encoder.grid_w();
  auto layer = [&](const std::string& conv, const std::string& bn, int cin, int h, int w) {
    return ConvBn{cin,
                  c,
                  h,
                  w,
                  s.index(conv),
                  s.index(bn + ".weight"),
                  s.index(bn + ".bias"),
                  s.index(bn + ".running_mean"),
                  s.index(bn + ".running_var")};
  };
  for (int i = 0; i < 3; ++i) {
    const std::string p = "seg.branch" + std::to_string(i) + ".";
    branch1_[static_cast<std::size_t>(i)] = layer(p + "conv1.weight", p + "bn1", d, gh, gw);
    branch2_[static_cast<std::size_t>(i)] = layer(p + "conv2.weight", p + "bn2", c, gh, gw);
  }
  up1_ = layer("seg.up1.conv.weight", "seg.up1.bn", 3 * c, 2 * gh, 2 * gw);
  up2_ = layer("seg.up2.conv.weight", "seg.up2.bn", c, 4 * gh, 4 * gw);
  out_w_ = s.index("seg.out.weight");
  out_b_ = s.index("seg.out.bias");
}

template <class T>
std::vector<Mat<T>> SegHead<T>::forward(const std::vector<TapSet<T>>& taps, const ParamStore<T>& p, bool training,
                                        SegCache<T>* cache, ParamStore<T>* running) const {
  const std::size_t n = taps.size();
  const int c = cfg_.head.seg_channels;
  const int gh = cfg_.encoder.grid_h(), gw = cfg_.encoder.grid_w();
  std::vector<Mat<T>> concat(n, Mat<T>(static_cast<Eigen::Index>(gh) * gw, 3 * c));
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<Mat<T>> xs(n);
    for (std::size_t s = 0; s < n; ++s) {
      if (!taps[s][i]) throw ValidationError("missing encoder tap");
      xs[s] = *taps[s][i];
    }
    auto h1 = conv_bn_relu<T>(branch1_[i], xs, p, training, cache ? &cache->branch1[i] : nullptr, running);
    auto h2 = conv_bn_relu<T>(branch2_[i], h1, p, training, cache ? &cache->branch2[i] : nullptr, running);
    for (std::size_t s = 0; s < n; ++s) concat[s].middleCols(static_cast<Eigen::Index>(i) * c, c) = h2[s];
  }
  std::vector<Mat<T>> u1(n);
  for (std::size_t s = 0; s < n; ++s) u1[s] = upsample2(concat[s], gh, gw);
  auto h3 = conv_bn_relu<T>(up1_, u1, p, training, cache ? &cache->up1 : nullptr, running);
  std::vector<Mat<T>> u2(n);
  for (std::size_t s = 0; s < n; ++s) u2[s] = upsample2(h3[s], 2 * gh, 2 * gw);
  auto h4 = conv_bn_relu<T>(up2_, u2, p, training, cache ? &cache->up2 : nullptr, running);
  const auto W = as_mat(p, out_w_, c, 2);
  const RowVec<T> b = row_of(p, out_b_);
  std::vector<Mat<T>> logits(n);
  for (std::size_t s = 0; s < n; ++s) {
    logits[s] = h4[s] * W;
    logits[s].rowwise() += b;
  }
  return logits;
}

template <class T>
void SegHead<T>::backward(const SegCache<T>& cache, const std::vector<Mat<T>>& d_logits, const ParamStore<T>& p,
                          ParamStore<T>& g, std::vector<std::array<Mat<T>, 3>>& d_taps) const {
  const std::size_t n = d_logits.size();
  const int c = cfg_.head.seg_channels;
  const int gh = cfg_.encoder.grid_h(), gw = cfg_.encoder.grid_w();
  const auto W = as_mat(p, out_w_, c, 2);
  auto dW = as_mat(g, out_w_, c, 2);
  std::vector<Mat<T>> dh4(n);
  for (std::size_t s = 0; s < n; ++s) {
    dW.noalias() += cache.up2.out[s].transpose() * d_logits[s];
    row_of(g, out_b_) += d_logits[s].colwise().sum();
    dh4[s] = d_logits[s] * W.transpose();
  }
  auto du2 = conv_bn_relu_backward<T>(up2_, cache.up2, dh4, p, g);
  std::vector<Mat<T>> dh3(n);
  for (std::size_t s = 0; s < n; ++s) dh3[s] = upsample2_backward(du2[s], 2 * gh, 2 * gw);
  auto du1 = conv_bn_relu_backward<T>(up1_, cache.up1, dh3, p, g);
  std::vector<Mat<T>> dconcat(n);
  for (std::size_t s = 0; s < n; ++s) dconcat[s] = upsample2_backward(du1[s], gh, gw);
  d_taps.assign(n, {});
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<Mat<T>> dh2(n);
    for (std::size_t s = 0; s < n; ++s) dh2[s] = dconcat[s].middleCols(static_cast<Eigen::Index>(i) * c, c);
    auto dh1 = conv_bn_relu_backward<T>(branch2_[i], cache.branch2[i], dh2, p, g);
    auto dx = conv_bn_relu_backward<T>(branch1_[i], cache.branch1[i], dh1, p, g);
    for (std::size_t s = 0; s < n; ++s) d_taps[s][i] = std::move(dx[s]);
  }
}

template <class T>
BinaryMask logits_to_mask(const Mat<T>& logits, int height, int width) {
  if (logits.rows() != static_cast<Eigen::Index>(height) * width || logits.cols() != 2) {
    throw ValidationError("logit shape mismatch");
  }
  BinaryMask m(height, width);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) m.data[static_cast<std::size_t>(i)] = logits(i, 1) > logits(i, 0);
  return m;
}

// --- pooling ----------------------------------------------------------------

Mat<double> token_weights(const CharMaskSet& masks, int grid_h, int grid_w, int patch) {
  Mat<double> w = Mat<double>::Zero(static_cast<Eigen::Index>(masks.size()), static_cast<Eigen::Index>(grid_h) * grid_w);
  const double area = static_cast<double>(patch) * patch;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const auto& m = masks[k];
    if (m.height != grid_h * patch || m.width != grid_w * patch) {
      throw ValidationError("mask size does not match the token grid");
    }
    for (int y = 0; y < m.height; ++y) {
      for (int x = 0; x < m.width; ++x) {
        if (m.at(y, x)) w(static_cast<Eigen::Index>(k), (y / patch) * grid_w + x / patch) += 1.0;
      }
    }
  }
  return w / area;
}

template <class T>
Mat<T> pooling_matrix(const CharMaskSet& masks, int grid_h, int grid_w, int patch, std::vector<std::size_t>* kept) {
  const Mat<double> w = token_weights(masks, grid_h, grid_w, patch);
  std::vector<std::size_t> rows;
  for (Eigen::Index k = 0; k < w.rows(); ++k) {
    if (w.row(k).sum() > 0.0) rows.push_back(static_cast<std::size_t>(k));
  }
  Mat<T> a(static_cast<Eigen::Index>(rows.size()), w.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = w.row(static_cast<Eigen::Index>(rows[r]));
    a.row(static_cast<Eigen::Index>(r)) = (src / src.sum()).template cast<T>();
  }
  if (kept) *kept = std::move(rows);
  return a;
}

template <class T>
Mat<T> pool_characters(const FeatureGrid<T>& f, const CharMaskSet& masks, int patch, std::vector<std::size_t>* kept) {
  const Mat<T> a = pooling_matrix<T>(masks, f.h, f.w, patch, kept);
  if (a.rows() == 0) return Mat<T>(0, f.d);
  return a * f.data;
}

// --- projection head --------------------------------------------------------

template <class T>
ProjectionHead<T>::ProjectionHead(const HeadConfig& cfg, int in_dim, const ParamStore<T>& s) {
  cfg.validate();
  w1_ = s.index("proj.fc1.weight");
  b1_ = s.index("proj.fc1.bias");
  w2_ = s.index("proj.fc2.weight");
  b2_ = s.index("proj.fc2.bias");
  w3_ = s.index("proj.fc3.weight");
  b3_ = s.index("proj.fc3.bias");
  v_ = s.index("proj.last.direction");
  if (s.spec(w1_).shape != std::vector<int>{in_dim, cfg.proj_hidden}) {
    throw ValidationError("projection input width mismatch");
  }
}

template <class T>
Mat<T> ProjectionHead<T>::forward(const Mat<T>& v, const ParamStore<T>& p, ProjCache<T>* cache) const {
  ProjCache<T> local;
  ProjCache<T>& c = cache ? *cache : local;
  if (!v.allFinite()) throw RuntimeError("non-finite projection input");
  c.x = v;
  c.pre1 = v * p.mat(w1_);
  c.pre1.rowwise() += row_of(p, b1_);
  c.act1 = gelu<T>(c.pre1);
  c.pre2 = c.act1 * p.mat(w2_);
  c.pre2.rowwise() += row_of(p, b2_);
  c.act2 = gelu<T>(c.pre2);
  c.y = c.act2 * p.mat(w3_);
  c.y.rowwise() += row_of(p, b3_);
  c.inv_norm = c.y.rowwise().norm().array().max(T(kNormEps)).inverse().matrix();
  c.z = (c.y.array().colwise() * c.inv_norm.array()).matrix();
  const auto V = p.mat(v_);
  c.inv_vnorm = V.rowwise().norm().array().max(T(kNormEps)).inverse().matrix();
  c.w_unit = (V.array().colwise() * c.inv_vnorm.array()).matrix();
  return c.z * c.w_unit.transpose();
}

template <class T>
Mat<T> ProjectionHead<T>::backward(const ProjCache<T>& c, const Mat<T>& d_out, const ParamStore<T>& p,
                                   ParamStore<T>& g) const {
  // weight-normalized layer
  const Mat<T> dz = d_out * c.w_unit;
  const Mat<T> dw = d_out.transpose() * c.z;
  const Vec<T> along = (dw.array() * c.w_unit.array()).rowwise().sum().matrix();
  g.mat(v_) += ((dw - (c.w_unit.array().colwise() * along.array()).matrix()).array().colwise() *
                c.inv_vnorm.array())
                   .matrix();
  // row normalization (rows clamped at eps scale linearly)
  const Vec<T> zdz = (c.z.array() * dz.array()).rowwise().sum().matrix();
  Mat<T> dy(c.y.rows(), c.y.cols());
  for (Eigen::Index r = 0; r < c.y.rows(); ++r) {
    if (c.inv_norm(r) < T(1) / T(kNormEps)) {
      dy.row(r) = (dz.row(r) - c.z.row(r) * zdz(r)) * c.inv_norm(r);
    } else {
      dy.row(r) = dz.row(r) * c.inv_norm(r);
    }
  }
  g.mat(w3_).noalias() += c.act2.transpose() * dy;
  row_of(g, b3_) += dy.colwise().sum();
  Mat<T> d2 = dy * p.mat(w3_).transpose();
  d2.array() *= gelu_grad<T>(c.pre2).array();
  g.mat(w2_).noalias() += c.act1.transpose() * d2;
  row_of(g, b2_) += d2.colwise().sum();
  Mat<T> d1 = d2 * p.mat(w2_).transpose();
  d1.array() *= gelu_grad<T>(c.pre1).array();
  g.mat(w1_).noalias() += c.x.transpose() * d1;
  row_of(g, b1_) += d1.colwise().sum();
  return d1 * p.mat(w1_).transpose();
}

template <class T>
Mat<T> ProjectionHead<T>::bottleneck(const Mat<T>& v, const ParamStore<T>& p) const {
  ProjCache<T> c;
  forward(v, p, &c);
  return c.z;
}

template <class T>
Mat<T> ProjectionHead<T>::output_layer(const Mat<T>& z, const ParamStore<T>& p) const {
  const Vec<T> inv = z.rowwise().norm().array().max(T(kNormEps)).inverse().matrix();
  const Mat<T> zn = (z.array().colwise() * inv.array()).matrix();
  const auto V = p.mat(v_);
  const Vec<T> inv_v = V.rowwise().norm().array().max(T(kNormEps)).inverse().matrix();
  return zn * (V.array().colwise() * inv_v.array()).matrix().transpose();
}

template <class T>
Model<T>::Model(const ModelConfig& c, const ParamStore<T>& store)
    : cfg(c), encoder(c.encoder, store), proj(c.head, c.encoder.embed_dim, store) {
  if (store.find("seg.out.weight")) seg.emplace(c, store);
}

#define CCD_INSTANTIATE(T)                                                                                    \
  template ParamStore<T> make_teacher<T>(const ParamStore<T>&);                                               \
  template void check_layout<T>(const ModelConfig&, const ParamStore<T>&, bool);                              \
  template void normalize_unit_rows<T>(ParamStore<T>&);                                                       \
  template Mat<T> patchify<T>(const ImageBuffer&, int);                                                       \
  template class Encoder<T>;                                                                                  \
  template class SegHead<T>;                                                                                  \
  template BinaryMask logits_to_mask<T>(const Mat<T>&, int, int);                                             \
  template Mat<T> pooling_matrix<T>(const CharMaskSet&, int, int, int, std::vector<std::size_t>*);            \
  template Mat<T> pool_characters<T>(const FeatureGrid<T>&, const CharMaskSet&, int, std::vector<std::size_t>*); \
  template class ProjectionHead<T>;                                                                           \
  template struct Model<T>;

CCD_INSTANTIATE(float)
CCD_INSTANTIATE(double)
CCD_INSTANTIATE(long double)

}  // namespace ccd
