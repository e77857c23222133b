#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ccd/imaging.hpp"
#include "ccd/params.hpp"

namespace ccd {

struct EncoderConfig {
  int embed_dim = 192;
  int depth = 12;
  int heads = 3;
  int patch = 4;
  int input_h = 32;
  int input_w = 128;
  int channels = 1;
  int mlp_ratio = 4;

  /// "tiny" (192, 12, 3), "small" (384, 12, 6), "base" (512, 12, 8).
  static EncoderConfig preset(const std::string& name);
  void validate() const;

  int grid_h() const { return input_h / patch; }
  int grid_w() const { return input_w / patch; }
  int tokens() const { return grid_h() * grid_w(); }
  int head_dim() const { return embed_dim / heads; }
  /// 1-based block indices whose outputs feed the segmentation head:
  /// 2, 4, 6, each clamped to depth.
  std::array<int, 3> tap_blocks() const;

  bool operator==(const EncoderConfig&) const = default;
};

struct HeadConfig {
  int seg_channels = 32;
  int proj_hidden = 2048;
  int proj_bottleneck = 256;
  int out_dim = 1024;

  void validate() const;
  bool operator==(const HeadConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  HeadConfig head;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Token grid, one row per token in row-major grid order.
template <class T>
struct FeatureGrid {
  int h = 0;
  int w = 0;
  int d = 0;
  Mat<T> data;  ///< (h*w) x d
};

// --- parameters -------------------------------------------------------------

/// Zero-valued store with every tensor of the student model, in canonical order
/// (encoder, segmentation head, projection head).
ParamStore<float> build_layout(const ModelConfig& cfg);
/// Truncated normal (stddev 0.02) weights, zero biases, unit norm gains,
/// unit-norm rows for the weight-normalized output layer.
ParamStore<float> init_params(const ModelConfig& cfg, std::uint64_t seed);
/// Encoder and projection tensors copied from the student.
template <class T>
ParamStore<T> make_teacher(const ParamStore<T>& student);
/// Throws ValidationError naming the first missing or mis-shaped tensor.
template <class T>
void check_layout(const ModelConfig& cfg, const ParamStore<T>& store, bool with_seg_head);

// --- encoder ----------------------------------------------------------------

template <class T>
struct LayerNormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <class T>
struct BlockCache {
  LayerNormCache<T> ln1;
  Mat<T> qkv;
  std::vector<Mat<T>> attn;  ///< softmax probabilities per head
  Mat<T> heads_out;
  LayerNormCache<T> ln2;
  Mat<T> hidden_pre;  ///< MLP pre-activation
};

template <class T>
struct EncoderCache {
  Mat<T> patches;
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> final_ln;
};

template <class T>
struct EncoderOutput {
  FeatureGrid<T> features;
  std::array<FeatureGrid<T>, 3> taps;
};

/// Flattens 4x4xC patches: row = token, column = (py*patch + px)*C + c.
template <class T>
Mat<T> patchify(const ImageBuffer& img, int patch);

template <class T>
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, const ParamStore<T>& store);

  const EncoderConfig& config() const { return cfg_; }

  /// With taps_only, stops after the last tap block and leaves features empty.
  EncoderOutput<T> forward(const ImageBuffer& img, const ParamStore<T>& p, EncoderCache<T>* cache = nullptr,
                           bool taps_only = false) const;
  /// Accumulates parameter gradients into `grads` (same layout as p). Null
  /// entries mean a zero upstream gradient.
  void backward(const EncoderCache<T>& cache, const Mat<T>* d_features, const std::array<const Mat<T>*, 3>& d_taps,
                const ParamStore<T>& p, ParamStore<T>& grads) const;

 private:
  struct BlockIdx {
    std::size_t n1w, n1b, qkvw, qkvb, projw, projb, n2w, n2b, fc1w, fc1b, fc2w, fc2b;
  };
  EncoderConfig cfg_;
  std::size_t pe_w_, pe_b_, pos_, norm_w_, norm_b_;
  std::vector<BlockIdx> blocks_;
};

// --- segmentation head ------------------------------------------------------

template <class T>
struct ConvBnCache {
  std::vector<Mat<T>> input;
  std::vector<Mat<T>> xhat;
  std::vector<Mat<T>> out;
  RowVec<T> rstd;
};

template <class T>
struct SegCache {
  std::array<ConvBnCache<T>, 3> branch1, branch2;
  ConvBnCache<T> up1, up2;
};

template <class T>
using TapSet = std::array<const Mat<T>*, 3>;

template <class T>
class SegHead {
 public:
  SegHead(const ModelConfig& cfg, const ParamStore<T>& store);

  /// Returns per-sample logits, (input_h*input_w) x 2 in row-major pixel order.
  /// Training mode normalizes with batch statistics and, when `running` is
  /// given, updates its running statistics (momentum 0.9); otherwise the
  /// running statistics in p are used.
  std::vector<Mat<T>> forward(const std::vector<TapSet<T>>& taps, const ParamStore<T>& p, bool training,
                              SegCache<T>* cache = nullptr, ParamStore<T>* running = nullptr) const;
  /// Training-mode backward. d_taps receives one gradient triple per sample.
  void backward(const SegCache<T>& cache, const std::vector<Mat<T>>& d_logits, const ParamStore<T>& p,
                ParamStore<T>& grads, std::vector<std::array<Mat<T>, 3>>& d_taps) const;

  struct ConvBn {
    int cin = 0, cout = 0, h = 0, w = 0;
    std::size_t weight, gamma, beta, mean, var;
  };

 private:
  ModelConfig cfg_;
  std::array<ConvBn, 3> branch1_, branch2_;
  ConvBn up1_, up2_;
  std::size_t out_w_, out_b_;
};

/// Pixel-wise argmax (ties go to background).
template <class T>
BinaryMask logits_to_mask(const Mat<T>& logits, int height, int width);

// --- pooling ----------------------------------------------------------------

/// Area-averaged coverage of each mask on the token grid: rows = masks,
/// columns = tokens, entries in [0, 1].
Mat<double> token_weights(const CharMaskSet& masks, int grid_h, int grid_w, int patch);

/// Row-normalized pooling operator; rows with zero coverage are omitted and
/// the surviving mask indices written to `kept`.
template <class T>
Mat<T> pooling_matrix(const CharMaskSet& masks, int grid_h, int grid_w, int patch,
                      std::vector<std::size_t>* kept = nullptr);

/// Masked mean of token features, one row per mask with nonzero coverage.
template <class T>
Mat<T> pool_characters(const FeatureGrid<T>& features, const CharMaskSet& masks, int patch,
                       std::vector<std::size_t>* kept = nullptr);

// --- projection head --------------------------------------------------------

template <class T>
struct ProjCache {
  Mat<T> x, pre1, act1, pre2, act2, y;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_norm;  ///< 1 / max(|y_row|, eps)
  Mat<T> z;
  Mat<T> w_unit;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_vnorm;
};

template <class T>
class ProjectionHead {
 public:
  ProjectionHead(const HeadConfig& cfg, int in_dim, const ParamStore<T>& store);

  Mat<T> forward(const Mat<T>& v, const ParamStore<T>& p, ProjCache<T>* cache = nullptr) const;
  /// Returns the gradient with respect to the input rows.
  Mat<T> backward(const ProjCache<T>& cache, const Mat<T>& d_out, const ParamStore<T>& p,
                  ParamStore<T>& grads) const;

  /// Unit-norm bottleneck rows (before the weight-normalized layer).
  Mat<T> bottleneck(const Mat<T>& v, const ParamStore<T>& p) const;
  /// Weight-normalized output layer applied after re-normalizing z.
  Mat<T> output_layer(const Mat<T>& z, const ParamStore<T>& p) const;

 private:
  std::size_t w1_, b1_, w2_, b2_, w3_, b3_, v_;
};

/// Encoder plus heads resolved against one store.
template <class T>
struct Model {
  Model(const ModelConfig& cfg, const ParamStore<T>& store);

  ModelConfig cfg;
  Encoder<T> encoder;
  std::optional<SegHead<T>> seg;  ///< absent for teacher stores
  ProjectionHead<T> proj;
};

/// Renormalizes every unit_rows tensor in place.
template <class T>
void normalize_unit_rows(ParamStore<T>& store);

}  // namespace ccd
