#pragma once

#include <Eigen/Core>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ccd {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// Tensor storage. Fixed alignment keeps vectorized reductions over mapped
/// tensors in the same summation order from run to run.
template <class T>
using TensorData = std::vector<T, Eigen::aligned_allocator<T>>;

enum class ParamRole { encoder, seg_head, projection };

const char* role_name(ParamRole role);

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  ParamRole role = ParamRole::encoder;
  bool trainable = true;   ///< false for batch-norm running statistics
  bool decay = true;       ///< AdamW weight decay applies
  bool unit_rows = false;  ///< weight-normalized direction, rows kept at unit norm

  std::size_t numel() const;
  /// shape[0] x (product of the rest); 1 x n for vectors.
  std::pair<int, int> matrix_shape() const;
};

/// Named real tensors with fixed shapes, stored in registration order.
template <class T>
class ParamStore {
 public:
  std::size_t add(TensorSpec spec, TensorData<T> values = {});
  std::size_t add(TensorSpec spec, const std::vector<T>& values) {
    return add(std::move(spec), TensorData<T>(values.begin(), values.end()));
  }
  std::size_t add(TensorSpec spec, std::initializer_list<T> values) {
    return add(std::move(spec), TensorData<T>(values));
  }

  std::size_t size() const { return specs_.size(); }
  const TensorSpec& spec(std::size_t i) const { return specs_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;
  /// Throws std::out_of_range naming the tensor when absent.
  std::size_t index(std::string_view name) const;

  TensorData<T>& values(std::size_t i) { return values_[i]; }
  const TensorData<T>& values(std::size_t i) const { return values_[i]; }
  MatMap<T> mat(std::size_t i);
  ConstMatMap<T> mat(std::size_t i) const;

  std::size_t numel() const;
  void set_zero();
  ParamStore zeros_like() const;
  ParamStore filter(const std::function<bool(const TensorSpec&)>& keep) const;
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < size(); ++i) {
      TensorData<U> v(values_[i].begin(), values_[i].end());
      out.add(specs_[i], std::move(v));
    }
    return out;
  }

  /// Same names and shapes in the same order.
  bool same_layout(const ParamStore& o) const;
  bool operator==(const ParamStore& o) const { return same_layout(o) && values_ == o.values_; }

 private:
  std::vector<TensorSpec> specs_;
  std::vector<TensorData<T>> values_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class ParamStore<long double>;

}  // namespace ccd
