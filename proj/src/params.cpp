#include "ccd/params.hpp"

#include <numeric>
#include <stdexcept>

#include "ccd/common.hpp"

namespace ccd {

const char* role_name(ParamRole role) {
  switch (role) {
    case ParamRole::encoder:
      return "encoder";
    case ParamRole::seg_head:
      return "seg_head";
    case ParamRole::projection:
      return "projection";
  }
  return "unknown";
}

std::size_t TensorSpec::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

std::pair<int, int> TensorSpec::matrix_shape() const {
  if (shape.size() <= 1) return {1, static_cast<int>(numel())};
  return {shape[0], static_cast<int>(numel() / static_cast<std::size_t>(shape[0]))};
}

template <class T>
std::size_t ParamStore<T>::add(TensorSpec spec, TensorData<T> values) {
  if (by_name_.count(spec.name)) throw ValidationError("duplicate tensor name: " + spec.name);
  if (values.empty()) values.assign(spec.numel(), T(0));
  if (values.size() != spec.numel()) throw ValidationError("value count does not match shape for " + spec.name);
  by_name_.emplace(spec.name, specs_.size());
  specs_.push_back(std::move(spec));
  values_.push_back(std::move(values));
  return specs_.size() - 1;
}

template <class T>
std::optional<std::size_t> ParamStore<T>::find(std::string_view name) const {
  const auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

template <class T>
std::size_t ParamStore<T>::index(std::string_view name) const {
  const auto i = find(name);
  if (!i) throw std::out_of_range("no tensor named " + std::string(name));
  return *i;
}

template <class T>
MatMap<T> ParamStore<T>::mat(std::size_t i) {
  const auto [r, c] = specs_[i].matrix_shape();
  return MatMap<T>(values_[i].data(), r, c);
}

template <class T>
ConstMatMap<T> ParamStore<T>::mat(std::size_t i) const {
  const auto [r, c] = specs_[i].matrix_shape();
  return ConstMatMap<T>(values_[i].data(), r, c);
}

template <class T>
std::size_t ParamStore<T>::numel() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <class T>
void ParamStore<T>::set_zero() {
  for (auto& v : values_) std::fill(v.begin(), v.end(), T(0));
}

template <class T>
ParamStore<T> ParamStore<T>::zeros_like() const {
  ParamStore out;
  for (const auto& s : specs_) out.add(s);
  return out;
}

template <class T>
ParamStore<T> ParamStore<T>::filter(const std::function<bool(const TensorSpec&)>& keep) const {
  ParamStore out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (keep(specs_[i])) out.add(specs_[i], values_[i]);
  }
  return out;
}

template <class T>
bool ParamStore<T>::same_layout(const ParamStore& o) const {
  if (size() != o.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (specs_[i].name != o.specs_[i].name || specs_[i].shape != o.specs_[i].shape) return false;
  }
  return true;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class ParamStore<long double>;

}  // namespace ccd
