#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace clm {

/// Dense row-major tensor owning its values.
template <typename T>
class BasicTensor {
 public:
  BasicTensor() = default;
  explicit BasicTensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }

  /// Leading dimension and product of the rest (a 1-D tensor is a single row).
  int rows() const { return shape_.size() <= 1 ? 1 : shape_[0]; }
  int cols() const { return static_cast<int>(shape_.size() <= 1 ? data_.size() : data_.size() / static_cast<std::size_t>(shape_[0])); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
MatMap<T> as_matrix(BasicTensor<T>& t) {
  return MatMap<T>(t.data(), t.rows(), t.cols());
}
template <typename T>
ConstMatMap<T> as_matrix(const BasicTensor<T>& t) {
  return ConstMatMap<T>(t.data(), t.rows(), t.cols());
}

template <typename To, typename From>
BasicTensor<To> cast_tensor(const BasicTensor<From>& src) {
  BasicTensor<To> out(src.shape());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<To>(src[i]);
  return out;
}

}  // namespace clm
