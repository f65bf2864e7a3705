#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unmask {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major tensor with shared storage. Ops allocate fresh outputs and
// never mutate inputs; use clone() when an independent copy is needed.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_))) {}

  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), fill)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " needs " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }

  T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  // convenience indexers for tests and small host-side code
  T& at(int64_t i, int64_t j) { return (*data_)[static_cast<size_t>(i * shape_[1] + j)]; }
  const T& at(int64_t i, int64_t j) const {
    return (*data_)[static_cast<size_t>(i * shape_[1] + j)];
  }
  T& at(int64_t c, int64_t h, int64_t w) {
    return (*data_)[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
  }
  const T& at(int64_t c, int64_t h, int64_t w) const {
    return (*data_)[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
  }
  T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return (*data_)[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return (*data_)[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                  ": element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out{shape_};
    const T* s = data();
    U* d = out.data();
    for (int64_t i = 0; i < numel(); ++i) d[i] = static_cast<U>(s[i]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    const T* p = data();
    for (int64_t i = 0; i < numel(); ++i)
      if (!std::isfinite(static_cast<double>(p[i]))) return false;
    return true;
  }

  double sum() const {
    double acc = 0;
    const T* p = data();
    for (int64_t i = 0; i < numel(); ++i) acc += static_cast<double>(p[i]);
    return acc;
  }

  double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }

  T min() const {
    const T* p = data();
    T m = p[0];
    for (int64_t i = 1; i < numel(); ++i) m = std::min(m, p[i]);
    return m;
  }
  T max() const {
    const T* p = data();
    T m = p[0];
    for (int64_t i = 1; i < numel(); ++i) m = std::max(m, p[i]);
    return m;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;

  template <typename U>
  friend class Tensor;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace unmask
