#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace psound {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

/// Dense row-major n-dimensional array. The shape is fixed at construction;
/// element values are mutable (parameters are updated in place).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill_value = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill_value) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[flat_index(idx...)];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[flat_index(idx...)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  template <typename... Idx>
  std::size_t flat_index(Idx... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    const std::size_t n = sizeof...(idx);
    if (n != shape_.size()) throw std::invalid_argument("Tensor: wrong index rank");
    std::size_t flat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (ids[i] >= shape_[i]) throw std::out_of_range("Tensor: index out of range");
      flat = flat * shape_[i] + ids[i];
    }
    return flat;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw std::invalid_argument("Tensor: zero-length axis in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace psound
