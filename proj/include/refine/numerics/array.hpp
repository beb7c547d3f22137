#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace refine::nx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Dense row-major array. Rank 0 is a scalar, rank 1 a vector, rank 2 a matrix.
template <typename T>
class Array {
 public:
  using value_type = T;

  Array() : shape_{}, data_(1, T{0}) {}

  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("Array: zero-length dimension in shape " + shape_str(shape_));
    }
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("Array: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
    for (T v : data_) {
      if (!std::isfinite(v)) throw NonFiniteError("Array: non-finite value at construction");
    }
  }

  static Array zeros(Shape shape) { return filled(std::move(shape), T{0}); }
  static Array ones(Shape shape) { return filled(std::move(shape), T{1}); }
  static Array filled(Shape shape, T value) {
    Array a;
    a.shape_ = std::move(shape);
    for (auto d : a.shape_) {
      if (d == 0) throw ShapeError("Array: zero-length dimension in shape " + shape_str(a.shape_));
    }
    a.data_.assign(shape_size(a.shape_), value);
    return a;
  }
  static Array scalar(T value) { return Array(Shape{}, std::vector<T>{value}); }
  static Array vector(std::vector<T> values) {
    Shape s{values.size()};
    return Array(std::move(s), std::move(values));
  }
  static Array matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return Array(Shape{rows, cols}, std::move(values));
  }
  static Array identity(std::size_t n) {
    auto a = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) a.data_[i * n + i] = T{1};
    return a;
  }

  // Skips the finiteness scan; for kernel outputs whose inputs were already validated.
  static Array unchecked(Shape shape, std::vector<T> data) {
    Array a;
    a.shape_ = std::move(shape);
    a.data_ = std::move(data);
    return a;
  }

  template <typename U>
  Array<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Array<U>::unchecked(shape_, std::move(out));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }
  bool is_scalar() const { return data_.size() == 1 && rank() <= 1; }

  std::span<const T> data() const { return data_; }
  std::span<T> mutable_data() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T item() const {
    if (!is_scalar()) throw ShapeError("Array::item on non-scalar shape " + shape_str(shape_));
    return data_[0];
  }
  T operator[](std::size_t i) const { return data_[i]; }
  T at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  bool operator==(const Array& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

}  // namespace refine::nx
