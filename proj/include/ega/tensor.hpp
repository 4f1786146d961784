#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ega {

using Shape = std::vector<std::size_t>;

/// Shape mismatch between operands; the message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Signal too short for the requested filter.
class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Violated precondition of an operation.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token id outside the vocabulary, or a character the vocabulary does not know.
class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Sequence longer than the model's context window.
class ContextError : public std::length_error {
 public:
  using std::length_error::length_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

/// Dense row-major array. Rank 0 (empty shape) holds a single scalar.
template <typename Scalar>
class NdArray {
 public:
  using value_type = Scalar;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  NdArray() : data_(1, Scalar(0)) {}

  explicit NdArray(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  NdArray(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("NdArray: shape " + shape_str(shape_) + " needs " +
                           std::to_string(shape_numel(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  static NdArray scalar(Scalar v) { return NdArray(Shape{}, std::vector<Scalar>{v}); }

  static NdArray from(Shape shape, std::initializer_list<Scalar> values) {
    return NdArray(std::move(shape), std::vector<Scalar>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(int axis) const { return shape_.at(normalize_axis(axis)); }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw ContractError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const Scalar& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on array of shape " + shape_str(shape_));
    return data_[0];
  }

  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstArrayMap array() const {
    return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  /// View as a rows x cols row-major matrix (rows * cols must equal numel).
  MatrixMap matrix(std::size_t rows, std::size_t cols) {
    check_matrix(rows, cols);
    return MatrixMap(data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }
  ConstMatrixMap matrix(std::size_t rows, std::size_t cols) const {
    check_matrix(rows, cols);
    return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
  }

  NdArray reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return NdArray(std::move(shape), data_);
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename Other>
  NdArray<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return NdArray<Other>(shape_, std::move(out));
  }

  bool same_shape(const NdArray& other) const { return shape_ == other.shape_; }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ContractError("index rank mismatch for " + shape_str(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= shape_[axis]) throw ContractError("index out of range for " + shape_str(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  void check_matrix(std::size_t rows, std::size_t cols) const {
    if (rows * cols != numel()) {
      throw DimensionError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " of " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

/// Row-major strides of a shape.
inline Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace ega
