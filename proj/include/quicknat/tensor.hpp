#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace quicknat {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Thrown when tensor extents do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input data is missing, malformed, or inconsistent (maps to CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf encountered where finite values are required (CLI exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major n-dimensional array. 4-D tensors follow the
/// batch x channels x height x width convention.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  /// Aligned to Eigen's packet size. Vectorized reductions peel a prologue that
  /// depends on the start address, so unaligned buffers would make results vary
  /// from run to run in the last bits.
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;
  using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(checked_numel(shape_)), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (checked_numel(shape_) != static_cast<Index>(data_.size())) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Index offset(Index b, Index c, Index h, Index w) const {
    return ((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  T& at(Index b, Index c, Index h, Index w) { return (*this)[offset(b, c, h, w)]; }
  const T& at(Index b, Index c, Index h, Index w) const { return (*this)[offset(b, c, h, w)]; }

  ArrayMap array() { return ArrayMap(data_.data(), size()); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), size()); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out(std::move(shape));
    if (out.size() != size()) throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(out.shape_));
    std::copy(data_.begin(), data_.end(), out.data_.begin());
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static Index checked_numel(const Shape& shape) {
    for (Index extent : shape) {
      if (extent <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    return numel(shape);
  }

  Shape shape_;
  Storage data_;
};

/// Per-pixel integer labels, shaped [B,H,W] or [H,W].
using LabelTensor = Tensor<std::int32_t>;

}  // namespace quicknat
