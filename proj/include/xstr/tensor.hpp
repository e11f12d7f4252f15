// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xstr/errors.hpp"

namespace xstr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Cache-line aligned allocation. Vectorised kernels peel a different number
/// of leading elements depending on the address, which changes the summation
/// order; a fixed alignment keeps results independent of where buffers land.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. Value semantic; copies are deep. Production code
/// uses the float32 instantiation `Tensor`; double exists for gradient oracles.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    for (auto d : shape_) require(d > 0, ErrorCode::ShapeMismatch, "zero-sized dim in " + shape_str(shape_));
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, const std::vector<T>& data) : BasicTensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

  BasicTensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) require(d > 0, ErrorCode::ShapeMismatch, "zero-sized dim in " + shape_str(shape_));
    require(data_.size() == shape_numel(shape_), ErrorCode::ShapeMismatch,
            "data size " + std::to_string(data_.size()) + " does not match " + shape_str(shape_));
  }

  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    AlignedVector<T> data;
    std::size_t cols = rows.begin()->size();
    for (const auto& r : rows) {
      require(r.size() == cols, ErrorCode::ShapeMismatch, "ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return BasicTensor({rows.size(), cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  T operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  T at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  T& at(std::size_t a, std::size_t b, std::size_t c) { return data_[(a * shape_[1] + b) * shape_[2] + c]; }
  T at(std::size_t a, std::size_t b, std::size_t c) const { return data_[(a * shape_[1] + b) * shape_[2] + c]; }

  /// Same data, new shape with equal element count.
  BasicTensor reshaped(Shape shape) const {
    require(shape_numel(shape) == numel(), ErrorCode::ShapeMismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return BasicTensor(std::move(shape), data_);
  }

  /// Element-wise conversion to another scalar type.
  template <class U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Bitwise equality of shape and payload.
  bool bit_equal(const BasicTensor& other) const noexcept {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
  }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

using Tensor = BasicTensor<float>;

}  // namespace xstr
