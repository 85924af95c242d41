#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <new>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "sxda/errors.hpp"

namespace sxda {

/// Allocates on 64-byte boundaries. Eigen chooses its vectorized code path
/// from the runtime address of each operand, so unaligned buffers can round
/// differently from run to run.
///
/// Sized construction default-initializes: `Buffer<float>(n)` holds
/// indeterminate values. Pass a fill value when zeros are needed.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Number of elements for the given extents. Throws on a zero extent or on
/// size_t overflow.
inline std::size_t shape_size(const Shape& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) {
    if (d == 0) throw DimensionError("zero extent in shape " + shape_str(dims));
    if (n > std::numeric_limits<std::size_t>::max() / d)
      throw DimensionError("element count overflows for shape " + shape_str(dims));
    n *= d;
  }
  return n;
}

/// Dense row-major array of real values. Value semantics: copies are deep.
///
/// Construction from caller-provided values rejects NaN/Inf. Kernel outputs
/// are produced through the unchecked path for speed.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor holds real values");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T{0})
      : dims_(std::move(dims)), data_(shape_size(dims_), fill) {}

  Tensor(Shape dims, const std::vector<T>& values)
      : dims_(std::move(dims)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_size(dims_))
      throw DimensionError("tensor of shape " + shape_str(dims_) + " needs " +
                           std::to_string(shape_size(dims_)) + " values, got " +
                           std::to_string(data_.size()));
    if (!all_finite()) throw NumericError("non-finite value in tensor " + shape_str(dims_));
  }

  /// Skips the finiteness scan. For kernel outputs only.
  static Tensor unchecked(Shape dims, Buffer<T> values) {
    Tensor t;
    t.dims_ = std::move(dims);
    t.data_ = std::move(values);
    return t;
  }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  Buffer<T>& storage() noexcept { return data_; }
  const Buffer<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Bounds-checked multi-index access.
  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape dims) const {
    if (shape_size(dims) != size())
      throw DimensionError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    return unchecked(std::move(dims), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    Buffer<U> out(data_.begin(), data_.end());
    return Tensor<U>::unchecked(dims_, std::move(out));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != dims_.size())
      throw DimensionError("index rank " + std::to_string(idx.size()) + " for tensor " +
                           shape_str(dims_));
    std::size_t off = 0, axis = 0;
    for (std::size_t i : idx) {
      if (i >= dims_[axis]) throw DimensionError("index out of range for " + shape_str(dims_));
      off = off * dims_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape dims_;
  Buffer<T> data_;
};

/// Largest absolute elementwise difference; shapes must agree.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims())
    throw DimensionError("shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace sxda
