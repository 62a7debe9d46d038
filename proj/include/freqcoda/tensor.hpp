#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "freqcoda/errors.hpp"

namespace freqcoda {

using Dims = std::vector<std::size_t>;

inline std::size_t element_count(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_string(const Dims& dims) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ')';
  return os.str();
}

// Dense row-major array. f32 is the working precision; f64 exists so that
// finite-difference gradient checks can use tight tolerances.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Dims dims, T fill = T{})
      : dims_(std::move(dims)), data_(element_count(dims_), fill) {}
  BasicTensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != element_count(dims_))
      throw InvalidShape("tensor data length " + std::to_string(data_.size()) +
                         " does not match dims " + dims_string(dims_));
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW accessors; the caller guarantees rank 4.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }

  // Contiguous slab for the leading index (a sample of a batch, a plane of a
  // sample, a row of a matrix).
  std::span<T> slab(std::size_t i) noexcept {
    const std::size_t stride = dims_.empty() ? 0 : data_.size() / dims_[0];
    return std::span<T>(data_.data() + i * stride, stride);
  }
  std::span<const T> slab(std::size_t i) const noexcept {
    const std::size_t stride = dims_.empty() ? 0 : data_.size() / dims_[0];
    return std::span<const T>(data_.data() + i * stride, stride);
  }

  void reshape(Dims dims) {
    if (element_count(dims) != data_.size())
      throw InvalidShape("cannot reshape " + dims_string(dims_) + " to " + dims_string(dims));
    dims_ = std::move(dims);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(dims_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Dims dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <class T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw InvalidShape(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                       dims_string(t.dims()));
}

template <class T>
void require_same_dims(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
  if (a.dims() != b.dims())
    throw InvalidShape(std::string(what) + ": dims " + dims_string(a.dims()) + " vs " +
                       dims_string(b.dims()));
}

// Copies samples [first, first+count) of a batch-major tensor.
template <class T>
BasicTensor<T> slice_batch(const BasicTensor<T>& t, std::size_t first, std::size_t count) {
  Dims dims = t.dims();
  dims[0] = count;
  BasicTensor<T> out(dims);
  const std::size_t stride = t.size() / t.dim(0);
  std::copy_n(t.data() + first * stride, count * stride, out.data());
  return out;
}

template <class T>
BasicTensor<T> gather_batch(const BasicTensor<T>& t, std::span<const std::size_t> indices) {
  Dims dims = t.dims();
  dims[0] = indices.size();
  BasicTensor<T> out(dims);
  const std::size_t stride = t.size() / t.dim(0);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(t.data() + indices[i] * stride, stride, out.data() + i * stride);
  return out;
}

}  // namespace freqcoda
