#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cinet/error.hpp"

namespace cinet {

#ifdef CINET_SCALAR_FLOAT32
// Reduced-precision build. Functional, but the numeric tolerances promised by
// the test suite are only guaranteed for the 64-bit default.
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

// Dense row-major n-d array of Scalar. Ops never write into a tensor they did
// not allocate; once produced, values are treated as immutable.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), Scalar(0));
  }

  Tensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Unchecked row-major indexing.
  Scalar& at(int i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar at(int i) const { return data_[static_cast<std::size_t>(i)]; }
  Scalar& at(int i, int j) { return data_[idx2(i, j)]; }
  Scalar at(int i, int j) const { return data_[idx2(i, j)]; }
  Scalar& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
  Scalar at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
  Scalar& at(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
  Scalar at(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

  bool all_finite() const {
    for (Scalar v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Consulted when the tensor is bound onto a GradTape as a named parameter.
  bool requires_grad = false;

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (int e : shape_) {
      if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape_));
    }
  }

  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("cannot compare tensors of shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace cinet
