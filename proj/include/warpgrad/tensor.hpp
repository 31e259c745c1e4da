// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace warpgrad {

/// Error type for all tensor/graph contract violations (shape mismatches,
/// non-finite values, consumed graphs, ...).
class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense shape. Rank 0 denotes a scalar, rank 1 a vector, rank 2 a matrix.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) { validate(); }

  static Shape scalar() { return Shape{}; }
  static Shape vector(int n) { return Shape{n}; }
  static Shape matrix(int rows, int cols) { return Shape{rows, cols}; }

  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  const std::vector<int>& dims() const { return dims_; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : dims_) n *= static_cast<std::size_t>(d);
    return n;
  }

  int rows() const { return rank() == 2 ? dims_[0] : (rank() == 1 ? dims_[0] : 1); }
  int cols() const { return rank() == 2 ? dims_[1] : 1; }

  bool operator==(const Shape& o) const { return dims_ == o.dims_; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) os << ',';
      os << dims_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    for (int d : dims_) {
      if (d < 0) throw TensorError("negative extent in shape " + str());
    }
  }
  std::vector<int> dims_;
};

/// Dense 64-bit float tensor with copy-on-write storage. Copies are cheap;
/// mutation through `mutable_data` detaches shared storage first, so graph
/// leaves can alias parameter tensors without defensive copies.
class Tensor {
 public:
  Tensor() : shape_(), data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_.numel(), 0.0)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (data_->size() != shape_.numel()) {
      throw TensorError("value count " + std::to_string(data_->size()) +
                        " does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape::scalar(), {v}); }

  static Tensor zeros(const Shape& s) { return Tensor(s); }

  static Tensor full(const Shape& s, double v) {
    Tensor t(s);
    auto* d = t.mutable_data();
    std::fill(d, d + t.numel(), v);
    return t;
  }

  static Tensor identity(int n) {
    Tensor t(Shape::matrix(n, n));
    auto* d = t.mutable_data();
    for (int i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return shape_.numel(); }
  int rows() const { return shape_.rows(); }
  int cols() const { return shape_.cols(); }

  const double* data() const { return data_->data(); }
  std::span<const double> values() const { return {data_->data(), data_->size()}; }

  double* mutable_data() {
    if (data_.use_count() > 1) {
      data_ = std::make_shared<std::vector<double>>(*data_);
    }
    return data_->data();
  }

  double at(std::size_t i) const { return (*data_)[i]; }
  double operator()(int r, int c) const {
    return (*data_)[static_cast<std::size_t>(r) * shape_.cols() + c];
  }

  double item() const {
    if (numel() != 1) {
      throw TensorError("item() on non-scalar tensor of shape " + shape_.str());
    }
    return (*data_)[0];
  }

  bool all_finite() const {
    for (double v : *data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_values(const Tensor& o) const {
    return shape_ == o.shape_ && *data_ == *o.data_;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Tensor& t) {
  os << t.shape().str() << '{';
  for (std::size_t i = 0; i < t.numel() && i < 8; ++i) {
    if (i) os << ',';
    os << t.at(i);
  }
  if (t.numel() > 8) os << ",...";
  return os << '}';
}

/// In-place p += scale * g. Shapes must match.
inline void axpy(Tensor& p, const Tensor& g, double scale) {
  if (p.shape() != g.shape()) {
    throw TensorError("axpy shape mismatch: " + p.shape().str() + " vs " +
                      g.shape().str());
  }
  double* pd = p.mutable_data();
  const double* gd = g.data();
  for (std::size_t i = 0; i < p.numel(); ++i) pd[i] += scale * gd[i];
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("max_abs_diff shape mismatch: " + a.shape().str() +
                      " vs " + b.shape().str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  }
  return m;
}

/// max_i |a_i - b_i| / max(1e-12, |a_i|, |b_i|)
inline double max_rel_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("max_rel_diff shape mismatch: " + a.shape().str() +
                      " vs " + b.shape().str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({1e-12, std::abs(a.at(i)), std::abs(b.at(i))});
    m = std::max(m, std::abs(a.at(i) - b.at(i)) / denom);
  }
  return m;
}

}  // namespace warpgrad
