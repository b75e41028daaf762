#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "igpk/errors.hpp"
#include "igpk/rng.hpp"

namespace igpk {

// Dense row-major tensor of 64-bit floats. All computation happens in double;
// 32-bit storage only exists inside checkpoint files.
//
// Every public operation that returns a tensor leaves it fully finite or
// throws; reductions use a fixed left-to-right summation order so results are
// bit-identical across runs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  // 2-D literal, mainly for tests and small fixtures.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  static Tensor random_normal(std::vector<std::size_t> shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = stddev * rng.next_normal();
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) {
      throw ShapeError("dimension index " + std::to_string(i) + " out of range for shape " +
                       shape_string(shape_));
    }
    return shape_[i];
  }

  bool is_matrix() const { return shape_.size() == 2; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  static std::string shape_string(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) os << "x";
      os << s[i];
    }
    os << ")";
    return os.str();
  }

  std::string shape_string() const { return shape_string(shape_); }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace detail {
inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}
inline void require_matrix(const Tensor& t, const char* op) {
  if (!t.is_matrix()) {
    throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + t.shape_string());
  }
}
}  // namespace detail

// C[m,n] = A[m,k] * B[k,n]. Per output element the k-sum runs left to right.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions disagree: " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  detail::require_finite(c, "matmul");
  return c;
}

// C[m,n] = A[m,k] * B[n,k]^T. Contiguous dot products; same k-ascending order.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt inner dimensions disagree: " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = pb + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      pc[i * n + j] = s;
    }
  }
  detail::require_finite(c, "matmul_nt");
  return c;
}

// C[k,n] = A[m,k]^T * B[m,n]. The m-sum runs in ascending order.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn inner dimensions disagree: " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({k, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t t = 0; t < m; ++t) {
    const double* arow = pa + t * k;
    const double* brow = pb + t * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double ai = arow[i];
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += ai * brow[j];
    }
  }
  detail::require_finite(c, "matmul_tn");
  return c;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.at2(j, i) = a.at2(i, j);
  return t;
}

inline Tensor hadamard_square(const Tensor& a) {
  Tensor out = a;
  for (double& v : out.values()) v = v * v;
  detail::require_finite(out, "hadamard_square");
  return out;
}

// a + s * b, elementwise.
inline Tensor scaled_add(const Tensor& a, const Tensor& b, double s) {
  if (!a.same_shape(b)) {
    throw ShapeError("scaled_add shape mismatch: " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  Tensor out = a;
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] += s * pb[i];
  detail::require_finite(out, "scaled_add");
  return out;
}

// In-place accumulator form; identical arithmetic to scaled_add.
inline void scaled_add_inplace(Tensor& a, const Tensor& b, double s) {
  if (!a.same_shape(b)) {
    throw ShapeError("scaled_add shape mismatch: " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  const double* pb = b.data();
  double* pa = a.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) pa[i] += s * pb[i];
  detail::require_finite(a, "scaled_add");
}

// Sum of all entries in flat index order.
inline double total_sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  if (!std::isfinite(s)) throw NumericError("total_sum produced a non-finite value");
  return s;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.values()) v *= s;
  detail::require_finite(out, "scale");
  return out;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t ua, ub;
    static_assert(sizeof(double) == sizeof(std::uint64_t));
    std::memcpy(&ua, &a.data()[i], sizeof ua);
    std::memcpy(&ub, &b.data()[i], sizeof ub);
    if (ua != ub) return false;
  }
  return true;
}

}  // namespace igpk
