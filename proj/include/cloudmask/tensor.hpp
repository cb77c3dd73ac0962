#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cloudmask/errors.hpp"
#include "cloudmask/parallel.hpp"

namespace cloudmask {

/// (batch, channel, height, width) extents of a Tensor4.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t count() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;
};

inline std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " +
         std::to_string(s.h) + ", " + std::to_string(s.w) + ")";
}

/// Dense 4-D array of doubles in n-major, then c, h, w order. The flat index
/// of element (n, c, y, x) is ((n*C + c)*H + y)*W + x. Every activation,
/// gradient and parameter in the library is one of these.
class Tensor4 {
 public:
  /// Empty sentinel (used for absent parameters/caches).
  Tensor4() = default;

  Tensor4(Shape4 shape, double fill = 0.0)
      : shape_(checked(shape)),
        data_(static_cast<std::size_t>(shape.count()), fill) {}

  Tensor4(Shape4 shape, std::vector<double> values)
      : shape_(checked(shape)), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.count()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_) + " (" +
                       std::to_string(shape_.count()) + " elements)");
    }
  }

  const Shape4& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  std::int64_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::int64_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w + x;
  }

  double& operator()(int n, int c, int y, int x) {
    return data_[static_cast<std::size_t>(index(n, c, y, x))];
  }
  double operator()(int n, int c, int y, int x) const {
    return data_[static_cast<std::size_t>(index(n, c, y, x))];
  }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Same data, new extents; element count must not change.
  Tensor4 reshaped(Shape4 s) const {
    if (s.count() != shape_.count()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                       to_string(s));
    }
    Tensor4 out;
    out.shape_ = checked(s);
    out.data_ = data_;
    return out;
  }

 private:
  static Shape4 checked(Shape4 s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw ShapeError("tensor dimensions must all be >= 1, got " +
                       to_string(s));
    }
    return s;
  }

  Shape4 shape_;
  std::vector<double> data_;
};

inline Tensor4 zeros_like(const Tensor4& t) { return Tensor4(t.shape(), 0.0); }

namespace detail {
inline void require_same_shape(const Tensor4& a, const Tensor4& b,
                               const char* op) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}
}  // namespace detail

inline Tensor4 add(const Tensor4& a, const Tensor4& b) {
  detail::require_same_shape(a, b, "add");
  Tensor4 out = a;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor4 sub(const Tensor4& a, const Tensor4& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor4 out = a;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

/// Hadamard product.
inline Tensor4 mul(const Tensor4& a, const Tensor4& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor4 out = a;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline Tensor4 scale(const Tensor4& a, double s) {
  Tensor4 out = a;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  return out;
}

template <typename Fn>
Tensor4 map(const Tensor4& a, Fn&& fn) {
  Tensor4 out = a;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = fn(out[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Matrix kernels. These carry every convolution and dense layer, so the
// inner loops are register-tiled; everything stays plain row-major doubles.
// ---------------------------------------------------------------------------

namespace detail {

/// C(m x n) = A(m x k) * B(k x n), row-major. acc adds into C instead of
/// overwriting. 4x16 register tile.
inline void gemm_nn(const double* A, const double* B, double* C,
                    std::int64_t m, std::int64_t k, std::int64_t n,
                    bool acc = false) {
  if (!acc) std::memset(C, 0, sizeof(double) * static_cast<std::size_t>(m * n));
  constexpr std::int64_t MR = 4, NR = 16;
  std::int64_t i = 0;
  for (; i + MR <= m; i += MR) {
    std::int64_t j = 0;
    for (; j + NR <= n; j += NR) {
      double t[MR][NR];
      for (std::int64_t ii = 0; ii < MR; ++ii)
        for (std::int64_t jj = 0; jj < NR; ++jj)
          t[ii][jj] = C[(i + ii) * n + j + jj];
      const double* b = B + j;
      for (std::int64_t kk = 0; kk < k; ++kk, b += n) {
        for (std::int64_t ii = 0; ii < MR; ++ii) {
          const double a = A[(i + ii) * k + kk];
          for (std::int64_t jj = 0; jj < NR; ++jj) t[ii][jj] += a * b[jj];
        }
      }
      for (std::int64_t ii = 0; ii < MR; ++ii)
        for (std::int64_t jj = 0; jj < NR; ++jj)
          C[(i + ii) * n + j + jj] = t[ii][jj];
    }
    for (; j < n; ++j) {
      for (std::int64_t ii = 0; ii < MR; ++ii) {
        double s = C[(i + ii) * n + j];
        for (std::int64_t kk = 0; kk < k; ++kk)
          s += A[(i + ii) * k + kk] * B[kk * n + j];
        C[(i + ii) * n + j] = s;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = C + i * n;
    const double* ai = A + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double a = ai[kk];
      const double* bk = B + kk * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += a * bk[j];
    }
  }
}

/// C(m x n) = A(m x k) * B(n x k)^T: rows of A dotted with rows of B.
inline void gemm_abt(const double* A, const double* B, double* C,
                     std::int64_t m, std::int64_t k, std::int64_t n,
                     bool acc = false) {
  constexpr std::int64_t MR = 4, NR = 4;
  std::int64_t i = 0;
  for (; i + MR <= m; i += MR) {
    std::int64_t j = 0;
    for (; j + NR <= n; j += NR) {
      double t[MR][NR] = {};
      for (std::int64_t kk = 0; kk < k; ++kk) {
        for (std::int64_t ii = 0; ii < MR; ++ii) {
          const double a = A[(i + ii) * k + kk];
          for (std::int64_t jj = 0; jj < NR; ++jj)
            t[ii][jj] += a * B[(j + jj) * k + kk];
        }
      }
      for (std::int64_t ii = 0; ii < MR; ++ii)
        for (std::int64_t jj = 0; jj < NR; ++jj) {
          double& c = C[(i + ii) * n + j + jj];
          c = (acc ? c : 0.0) + t[ii][jj];
        }
    }
    for (; j < n; ++j) {
      for (std::int64_t ii = 0; ii < MR; ++ii) {
        double s = 0.0;
        for (std::int64_t kk = 0; kk < k; ++kk)
          s += A[(i + ii) * k + kk] * B[j * k + kk];
        double& c = C[(i + ii) * n + j];
        c = (acc ? c : 0.0) + s;
      }
    }
  }
  for (; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) s += A[i * k + kk] * B[j * k + kk];
      double& c = C[i * n + j];
      c = (acc ? c : 0.0) + s;
    }
  }
}

/// C(m x n) = A(k x m)^T * B(k x n): accumulated as rank-1 row updates so all
/// streams stay contiguous.
inline void gemm_atb(const double* A, const double* B, double* C,
                     std::int64_t k, std::int64_t m, std::int64_t n,
                     bool acc = false) {
  if (!acc) std::memset(C, 0, sizeof(double) * static_cast<std::size_t>(m * n));
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const double* ak = A + kk * m;
    const double* bk = B + kk * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double a = ak[i];
      if (a == 0.0) continue;
      double* ci = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += a * bk[j];
    }
  }
}

}  // namespace detail

/// Row-major 2-D matrix of doubles. Thin: exists for the im2col contract and
/// the tests; the layers call the raw kernels directly.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::int64_t rows, std::int64_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(rows * cols), fill) {
    if (rows < 1 || cols < 1)
      throw ShapeError("matrix dimensions must be >= 1");
  }

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& at(std::int64_t r, std::int64_t c) {
    return data_[static_cast<std::size_t>(r * cols_ + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * cols_ + c)];
  }

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree (" +
                     std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  Matrix c(a.rows(), b.cols());
  detail::gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
  int out_h = 0;
  int out_w = 0;
};

inline ConvGeom conv_geometry(const Shape4& in, int kh, int kw, int pad,
                              int stride) {
  if (kh < 1 || kw < 1 || pad < 0 || stride < 1)
    throw ShapeError("invalid kernel/pad/stride");
  const int eh = in.h + 2 * pad - kh;
  const int ew = in.w + 2 * pad - kw;
  if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0) {
    throw ShapeError("non-integral convolution output for input " +
                     to_string(in) + ", kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + ", pad " + std::to_string(pad) +
                     ", stride " + std::to_string(stride));
  }
  return {eh / stride + 1, ew / stride + 1};
}

/// Unrolls one sample into a (c*kh*kw) x (out_h*out_w) row-major block.
/// Padded positions read 0.
inline void im2col_sample(const Tensor4& x, int sample, int kh, int kw,
                          int pad, int stride, int out_h, int out_w,
                          double* col) {
  const int C = x.shape().c, H = x.shape().h, W = x.shape().w;
  const std::int64_t cols = static_cast<std::int64_t>(out_h) * out_w;
  const double* base =
      x.data() + static_cast<std::int64_t>(sample) * C * H * W;
  std::int64_t r = 0;
  for (int c = 0; c < C; ++c) {
    const double* plane = base + static_cast<std::int64_t>(c) * H * W;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v, ++r) {
        double* out = col + r * cols;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= H) {
            std::memset(out + static_cast<std::int64_t>(oy) * out_w, 0,
                        sizeof(double) * static_cast<std::size_t>(out_w));
            continue;
          }
          const double* row = plane + static_cast<std::int64_t>(iy) * W;
          double* dst = out + static_cast<std::int64_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + v - pad;
            dst[ox] = (ix < 0 || ix >= W) ? 0.0 : row[ix];
          }
        }
      }
    }
  }
}

/// Scatter-add inverse of im2col_sample, into one sample of dx.
inline void col2im_sample(const double* col, int sample, int kh, int kw,
                          int pad, int stride, int out_h, int out_w,
                          Tensor4& dx) {
  const int C = dx.shape().c, H = dx.shape().h, W = dx.shape().w;
  const std::int64_t cols = static_cast<std::int64_t>(out_h) * out_w;
  double* base = dx.data() + static_cast<std::int64_t>(sample) * C * H * W;
  std::int64_t r = 0;
  for (int c = 0; c < C; ++c) {
    double* plane = base + static_cast<std::int64_t>(c) * H * W;
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v, ++r) {
        const double* src = col + r * cols;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= H) continue;
          double* row = plane + static_cast<std::int64_t>(iy) * W;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + v - pad;
            if (ix >= 0 && ix < W) row[ix] += src[static_cast<std::int64_t>(oy) * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Unrolls receptive fields into a matrix with rows c*kh*kw and columns
/// n*out_h*out_w; column j holds the receptive field of output location j
/// (sample-major, then output row, then output column).
inline Matrix im2col(const Tensor4& x, int kh, int kw, int pad, int stride) {
  const auto geom = detail::conv_geometry(x.shape(), kh, kw, pad, stride);
  const int N = x.shape().n, C = x.shape().c;
  const std::int64_t per_sample =
      static_cast<std::int64_t>(geom.out_h) * geom.out_w;
  const std::int64_t rows = static_cast<std::int64_t>(C) * kh * kw;
  Matrix m(rows, per_sample * N);
  std::vector<double> block(static_cast<std::size_t>(rows * per_sample));
  for (int s = 0; s < N; ++s) {
    detail::im2col_sample(x, s, kh, kw, pad, stride, geom.out_h, geom.out_w,
                          block.data());
    for (std::int64_t r = 0; r < rows; ++r) {
      std::memcpy(m.data() + r * m.cols() + static_cast<std::int64_t>(s) * per_sample,
                  block.data() + r * per_sample,
                  sizeof(double) * static_cast<std::size_t>(per_sample));
    }
  }
  return m;
}

}  // namespace cloudmask
