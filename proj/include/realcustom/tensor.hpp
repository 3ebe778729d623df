#pragma once

// Dense row-major tensors (rank 1..4) and the handful of kernels the rest of
// the engine is written against. Reductions accumulate in double and round
// once on store, which keeps toy-sized results stable across compilers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "realcustom/error.hpp"

namespace realcustom {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_volume(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }

  /// Rank-2 tensor from nested rows, e.g. `matrix({{1, 2}, {3, 4}})`.
  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(data));
  }

  std::size_t rank() const { return shape_.size(); }
  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::span<T> row(std::size_t i) {
    const std::size_t c = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(i * c, c);
  }
  std::span<const T> row(std::size_t i) const {
    const std::size_t c = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(i * c, c);
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_volume(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 4) {
      throw ShapeError("tensor rank must be 1..4, got " + shape_string(shape));
    }
    for (auto e : shape) {
      if (e == 0) throw ShapeError("zero extent in shape " + shape_string(shape));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

// ---------------------------------------------------------------------------
// Checks

template <typename T>
bool all_finite(const BasicTensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
void ensure_finite(const BasicTensor<T>& x, const std::string& what) {
  if (!all_finite(x)) throw NumericError("non-finite values in " + what);
}

template <typename T>
void require_rank2(const BasicTensor<T>& x, const char* what) {
  if (x.rank() != 2) {
    throw ShapeError(std::string(what) + " expects a matrix, got " +
                     shape_string(x.shape()));
  }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

/// Dot product with four interleaved double partial sums.
template <typename T>
double dot4(const T* x, const T* y, std::size_t k) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    s0 += static_cast<double>(x[p]) * static_cast<double>(y[p]);
    s1 += static_cast<double>(x[p + 1]) * static_cast<double>(y[p + 1]);
    s2 += static_cast<double>(x[p + 2]) * static_cast<double>(y[p + 2]);
    s3 += static_cast<double>(x[p + 3]) * static_cast<double>(y[p + 3]);
  }
  for (; p < k; ++p) s0 += static_cast<double>(x[p]) * static_cast<double>(y[p]);
  return (s0 + s1) + (s2 + s3);
}

/// c[m x n] = a[m x k] · b[k x n], raw row-major buffers, double
/// accumulators. Wide outputs stream rows of b into four accumulator rows;
/// narrow outputs use dot products against a transposed copy of b.
template <typename T>
void gemm_rowmajor(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (n < 32) {
    std::vector<T> bt(k * n);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        c[i * n + j] = static_cast<T>(dot4(a + i * k, bt.data() + j * k, k));
    return;
  }
  constexpr std::size_t kBlock = 4;
  std::vector<double> acc(kBlock * n);
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    const std::size_t ib = std::min(kBlock, m - i0);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      for (std::size_t r = 0; r < ib; ++r) {
        const double av = a[(i0 + r) * k + p];
        if (av == 0.0) continue;
        double* out = acc.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += av * static_cast<double>(brow[j]);
      }
    }
    for (std::size_t r = 0; r < ib; ++r)
      for (std::size_t j = 0; j < n; ++j) c[(i0 + r) * n + j] = static_cast<T>(acc[r * n + j]);
  }
}

}  // namespace detail

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

/// c = a · b with double accumulation.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(a.shape()) +
                     " x " + shape_string(b.shape()));
  }
  BasicTensor<T> c({m, n});
  detail::gemm_rowmajor(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  return c;
}

/// c = a · bᵀ.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (b.dim(1) != a.dim(1)) {
    throw ShapeError("matmul_nt: inner extents differ, " +
                     shape_string(a.shape()) + " x " + shape_string(b.shape()) +
                     "^T");
  }
  return matmul(a, transpose(b));
}

/// c = aᵀ · b.
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  if (b.dim(0) != a.dim(0)) {
    throw ShapeError("matmul_tn: inner extents differ, " +
                     shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  }
  return matmul(transpose(a), b);
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_rank2(a, "transpose");
  BasicTensor<T> t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

/// Row-wise softmax of `scale * x` with max subtraction.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, double scale = 1.0) {
  require_rank2(x, "softmax_rows");
  BasicTensor<T> y(x.shape());
  const std::size_t n = x.dim(1);
  std::vector<double> e(n);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    const auto r = x.row(i);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, scale * static_cast<double>(r[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(scale * static_cast<double>(r[j]) - mx);
      s += e[j];
    }
    auto out = y.row(i);
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<T>(e[j] / s);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  BasicTensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  BasicTensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

template <typename T>
BasicTensor<T> hadamard(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "hadamard");
  BasicTensor<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

template <typename T>
BasicTensor<T> scaled(const BasicTensor<T>& a, double s) {
  BasicTensor<T> c = a;
  for (auto& v : c.data()) v = static_cast<T>(static_cast<double>(v) * s);
  return c;
}

template <typename T>
void add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
double sum(const BasicTensor<T>& a) {
  double s = 0.0;
  for (auto v : a.data()) s += v;
  return s;
}

template <typename T>
double sum_squares(const BasicTensor<T>& a) {
  double s = 0.0;
  for (auto v : a.data()) s += static_cast<double>(v) * v;
  return s;
}

template <typename T>
double max_value(const BasicTensor<T>& a) {
  double m = -INFINITY;
  for (auto v : a.data()) m = std::max(m, static_cast<double>(v));
  return m;
}

template <typename T>
double min_value(const BasicTensor<T>& a) {
  double m = INFINITY;
  for (auto v : a.data()) m = std::min(m, static_cast<double>(v));
  return m;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// ‖a − b‖ / max(‖b‖, floor).
template <typename T>
double relative_error(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      double floor = 1e-30) {
  require_same_shape(a, b, "relative_error");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    num += d * d;
    den += static_cast<double>(b[i]) * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

// ---------------------------------------------------------------------------
// Row (token) and column (channel) slicing

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t c = parts.front().dim(1);
  std::size_t r = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != c) {
      throw ShapeError("concat_rows: column mismatch " +
                       shape_string(parts.front().shape()) + " vs " +
                       shape_string(p.shape()));
    }
    r += p.dim(0);
  }
  std::vector<T> data;
  data.reserve(r * c);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return BasicTensor<T>({r, c}, std::move(data));
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_rows");
  if (begin + count > x.dim(0) || count == 0) {
    throw ShapeError("slice_rows out of range on " + shape_string(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<T> data(x.data().begin() + begin * c, x.data().begin() + (begin + count) * c);
  return BasicTensor<T>({count, c}, std::move(data));
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_cols");
  BasicTensor<T> y({x.dim(0), count});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < count; ++j) y.at(i, j) = x.at(i, begin + j);
  return y;
}

template <typename T>
void set_cols(BasicTensor<T>& x, std::size_t begin, const BasicTensor<T>& block) {
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < block.dim(1); ++j) x.at(i, begin + j) = block.at(i, j);
}

// ---------------------------------------------------------------------------
// Resampling

enum class ResizeMode { kNearest, kBilinear };

/// Resize a rank-2 map with half-pixel (align-corners = false) sampling.
/// Nearest picks floor(dst * in / out); bilinear clamps source coordinates
/// to the valid range so the output stays inside [min(x), max(x)].
template <typename T>
BasicTensor<T> resize_2d(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w,
                         ResizeMode mode) {
  require_rank2(x, "resize_2d");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_2d: zero target extent");
  const std::size_t in_h = x.dim(0), in_w = x.dim(1);
  if (in_h == out_h && in_w == out_w) return x;
  BasicTensor<T> y({out_h, out_w});
  if (mode == ResizeMode::kNearest) {
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t si = std::min(in_h - 1, i * in_h / out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t sj = std::min(in_w - 1, j * in_w / out_w);
        y.at(i, j) = x.at(si, sj);
      }
    }
    return y;
  }
  auto source = [](std::size_t dst, std::size_t in, std::size_t out, std::size_t& i0,
                   std::size_t& i1, double& frac) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                   static_cast<double>(out) -
               0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    frac = s - static_cast<double>(i0);
  };
  for (std::size_t i = 0; i < out_h; ++i) {
    std::size_t y0, y1;
    double fy;
    source(i, in_h, out_h, y0, y1, fy);
    for (std::size_t j = 0; j < out_w; ++j) {
      std::size_t x0, x1;
      double fx;
      source(j, in_w, out_w, x0, x1, fx);
      const double top = (1.0 - fx) * x.at(y0, x0) + fx * x.at(y0, x1);
      const double bot = (1.0 - fx) * x.at(y1, x0) + fx * x.at(y1, x1);
      y.at(i, j) = static_cast<T>((1.0 - fy) * top + fy * bot);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gradient oracle

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
template <typename T, typename F>
BasicTensor<T> finite_diff_grad(F&& f, const BasicTensor<T>& x, double h) {
  if (!(h > 0.0)) throw SemanticError("finite_diff_grad: step must be positive");
  BasicTensor<T> g(x.shape());
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    const T hi = static_cast<T>(orig + h);
    const T lo = static_cast<T>(orig - h);
    probe[i] = hi;
    const double fp = f(probe);
    probe[i] = lo;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value at element " +
                         std::to_string(i));
    }
    // Divide by the representable step, not the requested one.
    g[i] = static_cast<T>((fp - fm) / (static_cast<double>(hi) - static_cast<double>(lo)));
  }
  return g;
}

}  // namespace realcustom
