#include "caat/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <type_traits>

namespace caat {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor needs at least one axis");
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape));
  }
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(what) + ": expected rank-2 tensor, got " + to_string(t.shape()));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 0;
  return shape_.back();
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  return data_.size() / shape_.back();
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::operator==(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(data_[i]) != std::bit_cast<std::uint64_t>(other.data_[i])) {
      return false;
    }
  }
  return true;
}

const char* to_string(PrecisionMode mode) {
  return mode == PrecisionMode::full64 ? "full64" : "emulated16";
}

PrecisionMode parse_precision(const std::string& text) {
  if (text == "full64") return PrecisionMode::full64;
  if (text == "emulated16") return PrecisionMode::emulated16;
  throw std::invalid_argument("unknown precision mode: " + text);
}

double round_to_bf16(double x) {
  if (!std::isfinite(x) || x == 0.0) return x;
  constexpr double kMinNormal = 0x1p-126;
  constexpr double kMinSubnormal = 0x1p-133;
  constexpr double kMax = 0x1.FEp127;
  if (std::fabs(x) < kMinNormal) {
    return std::nearbyint(x / kMinSubnormal) * kMinSubnormal;
  }
  // Keep 7 explicit mantissa bits out of 52: round at bit 45, ties to even.
  auto bits = std::bit_cast<std::uint64_t>(x);
  constexpr std::uint64_t kDrop = 45;
  constexpr std::uint64_t kMask = (std::uint64_t{1} << kDrop) - 1;
  const std::uint64_t lsb = (bits >> kDrop) & 1U;
  bits += (kMask >> 1) + lsb;
  bits &= ~kMask;
  const double r = std::bit_cast<double>(bits);
  if (std::fabs(r) > kMax) return std::copysign(HUGE_VAL, x);
  return r;
}

// ---------------------------------------------------------------------------

namespace {

using Vec8 = double __attribute__((vector_size(64)));

inline Vec8 load8(const double* p) {
  Vec8 v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store8(double* p, Vec8 v) { std::memcpy(p, &v, sizeof(v)); }

// C[R x 8V] block: every element starts at zero and accumulates
// a[r][kk] * b[kk][j] for kk ascending, with separate multiply and add, so it
// matches the naive dot product bit for bit.
template <std::size_t R, std::size_t V>
inline void gemm_block(const double* a, std::size_t lda, std::size_t sa, const double* b,
                       std::size_t ldb, double* c, std::size_t ldc, std::size_t k) {
  Vec8 acc[R][V] = {};
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* brow = b + kk * ldb;
    Vec8 bv[V];
    for (std::size_t v = 0; v < V; ++v) bv[v] = load8(brow + 8 * v);
    for (std::size_t r = 0; r < R; ++r) {
      const Vec8 av = Vec8{} + a[r * lda + kk * sa];
      for (std::size_t v = 0; v < V; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < V; ++v) store8(c + r * ldc + 8 * v, acc[r][v]);
  }
}

void gemm_edge(const double* a, std::size_t lda, std::size_t sa, const double* b, std::size_t ldb,
               double* c, std::size_t ldc, std::size_t rows, std::size_t cols, std::size_t k) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += a[r * lda + kk * sa] * b[kk * ldb + j];
      c[r * ldc + j] = s;
    }
  }
}

// C[m x n] = A B with A element (i, kk) at a[i * lda + kk * sa]; sa != 1
// reads a stored transpose in place.
void gemm(const double* a, std::size_t lda, std::size_t sa, const double* b, double* c,
          std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t R = 8;
  constexpr std::size_t V = 2;
  constexpr std::size_t J = 8 * V;
  const std::size_t n_full = n - n % J;
  std::size_t i = 0;
  auto row_block = [&]<std::size_t Rows>(std::integral_constant<std::size_t, Rows>) {
    for (std::size_t j = 0; j < n_full; j += J) {
      gemm_block<Rows, V>(a + i * lda, lda, sa, b + j, n, c + i * n + j, n, k);
    }
    if (n_full < n) {
      gemm_edge(a + i * lda, lda, sa, b + n_full, n, c + i * n + n_full, n, Rows, n - n_full, k);
    }
    i += Rows;
  };
  while (i + R <= m) row_block(std::integral_constant<std::size_t, R>{});
  while (i < m) row_block(std::integral_constant<std::size_t, 1>{});
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: inner extents differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.extent(0);
  const std::size_t k = a.extent(1);
  const std::size_t n = b.extent(1);
  Tensor c({m, n});
  gemm(a.raw(), k, 1, b.raw(), c.raw(), m, k, n);
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.extent(0);
  const std::size_t n = a.extent(1);
  Tensor t({n, m});
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += B) {
    for (std::size_t j0 = 0; j0 < n; j0 += B) {
      const std::size_t i1 = std::min(m, i0 + B);
      const std::size_t j1 = std::min(n, j0 + B);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) t[j * m + i] = a[i * n + j];
      }
    }
  }
  return t;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.extent(0) != b.extent(0)) {
    throw ShapeError("matmul_tn: inner extents differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.extent(1);
  const std::size_t k = a.extent(0);
  const std::size_t n = b.extent(1);
  Tensor c({m, n});
  gemm(a.raw(), 1, m, b.raw(), c.raw(), m, k, n);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  add_inplace(out, matmul_tn(a, b));
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) pa[i] += pb[i];
}

void scale_inplace(Tensor& a, double s) {
  for (auto& v : a.data()) v *= s;
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.cols()) {
    throw ShapeError("slice_cols: bad range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") of " + to_string(a.shape()));
  }
  Shape shape = a.shape();
  shape.back() = end - begin;
  Tensor out(shape);
  const std::size_t rows = a.rows();
  const std::size_t w = end - begin;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.raw() + r * a.cols() + begin, w, out.raw() + r * w);
  }
  return out;
}

void assign_cols(Tensor& dst, const Tensor& src, std::size_t begin) {
  if (src.rows() != dst.rows() || begin + src.cols() > dst.cols()) {
    throw ShapeError("assign_cols: " + to_string(src.shape()) + " into " + to_string(dst.shape()));
  }
  const std::size_t w = src.cols();
  for (std::size_t r = 0; r < dst.rows(); ++r) {
    std::copy_n(src.raw() + r * w, w, dst.raw() + r * dst.cols() + begin);
  }
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  if (begin >= end || end > a.extent(0)) throw ShapeError("slice_rows: bad range");
  Tensor out({end - begin, a.extent(1)});
  std::copy(a.raw() + begin * a.extent(1), a.raw() + end * a.extent(1), out.raw());
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  std::size_t width = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.extent(0) != parts[0].extent(0)) throw ShapeError("concat_cols: row mismatch");
    width += p.extent(1);
  }
  Tensor out({parts[0].extent(0), width});
  std::size_t at = 0;
  for (const auto& p : parts) {
    assign_cols(out, p, at);
    at += p.extent(1);
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  std::size_t height = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.extent(1) != parts[0].extent(1)) throw ShapeError("concat_rows: column mismatch");
    height += p.extent(0);
  }
  Tensor out({height, parts[0].extent(1)});
  double* dst = out.raw();
  for (const auto& p : parts) dst = std::copy(p.raw(), p.raw() + p.size(), dst);
  return out;
}

// ---------------------------------------------------------------------------

namespace {
constexpr double kInvSqrt2 = 0.5 * std::numbers::sqrt2;
}

Tensor gelu(const Tensor& x) {
  Tensor y = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    y[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& upstream) {
  if (!x.same_shape(upstream)) throw ShapeError("gelu_backward: shape mismatch");
  constexpr double kInvSqrt2Pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  Tensor dx = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    dx[i] = upstream[i] * (cdf + v * pdf);
  }
  return dx;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gamma) {
  const std::size_t h = x.cols();
  if (gamma.size() != h) {
    throw ShapeError("rmsnorm: gamma " + to_string(gamma.shape()) + " vs input " +
                     to_string(x.shape()));
  }
  Tensor y = Tensor::zeros_like(x);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.raw() + r * h;
    double ms = 0.0;
    for (std::size_t c = 0; c < h; ++c) ms += xr[c] * xr[c];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(h) + kRmsNormEps);
    double* yr = y.raw() + r * h;
    for (std::size_t c = 0; c < h; ++c) yr[c] = xr[c] * inv * gamma[c];
  }
  return y;
}

RmsNormGrads rmsnorm_backward(const Tensor& x, const Tensor& gamma, const Tensor& upstream) {
  const std::size_t h = x.cols();
  if (gamma.size() != h || !x.same_shape(upstream)) throw ShapeError("rmsnorm_backward: shape mismatch");
  RmsNormGrads g{Tensor::zeros_like(x), Tensor::zeros_like(gamma)};
  const double hd = static_cast<double>(h);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.raw() + r * h;
    const double* ur = upstream.raw() + r * h;
    double ms = 0.0;
    for (std::size_t c = 0; c < h; ++c) ms += xr[c] * xr[c];
    const double inv = 1.0 / std::sqrt(ms / hd + kRmsNormEps);
    // proj = mean(dxhat * xhat)
    double proj = 0.0;
    for (std::size_t c = 0; c < h; ++c) {
      const double xhat = xr[c] * inv;
      g.dgamma[c] += ur[c] * xhat;
      proj += ur[c] * gamma[c] * xhat;
    }
    proj /= hd;
    double* dxr = g.dx.raw() + r * h;
    for (std::size_t c = 0; c < h; ++c) {
      dxr[c] = inv * (ur[c] * gamma[c] - xr[c] * inv * proj);
    }
  }
  return g;
}

LossAndGrad softmax_ce_loss(const Tensor& logits, std::span<const int> targets) {
  const std::size_t t = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != t) throw ShapeError("softmax_ce_loss: target count mismatch");
  LossAndGrad out{0.0, Tensor::zeros_like(logits)};
  const double inv_t = 1.0 / static_cast<double>(t);
  for (std::size_t r = 0; r < t; ++r) {
    const int target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= v) {
      throw std::out_of_range("softmax_ce_loss: target " + std::to_string(target) +
                              " outside [0, " + std::to_string(v) + ")");
    }
    const double* lr = logits.raw() + r * v;
    double mx = lr[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, lr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(lr[c] - mx);
    const double log_z = std::log(z) + mx;
    out.loss += (log_z - lr[target]) * inv_t;
    double* dr = out.dlogits.raw() + r * v;
    for (std::size_t c = 0; c < v; ++c) dr[c] = std::exp(lr[c] - log_z) * inv_t;
    dr[target] -= inv_t;
  }
  return out;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double step) {
  Tensor grad = Tensor::zeros_like(x);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace caat
