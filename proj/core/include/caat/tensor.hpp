#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace caat {

/// Raised when operand extents do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Every extent is positive and data().size() equals the product of the
/// extents. Most of the simulator works on rank-2 tensors laid out as
/// [tokens x channels].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty(); }

  /// Extent of the last axis.
  std::size_t cols() const;
  /// Product of all extents but the last.
  std::size_t rows() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  Tensor reshaped(Shape shape) const;
  void fill(double v);

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  /// Bitwise comparison of shape and payload.
  bool operator==(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const Shape& shape);

/// Accumulation mode used by the collectives.
///
/// `emulated16` rounds every operand and partial sum to the nearest value
/// representable with 1 sign, 8 exponent and 7 mantissa bits (ties to even).
enum class PrecisionMode { full64, emulated16 };

const char* to_string(PrecisionMode mode);
PrecisionMode parse_precision(const std::string& text);

/// Round to the nearest 16-bit (8-bit exponent, 7-bit mantissa) value,
/// ties to even. Idempotent.
double round_to_bf16(double x);

/// Accumulate `x` into `acc` under the given precision mode.
inline double accumulate(double acc, double x, PrecisionMode mode) {
  if (mode == PrecisionMode::full64) {
    return acc + x;
  }
  return round_to_bf16(acc + round_to_bf16(x));
}

// ---------------------------------------------------------------------------
// Kernels. All accumulations run over the inner index in ascending order, so
// repeated calls are bitwise reproducible.

/// [m x k] * [k x n]. Bitwise equal to the textbook triple loop.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a^T * b for a: [k x m], b: [k x n].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a * b^T for a: [m x k], b: [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// out += a^T * b (weight-gradient accumulation).
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out);

Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& a, const Tensor& b);
void scale_inplace(Tensor& a, double s);
double sum(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Copies columns [begin, end) of a rank-2 tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// Writes `src` into columns starting at `begin`.
void assign_cols(Tensor& dst, const Tensor& src, std::size_t begin);
/// Copies rows [begin, end).
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);

// Exact erf GeLU.
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& upstream);

inline constexpr double kRmsNormEps = 1e-6;

Tensor rmsnorm(const Tensor& x, const Tensor& gamma);

struct RmsNormGrads {
  Tensor dx;
  Tensor dgamma;
};
RmsNormGrads rmsnorm_backward(const Tensor& x, const Tensor& gamma, const Tensor& upstream);

struct LossAndGrad {
  double loss = 0.0;
  Tensor dlogits;
};
/// Mean cross-entropy over the rows of `logits` against integer targets.
LossAndGrad softmax_ce_loss(const Tensor& logits, std::span<const int> targets);

/// Central-difference gradient of a scalar function.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double step);

bool all_finite(const Tensor& t);

}  // namespace caat
