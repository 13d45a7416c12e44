#include "iert/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "iert/error.hpp"

namespace iert {

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  require(shape_size(shape_) == values_.size(), ErrorKind::kShape,
          "tensor: shape " + shape_string(shape_) + " does not hold " +
              std::to_string(values_.size()) + " values");
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.size() < 2) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return values_.size();
  if (shape_.size() == 1) return shape_[0];
  return values_.size() / std::max<std::size_t>(shape_[0], 1);
}

double Tensor::item() const {
  require(values_.size() == 1, ErrorKind::kShape,
          "item: expected a single value, shape is " + shape_string(shape_));
  return values_[0];
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Tensor softmax(const Tensor& logits, std::size_t axis) {
  const std::size_t rows = logits.rows();
  const std::size_t cols = logits.cols();
  const bool along_rows = logits.shape().size() < 2 ? true : axis == 1;
  require(axis < std::max<std::size_t>(logits.shape().size(), 1), ErrorKind::kShape,
          "softmax: axis " + std::to_string(axis) + " out of range for shape " +
              shape_string(logits.shape()));
  Tensor out(logits.shape());
  const std::size_t groups = along_rows ? rows : cols;
  const std::size_t length = along_rows ? cols : rows;
  const std::size_t stride = along_rows ? 1 : cols;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = along_rows ? g * cols : g;
    double max_value = -INFINITY;
    for (std::size_t i = 0; i < length; ++i) max_value = std::max(max_value, logits[base + i * stride]);
    double total = 0.0;
    for (std::size_t i = 0; i < length; ++i) {
      const double e = std::exp(logits[base + i * stride] - max_value);
      out[base + i * stride] = e;
      total += e;
    }
    for (std::size_t i = 0; i < length; ++i) out[base + i * stride] /= total;
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::kShape,
          "max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

}  // namespace iert
