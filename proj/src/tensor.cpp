#include "gklsbi/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace gklsbi {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string());
  }
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::column(std::span<const double> values) {
  return Tensor(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(rows_) + ", " + std::to_string(cols_) + "]";
}

double Tensor::item() const {
  if (rows_ != 1 || cols_ != 1) {
    throw ShapeError("item() on non-scalar tensor of shape " + shape_string());
  }
  return data_[0];
}

std::vector<double> Tensor::row_vector(std::size_t r) const {
  auto s = row_span(r);
  return {s.begin(), s.end()};
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::rows_slice(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) {
    throw ShapeError("row slice out of range for shape " + shape_string());
  }
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_);
  return Tensor(count, cols_,
                std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * cols_)));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> index) const {
  Tensor out(index.size(), cols_);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows_) throw ShapeError("gather_rows index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(index[i] * cols_), cols_,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
  }
  return out;
}

Tensor Tensor::repeat_row(std::size_t count) const {
  if (rows_ != 1) throw ShapeError("repeat_row expects a single row, got " + shape_string());
  Tensor out(count, cols_);
  for (std::size_t r = 0; r < count; ++r) {
    std::copy(data_.begin(), data_.end(), out.row_span(r).begin());
  }
  return out;
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  if (top.empty()) return bottom;
  if (bottom.empty()) return top;
  if (top.cols() != bottom.cols()) throw ShapeError("concat_rows column mismatch");
  std::vector<double> data(top.data().begin(), top.data().end());
  data.insert(data.end(), bottom.data().begin(), bottom.data().end());
  return Tensor(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

Tensor concat_cols(const Tensor& left, const Tensor& right) {
  if (left.rows() != right.rows()) throw ShapeError("concat_cols row mismatch");
  Tensor out(left.rows(), left.cols() + right.cols());
  for (std::size_t r = 0; r < left.rows(); ++r) {
    auto dst = out.row_span(r);
    std::copy(left.row_span(r).begin(), left.row_span(r).end(), dst.begin());
    std::copy(right.row_span(r).begin(), right.row_span(r).end(),
              dst.begin() + static_cast<std::ptrdiff_t>(left.cols()));
  }
  return out;
}

}  // namespace gklsbi
