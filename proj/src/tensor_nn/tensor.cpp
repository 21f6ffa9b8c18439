#include "gilab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gilab {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(numel(shape_), fill) {
  if (!std::isfinite(fill)) throw NumericError("tensor fill value is not finite");
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool allow_nonfinite)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " elements");
  }
  if (!allow_nonfinite && !all_finite()) {
    throw NumericError("tensor data contains non-finite values");
  }
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::slice(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw ShapeError("bad slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") of " + to_string(shape_));
  }
  const std::size_t stride = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  Tensor out;
  out.shape_ = std::move(s);
  out.data_.assign(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                   data_.begin() + static_cast<std::ptrdiff_t>(end * stride));
  return out;
}

Tensor Tensor::row(std::size_t i) const {
  Tensor out = slice(i, i + 1);
  out.shape_.erase(out.shape_.begin());
  if (out.shape_.empty()) out.shape_ = {1};
  return out;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape s = items[0].shape();
  std::vector<double> data;
  data.reserve(items.size() * items[0].size());
  for (const auto& t : items) {
    if (t.shape() != items[0].shape()) {
      throw ShapeError("stack: shape " + to_string(t.shape()) + " differs from " +
                       to_string(items[0].shape()));
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  s.insert(s.begin(), items.size());
  return Tensor(std::move(s), std::move(data), true);
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  if (t.rank() == 0) throw ShapeError("gather_rows on scalar");
  const std::size_t stride = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = rows.size();
  std::vector<double> data;
  data.reserve(rows.size() * stride);
  for (auto r : rows) {
    if (r >= t.dim(0)) throw ShapeError("gather_rows: row index out of range");
    auto first = t.data().begin() + static_cast<std::ptrdiff_t>(r * stride);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor(std::move(s), std::move(data), true);
}

Tensor clamp(const Tensor& t, double lo, double hi) {
  Tensor out = t;
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  return out;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace gilab
