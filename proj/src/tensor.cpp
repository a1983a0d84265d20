#include "dale/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "dale/error.hpp"

namespace dale {

std::size_t shape_size(const Shape &shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape &shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size())
    throw Error(Errc::ShapeMismatch, "shape " + shape_string(shape_) +
                                         " does not hold " +
                                         std::to_string(data_.size()) +
                                         " values");
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i)
    t.at(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw Error(Errc::ShapeMismatch,
                "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) noexcept {
  std::fill(data_.begin(), data_.end(), value);
}

namespace {
void require_rank2(const Tensor &t, const char *where) {
  if (t.rank() != 2)
    throw Error(Errc::ShapeMismatch, std::string(where) +
                                         ": expected a matrix, got " +
                                         shape_string(t.shape()));
}
void require_same(const Tensor &a, const Tensor &b, const char *where) {
  if (a.shape() != b.shape())
    throw Error(Errc::ShapeMismatch, std::string(where) + ": " +
                                         shape_string(a.shape()) + " vs " +
                                         shape_string(b.shape()));
}
} // namespace

Tensor matmul(const Tensor &a, const Tensor &b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k)
    throw Error(Errc::ShapeMismatch, "matmul: inner dimensions " +
                                         shape_string(a.shape()) + " x " +
                                         shape_string(b.shape()));
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      if (av == 0.0)
        continue;
      for (std::size_t j = 0; j < m; ++j)
        out.at(i, j) += av * b.at(p, j);
    }
  return out;
}

Tensor transpose(const Tensor &a) {
  require_rank2(a, "transpose");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j)
      out.at(j, i) = a.at(i, j);
  return out;
}

Tensor operator+(const Tensor &a, const Tensor &b) {
  require_same(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor &a, const Tensor &b) {
  require_same(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] -= b[i];
  return out;
}

Tensor operator*(double s, const Tensor &a) {
  Tensor out = a;
  for (auto &v : out.data())
    v *= s;
  return out;
}

double frobenius_norm(const Tensor &a) {
  double s = 0.0;
  for (double v : a.data())
    s += v * v;
  return std::sqrt(s);
}

double trace(const Tensor &a) {
  require_rank2(a, "trace");
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.dim(0), a.dim(1)); ++i)
    s += a.at(i, i);
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error(Errc::ShapeMismatch, "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += a[i] * b[i];
  return s;
}

double max_abs_diff(const Tensor &a, const Tensor &b) {
  require_same(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void require_finite(const Tensor &t, const char *where) {
  if (!t.all_finite())
    throw Error(Errc::NonFinite, std::string(where) + " produced NaN/Inf");
}

} // namespace dale
