#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dale {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape &shape) noexcept;
std::string shape_string(const Shape &shape);

/// Dense row-major double tensor. The element count always equals the
/// product of the shape.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);

  const Shape &shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double> &values() const noexcept { return data_; }

  double &operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double &at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  double &at(std::size_t k, std::size_t r, std::size_t c) {
    return data_[(k * shape_[1] + r) * shape_[2] + c];
  }
  double at(std::size_t k, std::size_t r, std::size_t c) const {
    return data_[(k * shape_[1] + r) * shape_[2] + c];
  }

  /// Value of a one-element tensor.
  double item() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  void fill(double value) noexcept;

  bool operator==(const Tensor &other) const = default;

private:
  Shape shape_;
  std::vector<double> data_;
};

// Plain (non-recorded) helpers used by the linear algebra and statistics code.
Tensor matmul(const Tensor &a, const Tensor &b);
Tensor transpose(const Tensor &a);
Tensor operator+(const Tensor &a, const Tensor &b);
Tensor operator-(const Tensor &a, const Tensor &b);
Tensor operator*(double s, const Tensor &a);
double frobenius_norm(const Tensor &a);
double trace(const Tensor &a);
double dot(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Tensor &a, const Tensor &b);

/// Throws Errc::NonFinite naming `where` if any entry is NaN or infinite.
void require_finite(const Tensor &t, const char *where);

/// Row-major 2-D grid for label maps, masks and per-pixel weights.
template <typename T> struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{})
      : height(h), width(w), data(h * w, fill) {}

  T &operator()(std::size_t y, std::size_t x) { return data[y * width + x]; }
  const T &operator()(std::size_t y, std::size_t x) const {
    return data[y * width + x];
  }
  std::size_t size() const noexcept { return data.size(); }
  bool same_shape(std::size_t h, std::size_t w) const noexcept {
    return height == h && width == w;
  }
  template <typename U> bool same_shape(const Grid<U> &o) const noexcept {
    return height == o.height && width == o.width;
  }
  bool operator==(const Grid &) const = default;
};

using LabelMap = Grid<std::uint8_t>;
using Mask = Grid<std::uint8_t>;
using WeightMap = Grid<double>;

} // namespace dale
