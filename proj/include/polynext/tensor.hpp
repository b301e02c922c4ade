#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace polynext {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

[[noreturn]] void fail(const std::string& msg);
void check(bool cond, const std::string& msg);

/// Dense n-dimensional array of f64 values, row-major (last axis fastest).
/// Tensors are plain values: copyable, immutable once shared across threads.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);
  Tensor(Shape shape, double fill);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor from_row(std::initializer_list<double> vals);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(std::initializer_list<int64_t> idx);
  double at(std::initializer_list<int64_t> idx) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  double max_abs() const;

  /// Same data, new shape; element count must match.
  Tensor reshaped(Shape new_shape) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

 private:
  int64_t flat_index(std::initializer_list<int64_t> idx) const;

  Shape shape_;
  std::vector<double> data_;
};

int64_t shape_numel(const Shape& s);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);  // elementwise
Tensor operator*(double s, const Tensor& a);

double max_abs_diff(const Tensor& a, const Tensor& b);
/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-8);

}  // namespace polynext
