#include "polynext/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace polynext {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (int64_t d : shape_) check(d >= 1, "tensor: dimension must be >= 1, got shape " + shape_str(shape_));
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (int64_t d : shape_) check(d >= 1, "tensor: dimension must be >= 1, got shape " + shape_str(shape_));
  check(shape_numel(shape_) == static_cast<int64_t>(data_.size()),
        "tensor: shape " + shape_str(shape_) + " does not match data length " + std::to_string(data_.size()));
}

Tensor::Tensor(Shape shape, double fill) : Tensor(std::move(shape)) {
  std::fill(data_.begin(), data_.end(), fill);
}

Tensor Tensor::from_row(std::initializer_list<double> vals) {
  return Tensor({static_cast<int64_t>(vals.size())}, std::vector<double>(vals));
}

int64_t Tensor::dim(int64_t i) const {
  check(i >= 0 && i < rank(), "tensor: axis " + std::to_string(i) + " out of range for shape " + shape_str(shape_));
  return shape_[static_cast<size_t>(i)];
}

int64_t Tensor::flat_index(std::initializer_list<int64_t> idx) const {
  check(static_cast<int64_t>(idx.size()) == rank(), "tensor: index rank mismatch");
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : idx) {
    check(i >= 0 && i < shape_[k], "tensor: index out of bounds");
    flat = flat * shape_[k] + i;
    ++k;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<int64_t> idx) { return data_[static_cast<size_t>(flat_index(idx))]; }
double Tensor::at(std::initializer_list<int64_t> idx) const { return data_[static_cast<size_t>(flat_index(idx))]; }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  check(shape_numel(new_shape) == numel(),
        "reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape) + " changes element count");
  return Tensor(std::move(new_shape), data_);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  check(same_shape(other), "tensor +=: shape mismatch " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "tensor +: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a;
  out += b;
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "tensor -: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "tensor *: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  out *= s;
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor) {
  check(a.same_shape(b), "max_rel_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    m = std::max(m, std::abs(a[i] - b[i]) / denom);
  }
  return m;
}

}  // namespace polynext
