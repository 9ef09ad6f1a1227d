#include "mrigan/tensor.hpp"

#include <sstream>

namespace mrigan {

long shape_numel(const std::vector<long>& shape) {
  long n = 1;
  for (long d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor extent");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
  numel_ = shape_numel(shape_);
  data_.assign(static_cast<size_t>(numel_), 0.0);
}

Tensor Tensor::full(std::vector<long> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t(std::vector<long>{1});
  t[0] = value;
  return t;
}

Tensor Tensor::from(std::vector<long> shape, std::vector<double> data) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = shape_numel(t.shape_);
  if (static_cast<long>(data.size()) != t.numel_)
    throw std::invalid_argument("Tensor::from: data size does not match shape");
  t.data_ = std::move(data);
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << "]";
  return os.str();
}

Tensor Tensor::reshaped(std::vector<long> shape) const {
  if (shape_numel(shape) != numel_)
    throw std::invalid_argument("reshape changes element count: " + shape_str());
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = numel_;
  t.data_ = data_;
  return t;
}

void Tensor::fill(double value) {
  for (auto& v : data_) v = value;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::abs_max() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.numel_ != numel_) throw std::invalid_argument("+=: size mismatch");
  for (long i = 0; i < numel_; ++i) data_[static_cast<size_t>(i)] += other.data_[static_cast<size_t>(i)];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

} // namespace mrigan
