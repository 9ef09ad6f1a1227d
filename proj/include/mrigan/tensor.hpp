#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mrigan {

// Dense row-major tensor of doubles. Value semantics: copies are deep.
// Shapes are small vectors of extents; rank 0..4 is what the code uses.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<long> shape);

  static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<long> shape, double value);
  static Tensor scalar(double value);
  static Tensor from(std::vector<long> shape, std::vector<double> data);

  bool defined() const { return !shape_.empty() || !data_.empty(); }
  long ndim() const { return static_cast<long>(shape_.size()); }
  long dim(long i) const { return shape_.at(static_cast<size_t>(i)); }
  long numel() const { return numel_; }
  const std::vector<long>& shape() const { return shape_; }
  std::string shape_str() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

  double& at(long i) { return data_[static_cast<size_t>(i)]; }
  double& at(long i, long j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at(long i, long j, long k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at(long i, long j, long k, long l) {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  double at(long i) const { return data_[static_cast<size_t>(i)]; }
  double at(long i, long j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(long i, long j, long k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(long i, long j, long k, long l) const {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  // Same data, new extents; element count must match.
  Tensor reshaped(std::vector<long> shape) const;

  void fill(double value);
  bool all_finite() const;
  double abs_max() const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

private:
  std::vector<long> shape_;
  std::vector<double> data_;
  long numel_ = 0;
};

long shape_numel(const std::vector<long>& shape);

} // namespace mrigan
