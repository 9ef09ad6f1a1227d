#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrigan/tensor.hpp"

namespace mrigan::kspace {

// H x W complex image-domain array. Minimum extent 8 per side.
class ComplexImage {
public:
  ComplexImage(long height, long width);
  static ComplexImage from_real(const Tensor& hw);

  long height() const { return h_; }
  long width() const { return w_; }
  std::complex<double>& at(long i, long j) { return data_[static_cast<size_t>(i * w_ + j)]; }
  const std::complex<double>& at(long i, long j) const {
    return data_[static_cast<size_t>(i * w_ + j)];
  }
  std::complex<double>* data() { return data_.data(); }
  const std::complex<double>* data() const { return data_.data(); }
  long numel() const { return h_ * w_; }

  Tensor magnitude() const; // H x W
  Tensor real() const;
  double energy() const;    // sum |.|^2
  bool all_finite() const;

private:
  long h_, w_;
  std::vector<std::complex<double>> data_;
};

// Same storage as ComplexImage; the tag records that values live in spatial
// frequency under the orthonormal transform convention.
class KSpaceGrid {
public:
  KSpaceGrid(long height, long width);
  static constexpr const char* scaling = "orthonormal";

  long height() const { return h_; }
  long width() const { return w_; }
  std::complex<double>& at(long i, long j) { return data_[static_cast<size_t>(i * w_ + j)]; }
  const std::complex<double>& at(long i, long j) const {
    return data_[static_cast<size_t>(i * w_ + j)];
  }
  std::complex<double>* data() { return data_.data(); }
  const std::complex<double>* data() const { return data_.data(); }
  long numel() const { return h_ * w_; }
  double energy() const;
  bool all_finite() const;

private:
  long h_, w_;
  std::vector<std::complex<double>> data_;
};

// Per-column Cartesian sampling pattern (phase-encode undersampling).
struct UndersamplingMask {
  std::vector<uint8_t> columns; // 0/1 per column
  double rate = 0.0;
  double center_fraction = 0.0;
  uint64_t seed = 0;

  long width() const { return static_cast<long>(columns.size()); }
  long sampled_count() const;
  std::string tag() const; // e.g. "G1D30%"

  nlohmann::json to_json() const;
  static UndersamplingMask from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static UndersamplingMask load(const std::string& path);
};

// Centered orthonormal 2-D DFT pair: DC lands at (H/2, W/2), and Parseval
// holds exactly (sum |x|^2 == sum |Fx|^2).
KSpaceGrid fft2c(const ComplexImage& image);
ComplexImage ifft2c(const KSpaceGrid& kspace);

// Exact-count Gaussian-weighted 1-D column mask. round(rate*width) columns
// total; the centered round(center_fraction*width) band is always kept; the
// rest are drawn without replacement with weights exp(-(j-c)^2 / (2 sigma^2)),
// sigma = width/6.
UndersamplingMask gaussian1d_mask(long width, double rate, double center_fraction, uint64_t seed);

KSpaceGrid undersample(const ComplexImage& image, const UndersamplingMask& mask);
ComplexImage zero_fill(const KSpaceGrid& measurements);

} // namespace mrigan::kspace
