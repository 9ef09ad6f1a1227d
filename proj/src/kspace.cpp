#include "mrigan/kspace.hpp"

#include <fftw3.h>

#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>

#include "mrigan/rng.hpp"

namespace mrigan::kspace {

namespace {

void check_extent(long h, long w) {
  if (h < 8 || w < 8)
    throw std::invalid_argument("grid extents must be at least 8x8, got " + std::to_string(h) +
                                "x" + std::to_string(w));
}

double energy_of(const std::vector<std::complex<double>>& v) {
  double e = 0.0;
  for (const auto& z : v) e += std::norm(z);
  return e;
}

bool finite_of(const std::vector<std::complex<double>>& v) {
  for (const auto& z : v)
    if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
  return true;
}

// FFTW plans are cached per (H, W, sign). Plan creation is not thread-safe;
// execution on distinct buffers is.
fftw_plan plan_for(long h, long w, int sign) {
  static std::map<std::tuple<long, long, int>, fftw_plan> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto key = std::make_tuple(h, w, sign);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  std::vector<std::complex<double>> in(static_cast<size_t>(h * w)), out(in.size());
  fftw_plan p = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w),
                                 reinterpret_cast<fftw_complex*>(in.data()),
                                 reinterpret_cast<fftw_complex*>(out.data()), sign,
                                 FFTW_ESTIMATE | FFTW_UNALIGNED);
  cache[key] = p;
  return p;
}

// out[(i+si) mod H][(j+sj) mod W] = in[i][j]
void roll2d(const std::complex<double>* in, std::complex<double>* out, long h, long w, long si,
            long sj) {
  for (long i = 0; i < h; ++i) {
    long ii = (i + si) % h;
    for (long j = 0; j < w; ++j) out[ii * w + (j + sj) % w] = in[i * w + j];
  }
}

} // namespace

ComplexImage::ComplexImage(long height, long width) : h_(height), w_(width) {
  check_extent(h_, w_);
  data_.assign(static_cast<size_t>(h_ * w_), {0.0, 0.0});
}

ComplexImage ComplexImage::from_real(const Tensor& hw) {
  if (hw.ndim() != 2 && !(hw.ndim() == 3 && hw.dim(2) == 1))
    throw std::invalid_argument("from_real expects (H,W) or (H,W,1)");
  ComplexImage img(hw.dim(0), hw.dim(1));
  for (long i = 0; i < img.numel(); ++i) img.data()[i] = {hw[i], 0.0};
  return img;
}

Tensor ComplexImage::magnitude() const {
  Tensor t({h_, w_});
  for (long i = 0; i < numel(); ++i) t[i] = std::abs(data_[static_cast<size_t>(i)]);
  return t;
}

Tensor ComplexImage::real() const {
  Tensor t({h_, w_});
  for (long i = 0; i < numel(); ++i) t[i] = data_[static_cast<size_t>(i)].real();
  return t;
}

double ComplexImage::energy() const { return energy_of(data_); }
bool ComplexImage::all_finite() const { return finite_of(data_); }

KSpaceGrid::KSpaceGrid(long height, long width) : h_(height), w_(width) {
  check_extent(h_, w_);
  data_.assign(static_cast<size_t>(h_ * w_), {0.0, 0.0});
}

double KSpaceGrid::energy() const { return energy_of(data_); }
bool KSpaceGrid::all_finite() const { return finite_of(data_); }

KSpaceGrid fft2c(const ComplexImage& image) {
  if (!image.all_finite()) throw std::invalid_argument("fft2c: non-finite input");
  long h = image.height(), w = image.width();
  std::vector<std::complex<double>> tmp(static_cast<size_t>(h * w)), freq(tmp.size());
  // ifftshift: roll by (ceil(H/2), ceil(W/2))
  roll2d(image.data(), tmp.data(), h, w, (h + 1) / 2, (w + 1) / 2);
  fftw_execute_dft(plan_for(h, w, FFTW_FORWARD), reinterpret_cast<fftw_complex*>(tmp.data()),
                   reinterpret_cast<fftw_complex*>(freq.data()));
  KSpaceGrid out(h, w);
  roll2d(freq.data(), out.data(), h, w, h / 2, w / 2); // fftshift
  double s = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (long i = 0; i < out.numel(); ++i) out.data()[i] *= s;
  return out;
}

ComplexImage ifft2c(const KSpaceGrid& kspace) {
  if (!kspace.all_finite()) throw std::invalid_argument("ifft2c: non-finite input");
  long h = kspace.height(), w = kspace.width();
  std::vector<std::complex<double>> tmp(static_cast<size_t>(h * w)), img(tmp.size());
  roll2d(kspace.data(), tmp.data(), h, w, (h + 1) / 2, (w + 1) / 2);
  fftw_execute_dft(plan_for(h, w, FFTW_BACKWARD), reinterpret_cast<fftw_complex*>(tmp.data()),
                   reinterpret_cast<fftw_complex*>(img.data()));
  ComplexImage out(h, w);
  roll2d(img.data(), out.data(), h, w, h / 2, w / 2);
  double s = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (long i = 0; i < out.numel(); ++i) out.data()[i] *= s;
  return out;
}

long UndersamplingMask::sampled_count() const {
  long n = 0;
  for (uint8_t c : columns) n += c;
  return n;
}

std::string UndersamplingMask::tag() const {
  long pct = std::lround(rate * 100.0);
  return "G1D" + std::to_string(pct) + "%";
}

nlohmann::json UndersamplingMask::to_json() const {
  nlohmann::json j;
  j["width"] = width();
  j["rate"] = rate;
  j["center_fraction"] = center_fraction;
  j["seed"] = seed;
  j["columns"] = columns;
  return j;
}

UndersamplingMask UndersamplingMask::from_json(const nlohmann::json& j) {
  UndersamplingMask m;
  m.rate = j.at("rate").get<double>();
  m.center_fraction = j.at("center_fraction").get<double>();
  m.seed = j.at("seed").get<uint64_t>();
  m.columns = j.at("columns").get<std::vector<uint8_t>>();
  if (static_cast<long>(m.columns.size()) != j.at("width").get<long>())
    throw std::runtime_error("mask JSON: width does not match columns length");
  return m;
}

void UndersamplingMask::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write mask file: " + path);
  f << to_json().dump(2) << "\n";
}

UndersamplingMask UndersamplingMask::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open mask file: " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("malformed mask JSON: " + path);
  return from_json(j);
}

UndersamplingMask gaussian1d_mask(long width, double rate, double center_fraction,
                                  uint64_t seed) {
  if (width < 1) throw std::invalid_argument("mask width must be positive");
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("rate must be in (0,1]");
  if (!(center_fraction >= 0.0 && center_fraction < rate))
    throw std::invalid_argument("center_fraction must satisfy 0 <= center_fraction < rate");
  long n_total = std::lround(rate * static_cast<double>(width));
  if (n_total < 1) throw std::invalid_argument("rate*width < 1: no column would be sampled");
  long n_center = std::lround(center_fraction * static_cast<double>(width));

  UndersamplingMask m;
  m.columns.assign(static_cast<size_t>(width), 0);
  m.rate = rate;
  m.center_fraction = center_fraction;
  m.seed = seed;

  long start = (width - n_center) / 2;
  for (long j = start; j < start + n_center; ++j) m.columns[static_cast<size_t>(j)] = 1;

  double c = (static_cast<double>(width) - 1.0) / 2.0;
  double sigma = static_cast<double>(width) / 6.0;
  std::vector<long> free_cols;
  std::vector<double> weights;
  for (long j = 0; j < width; ++j) {
    if (m.columns[static_cast<size_t>(j)]) continue;
    free_cols.push_back(j);
    double d = (static_cast<double>(j) - c) / sigma;
    weights.push_back(std::exp(-0.5 * d * d));
  }

  Rng rng(mix_seed({0x4d41534bULL, seed}));
  long remaining = n_total - n_center;
  for (long k = 0; k < remaining; ++k) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = rng.uniform01() * total;
    size_t pick = weights.size() - 1;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    m.columns[static_cast<size_t>(free_cols[pick])] = 1;
    free_cols.erase(free_cols.begin() + static_cast<long>(pick));
    weights.erase(weights.begin() + static_cast<long>(pick));
  }
  return m;
}

KSpaceGrid undersample(const ComplexImage& image, const UndersamplingMask& mask) {
  if (mask.width() != image.width())
    throw std::invalid_argument("undersample: mask width " + std::to_string(mask.width()) +
                                " does not match image width " + std::to_string(image.width()));
  KSpaceGrid grid = fft2c(image);
  for (long i = 0; i < grid.height(); ++i)
    for (long j = 0; j < grid.width(); ++j)
      if (!mask.columns[static_cast<size_t>(j)]) grid.at(i, j) = {0.0, 0.0};
  return grid;
}

ComplexImage zero_fill(const KSpaceGrid& measurements) { return ifft2c(measurements); }

} // namespace mrigan::kspace
