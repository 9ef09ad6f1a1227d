#include "mrigan/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mrigan {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] so log is finite.
  double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

double Rng::trunc_normal(double sigma, double limit) {
  for (;;) {
    double v = normal();
    if (std::fabs(v) <= limit) return sigma * v;
  }
}

long Rng::index(long n) {
  if (n <= 0) throw std::invalid_argument("Rng::index: n must be positive");
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t bound = UINT64_MAX - UINT64_MAX % un;
  for (;;) {
    uint64_t u = eng_();
    if (u < bound) return static_cast<long>(u % un);
  }
}

std::vector<long> Rng::permutation(long n) {
  std::vector<long> p(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  for (long i = n - 1; i > 0; --i) {
    long j = index(i + 1);
    std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
  }
  return p;
}

std::string Rng::save_state() const {
  std::ostringstream os;
  os << eng_ << " " << (has_spare_ ? 1 : 0);
  if (has_spare_) {
    os.precision(17);
    os << " " << spare_;
  }
  return os.str();
}

void Rng::load_state(const std::string& state) {
  std::istringstream is(state);
  int spare_flag = 0;
  is >> eng_ >> spare_flag;
  if (is.fail()) throw std::runtime_error("Rng::load_state: malformed state string");
  has_spare_ = spare_flag != 0;
  spare_ = 0.0;
  if (has_spare_) is >> spare_;
}

uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
  uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (uint64_t p : parts) {
    uint64_t z = h + p + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    h = z ^ (z >> 31);
  }
  return h;
}

} // namespace mrigan
