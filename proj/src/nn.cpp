#include "mrigan/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "mrigan/archive.hpp"

namespace mrigan {

Variable ParamRegistry::create(const std::string& name, Tensor init) {
  if (has(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  if (!init.all_finite()) throw std::invalid_argument("non-finite init for parameter: " + name);
  Variable v = leaf(std::move(init));
  items_.emplace_back(name, v);
  return v;
}

const Variable& ParamRegistry::get(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw std::out_of_range("no parameter named: " + name);
}

bool ParamRegistry::has(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return true;
  return false;
}

long ParamRegistry::count_scalars() const {
  long total = 0;
  for (const auto& [n, v] : items_) total += v.numel();
  return total;
}

void ParamRegistry::zero_grad() {
  for (auto& [n, v] : items_) v.zero_grad();
}

bool ParamRegistry::grads_finite() const {
  for (const auto& [n, v] : items_)
    if (v.has_grad() && !v.grad().all_finite()) return false;
  return true;
}

void ParamRegistry::load_values(const std::string& prefix, const ArchiveReader& reader) {
  for (auto& [name, var] : items_) {
    Tensor t = reader.read(prefix + name);
    if (t.shape() != var.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + prefix + name + ": " +
                               t.shape_str() + " vs " + var.value().shape_str());
    var.value() = std::move(t);
  }
}

long count_params(const ParamRegistry& params) { return params.count_scalars(); }

Tensor init_trunc_normal(std::vector<long> shape, Rng& rng, double std_dev) {
  Tensor t(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) t[i] = rng.trunc_normal(std_dev);
  return t;
}

Tensor init_he_normal(std::vector<long> shape, long fan_in, Rng& rng) {
  double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  return init_trunc_normal(std::move(shape), rng, std_dev);
}

double clip_global_norm(ParamRegistry& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [n, v] : params.items()) {
    if (!v.has_grad()) continue;
    const Tensor& g = v.grad();
    for (long i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (auto& [n, v] : params.items())
      if (v.has_grad()) v.node()->grad *= s;
  }
  return norm;
}

Adam::Adam(ParamRegistry& params, double lr, double beta1, double beta2, double eps)
    : params_(&params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [n, v] : params.items()) {
    m_.emplace_back(v.shape());
    v_.emplace_back(v.shape());
  }
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& items = params_->items();
  for (size_t i = 0; i < items.size(); ++i) {
    const Variable& p = items[i].second;
    if (!p.has_grad()) continue; // parameter untouched by this loss
    const Tensor& g = p.node()->grad;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    Tensor& w = p.node()->value;
    for (long j = 0; j < g.numel(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      double mh = m[j] / bc1;
      double vh = v[j] / bc2;
      w[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> Adam::state_arrays() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto& items = params_->items();
  for (size_t i = 0; i < items.size(); ++i) {
    out.emplace_back(items[i].first + ".m", m_[i]);
    out.emplace_back(items[i].first + ".v", v_[i]);
  }
  return out;
}

void Adam::load_state_arrays(const std::vector<std::pair<std::string, Tensor>>& arrays, long t) {
  const auto& items = params_->items();
  if (arrays.size() != items.size() * 2)
    throw std::runtime_error("Adam state does not match parameter registry");
  for (size_t i = 0; i < items.size(); ++i) {
    m_[i] = arrays[2 * i].second;
    v_[i] = arrays[2 * i + 1].second;
  }
  t_ = t;
}

} // namespace mrigan
