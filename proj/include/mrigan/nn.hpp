#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mrigan/autograd.hpp"
#include "mrigan/rng.hpp"
#include "mrigan/tensor.hpp"

namespace mrigan {

// Ordered collection of named learnable leaves. Iteration order is insertion
// order everywhere (updates, serialization, counting), which keeps training
// trajectories reproducible.
class ParamRegistry {
public:
  Variable create(const std::string& name, Tensor init);
  const Variable& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Variable>>& items() const { return items_; }
  long count_scalars() const;
  void zero_grad();
  bool grads_finite() const;
  void load_values(const std::string& prefix, const class ArchiveReader& reader);

private:
  std::vector<std::pair<std::string, Variable>> items_;
};

long count_params(const ParamRegistry& params);

// Truncated normal (std 0.02 by default) for projection/kernel weights.
Tensor init_trunc_normal(std::vector<long> shape, Rng& rng, double std_dev = 0.02);
// He-style fan-in scaling, used for the discriminator convolutions.
Tensor init_he_normal(std::vector<long> shape, long fan_in, Rng& rng);

// Scales all gradients in the registry so their global l2 norm is at most
// max_norm. Returns the pre-clip norm.
double clip_global_norm(ParamRegistry& params, double max_norm);

class Adam {
public:
  Adam(ParamRegistry& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step(); // consumes current grads; caller zeroes them afterwards

  double lr() const { return lr_; }
  long t() const { return t_; }

  // Moment buffers for checkpointing, aligned with the registry order.
  std::vector<std::pair<std::string, Tensor>> state_arrays() const;
  void load_state_arrays(const std::vector<std::pair<std::string, Tensor>>& arrays, long t);

private:
  ParamRegistry* params_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

} // namespace mrigan
