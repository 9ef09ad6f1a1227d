#include "mrigan/autograd.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace mrigan {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

const Tensor& Variable::value() const { return n_->value; }
Tensor& Variable::value() { return n_->value; }
const Tensor& Variable::grad() const {
  if (!n_->grad.defined()) throw std::runtime_error("Variable has no gradient");
  return n_->grad;
}
bool Variable::requires_grad() const { return n_ && n_->requires_grad; }
bool Variable::has_grad() const { return n_ && n_->grad.defined(); }

double Variable::scalar() const {
  if (numel() != 1) throw std::runtime_error("scalar() on tensor of size " + value().shape_str());
  return value()[0];
}

Variable Variable::detach() const { return constant(n_->value); }

void Variable::zero_grad() {
  if (n_) n_->grad = Tensor();
}

Tensor& Node::ensure_grad() {
  if (!grad.defined()) grad = Tensor(value.shape());
  return grad;
}

void Node::accumulate(Node& parent, const Tensor& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad() += g;
}

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order; // parents before children
}

} // namespace

void Variable::backward() {
  if (!n_) throw std::runtime_error("backward() on undefined Variable");
  if (n_->value.numel() != 1) throw std::runtime_error("backward() requires a scalar root");
  if (!n_->requires_grad) throw std::runtime_error("backward() on a graph with no parameters");
  n_->ensure_grad()[0] += 1.0;
  auto order = topo_order(n_.get());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.defined()) node->backprop(*node);
  }
}

Variable constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Variable(std::move(n));
}

Variable leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Variable(std::move(n));
}

Variable make_op(Tensor value, std::vector<Variable> parents,
                 std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool req = false;
  for (const auto& p : parents) req = req || p.requires_grad();
  n->requires_grad = req;
  if (req) {
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Variable(std::move(n));
}

namespace {

void check_same_shape(const Variable& a, const Variable& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                                " vs " + b.value().shape_str());
}

} // namespace

Variable add(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  auto an = a.node(); auto bn = b.node();
  return make_op(std::move(out), {a, b}, [an, bn](Node& n) {
    Node::accumulate(*an, n.grad);
    Node::accumulate(*bn, n.grad);
  });
}

Variable sub(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (long i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  auto an = a.node(); auto bn = b.node();
  return make_op(std::move(out), {a, b}, [an, bn](Node& n) {
    Node::accumulate(*an, n.grad);
    if (bn->requires_grad) {
      Tensor g = n.grad;
      g *= -1.0;
      Node::accumulate(*bn, g);
    }
  });
}

Variable mul(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (long i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  auto an = a.node(); auto bn = b.node();
  return make_op(std::move(out), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) {
      Tensor g = n.grad;
      for (long i = 0; i < g.numel(); ++i) g[i] *= bn->value[i];
      Node::accumulate(*an, g);
    }
    if (bn->requires_grad) {
      Tensor g = n.grad;
      for (long i = 0; i < g.numel(); ++i) g[i] *= an->value[i];
      Node::accumulate(*bn, g);
    }
  });
}

Variable scale(const Variable& a, double s) {
  Tensor out = a.value();
  out *= s;
  auto an = a.node();
  return make_op(std::move(out), {a}, [an, s](Node& n) {
    Tensor g = n.grad;
    g *= s;
    Node::accumulate(*an, g);
  });
}

Variable add_scalar(const Variable& a, double s) {
  Tensor out = a.value();
  for (long i = 0; i < out.numel(); ++i) out[i] += s;
  auto an = a.node();
  return make_op(std::move(out), {a}, [an](Node& n) { Node::accumulate(*an, n.grad); });
}

Variable gelu(const Variable& a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (long i = 0; i < x.numel(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * (1.0 / std::numbers::sqrt2)));
  auto an = a.node();
  return make_op(std::move(out), {a}, [an](Node& n) {
    Tensor g = n.grad;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (long i = 0; i < g.numel(); ++i) {
      double x = an->value[i];
      double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
      g[i] *= cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
    }
    Node::accumulate(*an, g);
  });
}

Variable leaky_relu(const Variable& a, double slope) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (long i = 0; i < x.numel(); ++i) out[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
  auto an = a.node();
  return make_op(std::move(out), {a}, [an, slope](Node& n) {
    Tensor g = n.grad;
    for (long i = 0; i < g.numel(); ++i)
      if (an->value[i] < 0.0) g[i] *= slope;
    Node::accumulate(*an, g);
  });
}

namespace {
double softplus_s(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }
double sigmoid_s(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
} // namespace

Variable softplus(const Variable& a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (long i = 0; i < x.numel(); ++i) out[i] = softplus_s(x[i]);
  auto an = a.node();
  return make_op(std::move(out), {a}, [an](Node& n) {
    Tensor g = n.grad;
    for (long i = 0; i < g.numel(); ++i) g[i] *= sigmoid_s(an->value[i]);
    Node::accumulate(*an, g);
  });
}

Variable sqrt_v(const Variable& a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (long i = 0; i < x.numel(); ++i) {
    if (x[i] < 0.0) throw std::domain_error("sqrt_v: negative input");
    out[i] = std::sqrt(x[i]);
  }
  auto an = a.node();
  auto on = out; // capture forward values for d/dx = 1/(2 sqrt x)
  return make_op(std::move(out), {a}, [an, on](Node& n) {
    Tensor g = n.grad;
    for (long i = 0; i < g.numel(); ++i) g[i] *= 0.5 / on[i];
    Node::accumulate(*an, g);
  });
}

Variable hypot_v(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "hypot_v");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (long i = 0; i < av.numel(); ++i) out[i] = std::hypot(av[i], bv[i]);
  auto an = a.node(); auto bn = b.node();
  Tensor mag = out;
  return make_op(std::move(out), {a, b}, [an, bn, mag](Node& n) {
    if (an->requires_grad) {
      Tensor g = n.grad;
      for (long i = 0; i < g.numel(); ++i) g[i] = mag[i] > 0.0 ? g[i] * an->value[i] / mag[i] : 0.0;
      Node::accumulate(*an, g);
    }
    if (bn->requires_grad) {
      Tensor g = n.grad;
      for (long i = 0; i < g.numel(); ++i) g[i] = mag[i] > 0.0 ? g[i] * bn->value[i] / mag[i] : 0.0;
      Node::accumulate(*bn, g);
    }
  });
}

Variable sum_all(const Variable& a) {
  double s = 0.0;
  for (long i = 0; i < a.numel(); ++i) s += a.value()[i];
  auto an = a.node();
  return make_op(Tensor::scalar(s), {a}, [an](Node& n) {
    Tensor g(an->value.shape());
    g.fill(n.grad[0]);
    Node::accumulate(*an, g);
  });
}

Variable mean_all(const Variable& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Variable sum_sq(const Variable& a) {
  double s = 0.0;
  for (long i = 0; i < a.numel(); ++i) s += a.value()[i] * a.value()[i];
  auto an = a.node();
  return make_op(Tensor::scalar(s), {a}, [an](Node& n) {
    Tensor g(an->value.shape());
    double u = n.grad[0];
    for (long i = 0; i < g.numel(); ++i) g[i] = 2.0 * u * an->value[i];
    Node::accumulate(*an, g);
  });
}

Variable sum_abs(const Variable& a) {
  double s = 0.0;
  for (long i = 0; i < a.numel(); ++i) s += std::fabs(a.value()[i]);
  auto an = a.node();
  return make_op(Tensor::scalar(s), {a}, [an](Node& n) {
    Tensor g(an->value.shape());
    double u = n.grad[0];
    for (long i = 0; i < g.numel(); ++i) {
      double x = an->value[i];
      g[i] = x > 0.0 ? u : (x < 0.0 ? -u : 0.0);
    }
    Node::accumulate(*an, g);
  });
}

Variable mean_hw(const Variable& a) {
  if (a.value().ndim() != 3) throw std::invalid_argument("mean_hw expects (H,W,C)");
  long h = a.value().dim(0), w = a.value().dim(1), c = a.value().dim(2);
  Tensor out({c});
  const Tensor& x = a.value();
  for (long i = 0; i < h * w; ++i)
    for (long k = 0; k < c; ++k) out[k] += x[i * c + k];
  double inv = 1.0 / static_cast<double>(h * w);
  out *= inv;
  auto an = a.node();
  return make_op(std::move(out), {a}, [an, h, w, c, inv](Node& n) {
    Tensor g(an->value.shape());
    for (long i = 0; i < h * w; ++i)
      for (long k = 0; k < c; ++k) g[i * c + k] = n.grad[k] * inv;
    Node::accumulate(*an, g);
  });
}

Variable matmul(const Variable& a, const Variable& b) {
  if (a.value().ndim() != 2 || b.value().ndim() != 2 || a.value().dim(1) != b.value().dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + a.value().shape_str() + " x " +
                                b.value().shape_str());
  long m = a.value().dim(0), k = a.value().dim(1), p = b.value().dim(1);
  Tensor out({m, p});
  MapM(out.data(), m, p).noalias() = MapC(a.value().data(), m, k) * MapC(b.value().data(), k, p);
  auto an = a.node(); auto bn = b.node();
  return make_op(std::move(out), {a, b}, [an, bn, m, k, p](Node& n) {
    MapC dC(n.grad.data(), m, p);
    if (an->requires_grad) {
      MapM dA(an->ensure_grad().data(), m, k);
      dA.noalias() += dC * MapC(bn->value.data(), k, p).transpose();
    }
    if (bn->requires_grad) {
      MapM dB(bn->ensure_grad().data(), k, p);
      dB.noalias() += MapC(an->value.data(), m, k).transpose() * dC;
    }
  });
}

Variable linear(const Variable& x, const Variable& w, const Variable& b) {
  Variable y = matmul(x, w);
  if (!b.defined()) return y;
  if (b.value().ndim() != 1 || b.value().dim(0) != y.value().dim(1))
    throw std::invalid_argument("linear: bias shape mismatch");
  long rows = y.value().dim(0), cols = y.value().dim(1);
  Tensor out = y.value();
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) out[r * cols + c] += b.value()[c];
  auto yn = y.node(); auto bn = b.node();
  return make_op(std::move(out), {y, b}, [yn, bn, rows, cols](Node& n) {
    Node::accumulate(*yn, n.grad);
    if (bn->requires_grad) {
      Tensor g({cols});
      for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) g[c] += n.grad[r * cols + c];
      Node::accumulate(*bn, g);
    }
  });
}

Variable bmm(const Variable& a, const Variable& b, bool trans_a, bool trans_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0))
    throw std::invalid_argument("bmm: expects rank-3 operands with equal batch");
  long B = av.dim(0);
  long m = trans_a ? av.dim(2) : av.dim(1);
  long k = trans_a ? av.dim(1) : av.dim(2);
  long kb = trans_b ? bv.dim(2) : bv.dim(1);
  long p = trans_b ? bv.dim(1) : bv.dim(2);
  if (k != kb) throw std::invalid_argument("bmm: inner dimension mismatch");
  Tensor out({B, m, p});
  long sa = av.dim(1) * av.dim(2), sb = bv.dim(1) * bv.dim(2), so = m * p;
  for (long i = 0; i < B; ++i) {
    MapC A(av.data() + i * sa, av.dim(1), av.dim(2));
    MapC Bm(bv.data() + i * sb, bv.dim(1), bv.dim(2));
    MapM C(out.data() + i * so, m, p);
    if (!trans_a && !trans_b) C.noalias() = A * Bm;
    else if (!trans_a && trans_b) C.noalias() = A * Bm.transpose();
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * Bm;
    else C.noalias() = A.transpose() * Bm.transpose();
  }
  auto an = a.node(); auto bn = b.node();
  return make_op(std::move(out), {a, b}, [an, bn, trans_a, trans_b, B, m, p, sa, sb, so](Node& n) {
    const Tensor& av = an->value;
    const Tensor& bv = bn->value;
    for (long i = 0; i < B; ++i) {
      MapC dC(n.grad.data() + i * so, m, p);
      MapC A(av.data() + i * sa, av.dim(1), av.dim(2));
      MapC Bm(bv.data() + i * sb, bv.dim(1), bv.dim(2));
      if (an->requires_grad) {
        MapM dA(an->ensure_grad().data() + i * sa, av.dim(1), av.dim(2));
        if (!trans_a) dA.noalias() += trans_b ? (dC * Bm).eval() : (dC * Bm.transpose()).eval();
        else dA.noalias() += trans_b ? (Bm.transpose() * dC.transpose()).eval()
                                     : (Bm * dC.transpose()).eval();
      }
      if (bn->requires_grad) {
        MapM dB(bn->ensure_grad().data() + i * sb, bv.dim(1), bv.dim(2));
        if (!trans_b) dB.noalias() += trans_a ? (A * dC).eval() : (A.transpose() * dC).eval();
        else dB.noalias() += trans_a ? (dC.transpose() * A.transpose()).eval()
                                     : (dC.transpose() * A).eval();
      }
    }
  });
}

Variable reshape(const Variable& a, std::vector<long> shape) {
  Tensor out = a.value().reshaped(shape);
  auto an = a.node();
  return make_op(std::move(out), {a}, [an](Node& n) {
    Node::accumulate(*an, n.grad.reshaped(an->value.shape()));
  });
}

Variable gather_rows(const Variable& a, std::shared_ptr<const std::vector<long>> idx,
                     long out_rows) {
  const Tensor& x = a.value();
  if (x.ndim() != 2) throw std::invalid_argument("gather_rows expects (N,C)");
  if (static_cast<long>(idx->size()) != out_rows)
    throw std::invalid_argument("gather_rows: index size mismatch");
  long c = x.dim(1);
  Tensor out({out_rows, c});
  for (long r = 0; r < out_rows; ++r) {
    const double* src = x.data() + (*idx)[static_cast<size_t>(r)] * c;
    double* dst = out.data() + r * c;
    for (long j = 0; j < c; ++j) dst[j] = src[j];
  }
  auto an = a.node();
  return make_op(std::move(out), {a}, [an, idx, out_rows, c](Node& n) {
    if (!an->requires_grad) return;
    Tensor& g = an->ensure_grad();
    for (long r = 0; r < out_rows; ++r) {
      double* dst = g.data() + (*idx)[static_cast<size_t>(r)] * c;
      const double* src = n.grad.data() + r * c;
      for (long j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Variable gather_flat(const Variable& a, std::shared_ptr<const std::vector<long>> idx,
                     std::vector<long> out_shape) {
  long m = shape_numel(out_shape);
  if (static_cast<long>(idx->size()) != m)
    throw std::invalid_argument("gather_flat: index size mismatch");
  Tensor out(std::move(out_shape));
  const Tensor& x = a.value();
  for (long i = 0; i < m; ++i) out[i] = x[(*idx)[static_cast<size_t>(i)]];
  auto an = a.node();
  return make_op(std::move(out), {a}, [an, idx, m](Node& n) {
    if (!an->requires_grad) return;
    Tensor& g = an->ensure_grad();
    for (long i = 0; i < m; ++i) g[(*idx)[static_cast<size_t>(i)]] += n.grad[i];
  });
}

Variable concat_last(const Variable& a, const Variable& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != bv.ndim()) throw std::invalid_argument("concat_last: rank mismatch");
  std::vector<long> shape = av.shape();
  long last = av.ndim() - 1;
  for (long i = 0; i < last; ++i)
    if (av.dim(i) != bv.dim(i)) throw std::invalid_argument("concat_last: leading dim mismatch");
  long ca = av.dim(last), cb = bv.dim(last);
  shape[static_cast<size_t>(last)] = ca + cb;
  long rows = av.numel() / ca;
  Tensor out(shape);
  for (long r = 0; r < rows; ++r) {
    double* dst = out.data() + r * (ca + cb);
    const double* pa = av.data() + r * ca;
    const double* pb = bv.data() + r * cb;
    for (long j = 0; j < ca; ++j) dst[j] = pa[j];
    for (long j = 0; j < cb; ++j) dst[ca + j] = pb[j];
  }
  auto an = a.node(); auto bn = b.node();
  return make_op(std::move(out), {a, b}, [an, bn, rows, ca, cb](Node& n) {
    if (an->requires_grad) {
      Tensor& g = an->ensure_grad();
      for (long r = 0; r < rows; ++r)
        for (long j = 0; j < ca; ++j) g[r * ca + j] += n.grad[r * (ca + cb) + j];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->ensure_grad();
      for (long r = 0; r < rows; ++r)
        for (long j = 0; j < cb; ++j) g[r * cb + j] += n.grad[r * (ca + cb) + ca + j];
    }
  });
}

Variable softmax_lastdim(const Variable& a) {
  const Tensor& x = a.value();
  if (x.ndim() < 1) throw std::invalid_argument("softmax_lastdim: rank-0 input");
  long t = x.dim(x.ndim() - 1);
  long rows = x.numel() / t;
  Tensor out(x.shape());
  for (long r = 0; r < rows; ++r) {
    const double* src = x.data() + r * t;
    double* dst = out.data() + r * t;
    double mx = src[0];
    for (long j = 1; j < t; ++j) mx = std::max(mx, src[j]);
    double sum = 0.0;
    for (long j = 0; j < t; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    double inv = 1.0 / sum;
    for (long j = 0; j < t; ++j) dst[j] *= inv;
  }
  auto an = a.node();
  Tensor y = out;
  return make_op(std::move(out), {a}, [an, y, rows, t](Node& n) {
    Tensor g(an->value.shape());
    for (long r = 0; r < rows; ++r) {
      const double* yv = y.data() + r * t;
      const double* dy = n.grad.data() + r * t;
      double dot = 0.0;
      for (long j = 0; j < t; ++j) dot += dy[j] * yv[j];
      double* dst = g.data() + r * t;
      for (long j = 0; j < t; ++j) dst[j] = yv[j] * (dy[j] - dot);
    }
    Node::accumulate(*an, g);
  });
}

Variable add_bias_heads(const Variable& scores, const Variable& bias, long num_heads) {
  const Tensor& s = scores.value();
  const Tensor& b = bias.value();
  if (s.ndim() != 3 || b.ndim() != 3 || b.dim(0) != num_heads || s.dim(0) % num_heads != 0 ||
      s.dim(1) != b.dim(1) || s.dim(2) != b.dim(2))
    throw std::invalid_argument("add_bias_heads: shape mismatch");
  long batch = s.dim(0), tt = s.dim(1) * s.dim(2);
  Tensor out = s;
  for (long i = 0; i < batch; ++i) {
    const double* bp = b.data() + (i % num_heads) * tt;
    double* op = out.data() + i * tt;
    for (long j = 0; j < tt; ++j) op[j] += bp[j];
  }
  auto sn = scores.node(); auto bn = bias.node();
  return make_op(std::move(out), {scores, bias}, [sn, bn, batch, tt, num_heads](Node& n) {
    Node::accumulate(*sn, n.grad);
    if (bn->requires_grad) {
      Tensor& g = bn->ensure_grad();
      for (long i = 0; i < batch; ++i) {
        double* dst = g.data() + (i % num_heads) * tt;
        const double* src = n.grad.data() + i * tt;
        for (long j = 0; j < tt; ++j) dst[j] += src[j];
      }
    }
  });
}

Variable add_window_mask(const Variable& scores, const Tensor& mask, long num_heads) {
  const Tensor& s = scores.value();
  if (s.ndim() != 3 || mask.ndim() != 3 || s.dim(0) != mask.dim(0) * num_heads ||
      s.dim(1) != mask.dim(1) || s.dim(2) != mask.dim(2))
    throw std::invalid_argument("add_window_mask: shape mismatch");
  long batch = s.dim(0), tt = s.dim(1) * s.dim(2);
  Tensor out = s;
  for (long i = 0; i < batch; ++i) {
    const double* mp = mask.data() + (i / num_heads) * tt;
    double* op = out.data() + i * tt;
    for (long j = 0; j < tt; ++j) op[j] += mp[j];
  }
  auto sn = scores.node();
  return make_op(std::move(out), {scores}, [sn](Node& n) { Node::accumulate(*sn, n.grad); });
}

Variable layer_norm(const Variable& x, const Variable& gamma, const Variable& beta, double eps) {
  const Tensor& xv = x.value();
  long c = xv.dim(xv.ndim() - 1);
  if (gamma.value().numel() != c || beta.value().numel() != c)
    throw std::invalid_argument("layer_norm: affine parameter size mismatch");
  long rows = xv.numel() / c;
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  Tensor inv_std({rows});
  for (long r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * c;
    double mu = 0.0;
    for (long j = 0; j < c; ++j) mu += src[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (long j = 0; j < c; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    double* xh = xhat.data() + r * c;
    double* o = out.data() + r * c;
    for (long j = 0; j < c; ++j) {
      xh[j] = (src[j] - mu) * inv;
      o[j] = xh[j] * gamma.value()[j] + beta.value()[j];
    }
  }
  auto xn = x.node(); auto gn = gamma.node(); auto bn = beta.node();
  return make_op(std::move(out), {x, gamma, beta}, [xn, gn, bn, xhat, inv_std, rows, c](Node& n) {
    if (gn->requires_grad) {
      Tensor g({c});
      for (long r = 0; r < rows; ++r)
        for (long j = 0; j < c; ++j) g[j] += n.grad[r * c + j] * xhat[r * c + j];
      Node::accumulate(*gn, g);
    }
    if (bn->requires_grad) {
      Tensor g({c});
      for (long r = 0; r < rows; ++r)
        for (long j = 0; j < c; ++j) g[j] += n.grad[r * c + j];
      Node::accumulate(*bn, g);
    }
    if (xn->requires_grad) {
      Tensor g(xn->value.shape());
      for (long r = 0; r < rows; ++r) {
        const double* dy = n.grad.data() + r * c;
        const double* xh = xhat.data() + r * c;
        double m1 = 0.0, m2 = 0.0;
        for (long j = 0; j < c; ++j) {
          double dxh = dy[j] * gn->value[j];
          m1 += dxh;
          m2 += dxh * xh[j];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        double* dst = g.data() + r * c;
        for (long j = 0; j < c; ++j) {
          double dxh = dy[j] * gn->value[j];
          dst[j] = inv_std[r] * (dxh - m1 - xh[j] * m2);
        }
      }
      Node::accumulate(*xn, g);
    }
  });
}

namespace {

long reflect101(long i, long n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  return i;
}

// Gather map from padded patch positions to input pixel index, -1 for zero pad.
struct ConvGeom {
  long hi, wi, cin, kh, kw, cout, stride, ho, wo;
  Pad pad;
  std::vector<long> src; // (ho*wo*kh*kw) -> input pixel row or -1
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, long stride, Pad pad) {
  ConvGeom g;
  g.hi = x.dim(0); g.wi = x.dim(1); g.cin = x.dim(2);
  g.kh = w.dim(0); g.kw = w.dim(1); g.cout = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  long ph = (g.kh - 1) / 2, pw = (g.kw - 1) / 2;
  g.ho = (g.hi + 2 * ph - g.kh) / stride + 1;
  g.wo = (g.wi + 2 * pw - g.kw) / stride + 1;
  g.src.resize(static_cast<size_t>(g.ho * g.wo * g.kh * g.kw));
  size_t p = 0;
  for (long oi = 0; oi < g.ho; ++oi)
    for (long oj = 0; oj < g.wo; ++oj)
      for (long ki = 0; ki < g.kh; ++ki)
        for (long kj = 0; kj < g.kw; ++kj) {
          long ii = oi * stride + ki - ph;
          long jj = oj * stride + kj - pw;
          if (pad == Pad::Reflect) {
            ii = reflect101(ii, g.hi);
            jj = reflect101(jj, g.wi);
          }
          g.src[p++] = (ii < 0 || ii >= g.hi || jj < 0 || jj >= g.wi) ? -1 : ii * g.wi + jj;
        }
  return g;
}

Tensor im2col(const Tensor& x, const ConvGeom& g) {
  long patch = g.kh * g.kw;
  Tensor col({g.ho * g.wo, patch * g.cin});
  for (long r = 0; r < g.ho * g.wo; ++r) {
    double* dst = col.data() + r * patch * g.cin;
    for (long k = 0; k < patch; ++k) {
      long s = g.src[static_cast<size_t>(r * patch + k)];
      if (s >= 0) {
        const double* src = x.data() + s * g.cin;
        for (long c = 0; c < g.cin; ++c) dst[k * g.cin + c] = src[c];
      }
    }
  }
  return col;
}

} // namespace

Variable conv2d(const Variable& x, const Variable& w, const Variable& b, long stride, Pad pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.ndim() != 3 || wv.ndim() != 4)
    throw std::invalid_argument("conv2d: expects x (H,W,Cin), w (kh,kw,Cin,Cout)");
  if (xv.dim(2) != wv.dim(2)) throw std::invalid_argument("conv2d: channel mismatch");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (wv.dim(0) % 2 == 0 || wv.dim(1) % 2 == 0)
    throw std::invalid_argument("conv2d: kernel extents must be odd");
  ConvGeom geom = conv_geometry(xv, wv, stride, pad);
  long kc = geom.kh * geom.kw * geom.cin;
  Tensor col = im2col(xv, geom);
  Tensor out({geom.ho, geom.wo, geom.cout});
  MapM O(out.data(), geom.ho * geom.wo, geom.cout);
  O.noalias() = MapC(col.data(), geom.ho * geom.wo, kc) * MapC(wv.data(), kc, geom.cout);
  if (b.defined()) {
    if (b.value().numel() != geom.cout) throw std::invalid_argument("conv2d: bias size mismatch");
    for (long r = 0; r < geom.ho * geom.wo; ++r)
      for (long c = 0; c < geom.cout; ++c) out[r * geom.cout + c] += b.value()[c];
  }
  auto xn = x.node(); auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  std::vector<Variable> parents{x, w};
  if (b.defined()) parents.push_back(b);
  auto geo = std::make_shared<ConvGeom>(std::move(geom));
  return make_op(std::move(out), std::move(parents), [xn, wn, bn, geo, kc](Node& n) {
    long rows = geo->ho * geo->wo;
    long patch = geo->kh * geo->kw;
    MapC dOut(n.grad.data(), rows, geo->cout);
    if (bn && bn->requires_grad) {
      Tensor g({geo->cout});
      for (long r = 0; r < rows; ++r)
        for (long c = 0; c < geo->cout; ++c) g[c] += dOut(r, c);
      Node::accumulate(*bn, g);
    }
    // col is recomputed here rather than kept alive in the graph.
    if (wn->requires_grad) {
      Tensor col = im2col(xn->value, *geo);
      MapM dW(wn->ensure_grad().data(), kc, geo->cout);
      dW.noalias() += MapC(col.data(), rows, kc).transpose() * dOut;
    }
    if (xn->requires_grad) {
      Tensor dcol({rows, kc});
      MapM(dcol.data(), rows, kc).noalias() =
          dOut * MapC(wn->value.data(), kc, geo->cout).transpose();
      Tensor& g = xn->ensure_grad();
      for (long r = 0; r < rows; ++r) {
        const double* src = dcol.data() + r * kc;
        for (long k = 0; k < patch; ++k) {
          long s = geo->src[static_cast<size_t>(r * patch + k)];
          if (s < 0) continue;
          double* dst = g.data() + s * geo->cin;
          for (long c = 0; c < geo->cin; ++c) dst[c] += src[k * geo->cin + c];
        }
      }
    }
  });
}

Variable upsample2x(const Variable& x) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 3) throw std::invalid_argument("upsample2x expects (H,W,C)");
  long h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  Tensor out({2 * h, 2 * w, c});
  for (long i = 0; i < 2 * h; ++i)
    for (long j = 0; j < 2 * w; ++j) {
      const double* src = xv.data() + ((i / 2) * w + j / 2) * c;
      double* dst = out.data() + (i * 2 * w + j) * c;
      for (long k = 0; k < c; ++k) dst[k] = src[k];
    }
  auto xn = x.node();
  return make_op(std::move(out), {x}, [xn, h, w, c](Node& n) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (long i = 0; i < 2 * h; ++i)
      for (long j = 0; j < 2 * w; ++j) {
        double* dst = g.data() + ((i / 2) * w + j / 2) * c;
        const double* src = n.grad.data() + (i * 2 * w + j) * c;
        for (long k = 0; k < c; ++k) dst[k] += src[k];
      }
  });
}

} // namespace mrigan
