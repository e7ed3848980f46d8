#include "feds/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace feds {

namespace {

thread_local bool g_grad_enabled = true;

// Grad buffer of parent i, or nullptr when that input does not need one.
Tensor* parent_grad(Node& self, std::size_t i) {
  auto& p = self.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->grad_buffer();
}

const Tensor& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const auto& in = a.value().data;
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = fwd(in[i]);
  return make_result(std::move(out), {a}, [deriv](Node& self) {
    Tensor* ga = parent_grad(self, 0);
    if (!ga) return;
    const auto& x = parent_value(self, 0).data;
    for (std::size_t i = 0; i < x.size(); ++i) ga->data[i] += self.grad.data[i] * deriv(x[i], self.value.data[i]);
  });
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.data.empty()) grad = Tensor(value.shape);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.data.empty()) node_->grad.fill(0.0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const auto& v : inputs) node->parents.push_back(v.defined() ? v.node() : nullptr);
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined() || root.numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !visited.contains(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.data.empty()) n->backward(*n);
  }
}

namespace ops {

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += self.grad.data[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += self.grad.data[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] -= self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& av = parent_value(self, 0).data;
    const auto& bv = parent_value(self, 1).data;
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += self.grad.data[i] * bv[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += self.grad.data[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] / b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& bv = parent_value(self, 1).data;
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += self.grad.data[i] / bv[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] -= self.grad.data[i] * self.value.data[i] / bv[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var add_const(const Var& a, const Tensor& c) {
  require_same_shape(a.value(), c, "add_const");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + c.data[i];
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += self.grad.data[i];
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return make_result(Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const double gs = self.grad.data[0];
      for (double& v : g->data) v += gs;
    }
  });
}

Var mean(const Var& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mse");
  const auto n = a.numel();
  if (n == 0) throw std::invalid_argument("mse of empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value().data[i] - b.value().data[i];
    s += d * d;
  }
  return make_result(Tensor::scalar(s / static_cast<double>(n)), {a, b}, [n](Node& self) {
    const auto& av = parent_value(self, 0).data;
    const auto& bv = parent_value(self, 1).data;
    const double k = 2.0 * self.grad.data[0] / static_cast<double>(n);
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g->data[i] += k * (av[i] - bv[i]);
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g->data[i] -= k * (av[i] - bv[i]);
    }
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].numel() != 1) throw std::invalid_argument("weighted_sum: terms must be scalars");
    s += weights[i] * terms[i].item();
  }
  std::vector<double> w(weights.begin(), weights.end());
  return make_result(Tensor::scalar(s), std::vector<Var>(terms.begin(), terms.end()), [w](Node& self) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (Tensor* g = parent_grad(self, i)) g->data[0] += w[i] * self.grad.data[0];
    }
  });
}

Var leaky_relu(const Var& a, double slope) {
  return unary(
      a, [slope](double x) { return x >= 0.0 ? x : slope * x; },
      [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var log2(const Var& a) {
  return unary(
      a, [](double x) { return std::log2(x); },
      [](double x, double) { return 1.0 / (x * std::numbers::ln2); });
}

Var clamp_min(const Var& a, double lo) {
  return unary(
      a, [lo](double x) { return x < lo ? lo : x; }, [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var pow_scalar(const Var& a, double p) {
  return unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return (x == 0.0 && p < 1.0) ? 0.0 : p * std::pow(x, p - 1.0); });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) g->data[i] += self.grad.data[i];
    }
  });
}

Var gather(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  if (shape_numel(out_shape) != index->size()) throw std::invalid_argument("gather: index/shape size mismatch");
  Tensor out(std::move(out_shape));
  const auto& src = a.value().data;
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t k = (*index)[i];
    out.data[i] = k == kGatherZero ? 0.0 : src.at(k);
  }
  return make_result(std::move(out), {a}, [index](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < index->size(); ++i) {
        const std::size_t k = (*index)[i];
        if (k != kGatherZero) g->data[k] += self.grad.data[i];
      }
    }
  });
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const auto& s0 = parts[0].shape();
  if (s0.size() != 4) throw std::invalid_argument("concat_channels: expected NCHW");
  int channels = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw std::invalid_argument("concat_channels: incompatible shape " + shape_str(s));
    }
    channels += s[1];
  }
  const int batch = s0[0];
  const std::size_t plane = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor out(Shape{batch, channels, s0[2], s0[3]});
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int c = p.shape()[1];
    for (int n = 0; n < batch; ++n) {
      const double* src = p.value().data.data() + static_cast<std::size_t>(n) * c * plane;
      double* dst = out.data.data() + (static_cast<std::size_t>(n) * channels + off) * plane;
      std::copy(src, src + c * plane, dst);
    }
    off += c;
  }
  return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                     [offsets, channels, batch, plane](Node& self) {
                       for (std::size_t k = 0; k < offsets.size(); ++k) {
                         Tensor* g = parent_grad(self, k);
                         if (!g) continue;
                         const int c = g->shape[1];
                         for (int n = 0; n < batch; ++n) {
                           const double* src =
                               self.grad.data.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * plane;
                           double* dst = g->data.data() + static_cast<std::size_t>(n) * c * plane;
                           for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Var select_channels(const Var& a, std::span<const int> channels) {
  const auto& s = a.shape();
  if (s.size() != 4) throw std::invalid_argument("select_channels: expected NCHW");
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(static_cast<std::size_t>(s[0]) * channels.size() * plane);
  for (int n = 0; n < s[0]; ++n) {
    for (int c : channels) {
      if (c < 0 || c >= s[1]) throw std::invalid_argument("select_channels: channel out of range");
      const std::size_t base = (static_cast<std::size_t>(n) * s[1] + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) index->push_back(base + i);
    }
  }
  return gather(a, index, Shape{s[0], static_cast<int>(channels.size()), s[2], s[3]});
}

Var slice_channels(const Var& a, int start, int count) {
  const auto& s = a.shape();
  if (s.size() != 4 || start < 0 || count < 0 || start + count > s[1]) {
    throw std::invalid_argument("slice_channels: range out of bounds for " + shape_str(s));
  }
  std::vector<int> ch(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) ch[static_cast<std::size_t>(i)] = start + i;
  return select_channels(a, ch);
}

Var channel_means(const Var& a) {
  const auto& s = a.shape();
  if (s.size() != 4) throw std::invalid_argument("channel_means: expected NCHW");
  const int batch = s[0], channels = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  const double denom = static_cast<double>(batch) * static_cast<double>(plane);
  Tensor out(Shape{channels});
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const double* p = a.value().data.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out.data[static_cast<std::size_t>(c)] += acc;
    }
  }
  for (double& v : out.data) v /= denom;
  return make_result(std::move(out), {a}, [batch, channels, plane, denom](Node& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const double gc = self.grad.data[static_cast<std::size_t>(c)] / denom;
        double* p = g->data.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += gc;
      }
    }
  });
}

}  // namespace ops
}  // namespace feds
