#include <array>
#include <cmath>
#include <stdexcept>

#include "feds/entropy_engine.hpp"

namespace feds {

namespace {

constexpr int kL = FactorizedPrior::kLayers;
constexpr int kW = FactorizedPrior::kHidden;

int in_dim(int layer) { return layer == 0 ? 1 : kW; }
int out_dim(int layer) { return layer == kL - 1 ? 1 : kW; }

std::string matrix_name(int i) { return "prior.matrix" + std::to_string(i); }
std::string bias_name(int i) { return "prior.bias" + std::to_string(i); }
std::string factor_name(int i) { return "prior.factor" + std::to_string(i); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Raw views of one channel's parameters.
struct ChannelParams {
  std::array<const double*, kL> matrix{};
  std::array<const double*, kL> bias{};
  std::array<const double*, kL - 1> factor{};
};

ChannelParams channel_params(std::span<const Tensor* const> tensors, int c) {
  ChannelParams p;
  for (int i = 0; i < kL; ++i) {
    p.matrix[static_cast<std::size_t>(i)] = tensors[static_cast<std::size_t>(i)]->data.data() +
                                             static_cast<std::size_t>(c) * out_dim(i) * in_dim(i);
    p.bias[static_cast<std::size_t>(i)] =
        tensors[static_cast<std::size_t>(kL + i)]->data.data() + static_cast<std::size_t>(c) * out_dim(i);
  }
  for (int i = 0; i < kL - 1; ++i) {
    p.factor[static_cast<std::size_t>(i)] =
        tensors[static_cast<std::size_t>(2 * kL + i)]->data.data() + static_cast<std::size_t>(c) * out_dim(i);
  }
  return p;
}

struct Trace {
  std::array<std::array<double, kW>, kL + 1> h{};  // h[0][0] = input, h[kL][0] = logit
  std::array<std::array<double, kW>, kL> u{};      // pre-gate activations
};

double logits(const ChannelParams& p, double x, Trace* trace) {
  std::array<double, kW> h{x, 0.0, 0.0};
  if (trace) trace->h[0] = h;
  for (int i = 0; i < kL; ++i) {
    std::array<double, kW> u{};
    for (int r = 0; r < out_dim(i); ++r) {
      double acc = p.bias[static_cast<std::size_t>(i)][r];
      for (int c = 0; c < in_dim(i); ++c) {
        acc += softplus(p.matrix[static_cast<std::size_t>(i)][r * in_dim(i) + c]) * h[static_cast<std::size_t>(c)];
      }
      u[static_cast<std::size_t>(r)] = acc;
    }
    std::array<double, kW> next = u;
    if (i < kL - 1) {
      for (int r = 0; r < out_dim(i); ++r) {
        const double ur = u[static_cast<std::size_t>(r)];
        next[static_cast<std::size_t>(r)] = ur + std::tanh(p.factor[static_cast<std::size_t>(i)][r]) * std::tanh(ur);
      }
    }
    if (trace) {
      trace->u[static_cast<std::size_t>(i)] = u;
      trace->h[static_cast<std::size_t>(i + 1)] = next;
    }
    h = next;
  }
  return h[0];
}

struct ChannelGrads {
  std::array<double*, kL> matrix{};
  std::array<double*, kL> bias{};
  std::array<double*, kL - 1> factor{};
};

// Backpropagates d(logit) through a recorded trace; returns d/dx.
double logits_backward(const ChannelParams& p, const Trace& t, double g_logit, const ChannelGrads& g) {
  std::array<double, kW> dh{g_logit, 0.0, 0.0};
  for (int i = kL - 1; i >= 0; --i) {
    std::array<double, kW> du = dh;
    if (i < kL - 1) {
      for (int r = 0; r < out_dim(i); ++r) {
        const double ur = t.u[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)];
        const double ta = std::tanh(p.factor[static_cast<std::size_t>(i)][r]);
        const double tu = std::tanh(ur);
        du[static_cast<std::size_t>(r)] = dh[static_cast<std::size_t>(r)] * (1.0 + ta * (1.0 - tu * tu));
        if (g.factor[static_cast<std::size_t>(i)]) {
          g.factor[static_cast<std::size_t>(i)][r] += dh[static_cast<std::size_t>(r)] * tu * (1.0 - ta * ta);
        }
      }
    }
    std::array<double, kW> dprev{};
    for (int r = 0; r < out_dim(i); ++r) {
      const double d = du[static_cast<std::size_t>(r)];
      if (g.bias[static_cast<std::size_t>(i)]) g.bias[static_cast<std::size_t>(i)][r] += d;
      for (int c = 0; c < in_dim(i); ++c) {
        const double raw = p.matrix[static_cast<std::size_t>(i)][r * in_dim(i) + c];
        const double hp = t.h[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
        if (g.matrix[static_cast<std::size_t>(i)]) {
          g.matrix[static_cast<std::size_t>(i)][r * in_dim(i) + c] += d * hp * sigmoid(raw);
        }
        dprev[static_cast<std::size_t>(c)] += softplus(raw) * d;
      }
    }
    dh = dprev;
  }
  return dh[0];
}

struct BinProbability {
  double p;
  double dp_dupper;
  double dp_dlower;
  bool clamped;
};

BinProbability bin_probability(double upper, double lower) {
  const double s = (upper + lower) > 0.0 ? -1.0 : 1.0;
  const double su = sigmoid(s * upper), sl = sigmoid(s * lower);
  const double d = su - sl;
  const double p = std::abs(d);
  const double sd = d >= 0.0 ? 1.0 : -1.0;
  const bool floored = !(p >= kLikelihoodFloor);
  return {floored ? kLikelihoodFloor : std::min(p, 1.0), sd * s * su * (1.0 - su), -sd * s * sl * (1.0 - sl), floored};
}

std::vector<const Tensor*> param_tensors(const ParameterStore& store) {
  std::vector<const Tensor*> t;
  for (int i = 0; i < kL; ++i) t.push_back(&store.at(matrix_name(i)).value());
  for (int i = 0; i < kL; ++i) t.push_back(&store.at(bias_name(i)).value());
  for (int i = 0; i < kL - 1; ++i) t.push_back(&store.at(factor_name(i)).value());
  return t;
}

}  // namespace

void FactorizedPrior::make(ParameterStore& store, int channels, Rng& rng) {
  constexpr double init_scale = 10.0;
  const double scale = std::pow(init_scale, 1.0 / kL);
  for (int i = 0; i < kL; ++i) {
    const double init = std::log(std::expm1(1.0 / scale / out_dim(i)));
    store.create(matrix_name(i), Tensor(Shape{channels, out_dim(i), in_dim(i)}, init));
  }
  for (int i = 0; i < kL; ++i) store.create(bias_name(i), init::uniform(Shape{channels, out_dim(i)}, 0.5, rng));
  for (int i = 0; i < kL - 1; ++i) store.create(factor_name(i), Tensor(Shape{channels, out_dim(i)}, 0.0));
}

int FactorizedPrior::channels(const ParameterStore& store) { return store.at(matrix_name(0)).shape()[0]; }

double FactorizedPrior::cdf(const ParameterStore& store, int channel, double x) {
  const auto t = param_tensors(store);
  return sigmoid(logits(channel_params(t, channel), x, nullptr));
}

double FactorizedPrior::probability(const ParameterStore& store, int channel, double k) {
  const auto t = param_tensors(store);
  const ChannelParams p = channel_params(t, channel);
  return bin_probability(logits(p, k + 0.5, nullptr), logits(p, k - 0.5, nullptr)).p;
}

Var FactorizedPrior::likelihood(const ParameterStore& store, const Var& z_hat) {
  const auto& s = z_hat.shape();
  const int channels = FactorizedPrior::channels(store);
  if (s.size() != 4 || s[1] != channels) {
    throw std::invalid_argument("factorized prior: expected " + std::to_string(channels) + " channels, got " +
                                shape_str(s));
  }
  const auto tensors = param_tensors(store);
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor out(s);
  for (int n = 0; n < s[0]; ++n) {
    for (int c = 0; c < channels; ++c) {
      const ChannelParams p = channel_params(tensors, c);
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = z_hat.value().data[base + i];
        out.data[base + i] = bin_probability(logits(p, v + 0.5, nullptr), logits(p, v - 0.5, nullptr)).p;
      }
    }
  }

  std::vector<Var> inputs{z_hat};
  for (int i = 0; i < kL; ++i) inputs.push_back(store.at(matrix_name(i)));
  for (int i = 0; i < kL; ++i) inputs.push_back(store.at(bias_name(i)));
  for (int i = 0; i < kL - 1; ++i) inputs.push_back(store.at(factor_name(i)));

  return make_result(std::move(out), std::move(inputs), [plane, channels](Node& self) {
    std::vector<const Tensor*> params;
    std::vector<Tensor*> grads;
    for (std::size_t k = 1; k < self.parents.size(); ++k) {
      params.push_back(&self.parents[k]->value);
      grads.push_back(self.parents[k]->requires_grad ? &self.parents[k]->grad_buffer() : nullptr);
    }
    Tensor* gz = self.parents[0] && self.parents[0]->requires_grad ? &self.parents[0]->grad_buffer() : nullptr;
    const auto& zv = self.parents[0]->value;
    const int batch = zv.dim(0);
    for (int c = 0; c < channels; ++c) {
      const ChannelParams p = channel_params(params, c);
      ChannelGrads g;
      for (int i = 0; i < kL; ++i) {
        if (Tensor* t = grads[static_cast<std::size_t>(i)]) {
          g.matrix[static_cast<std::size_t>(i)] = t->data.data() + static_cast<std::size_t>(c) * out_dim(i) * in_dim(i);
        }
        if (Tensor* t = grads[static_cast<std::size_t>(kL + i)]) {
          g.bias[static_cast<std::size_t>(i)] = t->data.data() + static_cast<std::size_t>(c) * out_dim(i);
        }
      }
      for (int i = 0; i < kL - 1; ++i) {
        if (Tensor* t = grads[static_cast<std::size_t>(2 * kL + i)]) {
          g.factor[static_cast<std::size_t>(i)] = t->data.data() + static_cast<std::size_t>(c) * out_dim(i);
        }
      }
      for (int n = 0; n < batch; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double gp = self.grad.data[base + i];
          if (gp == 0.0) continue;
          const double v = zv.data[base + i];
          Trace tu, tl;
          const double upper = logits(p, v + 0.5, &tu);
          const double lower = logits(p, v - 0.5, &tl);
          const BinProbability b = bin_probability(upper, lower);
          if (b.clamped && gp >= 0.0) continue;
          double dx = logits_backward(p, tu, gp * b.dp_dupper, g);
          dx += logits_backward(p, tl, gp * b.dp_dlower, g);
          if (gz) gz->data[base + i] += dx;
        }
      }
    }
  });
}

}  // namespace feds
