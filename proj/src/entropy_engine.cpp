#include "feds/entropy_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace feds {

Var quantize(const Var& v, const Var& mu, QuantMode mode, Rng* noise) {
  if (mu.defined()) require_same_shape(v.value(), mu.value(), "quantize");
  if (mode == QuantMode::train) {
    Tensor u(v.shape());
    if (noise) {
      for (double& e : u.data) e = noise->uniform() - 0.5;
    }
    return ops::add_const(v, u);
  }
  Tensor out(v.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double m = mu.defined() ? mu.value().data[i] : 0.0;
    out.data[i] = std::nearbyint(v.value().data[i] - m) + m;
  }
  return Var(std::move(out), false);
}

double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

namespace {

constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

struct BinMass {
  double p;
  double dp_dr;      // w.r.t. the residual v - mu
  double dp_dsigma;  // zero when sigma is clamped
  bool clamped;
};

// Upper-tail Mills ratio Q(x) / phi(x), continued fraction; used for x >= 2.
double mills_ratio(double x) {
  double f = x;
  for (int k = 120; k >= 1; --k) f = x + k / f;
  return 1.0 / f;
}

BinMass bin_mass(double r, double sigma_raw) {
  const bool sigma_clamped = sigma_raw < kSigmaMin;
  const double sigma = sigma_clamped ? kSigmaMin : sigma_raw;
  const double ar = std::abs(r);
  const double a = (0.5 - ar) / sigma;
  const double b = (-0.5 - ar) / sigma;
  const double p = standard_normal_cdf(a) - standard_normal_cdf(b);
  const double sgn = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
  if (p >= kLikelihoodFloor) {
    const double pa = normal_pdf(a), pb = normal_pdf(b);
    return {std::min(p, 1.0), sgn * (pb - pa) / sigma, sigma_clamped ? 0.0 : (b * pb - a * pa) / sigma, false};
  }
  // Floored bin. The value stays at the floor, but the slope handed back is
  // floor * d(ln p)/d(.) of the true tail mass, so -log p keeps pulling sigma
  // up instead of sitting on a flat 30-bit plateau. With A = -a, B = -b:
  // p = phi(A) (R(A) - e^{-t/s^2} R(B)).
  const double A = -a, B = -b;
  if (A < 2.0) return {kLikelihoodFloor, 0.0, 0.0, true};
  const double e = std::exp(-ar / (sigma * sigma));
  const double k = mills_ratio(A) - e * mills_ratio(B);
  if (!(k > 0.0)) return {kLikelihoodFloor, 0.0, 0.0, true};
  const double dlnp_dt = (e - 1.0) / (sigma * k);
  const double dlnp_ds = (A - e * B) / (sigma * k);
  return {kLikelihoodFloor, sgn * kLikelihoodFloor * dlnp_dt, sigma_clamped ? 0.0 : kLikelihoodFloor * dlnp_ds, true};
}

}  // namespace

double gaussian_likelihood(double v, double mu, double sigma) { return bin_mass(v - mu, sigma).p; }

double gaussian_bin_mass(double v, double mu, double sigma) {
  sigma = std::max(sigma, kSigmaMin);
  const double ar = std::abs(v - mu);
  return standard_normal_cdf((0.5 - ar) / sigma) - standard_normal_cdf((-0.5 - ar) / sigma);
}

Var gaussian_likelihood(const Var& v_hat, const GaussianParams& params) {
  require_same_shape(v_hat.value(), params.mu.value(), "gaussian_likelihood (mu)");
  require_same_shape(v_hat.value(), params.sigma.value(), "gaussian_likelihood (sigma)");
  Tensor out(v_hat.shape());
  const auto& v = v_hat.value().data;
  const auto& mu = params.mu.value().data;
  const auto& sg = params.sigma.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = bin_mass(v[i] - mu[i], sg[i]).p;
  return make_result(std::move(out), {v_hat, params.mu, params.sigma}, [](Node& self) {
    auto grad_of = [&self](std::size_t k) -> Tensor* {
      auto& p = self.parents[k];
      return (p && p->requires_grad) ? &p->grad_buffer() : nullptr;
    };
    Tensor* gv = grad_of(0);
    Tensor* gm = grad_of(1);
    Tensor* gs = grad_of(2);
    const auto& v = self.parents[0]->value.data;
    const auto& mu = self.parents[1]->value.data;
    const auto& sg = self.parents[2]->value.data;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const BinMass m = bin_mass(v[i] - mu[i], sg[i]);
      const double g = self.grad.data[i];
      // lower bound: a floored bin still passes gradients that would raise p
      if (m.clamped && g >= 0.0) continue;
      if (gv) gv->data[i] += g * m.dp_dr;
      if (gm) gm->data[i] -= g * m.dp_dr;
      if (gs) gs->data[i] += g * m.dp_dsigma;
    }
  });
}

Tensor rate_bits(const Tensor& p) {
  Tensor out(p.shape);
  for (std::size_t i = 0; i < p.numel(); ++i) {
    out.data[i] = -std::log2(std::clamp(p.data[i], kLikelihoodFloor, 1.0));
  }
  return out;
}

double total_bits(const Tensor& p) {
  double s = 0.0;
  for (double v : p.data) s -= std::log2(std::clamp(v, kLikelihoodFloor, 1.0));
  return s;
}

Var total_bits(const Var& p) { return ops::scale(ops::sum(ops::log2(p)), -1.0); }

int SliceLayout::offset(int slice) const {
  int o = 0;
  for (int i = 0; i < slice; ++i) o += channels_per_slice.at(static_cast<std::size_t>(i));
  return o;
}

int SliceLayout::total() const { return offset(num_slices); }

SliceLayout slice_layout(int M, int num_slices) {
  if (num_slices < 1) throw std::invalid_argument("slice_layout: num_slices must be >= 1");
  if (num_slices > M) throw std::invalid_argument("slice_layout: num_slices exceeds channel count");
  SliceLayout l;
  l.num_slices = num_slices;
  l.channels_per_slice.assign(static_cast<std::size_t>(num_slices), M / num_slices);
  l.channels_per_slice.back() += M % num_slices;
  return l;
}

void make_charm(ParameterStore& store, const NetworkConfig& cfg, Rng& rng) {
  const SliceLayout layout = slice_layout(cfg.M, cfg.num_slices);
  for (int i = 0; i < layout.num_slices; ++i) {
    const std::string p = "charm.slice" + std::to_string(i);
    const int in = 2 * cfg.M + layout.offset(i);
    const int c = layout.channels_per_slice[static_cast<std::size_t>(i)];
    layers::make_conv(store, p + ".conv1", in, cfg.N, 3, rng);
    layers::make_conv(store, p + ".conv2", cfg.N, cfg.N, 3, rng);
    layers::make_conv(store, p + ".mean", cfg.N, c, 1, rng);
    layers::make_conv(store, p + ".scale", cfg.N, c, 1, rng);
  }
}

GaussianParams charm_predict_slice(const ParameterStore& store, const NetworkConfig& cfg, const SliceLayout& layout,
                                   const HyperSideInfo& side, std::span<const Var> previous, int slice) {
  if (slice < 0 || slice >= layout.num_slices) throw std::invalid_argument("charm: slice index out of range");
  if (static_cast<int>(previous.size()) != slice) {
    throw std::invalid_argument("charm: slice " + std::to_string(slice) + " needs exactly " + std::to_string(slice) +
                                " previous slices, got " + std::to_string(previous.size()));
  }
  for (int j = 0; j < slice; ++j) {
    const Var& p = previous[static_cast<std::size_t>(j)];
    if (!p.defined() || p.shape().size() != 4 ||
        p.shape()[1] != layout.channels_per_slice[static_cast<std::size_t>(j)]) {
      throw std::invalid_argument("charm: previous slice " + std::to_string(j) + " missing or out of order");
    }
  }
  std::vector<Var> inputs{side.mean, side.scale};
  inputs.insert(inputs.end(), previous.begin(), previous.end());
  const Var x = ops::concat_channels(inputs);
  const std::string p = "charm.slice" + std::to_string(slice);
  if (x.shape()[1] != 2 * cfg.M + layout.offset(slice)) throw std::invalid_argument("charm: side info channel mismatch");
  Var h = ops::leaky_relu(layers::conv(store, p + ".conv1", x, 1), kLeakySlope);
  h = ops::leaky_relu(layers::conv(store, p + ".conv2", h, 1), kLeakySlope);
  GaussianParams out;
  out.mu = layers::conv(store, p + ".mean", h, 1);
  // softplus offset keeps sigma >= kSigmaMin with a nonzero gradient everywhere
  out.sigma = ops::add_scalar(ops::softplus(layers::conv(store, p + ".scale", h, 1)), kSigmaMin);
  return out;
}

ChannelEntropyRanking rank_from_means(std::vector<double> mean_entropy) {
  ChannelEntropyRanking r;
  r.mean_entropy = std::move(mean_entropy);
  r.order.resize(r.mean_entropy.size());
  for (std::size_t i = 0; i < r.order.size(); ++i) r.order[i] = static_cast<int>(i);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) {
    return r.mean_entropy[static_cast<std::size_t>(a)] > r.mean_entropy[static_cast<std::size_t>(b)];
  });
  return r;
}

std::vector<int> rank_channels_topk(std::span<const double> mean_entropy, int k) {
  if (k < 1 || k > static_cast<int>(mean_entropy.size())) {
    throw std::invalid_argument("rank_channels_topk: K=" + std::to_string(k) + " outside [1, " +
                                std::to_string(mean_entropy.size()) + "]");
  }
  auto order = rank_from_means({mean_entropy.begin(), mean_entropy.end()}).order;
  order.resize(static_cast<std::size_t>(k));
  return order;
}

EntropyProfile channel_entropy_profile(const Tensor& y_hat, const Tensor& mu, const Tensor& sigma) {
  require_same_shape(y_hat, mu, "channel_entropy_profile");
  require_same_shape(y_hat, sigma, "channel_entropy_profile");
  if (y_hat.ndim() != 4) throw std::invalid_argument("channel_entropy_profile: expected NCHW latent");
  const int batch = y_hat.dim(0), channels = y_hat.dim(1);
  const std::size_t plane = static_cast<std::size_t>(y_hat.dim(2)) * y_hat.dim(3);
  EntropyProfile out;
  out.entropy_map = Tensor(y_hat.shape);
  for (std::size_t i = 0; i < y_hat.numel(); ++i) {
    out.entropy_map.data[i] = -std::log2(gaussian_likelihood(y_hat.data[i], mu.data[i], sigma.data[i]));
  }
  std::vector<double> means(static_cast<std::size_t>(channels), 0.0);
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const double* e = out.entropy_map.data.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += e[i];
      means[static_cast<std::size_t>(c)] += s;
    }
  }
  for (double& m : means) m /= static_cast<double>(batch) * static_cast<double>(plane);
  out.ranking = rank_from_means(std::move(means));
  return out;
}

}  // namespace feds
