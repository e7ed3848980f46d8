#pragma once

#include <span>
#include <string>
#include <vector>

#include "feds/autograd.hpp"
#include "feds/codec_networks.hpp"
#include "feds/nn.hpp"

namespace feds {

enum class QuantMode { train, eval };

inline constexpr double kSigmaMin = 0.11;
inline constexpr double kLikelihoodFloor = 1e-9;

// train: v + u, u ~ U[-0.5, 0.5) drawn from `noise` (zero noise when null).
// eval:  round(v - mu) + mu, no gradient. `mu` may be undefined (treated as 0).
Var quantize(const Var& v, const Var& mu, QuantMode mode, Rng* noise);

struct GaussianParams {
  Var mu;
  Var sigma;
};

double standard_normal_cdf(double x);
// Discretized Gaussian mass of the unit bin centred on v, clamped to [1e-9, 1].
double gaussian_likelihood(double v, double mu, double sigma);
// The same bin mass before the floor clamp (sigma is still clamped).
double gaussian_bin_mass(double v, double mu, double sigma);
Var gaussian_likelihood(const Var& v_hat, const GaussianParams& params);

// Elementwise -log2(p).
Tensor rate_bits(const Tensor& p);
double total_bits(const Tensor& p);
// Differentiable sum of -log2(p).
Var total_bits(const Var& p);

struct SliceLayout {
  int num_slices = 0;
  std::vector<int> channels_per_slice;

  int offset(int slice) const;
  int total() const;
};

SliceLayout slice_layout(int M, int num_slices);

// Learned per-channel monotone CDF for z (cascade of softplus-constrained
// affine maps with tanh gates, four hidden widths of 3).
class FactorizedPrior {
 public:
  static constexpr int kHidden = 3;
  static constexpr int kLayers = 5;

  static void make(ParameterStore& store, int channels, Rng& rng);
  static Var likelihood(const ParameterStore& store, const Var& z_hat);
  // Unit-bin probability for symbol k of one channel (no autograd).
  static double probability(const ParameterStore& store, int channel, double k);
  static double cdf(const ParameterStore& store, int channel, double x);
  static int channels(const ParameterStore& store);
};

void make_charm(ParameterStore& store, const NetworkConfig& cfg, Rng& rng);
// Gaussian parameters of slice i from side info and already-quantized slices 0..i-1.
GaussianParams charm_predict_slice(const ParameterStore& store, const NetworkConfig& cfg, const SliceLayout& layout,
                                   const HyperSideInfo& side, std::span<const Var> previous, int slice);

struct ChannelEntropyRanking {
  std::vector<double> mean_entropy;  // bits, per channel
  std::vector<int> order;            // descending entropy, ties by ascending index
};

struct EntropyProfile {
  Tensor entropy_map;  // same shape as the latent, bits
  ChannelEntropyRanking ranking;
};

// Entropy maps and channel ranking from quantized latents and their Gaussian
// parameters. Means are taken over batch and spatial positions.
EntropyProfile channel_entropy_profile(const Tensor& y_hat, const Tensor& mu, const Tensor& sigma);
ChannelEntropyRanking rank_from_means(std::vector<double> mean_entropy);
std::vector<int> rank_channels_topk(std::span<const double> mean_entropy, int k);

}  // namespace feds
