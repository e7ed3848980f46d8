#pragma once

#include <cstdint>

#include "feds/codec_networks.hpp"
#include "feds/entropy_engine.hpp"

namespace feds {

// Full codec: transforms, hyperprior, factorized prior on z and ChARM slices.
struct CodecModel {
  NetworkConfig cfg;
  ParameterStore params;
  SliceLayout layout;
  int lambda_index = 2;  // one trained model per rate point

  static CodecModel create(const NetworkConfig& cfg, std::uint64_t seed);
};

struct ForwardOutput {
  AnalysisOutput analysis;
  Var z;
  Var z_hat;
  Var y_hat;  // all M channels, slice order
  GaussianParams y_params;
  Var y_likelihood;
  Var z_likelihood;
  Var x_hat;   // clamped to [0, 1] in eval mode only
  Var rate_y;  // bits per pixel
  Var rate_z;
};

// x: [B, 3, H, W] padded. `pixels` is the pixel count used for bpp
// (defaults to B*H*W). Noise draws: z first, then slices in order.
ForwardOutput forward(const CodecModel& model, const Var& x, QuantMode mode, Rng* noise, double pixels = 0.0);

}  // namespace feds
