#include "feds/codec_model.hpp"

#include <stdexcept>

namespace feds {

CodecModel CodecModel::create(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CodecModel m;
  m.cfg = cfg;
  m.layout = slice_layout(cfg.M, cfg.num_slices);
  Rng rng(seed);
  make_codec_transforms(m.params, cfg, rng);
  FactorizedPrior::make(m.params, cfg.hyper_channels, rng);
  make_charm(m.params, cfg, rng);
  m.params.set_trainable(true);
  return m;
}

ForwardOutput forward(const CodecModel& model, const Var& x, QuantMode mode, Rng* noise, double pixels) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("forward: expected [B, 3, H, W], got " + shape_str(s));
  if (s[2] % kPadMultiple != 0 || s[3] % kPadMultiple != 0) {
    throw std::invalid_argument("forward: input " + shape_str(s) + " is not padded to a multiple of 64");
  }
  if (pixels <= 0.0) pixels = static_cast<double>(s[0]) * s[2] * s[3];

  ForwardOutput out;
  out.analysis = analysis_transform(model.params, model.cfg, x);
  const Var& y = out.analysis.y;
  out.z = hyper_analysis(model.params, model.cfg, y);
  out.z_hat = quantize(out.z, Var(), mode, noise);
  out.z_likelihood = FactorizedPrior::likelihood(model.params, out.z_hat);
  const HyperSideInfo side = hyper_synthesis(model.params, model.cfg, out.z_hat);

  std::vector<Var> y_hat_slices, mu_slices, sigma_slices;
  for (int i = 0; i < model.layout.num_slices; ++i) {
    const GaussianParams p = charm_predict_slice(model.params, model.cfg, model.layout, side, y_hat_slices, i);
    const Var y_i =
        ops::slice_channels(y, model.layout.offset(i), model.layout.channels_per_slice[static_cast<std::size_t>(i)]);
    y_hat_slices.push_back(quantize(y_i, p.mu, mode, noise));
    mu_slices.push_back(p.mu);
    sigma_slices.push_back(p.sigma);
  }
  out.y_hat = ops::concat_channels(y_hat_slices);
  out.y_params.mu = ops::concat_channels(mu_slices);
  out.y_params.sigma = ops::concat_channels(sigma_slices);
  out.y_likelihood = gaussian_likelihood(out.y_hat, out.y_params);

  out.x_hat = synthesis_transform(model.params, model.cfg, out.y_hat);
  if (mode == QuantMode::eval) out.x_hat = ops::clamp(out.x_hat, 0.0, 1.0);

  out.rate_y = ops::scale(total_bits(out.y_likelihood), 1.0 / pixels);
  out.rate_z = ops::scale(total_bits(out.z_likelihood), 1.0 / pixels);
  return out;
}

}  // namespace feds
