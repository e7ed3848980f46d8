#include "feds/codec_networks.hpp"

#include <stdexcept>

namespace feds {

std::string to_string(Role role) { return role == Role::teacher ? "teacher" : "student"; }

Role role_from_string(const std::string& s) {
  if (s == "teacher") return Role::teacher;
  if (s == "student") return Role::student;
  throw std::invalid_argument("unknown role '" + s + "' (expected teacher or student)");
}

NetworkConfig build_network_config(Role role) {
  NetworkConfig c;
  c.role = role;
  c.N = 128;
  c.num_res_groups = 3;
  c.window_size = 8;
  c.num_heads = 4;
  c.hyper_channels = 192;
  if (role == Role::teacher) {
    c.M = 400;
    c.res_blocks_per_group = 6;
    c.attention_enabled = true;
    c.num_slices = 8;
  } else {
    c.M = 160;
    c.res_blocks_per_group = 1;
    c.attention_enabled = false;
    c.num_slices = 5;
  }
  return c;
}

std::map<std::string, std::string> NetworkConfig::to_kv() const {
  return {
      {"network.role", to_string(role)},
      {"network.N", std::to_string(N)},
      {"network.M", std::to_string(M)},
      {"network.res_blocks_per_group", std::to_string(res_blocks_per_group)},
      {"network.num_res_groups", std::to_string(num_res_groups)},
      {"network.attention_enabled", attention_enabled ? "true" : "false"},
      {"network.window_size", std::to_string(window_size)},
      {"network.num_heads", std::to_string(num_heads)},
      {"network.num_slices", std::to_string(num_slices)},
      {"network.hyper_channels", std::to_string(hyper_channels)},
      {"network.mlp_ratio", std::to_string(mlp_ratio)},
  };
}

namespace {

int parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  int out = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw std::invalid_argument("config key " + key + ": expected integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config key " + key + ": expected true/false, got '" + v + "'");
}

}  // namespace

NetworkConfig NetworkConfig::from_kv(const std::map<std::string, std::string>& kv) {
  auto role_it = kv.find("network.role");
  NetworkConfig c = build_network_config(role_it == kv.end() ? Role::student : role_from_string(role_it->second));
  for (const auto& [key, value] : kv) {
    if (!key.starts_with("network.")) continue;
    if (key == "network.role") continue;
    if (key == "network.N") c.N = parse_int(key, value);
    else if (key == "network.M") c.M = parse_int(key, value);
    else if (key == "network.res_blocks_per_group") c.res_blocks_per_group = parse_int(key, value);
    else if (key == "network.num_res_groups") c.num_res_groups = parse_int(key, value);
    else if (key == "network.attention_enabled") c.attention_enabled = parse_bool(key, value);
    else if (key == "network.window_size") c.window_size = parse_int(key, value);
    else if (key == "network.num_heads") c.num_heads = parse_int(key, value);
    else if (key == "network.num_slices") c.num_slices = parse_int(key, value);
    else if (key == "network.hyper_channels") c.hyper_channels = parse_int(key, value);
    else if (key == "network.mlp_ratio") c.mlp_ratio = parse_int(key, value);
    else throw std::invalid_argument("unknown config key " + key);
  }
  c.validate();
  return c;
}

void NetworkConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw std::invalid_argument(std::string("network config: ") + name + " must be positive");
  };
  positive(N, "N");
  positive(M, "M");
  positive(res_blocks_per_group, "res_blocks_per_group");
  positive(num_res_groups, "num_res_groups");
  positive(window_size, "window_size");
  positive(num_heads, "num_heads");
  positive(num_slices, "num_slices");
  positive(hyper_channels, "hyper_channels");
  positive(mlp_ratio, "mlp_ratio");
  if (num_res_groups > 3) throw std::invalid_argument("network config: at most 3 residual groups (stages 1-3)");
  if (num_slices > M) throw std::invalid_argument("network config: num_slices exceeds M");
  if (attention_enabled && N % num_heads != 0) {
    throw std::invalid_argument("network config: N must be divisible by num_heads");
  }
}

ImageBuffer pad_image(const Tensor& raw) {
  if (raw.ndim() != 3 || raw.dim(0) != 3) throw std::invalid_argument("pad_image: expected [3, H, W] input");
  const int h = raw.dim(1), w = raw.dim(2);
  if (h < 1 || w < 1) throw std::invalid_argument("pad_image: empty image");
  const int ph = (h + kPadMultiple - 1) / kPadMultiple * kPadMultiple;
  const int pw = (w + kPadMultiple - 1) / kPadMultiple * kPadMultiple;
  ImageBuffer out;
  out.original_height = h;
  out.original_width = w;
  out.pixels = Tensor(Shape{3, ph, pw});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < ph; ++y) {
      const int sy = std::min(y, h - 1);
      for (int x = 0; x < pw; ++x) {
        const int sx = std::min(x, w - 1);
        out.pixels.data[(static_cast<std::size_t>(c) * ph + y) * pw + x] =
            raw.data[(static_cast<std::size_t>(c) * h + sy) * w + sx];
      }
    }
  }
  return out;
}

Tensor crop_to_original(const Tensor& padded, int original_height, int original_width) {
  const bool batched = padded.ndim() == 4;
  if (!(padded.ndim() == 3 || (batched && padded.dim(0) == 1))) {
    throw std::invalid_argument("crop_to_original: expected [3,H,W] or [1,3,H,W]");
  }
  const int c = padded.dim(-3), h = padded.dim(-2), w = padded.dim(-1);
  if (original_height > h || original_width > w) throw std::invalid_argument("crop_to_original: crop exceeds image");
  Tensor out(Shape{c, original_height, original_width});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < original_height; ++y) {
      for (int x = 0; x < original_width; ++x) {
        out.data[(static_cast<std::size_t>(ch) * original_height + y) * original_width + x] =
            padded.data[(static_cast<std::size_t>(ch) * h + y) * w + x];
      }
    }
  }
  return out;
}

void make_residual_group(ParameterStore& store, const std::string& prefix, int channels, int depth, Rng& rng) {
  for (int i = 0; i < depth; ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    layers::make_conv(store, p + ".conv1", channels, channels, 3, rng);
    layers::make_conv(store, p + ".conv2", channels, channels, 3, rng);
  }
}

Var residual_group(const ParameterStore& store, const std::string& prefix, const Var& x, int depth) {
  if (depth < 1) throw std::invalid_argument("residual_group: depth must be >= 1");
  Var h = x;
  for (int i = 0; i < depth; ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    Var r = layers::conv(store, p + ".conv1", h, 1);
    r = ops::leaky_relu(r, kLeakySlope);
    r = layers::conv(store, p + ".conv2", r, 1);
    h = ops::add(h, r);
  }
  return h;
}

namespace {

void make_attention_module(ParameterStore& store, const std::string& prefix, const NetworkConfig& cfg, Rng& rng) {
  make_swin_block(store, prefix + ".block0", cfg.N, cfg.num_heads, cfg.window_size, cfg.mlp_ratio, rng);
  make_swin_block(store, prefix + ".block1", cfg.N, cfg.num_heads, cfg.window_size, cfg.mlp_ratio, rng);
}

// One unshifted and one shifted block.
Var attention_module(const ParameterStore& store, const std::string& prefix, const NetworkConfig& cfg, const Var& x) {
  Var h = swin_v2_block(store, prefix + ".block0", x, cfg.num_heads, cfg.window_size, false);
  return swin_v2_block(store, prefix + ".block1", h, cfg.num_heads, cfg.window_size, true);
}

bool has_group(const NetworkConfig& cfg, int stage) { return stage <= cfg.num_res_groups; }

}  // namespace

void make_codec_transforms(ParameterStore& store, const NetworkConfig& cfg, Rng& rng) {
  cfg.validate();
  const int n = cfg.N, m = cfg.M, z = cfg.hyper_channels;
  // analysis
  layers::make_conv(store, "g_a.down1", 3, n, 5, rng);
  if (cfg.attention_enabled) make_attention_module(store, "g_a.attn1", cfg, rng);
  if (has_group(cfg, 1)) make_residual_group(store, "g_a.rg1", n, cfg.res_blocks_per_group, rng);
  layers::make_conv(store, "g_a.down2", n, n, 5, rng);
  if (cfg.attention_enabled) make_attention_module(store, "g_a.attn2", cfg, rng);
  if (has_group(cfg, 2)) make_residual_group(store, "g_a.rg2", n, cfg.res_blocks_per_group, rng);
  layers::make_conv(store, "g_a.down3", n, n, 5, rng);
  if (has_group(cfg, 3)) make_residual_group(store, "g_a.rg3", n, cfg.res_blocks_per_group, rng);
  layers::make_conv(store, "g_a.down4", n, m, 5, rng);
  // synthesis, mirrored
  layers::make_deconv(store, "g_s.up4", m, n, 5, rng);
  if (has_group(cfg, 3)) make_residual_group(store, "g_s.rg3", n, cfg.res_blocks_per_group, rng);
  layers::make_deconv(store, "g_s.up3", n, n, 5, rng);
  if (has_group(cfg, 2)) make_residual_group(store, "g_s.rg2", n, cfg.res_blocks_per_group, rng);
  if (cfg.attention_enabled) make_attention_module(store, "g_s.attn2", cfg, rng);
  layers::make_deconv(store, "g_s.up2", n, n, 5, rng);
  if (has_group(cfg, 1)) make_residual_group(store, "g_s.rg1", n, cfg.res_blocks_per_group, rng);
  if (cfg.attention_enabled) make_attention_module(store, "g_s.attn1", cfg, rng);
  layers::make_deconv(store, "g_s.up1", n, 3, 5, rng);
  // hyperprior
  layers::make_conv(store, "h_a.conv1", m, n, 5, rng);
  layers::make_conv(store, "h_a.conv2", n, z, 5, rng);
  layers::make_deconv(store, "h_s.up1", z, n, 5, rng);
  layers::make_deconv(store, "h_s.up2", n, 2 * m, 5, rng);
}

AnalysisOutput analysis_transform(const ParameterStore& store, const NetworkConfig& cfg, const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("analysis_transform: expected [B, 3, H, W], got " + shape_str(s));
  if (s[2] % 16 != 0 || s[3] % 16 != 0) {
    throw std::invalid_argument("analysis_transform: spatial dims must be multiples of 16 (pad the image first)");
  }
  AnalysisOutput out;
  Var h = ops::leaky_relu(layers::conv(store, "g_a.down1", x, 2), kLeakySlope);
  if (cfg.attention_enabled) h = attention_module(store, "g_a.attn1", cfg, h);
  if (has_group(cfg, 1)) h = residual_group(store, "g_a.rg1", h, cfg.res_blocks_per_group);
  out.taps.push_back({1, h});
  h = ops::leaky_relu(layers::conv(store, "g_a.down2", h, 2), kLeakySlope);
  if (cfg.attention_enabled) h = attention_module(store, "g_a.attn2", cfg, h);
  if (has_group(cfg, 2)) h = residual_group(store, "g_a.rg2", h, cfg.res_blocks_per_group);
  out.taps.push_back({2, h});
  h = ops::leaky_relu(layers::conv(store, "g_a.down3", h, 2), kLeakySlope);
  if (has_group(cfg, 3)) h = residual_group(store, "g_a.rg3", h, cfg.res_blocks_per_group);
  out.taps.push_back({3, h});
  out.y = layers::conv(store, "g_a.down4", h, 2);
  if (out.y.shape()[1] != cfg.M) throw std::invalid_argument("analysis_transform: weights do not produce M channels");
  return out;
}

Var synthesis_transform(const ParameterStore& store, const NetworkConfig& cfg, const Var& y_hat) {
  if (y_hat.shape().size() != 4 || y_hat.shape()[1] != cfg.M) {
    throw std::invalid_argument("synthesis_transform: expected " + std::to_string(cfg.M) + " latent channels, got " +
                                shape_str(y_hat.shape()));
  }
  Var h = ops::leaky_relu(layers::deconv(store, "g_s.up4", y_hat), kLeakySlope);
  if (has_group(cfg, 3)) h = residual_group(store, "g_s.rg3", h, cfg.res_blocks_per_group);
  h = ops::leaky_relu(layers::deconv(store, "g_s.up3", h), kLeakySlope);
  if (has_group(cfg, 2)) h = residual_group(store, "g_s.rg2", h, cfg.res_blocks_per_group);
  if (cfg.attention_enabled) h = attention_module(store, "g_s.attn2", cfg, h);
  h = ops::leaky_relu(layers::deconv(store, "g_s.up2", h), kLeakySlope);
  if (has_group(cfg, 1)) h = residual_group(store, "g_s.rg1", h, cfg.res_blocks_per_group);
  if (cfg.attention_enabled) h = attention_module(store, "g_s.attn1", cfg, h);
  return layers::deconv(store, "g_s.up1", h);
}

Var hyper_analysis(const ParameterStore& store, const NetworkConfig& cfg, const Var& y) {
  if (y.shape().size() != 4 || y.shape()[1] != cfg.M) throw std::invalid_argument("hyper_analysis: channel mismatch");
  if (y.shape()[2] % 4 != 0 || y.shape()[3] % 4 != 0) {
    throw std::invalid_argument("hyper_analysis: latent dims must be multiples of 4");
  }
  Var h = ops::leaky_relu(layers::conv(store, "h_a.conv1", y, 2), kLeakySlope);
  return layers::conv(store, "h_a.conv2", h, 2);
}

HyperSideInfo hyper_synthesis(const ParameterStore& store, const NetworkConfig& cfg, const Var& z_hat) {
  if (z_hat.shape().size() != 4 || z_hat.shape()[1] != cfg.hyper_channels) {
    throw std::invalid_argument("hyper_synthesis: channel mismatch");
  }
  Var h = ops::leaky_relu(layers::deconv(store, "h_s.up1", z_hat), kLeakySlope);
  h = layers::deconv(store, "h_s.up2", h);
  return {ops::slice_channels(h, 0, cfg.M), ops::softplus(ops::slice_channels(h, cfg.M, cfg.M))};
}

}  // namespace feds
