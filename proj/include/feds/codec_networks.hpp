#pragma once

#include <map>
#include <string>
#include <vector>

#include "feds/autograd.hpp"
#include "feds/nn.hpp"

namespace feds {

enum class Role { teacher, student };

std::string to_string(Role role);
Role role_from_string(const std::string& s);

// Architecture hyperparameters for one codec. Presets come from
// build_network_config(); every field may be overridden for toy runs.
struct NetworkConfig {
  Role role = Role::student;
  int N = 128;                  // transform width
  int M = 160;                  // latent channels
  int res_blocks_per_group = 1;
  int num_res_groups = 3;       // one group per down-sampling stage 1..3
  bool attention_enabled = false;
  int window_size = 8;
  int num_heads = 4;
  int num_slices = 5;
  int hyper_channels = 192;     // width of z
  int mlp_ratio = 4;            // Swin MLP expansion

  std::map<std::string, std::string> to_kv() const;
  static NetworkConfig from_kv(const std::map<std::string, std::string>& kv);
  // Throws std::invalid_argument on inconsistent fields.
  void validate() const;

  bool operator==(const NetworkConfig&) const = default;
};

NetworkConfig build_network_config(Role role);

// Padded RGB image, planar [3, H, W] with H, W multiples of 64.
struct ImageBuffer {
  Tensor pixels;
  int original_height = 0;
  int original_width = 0;

  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
};

inline constexpr int kPadMultiple = 64;

// raw: [3, H, W] in [0, 1]. Edge-replicates bottom/right to multiples of 64.
ImageBuffer pad_image(const Tensor& raw);
// Crops a [3, H, W] or [1, 3, H, W] tensor back to the recorded original size.
Tensor crop_to_original(const Tensor& padded, int original_height, int original_width);

struct FeatureTap {
  int stage_index = 0;  // 1..3
  Var values;           // [B, N, h, w]
};

struct AnalysisOutput {
  Var y;
  std::vector<FeatureTap> taps;
};

struct HyperSideInfo {
  Var mean;   // S_mean, [B, M, h, w]
  Var scale;  // S_scale, strictly positive
};

// --- building blocks -------------------------------------------------------

inline constexpr double kLeakySlope = 0.01;

void make_residual_group(ParameterStore& store, const std::string& prefix, int channels, int depth, Rng& rng);
// `depth` residual blocks: conv3x3 -> LeakyReLU -> conv3x3, plus identity skip.
Var residual_group(const ParameterStore& store, const std::string& prefix, const Var& x, int depth);

struct AttentionResult {
  Var output;   // [G, n, d]
  Var weights;  // [G, n, n], rows are probability vectors
};

// Scaled cosine attention for G = windows * heads groups; group g uses head g % heads.
// tau: [heads] (clamped >= 0.01), bias: [heads, n, n] or undefined,
// mask: additive constant [G, n, n] or empty.
AttentionResult window_attention(const Var& q, const Var& k, const Var& v, const Var& tau, const Var& bias,
                                 const Tensor& mask = {});

inline constexpr double kMinTau = 0.01;
inline constexpr double kNormEps = 1e-12;

// Index maps between an NCHW feature map and window tokens [B * nW, ws*ws, C].
// The map is zero-padded to a multiple of ws and cyclically shifted by `shift`.
struct WindowLayout {
  int batch, channels, height, width;
  int window, shift;
  int padded_h, padded_w;

  int windows_per_image() const { return (padded_h / window) * (padded_w / window); }
  int tokens_per_window() const { return window * window; }
};

WindowLayout make_window_layout(const Shape& nchw, int window, int shift);
Var window_partition(const Var& x, const WindowLayout& layout);
Var window_reverse(const Var& tokens, const WindowLayout& layout);
// Additive attention mask [nW, n, n] separating regions wrapped by the shift.
Tensor shifted_window_mask(const WindowLayout& layout);
// Relative offset index [n, n] into a (2ws-1)^2 bias table.
std::vector<std::size_t> relative_position_index(int window);

void make_swin_block(ParameterStore& store, const std::string& prefix, int channels, int heads, int window,
                     int mlp_ratio, Rng& rng);
Var swin_v2_block(const ParameterStore& store, const std::string& prefix, const Var& x, int heads, int window,
                  bool shifted);

// --- transforms -----------------------------------------------------------

void make_codec_transforms(ParameterStore& store, const NetworkConfig& cfg, Rng& rng);

AnalysisOutput analysis_transform(const ParameterStore& store, const NetworkConfig& cfg, const Var& x);
Var synthesis_transform(const ParameterStore& store, const NetworkConfig& cfg, const Var& y_hat);
Var hyper_analysis(const ParameterStore& store, const NetworkConfig& cfg, const Var& y);
HyperSideInfo hyper_synthesis(const ParameterStore& store, const NetworkConfig& cfg, const Var& z_hat);

}  // namespace feds
