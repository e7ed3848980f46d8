#include <stdexcept>

#include "feds/codec_networks.hpp"

namespace feds {

AttentionResult window_attention(const Var& q, const Var& k, const Var& v, const Var& tau, const Var& bias,
                                 const Tensor& mask) {
  if (q.shape() != k.shape() || q.shape().size() != 3 || v.shape()[0] != q.shape()[0] ||
      v.shape()[1] != q.shape()[1]) {
    throw std::invalid_argument("window_attention: Q/K/V must be [G, n, d] with matching G and n");
  }
  const Var qn = ops::normalize_rows(q, kNormEps);
  const Var kn = ops::normalize_rows(k, kNormEps);
  Var logits = ops::divide_groups(ops::bmm(qn, kn, true), ops::clamp_min(tau, kMinTau));
  if (bias.defined()) logits = ops::add_groups(logits, bias);
  if (!mask.data.empty()) logits = ops::add_const(logits, mask);
  Var weights = ops::softmax_rows(logits);
  Var out = ops::bmm(weights, v, false);
  return {out, weights};
}

WindowLayout make_window_layout(const Shape& nchw, int window, int shift) {
  if (nchw.size() != 4) throw std::invalid_argument("window layout: expected NCHW");
  if (window <= 0 || shift < 0 || shift >= window) throw std::invalid_argument("window layout: bad window/shift");
  WindowLayout l{nchw[0], nchw[1], nchw[2], nchw[3], window, shift, 0, 0};
  l.padded_h = (l.height + window - 1) / window * window;
  l.padded_w = (l.width + window - 1) / window * window;
  return l;
}

Var window_partition(const Var& x, const WindowLayout& l) {
  const int nw = l.windows_per_image(), n = l.tokens_per_window(), per_row = l.padded_w / l.window;
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(l.batch) * nw * n * l.channels);
  std::size_t o = 0;
  for (int b = 0; b < l.batch; ++b) {
    for (int w = 0; w < nw; ++w) {
      const int wy = w / per_row, wx = w % per_row;
      for (int t = 0; t < n; ++t) {
        const int py = wy * l.window + t / l.window;
        const int px = wx * l.window + t % l.window;
        const int sy = (py + l.shift) % l.padded_h;
        const int sx = (px + l.shift) % l.padded_w;
        const bool inside = sy < l.height && sx < l.width;
        for (int c = 0; c < l.channels; ++c) {
          (*index)[o++] = inside ? ((static_cast<std::size_t>(b) * l.channels + c) * l.height + sy) * l.width + sx
                                 : ops::kGatherZero;
        }
      }
    }
  }
  return ops::gather(x, index, Shape{l.batch * nw, n, l.channels});
}

Var window_reverse(const Var& tokens, const WindowLayout& l) {
  const int nw = l.windows_per_image(), n = l.tokens_per_window(), per_row = l.padded_w / l.window;
  if (tokens.shape() != Shape{l.batch * nw, n, l.channels}) {
    throw std::invalid_argument("window_reverse: token shape " + shape_str(tokens.shape()) + " does not match layout");
  }
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(l.batch) * l.channels * l.height *
                                                          l.width);
  std::size_t o = 0;
  for (int b = 0; b < l.batch; ++b) {
    for (int c = 0; c < l.channels; ++c) {
      for (int y = 0; y < l.height; ++y) {
        const int py = (y - l.shift + l.padded_h) % l.padded_h;
        for (int x = 0; x < l.width; ++x) {
          const int px = (x - l.shift + l.padded_w) % l.padded_w;
          const int w = (py / l.window) * per_row + px / l.window;
          const int t = (py % l.window) * l.window + px % l.window;
          (*index)[o++] = ((static_cast<std::size_t>(b) * nw + w) * n + t) * l.channels + c;
        }
      }
    }
  }
  return ops::gather(tokens, index, Shape{l.batch, l.channels, l.height, l.width});
}

Tensor shifted_window_mask(const WindowLayout& l) {
  const int nw = l.windows_per_image(), n = l.tokens_per_window(), per_row = l.padded_w / l.window;
  Tensor mask(Shape{nw, n, n});
  if (l.shift == 0) return mask;
  auto region = [&](int p, int size) {
    if (p < size - l.window) return 0;
    if (p < size - l.shift) return 1;
    return 2;
  };
  std::vector<int> label(static_cast<std::size_t>(n));
  for (int w = 0; w < nw; ++w) {
    const int wy = w / per_row, wx = w % per_row;
    for (int t = 0; t < n; ++t) {
      const int py = wy * l.window + t / l.window;
      const int px = wx * l.window + t % l.window;
      label[static_cast<std::size_t>(t)] = region(py, l.padded_h) * 3 + region(px, l.padded_w);
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (label[static_cast<std::size_t>(i)] != label[static_cast<std::size_t>(j)]) {
          mask.data[(static_cast<std::size_t>(w) * n + i) * n + j] = -100.0;
        }
      }
    }
  }
  return mask;
}

std::vector<std::size_t> relative_position_index(int window) {
  const int n = window * window, span = 2 * window - 1;
  std::vector<std::size_t> idx(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int dy = i / window - j / window + window - 1;
      const int dx = i % window - j % window + window - 1;
      idx[static_cast<std::size_t>(i) * n + j] = static_cast<std::size_t>(dy * span + dx);
    }
  }
  return idx;
}

void make_swin_block(ParameterStore& store, const std::string& prefix, int channels, int heads, int window,
                     int mlp_ratio, Rng& rng) {
  if (channels % heads != 0) throw std::invalid_argument("swin block: channels must be divisible by heads");
  const int span = 2 * window - 1;
  layers::make_linear(store, prefix + ".qkv", channels, 3 * channels, rng);
  store.create(prefix + ".tau", Tensor(Shape{heads}, 1.0));
  store.create(prefix + ".rel_bias", Tensor(Shape{heads, span * span}, 0.0));
  layers::make_linear(store, prefix + ".proj", channels, channels, rng);
  layers::make_layer_norm(store, prefix + ".norm1", channels);
  layers::make_linear(store, prefix + ".fc1", channels, mlp_ratio * channels, rng);
  layers::make_linear(store, prefix + ".fc2", mlp_ratio * channels, channels, rng);
  layers::make_layer_norm(store, prefix + ".norm2", channels);
}

namespace {

// [G0, n, 3C] -> [G0 * heads, n, C / heads] for part 0 (Q), 1 (K) or 2 (V).
Var split_heads(const Var& qkv, int part, int heads) {
  const int g0 = qkv.shape()[0], n = qkv.shape()[1], c = qkv.shape()[2] / 3, dh = c / heads;
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(g0) * heads * n * dh);
  std::size_t o = 0;
  for (int g = 0; g < g0; ++g) {
    for (int h = 0; h < heads; ++h) {
      for (int t = 0; t < n; ++t) {
        for (int d = 0; d < dh; ++d) {
          (*index)[o++] = (static_cast<std::size_t>(g) * n + t) * 3 * c + part * c + h * dh + d;
        }
      }
    }
  }
  return ops::gather(qkv, index, Shape{g0 * heads, n, dh});
}

Var merge_heads(const Var& x, int heads) {
  const int gh = x.shape()[0], n = x.shape()[1], dh = x.shape()[2], g0 = gh / heads, c = dh * heads;
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(g0) * n * c);
  std::size_t o = 0;
  for (int g = 0; g < g0; ++g) {
    for (int t = 0; t < n; ++t) {
      for (int h = 0; h < heads; ++h) {
        for (int d = 0; d < dh; ++d) {
          (*index)[o++] = ((static_cast<std::size_t>(g) * heads + h) * n + t) * dh + d;
        }
      }
    }
  }
  return ops::gather(x, index, Shape{g0, n, c});
}

// NCHW <-> [B, HW, C]
Var to_tokens(const Var& x) {
  const int b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(b) * hw * c);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i) {
    for (int p = 0; p < hw; ++p) {
      for (int ch = 0; ch < c; ++ch) (*index)[o++] = (static_cast<std::size_t>(i) * c + ch) * hw + p;
    }
  }
  return ops::gather(x, index, Shape{b, hw, c});
}

Var from_tokens(const Var& t, const Shape& nchw) {
  const int b = nchw[0], c = nchw[1], hw = nchw[2] * nchw[3];
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(b) * hw * c);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      for (int p = 0; p < hw; ++p) (*index)[o++] = (static_cast<std::size_t>(i) * hw + p) * c + ch;
    }
  }
  return ops::gather(t, index, nchw);
}

}  // namespace

Var swin_v2_block(const ParameterStore& store, const std::string& prefix, const Var& x, int heads, int window,
                  bool shifted) {
  const WindowLayout layout = make_window_layout(x.shape(), window, shifted ? window / 2 : 0);
  const int nw = layout.windows_per_image(), n = layout.tokens_per_window();

  const Var tokens = window_partition(x, layout);
  const Var qkv = layers::linear(store, prefix + ".qkv", tokens);

  const auto rel = relative_position_index(window);
  const int table = store.at(prefix + ".rel_bias").shape()[1];
  auto bias_index = std::make_shared<std::vector<std::size_t>>();
  bias_index->reserve(static_cast<std::size_t>(heads) * n * n);
  for (int h = 0; h < heads; ++h) {
    for (std::size_t r : rel) bias_index->push_back(static_cast<std::size_t>(h) * table + r);
  }
  const Var bias = ops::gather(store.at(prefix + ".rel_bias"), bias_index, Shape{heads, n, n});

  Tensor mask;
  if (layout.shift > 0) {
    const Tensor window_mask = shifted_window_mask(layout);
    const int groups = layout.batch * nw * heads;
    mask = Tensor(Shape{groups, n, n});
    const std::size_t nn = static_cast<std::size_t>(n) * n;
    for (int g = 0; g < groups; ++g) {
      const int w = (g / heads) % nw;
      std::copy_n(window_mask.data.begin() + static_cast<std::ptrdiff_t>(w * nn), nn,
                  mask.data.begin() + static_cast<std::ptrdiff_t>(g * nn));
    }
  }

  const auto att = window_attention(split_heads(qkv, 0, heads), split_heads(qkv, 1, heads),
                                    split_heads(qkv, 2, heads), store.at(prefix + ".tau"), bias, mask);
  Var attn = layers::linear(store, prefix + ".proj", merge_heads(att.output, heads));
  attn = layers::layer_norm(store, prefix + ".norm1", attn);
  const Var x1 = ops::add(x, window_reverse(attn, layout));

  Var mlp = layers::linear(store, prefix + ".fc1", to_tokens(x1));
  mlp = layers::linear(store, prefix + ".fc2", ops::gelu(mlp));
  mlp = layers::layer_norm(store, prefix + ".norm2", mlp);
  return ops::add(x1, from_tokens(mlp, x1.shape()));
}

}  // namespace feds
