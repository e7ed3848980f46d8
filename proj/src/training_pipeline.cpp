#include "feds/training_pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "feds/image_io.hpp"

namespace feds {

// --- data ------------------------------------------------------------------

namespace {

// planar [3, H, W]
double px(const Tensor& t, int c, int y, int x) { return t.data[(static_cast<std::size_t>(c) * t.dim(1) + y) * t.dim(2) + x]; }

}  // namespace

std::vector<Tensor> synthetic_images(int count, int height, int width, std::uint64_t seed) {
  if (count < 0 || height < 1 || width < 1) throw std::invalid_argument("synthetic_images: bad size");
  std::vector<Tensor> out;
  for (int n = 0; n < count; ++n) {
    Rng rng(derive_seed(seed, 0x5e7, static_cast<std::uint64_t>(n)));
    Tensor img(Shape{3, height, width});
    double base[3], gy[3], gx[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = rng.uniform(0.2, 0.8);
      gy[c] = rng.uniform(-0.3, 0.3);
      gx[c] = rng.uniform(-0.3, 0.3);
    }
    struct Wave {
      double fy, fx, phase, amp[3];
    };
    std::vector<Wave> waves(3);
    for (auto& w : waves) {
      const double f = rng.uniform(0.02, 0.25), th = rng.uniform(0.0, std::numbers::pi);
      w.fy = f * std::sin(th);
      w.fx = f * std::cos(th);
      w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (double& a : w.amp) a = rng.uniform(-0.12, 0.12);
    }
    struct Disc {
      double cy, cx, r, col[3];
    };
    std::vector<Disc> discs(2 + rng.below(3));
    for (auto& d : discs) {
      d.cy = rng.uniform(0.0, height);
      d.cx = rng.uniform(0.0, width);
      d.r = rng.uniform(0.08, 0.3) * std::min(height, width);
      for (double& c : d.col) c = rng.uniform(0.0, 1.0);
    }
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double v = static_cast<double>(y) / height, u = static_cast<double>(x) / width;
        double px[3];
        for (int c = 0; c < 3; ++c) px[c] = base[c] + gy[c] * (v - 0.5) + gx[c] * (u - 0.5);
        for (const auto& w : waves) {
          const double s = std::sin(w.fy * y + w.fx * x + w.phase);
          for (int c = 0; c < 3; ++c) px[c] += w.amp[c] * s;
        }
        for (const auto& d : discs) {
          const double dy = y - d.cy, dx = x - d.cx;
          if (dy * dy + dx * dx < d.r * d.r) {
            for (int c = 0; c < 3; ++c) px[c] = 0.6 * d.col[c] + 0.4 * px[c];
          }
        }
        for (int c = 0; c < 3; ++c) {
          img.data[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * width + x] =
              std::clamp(px[c] + 0.02 * (rng.uniform() - 0.5), 0.0, 1.0);
        }
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

Tensor downscale(const Tensor& img, int f) {
  if (f < 1) throw std::invalid_argument("downscale: factor must be >= 1");
  if (f == 1) return img;
  const int h = img.dim(1) / f, w = img.dim(2) / f;
  if (h < 1 || w < 1) throw std::invalid_argument("downscale: factor larger than the image");
  Tensor out(Shape{3, h, w});
  const double inv = 1.0 / (f * f);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int dy = 0; dy < f; ++dy) {
          for (int dx = 0; dx < f; ++dx) s += px(img, c, y * f + dy, x * f + dx);
        }
        out.data[(static_cast<std::size_t>(c) * h + y) * w + x] = s * inv;
      }
    }
  }
  return out;
}

Tensor rotate90(const Tensor& img, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return img;
  const int h = img.dim(1), w = img.dim(2);
  const int oh = (k % 2) ? w : h, ow = (k % 2) ? h : w;
  Tensor out(Shape{3, oh, ow});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        int sy = 0, sx = 0;
        if (k == 1) {
          sy = x;
          sx = w - 1 - y;
        } else if (k == 2) {
          sy = h - 1 - y;
          sx = w - 1 - x;
        } else {
          sy = h - 1 - x;
          sx = y;
        }
        out.data[(static_cast<std::size_t>(c) * oh + y) * ow + x] = px(img, c, sy, sx);
      }
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& img) {
  const int h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.data[(static_cast<std::size_t>(c) * h + y) * w + x] = px(img, c, y, w - 1 - x);
    }
  }
  return out;
}

namespace {

void check_crop(int crop) {
  if (crop < kPadMultiple || crop % kPadMultiple != 0) {
    throw std::invalid_argument("crop size " + std::to_string(crop) + " must be a positive multiple of 64");
  }
}

}  // namespace

PatchStream::PatchStream(const DatasetSpec& spec, std::ostream* warn) : crop_(spec.crop_size), aug_(spec.augmentations) {
  check_crop(crop_);
  for (const auto& p : spec.image_paths) {
    try {
      Tensor img = load_image(p);
      if (spec.rescale_target && *spec.rescale_target > 0) {
        const int longer = std::max(img.dim(1), img.dim(2));
        const int f = (longer + *spec.rescale_target - 1) / *spec.rescale_target;
        if (f > 1) img = downscale(img, f);
      }
      images_.push_back(std::move(img));
    } catch (const std::exception& e) {
      if (warn) *warn << "warning: skipping " << p.string() << ": " << e.what() << '\n';
    }
  }
  if (images_.empty()) throw std::invalid_argument("dataset has no usable images");
}

PatchStream::PatchStream(std::vector<Tensor> images, int crop_size, Augmentations aug)
    : images_(std::move(images)), crop_(crop_size), aug_(aug) {
  check_crop(crop_);
  if (images_.empty()) throw std::invalid_argument("dataset has no usable images");
  for (const auto& t : images_) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw std::invalid_argument("dataset images must be [3, H, W]");
  }
}

Tensor PatchStream::patch(Rng& rng) const {
  // every draw happens unconditionally so the stream layout never depends on image sizes
  const auto idx = rng.below(images_.size());
  const auto rot = rng.below(4);
  const auto scale = 1 + rng.below(2);
  const auto flip = rng.below(2);
  const auto ry = rng.next_u64(), rx = rng.next_u64();

  Tensor img = images_[idx];
  if (aug_.scaling && scale > 1 && std::min(img.dim(1), img.dim(2)) / static_cast<int>(scale) >= crop_) {
    img = downscale(img, static_cast<int>(scale));
  }
  if (aug_.rotation) img = rotate90(img, static_cast<int>(rot));
  if (aug_.horizontal_flip && flip) img = flip_horizontal(img);
  const int h = img.dim(1), w = img.dim(2);
  const int y0 = h > crop_ ? static_cast<int>(ry % static_cast<std::uint64_t>(h - crop_ + 1)) : 0;
  const int x0 = w > crop_ ? static_cast<int>(rx % static_cast<std::uint64_t>(w - crop_ + 1)) : 0;
  Tensor out(Shape{3, crop_, crop_});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < crop_; ++y) {
      const int sy = std::min(y0 + y, h - 1);
      for (int x = 0; x < crop_; ++x) {
        out.data[(static_cast<std::size_t>(c) * crop_ + y) * crop_ + x] = px(img, c, sy, std::min(x0 + x, w - 1));
      }
    }
  }
  return out;
}

Tensor PatchStream::batch(int batch_size, Rng& rng) const {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  Tensor out(Shape{batch_size, 3, crop_, crop_});
  const std::size_t n = static_cast<std::size_t>(3) * crop_ * crop_;
  for (int b = 0; b < batch_size; ++b) {
    const Tensor p = patch(rng);
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return out;
}

// --- optimizer ---------------------------------------------------------------

void adam_step(ParameterStore& params, AdamState& state, const OptimizerSpec& spec, double lr) {
  const auto& names = params.names();
  if (state.m.empty()) {
    for (const auto& n : names) {
      state.m.emplace_back(params.at(n).shape());
      state.v.emplace_back(params.at(n).shape());
    }
  }
  if (state.m.size() != names.size()) throw std::logic_error("optimizer state does not match the parameter list");

  double scale = 1.0;
  if (spec.clip_norm) {
    double sq = 0.0;
    for (const auto& n : names) {
      const Var& p = params.at(n);
      if (!p.requires_grad() || !p.has_grad()) continue;
      for (double g : p.grad().data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > *spec.clip_norm) scale = *spec.clip_norm / norm;
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(spec.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(spec.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < names.size(); ++k) {
    Var& p = params.at(names[k]);
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& m = state.m[k].data;
    auto& v = state.v[k].data;
    const auto& g = p.grad().data;
    auto& w = p.mutable_value().data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * scale;
      m[i] = spec.beta1 * m[i] + (1.0 - spec.beta1) * gi;
      v[i] = spec.beta2 * v[i] + (1.0 - spec.beta2) * gi * gi;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + spec.eps);
    }
  }
}

// --- checkpoints -------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void put_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& o, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_array(std::vector<std::uint8_t>& o, const std::string& name, const Tensor& t) {
  put_u32(o, static_cast<std::uint32_t>(name.size()));
  o.insert(o.end(), name.begin(), name.end());
  put_u32(o, static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) put_u32(o, static_cast<std::uint32_t>(d));
  for (double d : t.data) put_f64(o, d);
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t pos) : b_(b), pos_(pos) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::pair<std::string, Tensor> array() {
    const std::uint32_t len = u32();
    need(len);
    std::string name(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
    pos_ += len;
    const std::uint32_t nd = u32();
    if (nd > 8) throw std::runtime_error("checkpoint: corrupt array header for " + name);
    Shape s;
    for (std::uint32_t i = 0; i < nd; ++i) s.push_back(static_cast<int>(u32()));
    const std::size_t n = shape_numel(s);
    need(n * 8);
    Tensor t(s);
    for (double& d : t.data) d = f64();
    return {std::move(name), std::move(t)};
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw std::runtime_error("checkpoint: file truncated");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_;
};

long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long out = std::stol(v, &pos);
    if (pos == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config key " + key + ": expected integer, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config key " + key + ": expected number, got '" + v + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long out = std::stoull(v, &pos);
    if (pos == v.size() && !v.empty() && v[0] != '-') return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument(key + ": expected unsigned integer, got '" + v + "'");
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config key " + key + ": expected true/false, got '" + v + "'");
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  std::map<std::string, std::string> kv = c.cfg.to_kv();
  kv["feds.lambda_index"] = std::to_string(c.lambda_index);
  kv["feds.lambda"] = fmt_double(c.weights.lambda);
  kv["feds.alpha"] = fmt_double(c.weights.alpha);
  kv["feds.beta"] = fmt_double(c.weights.beta);
  kv["feds.gamma"] = fmt_double(c.weights.gamma);
  kv["feds.distortion"] = to_string(c.weights.distortion);
  kv["state.stage"] = to_string(c.stage);
  kv["state.complete"] = c.stage_complete ? "true" : "false";
  kv["state.iteration"] = std::to_string(c.iteration);
  kv["state.seed"] = std::to_string(c.seed);
  kv["state.adam_step"] = std::to_string(c.adam.step);

  std::string text = std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion) + "\n";
  for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
  text += "end\n";
  std::vector<std::uint8_t> out(text.begin(), text.end());

  put_u32(out, static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [name, t] : c.params) put_array(out, name, t);
  if (!c.adam.m.empty() && c.adam.m.size() != c.params.size()) throw std::logic_error("checkpoint: adam state size mismatch");
  put_u32(out, static_cast<std::uint32_t>(c.adam.m.size()));
  for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
    put_array(out, c.params[i].first + ".m", c.adam.m[i]);
    put_array(out, c.params[i].first + ".v", c.adam.v[i]);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto line = [&]() {
    std::string s;
    while (pos < bytes.size() && bytes[pos] != '\n') s.push_back(static_cast<char>(bytes[pos++]));
    if (pos >= bytes.size()) throw std::runtime_error("checkpoint: truncated config block");
    ++pos;
    return s;
  };
  const std::string magic = std::string(kCheckpointMagic) + " ";
  const std::string head = bytes.size() >= magic.size() ? line() : std::string();
  if (!head.starts_with(magic)) throw std::runtime_error("not a checkpoint file (bad magic)");
  if (head != magic + std::to_string(kCheckpointVersion)) {
    throw std::runtime_error("checkpoint version mismatch: '" + head.substr(magic.size()) + "', expected " +
                             std::to_string(kCheckpointVersion));
  }
  std::map<std::string, std::string> kv;
  for (std::string l = line(); l != "end"; l = line()) {
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: bad config line '" + l + "'");
    kv[l.substr(0, eq)] = l.substr(eq + 1);
  }
  Checkpoint c;
  std::map<std::string, std::string> net;
  for (const auto& [k, v] : kv) {
    if (k.starts_with("network.")) net[k] = v;
  }
  c.cfg = NetworkConfig::from_kv(net);
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("checkpoint: missing key " + k);
    return it->second;
  };
  c.lambda_index = static_cast<int>(parse_long("feds.lambda_index", get("feds.lambda_index")));
  c.weights.lambda = parse_double("feds.lambda", get("feds.lambda"));
  c.weights.alpha = parse_double("feds.alpha", get("feds.alpha"));
  c.weights.beta = parse_double("feds.beta", get("feds.beta"));
  c.weights.gamma = parse_double("feds.gamma", get("feds.gamma"));
  c.weights.distortion = distortion_from_string(get("feds.distortion"));
  c.stage = stage_from_string(get("state.stage"));
  c.stage_complete = parse_flag("state.complete", get("state.complete"));
  c.iteration = parse_long("state.iteration", get("state.iteration"));
  c.seed = parse_u64("state.seed", get("state.seed"));
  c.adam.step = parse_long("state.adam_step", get("state.adam_step"));

  ByteReader r(bytes, pos);
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) c.params.push_back(r.array());
  const std::uint32_t na = r.u32();
  if (na != 0 && na != n) throw std::runtime_error("checkpoint: optimizer state does not match parameters");
  for (std::uint32_t i = 0; i < na; ++i) {
    c.adam.m.push_back(r.array().second);
    c.adam.v.push_back(r.array().second);
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return c;
}

void checkpoint_save(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

Checkpoint make_checkpoint(const CodecModel& model, const AdamState& adam, Stage stage, bool complete, long iteration,
                           std::uint64_t seed, const FEDSWeights& weights) {
  Checkpoint c;
  c.cfg = model.cfg;
  c.lambda_index = model.lambda_index;
  c.weights = weights;
  c.stage = stage;
  c.stage_complete = complete;
  c.iteration = iteration;
  c.seed = seed;
  for (const auto& n : model.params.names()) c.params.emplace_back(n, model.params.at(n).value());
  c.adam = adam;
  return c;
}

void load_weights(CodecModel& model, const Checkpoint& c) {
  const auto& names = model.params.names();
  if (names.size() != c.params.size()) {
    throw std::invalid_argument("checkpoint has " + std::to_string(c.params.size()) + " arrays, model expects " +
                                std::to_string(names.size()) + " (" + to_string(c.cfg.role) + " checkpoint vs " +
                                to_string(model.cfg.role) + " model)");
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& [name, t] = c.params[i];
    if (name != names[i]) throw std::invalid_argument("checkpoint array '" + name + "' where model expects '" + names[i] + "'");
    Var& p = model.params.at(name);
    if (p.shape() != t.shape) {
      throw std::invalid_argument("checkpoint shape mismatch for " + name + ": " + shape_str(t.shape) + " vs model " +
                                  shape_str(p.shape()));
    }
  }
  for (const auto& [name, t] : c.params) model.params.at(name).mutable_value() = t;
}

CodecModel model_from_checkpoint(const Checkpoint& c) {
  CodecModel m = CodecModel::create(c.cfg, 0);
  load_weights(m, c);
  m.lambda_index = c.lambda_index;
  return m;
}

// --- training ----------------------------------------------------------------

long stage_step_offset(Stage stage, double scale) {
  return stage == Stage::finetune ? stage_plan(Stage::distill, scale).total_iterations : 0;
}

std::string log_record(long iter, Stage stage, const LossBreakdown& b, double lr) {
  nlohmann::ordered_json j;
  j["iter"] = iter;
  j["stage"] = to_string(stage);
  j["D"] = b.D;
  j["R_y"] = b.R_y;
  j["R_z"] = b.R_z;
  j["L_out"] = b.L_out;
  j["L_feat"] = b.L_feat;
  j["L_lat"] = b.L_lat;
  j["total"] = b.total;
  j["lr"] = lr;
  return j.dump();
}

namespace {

std::string breakdown_text(const LossBreakdown& b) {
  std::ostringstream s;
  s << "D=" << b.D << " R_y=" << b.R_y << " R_z=" << b.R_z << " L_out=" << b.L_out << " L_feat=" << b.L_feat
    << " L_lat=" << b.L_lat << " total=" << b.total;
  return s.str();
}

void require_stage(const Checkpoint* c, Stage stage, bool complete, const std::string& what) {
  if (!c || c->stage != stage || c->stage_complete != complete) throw std::invalid_argument(what);
}

void check_teacher_student(const NetworkConfig& t, const NetworkConfig& s) {
  if (t.N != s.N) {
    throw std::invalid_argument("teacher N=" + std::to_string(t.N) + " and student N=" + std::to_string(s.N) +
                                " give feature taps of different widths");
  }
  if (s.M > t.M) {
    throw std::invalid_argument("student M=" + std::to_string(s.M) + " exceeds teacher M=" + std::to_string(t.M));
  }
}

}  // namespace

Checkpoint run_stage(const StageInputs& in, const PatchStream& data, const TrainOptions& opt) {
  opt.weights.validate();
  const StagePlan plan = stage_plan(in.stage, opt.scale);
  CodecModel model;
  AdamState adam;
  long start = 0;

  auto fresh = [&](const NetworkConfig& cfg) {
    model = CodecModel::create(cfg, derive_seed(opt.seed, kStreamInit, static_cast<std::uint64_t>(cfg.role)));
    model.lambda_index = opt.lambda_index;
  };
  auto resume = [&](const Checkpoint& c) {
    model = model_from_checkpoint(c);
    adam = c.adam;
    start = c.iteration;
  };

  std::optional<CodecModel> teacher;
  switch (in.stage) {
    case Stage::teacher:
      if (in.start) {
        require_stage(in.start, Stage::teacher, false, "train-teacher can only resume an unfinished teacher checkpoint");
        resume(*in.start);
      } else {
        fresh(in.fresh_config);
      }
      break;
    case Stage::distill:
      require_stage(in.teacher, Stage::teacher, true, "distill requires a completed teacher checkpoint");
      if (in.start) {
        require_stage(in.start, Stage::distill, false, "distill can only resume an unfinished distill checkpoint");
        resume(*in.start);
      } else {
        fresh(in.fresh_config);
      }
      teacher = model_from_checkpoint(*in.teacher);
      teacher->params.set_trainable(false);
      check_teacher_student(teacher->cfg, model.cfg);
      break;
    case Stage::finetune:
      if (!in.start) throw std::invalid_argument("finetune requires a completed distill checkpoint");
      if (in.start->stage == Stage::distill) {
        require_stage(in.start, Stage::distill, true, "finetune requires a completed distill checkpoint");
        model = model_from_checkpoint(*in.start);
        adam = in.start->adam;
      } else {
        require_stage(in.start, Stage::finetune, false, "finetune requires a completed distill checkpoint");
        resume(*in.start);
      }
      break;
  }
  if (start > plan.total_iterations) throw std::invalid_argument("checkpoint iteration beyond the stage plan");

  const bool kd = in.stage == Stage::distill && (opt.weights.alpha > 0 || opt.weights.beta > 0 || opt.weights.gamma > 0);
  const long offset = stage_step_offset(in.stage, opt.scale);
  long it = start;
  for (; it < plan.total_iterations; ++it) {
    if (opt.stop_after >= 0 && it >= opt.stop_after) break;
    const auto step = static_cast<std::uint64_t>(offset + it);
    Rng batch_rng(derive_seed(opt.seed, kStreamBatch, step));
    const Var x(data.batch(opt.optimizer.batch_size, batch_rng));
    Rng noise(derive_seed(opt.seed, kStreamNoise, step));

    model.params.zero_grad();
    const ForwardOutput f = forward(model, x, QuantMode::train, &noise);
    LossResult loss;
    if (kd) {
      DistillationBatchOutputs b;
      {
        NoGradGuard guard;
        Rng tnoise(derive_seed(opt.seed, kStreamTeacherNoise, step));
        b.teacher = teacher_outputs(forward(*teacher, x, QuantMode::train, &tnoise));
      }
      b.student = student_outputs(f);
      loss = student_total_loss(b, x, opt.weights);
    } else {
      loss = rd_loss(f, x, opt.weights);
    }
    if (!std::isfinite(loss.terms.total)) {
      const std::string msg = "non-finite loss in stage " + to_string(in.stage) + " at iteration " + std::to_string(it) +
                              " (batch index " + std::to_string(step) + "): " + breakdown_text(loss.terms);
      if (opt.log) *opt.log << "{\"error\": \"" << msg << "\"}\n";
      throw std::runtime_error(msg);
    }
    backward(loss.total);
    const double lr = plan.lr_at(it);
    adam_step(model.params, adam, opt.optimizer, lr);

    if (opt.log && opt.log_every > 0 && (it % opt.log_every == 0 || it + 1 == plan.total_iterations)) {
      *opt.log << log_record(it, in.stage, loss.terms, lr) << '\n';
    }
    if (opt.checkpoint_every > 0 && !opt.checkpoint_path.empty() && (it + 1) % opt.checkpoint_every == 0 &&
        it + 1 < plan.total_iterations) {
      checkpoint_save(make_checkpoint(model, adam, in.stage, false, it + 1, opt.seed, opt.weights), opt.checkpoint_path);
    }
  }
  return make_checkpoint(model, adam, in.stage, it == plan.total_iterations, it, opt.seed, opt.weights);
}

double validation_loss(const CodecModel& model, const std::vector<Tensor>& images, const FEDSWeights& w) {
  if (images.empty()) throw std::invalid_argument("validation set is empty");
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& raw : images) {
    const ImageBuffer img = pad_image(raw);
    Tensor x = img.pixels;
    x.shape.insert(x.shape.begin(), 1);
    const double pixels = static_cast<double>(img.original_height) * img.original_width;
    const ForwardOutput f = forward(model, Var(std::move(x)), QuantMode::eval, nullptr, pixels);
    const Tensor rec = crop_to_original(f.x_hat.value(), img.original_height, img.original_width);
    Tensor a = raw, b = rec;
    a.shape.insert(a.shape.begin(), 1);
    b.shape.insert(b.shape.begin(), 1);
    const double d = distortion(Var(std::move(a)), Var(std::move(b)), w.distortion).item();
    total += d + w.lambda * (f.rate_y.item() + f.rate_z.item());
  }
  return total / static_cast<double>(images.size());
}

// --- configuration -------------------------------------------------------------

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot read config file " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  int n = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(f, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

Settings resolve_settings(Role role, const std::map<std::string, std::string>& config) {
  Settings s;
  std::map<std::string, std::string> net;
  net["network.role"] = to_string(role);
  for (const auto& [k, v] : config) {
    if (k.starts_with("network.")) net[k] = v;
  }
  s.network = NetworkConfig::from_kv(net);

  bool lambda_set = false;
  for (const auto& [k, v] : config) {
    if (k.starts_with("network.")) continue;
    if (k == "train.batch_size") s.optimizer.batch_size = static_cast<int>(parse_long(k, v));
    else if (k == "train.seed") s.seed = parse_u64(k, v);
    else if (k == "train.scale") s.scale = parse_double(k, v);
    else if (k == "train.clip_norm") s.optimizer.clip_norm = parse_double(k, v);
    else if (k == "train.log_every") s.log_every = parse_long(k, v);
    else if (k == "train.checkpoint_every") s.checkpoint_every = parse_long(k, v);
    else if (k == "feds.lambda_index") s.lambda_index = static_cast<int>(parse_long(k, v));
    else if (k == "feds.lambda") {
      s.weights.lambda = parse_double(k, v);
      lambda_set = true;
    } else if (k == "feds.alpha") s.weights.alpha = parse_double(k, v);
    else if (k == "feds.beta") s.weights.beta = parse_double(k, v);
    else if (k == "feds.gamma") s.weights.gamma = parse_double(k, v);
    else if (k == "feds.distortion") s.weights.distortion = distortion_from_string(v);
    else if (k == "data.dir") s.data_dir = v;
    else if (k == "data.crop_size") s.crop_size = static_cast<int>(parse_long(k, v));
    else if (k == "data.rescale_target") {
      const long t = parse_long(k, v);
      s.rescale_target = t > 0 ? std::optional<int>(static_cast<int>(t)) : std::nullopt;
    } else if (k == "data.augment") {
      s.augmentations = {false, false, false};
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (item == "rotation") s.augmentations.rotation = true;
        else if (item == "scaling") s.augmentations.scaling = true;
        else if (item == "flip" || item == "horizontal_flip") s.augmentations.horizontal_flip = true;
        else if (item != "none" && !item.empty()) throw std::invalid_argument("unknown augmentation '" + item + "'");
      }
    } else if (k == "data.synthetic_count") s.synthetic_count = static_cast<int>(parse_long(k, v));
    else if (k == "data.synthetic_size") s.synthetic_size = static_cast<int>(parse_long(k, v));
    else throw std::invalid_argument("unknown config key " + k);
  }
  if (!lambda_set) s.weights.lambda = feds_weights_for(s.lambda_index).lambda;
  if (const char* env = std::getenv("FEDS_SEED"); env && *env) s.seed = parse_u64("FEDS_SEED", env);
  if (s.optimizer.batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  s.weights.validate();
  return s;
}

}  // namespace feds
