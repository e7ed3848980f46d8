#include "feds/bitstream_codec.hpp"

#include <algorithm>
#include <cmath>

namespace feds {

CdfTable quantize_pmf(std::span<const double> pmf, int offset) {
  const std::size_t n = pmf.size() + 1;  // + escape
  if (n > kProbTotal / 2) throw std::invalid_argument("quantize_pmf: too many symbols");
  std::vector<double> p(pmf.begin(), pmf.end());
  double mass = 0.0;
  for (double v : p) mass += std::max(v, 0.0);
  p.push_back(std::max(0.0, 1.0 - mass));

  const double budget = static_cast<double>(kProbTotal - n);
  std::vector<std::uint32_t> counts(n);
  std::uint64_t used = 0;
  std::size_t mode = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::clamp(p[i], 0.0, 1.0);
    counts[i] = static_cast<std::uint32_t>(std::floor(v * budget)) + 1;
    used += counts[i];
    if (p[i] > p[mode]) mode = i;
  }
  if (used > kProbTotal) throw std::logic_error("quantize_pmf: count overflow");
  counts[mode] += static_cast<std::uint32_t>(kProbTotal - used);

  CdfTable t;
  t.offset = offset;
  t.cdf.resize(n + 1);
  for (std::size_t i = 0; i < n; ++i) t.cdf[i + 1] = t.cdf[i] + counts[i];
  return t;
}

const std::array<double, kNumScales>& scale_table() {
  static const std::array<double, kNumScales> table = [] {
    std::array<double, kNumScales> t{};
    const double lo = std::log(kScaleMin), hi = std::log(kScaleMax);
    for (int i = 0; i < kNumScales; ++i) t[static_cast<std::size_t>(i)] = std::exp(lo + (hi - lo) * i / (kNumScales - 1));
    t.front() = kScaleMin;
    t.back() = kScaleMax;
    return t;
  }();
  return table;
}

int scale_index(double sigma) {
  const auto& t = scale_table();
  const auto it = std::lower_bound(t.begin(), t.end(), sigma);
  if (it == t.end()) return kNumScales - 1;
  return static_cast<int>(it - t.begin());
}

CdfTable build_cdf(int index) {
  if (index < 0 || index >= kNumScales) {
    throw std::invalid_argument("build_cdf: scale index " + std::to_string(index) + " outside [0, 63]");
  }
  const double s = scale_table()[static_cast<std::size_t>(index)];
  const int tail = static_cast<int>(std::ceil(6.0 * s)) + 1;
  std::vector<double> pmf;
  pmf.reserve(static_cast<std::size_t>(2 * tail + 1));
  for (int r = -tail; r <= tail; ++r) pmf.push_back(gaussian_likelihood(r, 0.0, s));
  return quantize_pmf(pmf, -tail);
}

const std::vector<CdfTable>& gaussian_tables() {
  static const std::vector<CdfTable> tables = [] {
    std::vector<CdfTable> t;
    for (int i = 0; i < kNumScales; ++i) t.push_back(build_cdf(i));
    return t;
  }();
  return tables;
}

std::vector<CdfTable> hyper_tables(const ParameterStore& params, int channels) {
  std::vector<CdfTable> t;
  std::vector<double> pmf;
  for (int c = 0; c < channels; ++c) {
    pmf.clear();
    for (int k = -kHyperTail; k <= kHyperTail; ++k) pmf.push_back(FactorizedPrior::probability(params, c, k));
    t.push_back(quantize_pmf(pmf, -kHyperTail));
  }
  return t;
}

// --- range coder -----------------------------------------------------------

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t temp = cache_;
    do {
      // the very first byte is always zero and is not written
      if (first_byte_) {
        first_byte_ = false;
      } else {
        out_.push_back(static_cast<std::uint8_t>(temp + carry));
      }
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode(std::uint32_t start, std::uint32_t size) {
  if (size == 0 || start + size > kProbTotal) throw std::logic_error("range encoder: bad interval");
  range_ >>= kProbBits;
  low_ += static_cast<std::uint64_t>(start) * range_;
  range_ *= size;
  while (range_ < (1u << 24)) {
    range_ <<= 8;
    shift_low();
  }
  info_bits_ += kProbBits - std::log2(static_cast<double>(size));
}

void RangeEncoder::encode_raw16(std::uint32_t v) {
  if (v >= kProbTotal) throw std::logic_error("range encoder: raw value exceeds 16 bits");
  encode(v, 1);
}

void RangeEncoder::encode_symbol(int value, const CdfTable& table) {
  const long j = static_cast<long>(value) - table.offset;
  if (j >= 0 && j < table.escape()) {
    const auto s = static_cast<int>(j);
    encode(table.cdf[static_cast<std::size_t>(s)], table.frequency(s));
    return;
  }
  const long raw = static_cast<long>(value) + 32768;
  if (raw < 0 || raw >= static_cast<long>(kProbTotal)) {
    throw std::out_of_range("range encoder: value " + std::to_string(value) + " cannot be escaped in 16 bits");
  }
  encode(table.cdf[static_cast<std::size_t>(table.escape())], table.frequency(table.escape()));
  encode_raw16(static_cast<std::uint32_t>(raw));
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  // the sentinel is framing, not a coded symbol, so it stays out of the tally
  const double symbol_bits = info_bits_;
  encode_raw16(kStreamSentinel);
  info_bits_ = symbol_bits;
  // settle on the value in [low, low + range) with the most trailing zero
  // bits; those zero bytes are dropped and the decoder reads them back as padding
  const std::uint64_t hi = low_ + range_ - 1;
  for (int k = 32; k >= 0; --k) {
    const std::uint64_t mask = (std::uint64_t{1} << k) - 1;
    const std::uint64_t v = (low_ + mask) & ~mask;
    if (v <= hi) {
      low_ = v;
      break;
    }
  }
  for (int i = 0; i < 5; ++i) shift_low();
  while (!out_.empty() && out_.back() == 0) out_.pop_back();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  if (pos_ >= bytes_.size()) {
    ++pos_;
    return 0;  // trimmed zero tail
  }
  return bytes_[pos_++];
}

void RangeDecoder::normalize() {
  while (range_ < (1u << 24)) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

std::uint32_t RangeDecoder::peek() {
  scaled_range_ = range_ >> kProbBits;
  const std::uint32_t v = code_ / scaled_range_;
  if (v >= kProbTotal) throw DecodeError("range decoder: corrupt stream");
  return v;
}

void RangeDecoder::consume(std::uint32_t start, std::uint32_t size) {
  code_ -= start * scaled_range_;
  range_ = scaled_range_ * size;
  normalize();
}

int RangeDecoder::decode_symbol(const CdfTable& table) {
  const std::uint32_t v = peek();
  const auto it = std::upper_bound(table.cdf.begin(), table.cdf.end(), v);
  const int s = static_cast<int>(it - table.cdf.begin()) - 1;
  consume(table.cdf[static_cast<std::size_t>(s)], table.frequency(s));
  if (s != table.escape()) return table.offset + s;
  return static_cast<int>(decode_raw16()) - 32768;
}

std::uint32_t RangeDecoder::decode_raw16() {
  const std::uint32_t v = peek();
  consume(v, 1);
  return v;
}

void RangeDecoder::finish() {
  if (decode_raw16() != kStreamSentinel) throw DecodeError("range decoder: end-of-stream sentinel missing");
  if (pos_ < bytes_.size()) throw DecodeError("range decoder: trailing bytes after stream end");
}

std::vector<std::uint8_t> rc_encode(std::span<const int> values, std::span<const CdfTable* const> tables,
                                    double* information_bits) {
  if (values.size() != tables.size()) throw std::invalid_argument("rc_encode: one table per symbol required");
  RangeEncoder enc;
  for (std::size_t i = 0; i < values.size(); ++i) enc.encode_symbol(values[i], *tables[i]);
  auto bytes = enc.finish();
  if (information_bits) *information_bits = enc.information_bits();
  return bytes;
}

std::vector<int> rc_decode(std::span<const std::uint8_t> bytes, std::span<const CdfTable* const> tables) {
  RangeDecoder dec(bytes);
  std::vector<int> out;
  out.reserve(tables.size());
  for (const CdfTable* t : tables) out.push_back(dec.decode_symbol(*t));
  dec.finish();
  return out;
}

// --- container -------------------------------------------------------------

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'F', 'E', 'D', 'S'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::vector<std::uint8_t> bytes(std::uint32_t n) {
    need(n);
    std::vector<std::uint8_t> v(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw DecodeError("container truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> BitstreamContainer::serialize() const {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.push_back(kContainerVersion);
  out.push_back(role == Role::teacher ? 0 : 1);
  out.push_back(lambda_index);
  put_u32(out, original_width);
  put_u32(out, original_height);
  put_u32(out, static_cast<std::uint32_t>(z_payload.size()));
  out.insert(out.end(), z_payload.begin(), z_payload.end());
  for (const auto& s : slice_payloads) put_u32(out, static_cast<std::uint32_t>(s.size()));
  for (const auto& s : slice_payloads) out.insert(out.end(), s.begin(), s.end());
  return out;
}

BitstreamContainer BitstreamContainer::parse(std::span<const std::uint8_t> bytes, int num_slices) {
  Reader r(bytes);
  for (std::uint8_t m : kMagic) {
    if (r.u8() != m) throw DecodeError("not a FEDS bitstream (bad magic)");
  }
  const std::uint8_t version = r.u8();
  if (version != kContainerVersion) throw DecodeError("unsupported bitstream version " + std::to_string(version));
  BitstreamContainer c;
  const std::uint8_t role = r.u8();
  if (role > 1) throw DecodeError("bad role byte " + std::to_string(role));
  c.role = role == 0 ? Role::teacher : Role::student;
  c.lambda_index = r.u8();
  c.original_width = r.u32();
  c.original_height = r.u32();
  if (c.original_width == 0 || c.original_height == 0) throw DecodeError("zero image dimension in header");
  c.z_payload = r.bytes(r.u32());
  std::vector<std::uint32_t> lengths;
  for (int i = 0; i < num_slices; ++i) lengths.push_back(r.u32());
  for (std::uint32_t n : lengths) c.slice_payloads.push_back(r.bytes(n));
  if (r.remaining() != 0) throw DecodeError("trailing bytes after last slice payload");
  return c;
}

std::size_t BitstreamContainer::size_bytes() const {
  std::size_t n = kMagic.size() + 3 + 12 + z_payload.size();
  for (const auto& s : slice_payloads) n += 4 + s.size();
  return n;
}

double BitstreamContainer::bpp() const {
  return 8.0 * static_cast<double>(size_bytes()) / (static_cast<double>(original_width) * original_height);
}

// --- image codec -----------------------------------------------------------

namespace {

void require_padded(const ImageBuffer& x) {
  if (x.pixels.ndim() != 3 || x.pixels.dim(0) != 3) throw std::invalid_argument("compress: expected [3, H, W] pixels");
  if (x.height() % kPadMultiple != 0 || x.width() % kPadMultiple != 0) {
    throw std::invalid_argument("compress: image " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
                                " is not padded to a multiple of 64");
  }
  if (x.original_height < 1 || x.original_width < 1 || x.original_height > x.height() ||
      x.original_width > x.width()) {
    throw std::invalid_argument("compress: inconsistent original dimensions");
  }
}

// Values of one slice of an NCHW tensor in (c, h, w) order, batch 0.
std::span<const double> channel_block(const Tensor& t, int channel_offset, int channels) {
  const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  return {t.data.data() + static_cast<std::size_t>(channel_offset) * plane, static_cast<std::size_t>(channels) * plane};
}

int to_symbol(double v) {
  if (!std::isfinite(v) || std::abs(v) > 1e9) throw std::runtime_error("latent value out of codable range");
  return static_cast<int>(v);
}

}  // namespace

CompressResult compress_image(const ImageBuffer& x, const CodecModel& model) {
  require_padded(x);
  NoGradGuard no_grad;
  Tensor batch = x.pixels;
  batch.shape.insert(batch.shape.begin(), 1);
  const double pixels = static_cast<double>(x.original_height) * x.original_width;
  const ForwardOutput f = forward(model, Var(std::move(batch)), QuantMode::eval, nullptr, pixels);

  CompressResult res;
  res.coded_bits = 0.0;
  auto& c = res.container;
  c.role = model.cfg.role;
  c.lambda_index = static_cast<std::uint8_t>(model.lambda_index);
  c.original_width = static_cast<std::uint32_t>(x.original_width);
  c.original_height = static_cast<std::uint32_t>(x.original_height);

  // z: per-channel factorized tables
  {
    const auto tables = hyper_tables(model.params, model.cfg.hyper_channels);
    const Tensor& z = f.z_hat.value();
    const std::size_t plane = static_cast<std::size_t>(z.dim(2)) * z.dim(3);
    std::vector<int> values;
    std::vector<const CdfTable*> tp;
    for (std::size_t i = 0; i < z.numel(); ++i) {
      values.push_back(to_symbol(z.data[i]));
      tp.push_back(&tables[i / plane]);
    }
    double bits = 0.0;
    c.z_payload = rc_encode(values, tp, &bits);
    res.coded_bits += bits;
  }

  // y: slice by slice, residuals against the scale table
  const auto& tables = gaussian_tables();
  const Tensor& y = f.analysis.y.value();
  const Tensor& mu = f.y_params.mu.value();
  const Tensor& sigma = f.y_params.sigma.value();
  for (int i = 0; i < model.layout.num_slices; ++i) {
    const int off = model.layout.offset(i), n = model.layout.channels_per_slice[static_cast<std::size_t>(i)];
    const auto ys = channel_block(y, off, n), ms = channel_block(mu, off, n), ss = channel_block(sigma, off, n);
    std::vector<int> values;
    std::vector<const CdfTable*> tp;
    for (std::size_t k = 0; k < ys.size(); ++k) {
      values.push_back(to_symbol(std::nearbyint(ys[k] - ms[k])));
      tp.push_back(&tables[static_cast<std::size_t>(scale_index(ss[k]))]);
    }
    double bits = 0.0;
    c.slice_payloads.push_back(rc_encode(values, tp, &bits));
    res.coded_bits += bits;
  }

  res.y_hat = f.y_hat.value();
  res.x_hat = crop_to_original(f.x_hat.value(), x.original_height, x.original_width);
  res.estimated_bpp = f.rate_y.item() + f.rate_z.item();
  return res;
}

DecompressResult decompress_image(const BitstreamContainer& c, const CodecModel& model) {
  if (c.role != model.cfg.role) {
    throw std::invalid_argument("bitstream was produced by a " + to_string(c.role) + " model but a " +
                                to_string(model.cfg.role) + " model is loaded");
  }
  if (c.lambda_index != model.lambda_index) {
    throw std::invalid_argument("bitstream lambda index " + std::to_string(c.lambda_index) +
                                " does not match the model's " + std::to_string(model.lambda_index));
  }
  if (static_cast<int>(c.slice_payloads.size()) != model.layout.num_slices) {
    throw DecodeError("bitstream has " + std::to_string(c.slice_payloads.size()) + " slices, model expects " +
                      std::to_string(model.layout.num_slices));
  }
  NoGradGuard no_grad;
  const int ph = (static_cast<int>(c.original_height) + kPadMultiple - 1) / kPadMultiple * kPadMultiple;
  const int pw = (static_cast<int>(c.original_width) + kPadMultiple - 1) / kPadMultiple * kPadMultiple;

  Tensor z(Shape{1, model.cfg.hyper_channels, ph / 64, pw / 64});
  {
    const auto tables = hyper_tables(model.params, model.cfg.hyper_channels);
    const std::size_t plane = static_cast<std::size_t>(ph / 64) * (pw / 64);
    std::vector<const CdfTable*> tp;
    for (std::size_t i = 0; i < z.numel(); ++i) tp.push_back(&tables[i / plane]);
    const auto values = rc_decode(c.z_payload, tp);
    for (std::size_t i = 0; i < z.numel(); ++i) z.data[i] = values[i];
  }
  const HyperSideInfo side = hyper_synthesis(model.params, model.cfg, Var(std::move(z)));

  const auto& tables = gaussian_tables();
  std::vector<Var> slices;
  for (int i = 0; i < model.layout.num_slices; ++i) {
    const GaussianParams p = charm_predict_slice(model.params, model.cfg, model.layout, side, slices, i);
    const Tensor& mu = p.mu.value();
    const Tensor& sigma = p.sigma.value();
    std::vector<const CdfTable*> tp;
    for (double s : sigma.data) tp.push_back(&tables[static_cast<std::size_t>(scale_index(s))]);
    const auto r = rc_decode(c.slice_payloads[static_cast<std::size_t>(i)], tp);
    Tensor y_i(mu.shape);
    for (std::size_t k = 0; k < y_i.numel(); ++k) y_i.data[k] = static_cast<double>(r[k]) + mu.data[k];
    slices.emplace_back(std::move(y_i));
  }
  DecompressResult out;
  const Var y_hat = ops::concat_channels(slices);
  out.y_hat = y_hat.value();
  const Var x_hat = ops::clamp(synthesis_transform(model.params, model.cfg, y_hat), 0.0, 1.0);
  out.x_hat = crop_to_original(x_hat.value(), static_cast<int>(c.original_height), static_cast<int>(c.original_width));
  return out;
}

}  // namespace feds
