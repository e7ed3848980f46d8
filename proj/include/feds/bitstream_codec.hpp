#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "feds/codec_model.hpp"

namespace feds {

inline constexpr int kProbBits = 16;
inline constexpr std::uint32_t kProbTotal = 1u << kProbBits;
inline constexpr std::uint32_t kStreamSentinel = 0xFED5;

// Thrown for malformed, truncated or mismatched streams.
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Quantized CDF over `cdf.size() - 1` symbols. Symbol j < escape() stands for
// the value offset + j; the last symbol is the escape.
struct CdfTable {
  std::vector<std::uint32_t> cdf;  // cdf.front() == 0, cdf.back() == kProbTotal
  int offset = 0;

  int num_symbols() const { return static_cast<int>(cdf.size()) - 1; }
  int escape() const { return num_symbols() - 1; }
  std::uint32_t frequency(int symbol) const { return cdf[static_cast<std::size_t>(symbol) + 1] - cdf[static_cast<std::size_t>(symbol)]; }
};

// pmf over the in-range values (escape mass is 1 - sum). Every symbol gets at
// least one count; leftovers go to the most probable symbol.
CdfTable quantize_pmf(std::span<const double> pmf, int offset);

inline constexpr int kNumScales = 64;
inline constexpr double kScaleMin = 0.11;
inline constexpr double kScaleMax = 256.0;

const std::array<double, kNumScales>& scale_table();
// Smallest entry >= sigma (last entry above the range).
int scale_index(double sigma);

// Zero-mean discretized Gaussian table for scale_table()[index], residual
// support [-tail, tail] with tail = ceil(6 s) + 1.
CdfTable build_cdf(int scale_index);
// Tables for every scale, built once.
const std::vector<CdfTable>& gaussian_tables();

inline constexpr int kHyperTail = 32;
// Per-channel tables for z over [-32, 32] from the learned prior.
std::vector<CdfTable> hyper_tables(const ParameterStore& params, int channels);

class RangeEncoder {
 public:
  void encode(std::uint32_t start, std::uint32_t size);
  // Value coded with the table; out-of-range values use escape + 16 raw bits.
  void encode_symbol(int value, const CdfTable& table);
  void encode_raw16(std::uint32_t v);
  // Appends the sentinel and flushes; trailing zero bytes are not written.
  std::vector<std::uint8_t> finish();

  // Sum of -log2(p) over everything coded so far.
  double information_bits() const { return info_bits_; }

 private:
  void shift_low();

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  bool first_byte_ = true;
  double info_bits_ = 0.0;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);

  std::uint32_t peek();
  void consume(std::uint32_t start, std::uint32_t size);
  int decode_symbol(const CdfTable& table);
  std::uint32_t decode_raw16();
  // Verifies the sentinel and that no unread bytes remain. Reads past the
  // end return zero (the encoder trims its zero tail).
  void finish();

 private:
  std::uint8_t next_byte();
  void normalize();

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t code_ = 0;
  std::uint32_t scaled_range_ = 0;
};

std::vector<std::uint8_t> rc_encode(std::span<const int> values, std::span<const CdfTable* const> tables,
                                    double* information_bits = nullptr);
std::vector<int> rc_decode(std::span<const std::uint8_t> bytes, std::span<const CdfTable* const> tables);

inline constexpr std::uint8_t kContainerVersion = 1;

struct BitstreamContainer {
  Role role = Role::student;
  std::uint8_t lambda_index = 0;
  std::uint32_t original_width = 0;
  std::uint32_t original_height = 0;
  std::vector<std::uint8_t> z_payload;
  std::vector<std::vector<std::uint8_t>> slice_payloads;

  std::vector<std::uint8_t> serialize() const;
  // The slice count is not stored; it comes from the model.
  static BitstreamContainer parse(std::span<const std::uint8_t> bytes, int num_slices);

  std::size_t size_bytes() const;
  // 8 * file size / original pixels
  double bpp() const;
};

struct CompressResult {
  BitstreamContainer container;
  Tensor y_hat;          // encoder-side quantized latent [1, M, h, w]
  Tensor x_hat;          // local reconstruction, cropped [3, H, W]
  double estimated_bpp;  // model rate estimate R_y + R_z
  double coded_bits;     // -log2 of every coded probability, incl. escapes and sentinels
};

CompressResult compress_image(const ImageBuffer& x, const CodecModel& model);

struct DecompressResult {
  Tensor y_hat;
  Tensor x_hat;  // cropped [3, H, W]
};

DecompressResult decompress_image(const BitstreamContainer& container, const CodecModel& model);

}  // namespace feds
