#pragma once

#include <array>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "feds/autograd.hpp"
#include "feds/entropy_engine.hpp"

namespace feds {

struct CodecModel;

// Returned by psnr() for identical inputs and by msssim_db() for raw == 1.
inline constexpr double kInfinite = std::numeric_limits<double>::infinity();

// Images [3, H, W] or [B, 3, H, W] in [0, 1], compared after rounding to 8 bits.
double psnr(const Tensor& a, const Tensor& b);

inline constexpr int kMsSsimMinSize = 160;
inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

// Differentiable 5-scale MS-SSIM (data range 1), averaged over batch and
// colour channels. Inputs [B, 3, H, W] with min(H, W) >= 160.
Var ms_ssim(const Var& a, const Var& b);

struct MsSsimValue {
  double raw;
  double db;
};

MsSsimValue ms_ssim_value(const Tensor& a, const Tensor& b);
// -10 log10(1 - raw); kInfinite when raw == 1.
double msssim_db(double raw);

struct RDPoint {
  std::string image;
  double bpp = 0.0;
  double psnr_db = 0.0;
  double msssim = 0.0;
  double msssim_db = 0.0;
  double enc_seconds = 0.0;
  double dec_seconds = 0.0;
};

struct RDCurve {
  std::string label;
  std::vector<RDPoint> points;
};

enum class QualityMetric { psnr, msssim_db };

QualityMetric quality_from_string(const std::string& s);

struct BDRateResult {
  double percent;       // negative means the test curve saves rate
  double quality_low;   // integration interval
  double quality_high;
};

BDRateResult bd_rate(const RDCurve& anchor, const RDCurve& test, QualityMetric quality);

// CSV with a header naming at least `bpp` and the quality column(s)
// (`psnr_db`/`psnr`, `msssim_db`).
RDCurve load_rd_curve(const std::filesystem::path& csv);

struct EvaluationReport {
  std::vector<RDPoint> points;
  RDPoint aggregate;  // arithmetic means; image = "mean"
};

// Compresses and decompresses every image through the real bitstream.
// MS-SSIM fields are NaN for images smaller than kMsSsimMinSize.
EvaluationReport evaluate_model(const CodecModel& model, const std::filesystem::path& dir);

struct EntropyMapReport {
  std::string image;
  Tensor entropy_map;  // [C, h, w] bits
  ChannelEntropyRanking ranking;
};

// Per-image entropy profile from the model's eval-mode forward pass.
EntropyMapReport entropy_map_for(const CodecModel& model, const std::string& name, const Tensor& image);

// 8-bit min-max normalisation of one map; a constant map becomes all 128.
std::vector<unsigned char> normalize_heatmap(std::span<const double> values, double& min_out, double& max_out);

// metrics.csv and aggregate.json when `report` is given; for every map,
// heatmaps of the channels at the requested 1-based ranks plus
// heatmaps.csv (image, rank, channel, min, max) and <image>_channels.csv.
void emit_reports(const std::filesystem::path& out_dir, const EvaluationReport* report,
                  std::span<const EntropyMapReport> maps, std::span<const int> ranks);

std::string aggregate_json(const EvaluationReport& report);
// aggregate_json plus the per-image points
std::string report_json(const EvaluationReport& report);

}  // namespace feds
