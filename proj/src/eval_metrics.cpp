#include "feds/eval_metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <json.hpp>

#include "feds/bitstream_codec.hpp"
#include "feds/image_io.hpp"

namespace feds {

double psnr(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "psnr");
  if (a.numel() == 0) throw std::invalid_argument("psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::nearbyint(std::clamp(a.data[i], 0.0, 1.0) * 255.0) -
                     std::nearbyint(std::clamp(b.data[i], 0.0, 1.0) * 255.0);
    se += d * d;
  }
  if (se == 0.0) return kInfinite;
  const double mse = se / static_cast<double>(a.numel());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

Tensor gaussian_kernel(bool horizontal) {
  Tensor k(horizontal ? Shape{1, 1, 1, kWindow} : Shape{1, 1, kWindow, 1});
  double s = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    k.data[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    s += k.data[static_cast<std::size_t>(i)];
  }
  for (double& v : k.data) v /= s;
  return k;
}

// Separable valid-mode Gaussian blur; a dimension shorter than the window is left unfiltered.
Var blur(const Var& x) {
  static const Var gh(gaussian_kernel(true)), gv(gaussian_kernel(false));
  Var h = x;
  if (x.shape()[3] >= kWindow) h = ops::conv2d(h, gh, Var(), 1, 0, 0);
  if (x.shape()[2] >= kWindow) h = ops::conv2d(h, gv, Var(), 1, 0, 0);
  return h;
}

Var avg_pool2(const Var& x) {
  static const Var k(Tensor(Shape{1, 1, 2, 2}, 0.25));
  return ops::conv2d(x, k, Var(), 2, x.shape()[2] % 2, x.shape()[3] % 2);
}

// Per-plane mean of [P, 1, h, w] -> [P].
Var plane_means(const Var& m) {
  const auto& s = m.shape();
  return ops::channel_means(ops::reshape(m, Shape{1, s[0], s[2], s[3]}));
}

struct ScaleStats {
  Var ssim;
  Var cs;
};

ScaleStats ssim_stats(const Var& x, const Var& y) {
  const Var mu1 = blur(x), mu2 = blur(y);
  const Var mu1_sq = ops::mul(mu1, mu1), mu2_sq = ops::mul(mu2, mu2), mu12 = ops::mul(mu1, mu2);
  const Var s11 = ops::sub(blur(ops::mul(x, x)), mu1_sq);
  const Var s22 = ops::sub(blur(ops::mul(y, y)), mu2_sq);
  const Var s12 = ops::sub(blur(ops::mul(x, y)), mu12);
  const Var cs_map = ops::div(ops::add_scalar(ops::scale(s12, 2.0), kC2), ops::add_scalar(ops::add(s11, s22), kC2));
  const Var lum = ops::div(ops::add_scalar(ops::scale(mu12, 2.0), kC1), ops::add_scalar(ops::add(mu1_sq, mu2_sq), kC1));
  return {plane_means(ops::mul(lum, cs_map)), plane_means(cs_map)};
}

}  // namespace

Var ms_ssim(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "ms_ssim");
  const auto& s = a.shape();
  if (s.size() != 4) throw std::invalid_argument("ms_ssim: expected [B, C, H, W]");
  if (std::min(s[2], s[3]) < kMsSsimMinSize) {
    throw std::invalid_argument("ms_ssim: image " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                                " is too small; 5 scales need min(H, W) >= " + std::to_string(kMsSsimMinSize));
  }
  const Shape planes{s[0] * s[1], 1, s[2], s[3]};
  Var x = ops::reshape(a, planes), y = ops::reshape(b, planes);
  Var prod;
  for (std::size_t level = 0; level < kMsSsimWeights.size(); ++level) {
    const ScaleStats st = ssim_stats(x, y);
    const bool last = level + 1 == kMsSsimWeights.size();
    const Var term = ops::pow_scalar(ops::relu(last ? st.ssim : st.cs), kMsSsimWeights[level]);
    prod = prod.defined() ? ops::mul(prod, term) : term;
    if (!last) {
      x = avg_pool2(x);
      y = avg_pool2(y);
    }
  }
  return ops::mean(prod);
}

double msssim_db(double raw) {
  if (raw >= 1.0) return kInfinite;
  return -10.0 * std::log10(1.0 - raw);
}

MsSsimValue ms_ssim_value(const Tensor& a, const Tensor& b) {
  NoGradGuard guard;
  Tensor x = a, y = b;
  if (x.ndim() == 3) x.shape.insert(x.shape.begin(), 1);
  if (y.ndim() == 3) y.shape.insert(y.shape.begin(), 1);
  const double raw = ms_ssim(Var(std::move(x)), Var(std::move(y))).item();
  return {raw, msssim_db(raw)};
}

QualityMetric quality_from_string(const std::string& s) {
  if (s == "psnr" || s == "psnr_db") return QualityMetric::psnr;
  if (s == "msssim" || s == "msssim_db" || s == "ms-ssim") return QualityMetric::msssim_db;
  throw std::invalid_argument("unknown quality metric '" + s + "' (expected psnr or msssim_db)");
}

namespace {

double quality_of(const RDPoint& p, QualityMetric q) { return q == QualityMetric::psnr ? p.psnr_db : p.msssim_db; }

struct Cubic {
  Eigen::Vector4d c;
  double integral(double lo, double hi) const {
    auto prim = [this](double x) { return c[0] * x + c[1] * x * x / 2 + c[2] * x * x * x / 3 + c[3] * x * x * x * x / 4; };
    return prim(hi) - prim(lo);
  }
};

// log10(bpp) as a least-squares cubic in quality.
Cubic fit_curve(const RDCurve& curve, QualityMetric q, double& qmin, double& qmax) {
  const auto& pts = curve.points;
  if (pts.size() < 4) {
    throw std::invalid_argument("bd_rate: curve '" + curve.label + "' needs at least 4 points, has " +
                                std::to_string(pts.size()));
  }
  std::vector<std::pair<double, double>> rq;
  for (const auto& p : pts) {
    const double qual = quality_of(p, q);
    if (!(p.bpp > 0.0) || !std::isfinite(qual)) throw std::invalid_argument("bd_rate: invalid point in '" + curve.label + "'");
    rq.emplace_back(p.bpp, qual);
  }
  std::sort(rq.begin(), rq.end());
  for (std::size_t i = 1; i < rq.size(); ++i) {
    if (!(rq[i].first > rq[i - 1].first) || !(rq[i].second > rq[i - 1].second)) {
      throw std::invalid_argument("bd_rate: curve '" + curve.label + "' is not monotone");
    }
  }
  qmin = rq.front().second;
  qmax = rq.back().second;
  const auto n = static_cast<Eigen::Index>(rq.size());
  Eigen::MatrixXd a(n, 4);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double qv = rq[static_cast<std::size_t>(i)].second;
    a(i, 0) = 1.0;
    a(i, 1) = qv;
    a(i, 2) = qv * qv;
    a(i, 3) = qv * qv * qv;
    b(i) = std::log10(rq[static_cast<std::size_t>(i)].first);
  }
  return {a.colPivHouseholderQr().solve(b)};
}

}  // namespace

BDRateResult bd_rate(const RDCurve& anchor, const RDCurve& test, QualityMetric quality) {
  double amin, amax, tmin, tmax;
  const Cubic fa = fit_curve(anchor, quality, amin, amax);
  const Cubic ft = fit_curve(test, quality, tmin, tmax);
  const double lo = std::max(amin, tmin), hi = std::min(amax, tmax);
  if (!(hi > lo)) throw std::invalid_argument("bd_rate: the curves do not overlap in quality");
  const double avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
  return {(std::pow(10.0, avg) - 1.0) * 100.0, lo, hi};
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

}  // namespace

RDCurve load_rd_curve(const std::filesystem::path& csv) {
  std::ifstream f(csv);
  if (!f) throw std::runtime_error("cannot read " + csv.string());
  std::string line;
  if (!std::getline(f, line)) throw std::invalid_argument(csv.string() + ": empty file");
  const auto header = split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  if (!col.contains("bpp")) throw std::invalid_argument(csv.string() + ": missing bpp column");
  if (!col.contains("psnr_db") && col.contains("psnr")) col["psnr_db"] = col["psnr"];
  RDCurve c;
  c.label = csv.stem().string();
  auto num = [&](const std::vector<std::string>& row, const char* name, double fallback) {
    const auto it = col.find(name);
    if (it == col.end() || it->second >= row.size() || row[it->second].empty()) return fallback;
    try {
      return std::stod(row[it->second]);
    } catch (const std::exception&) {
      throw std::invalid_argument(csv.string() + ": bad number '" + row[it->second] + "' in column " + name);
    }
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  while (std::getline(f, line)) {
    if (line.empty() || line == "\r") continue;
    const auto row = split_csv(line);
    RDPoint p;
    p.image = col.contains("image") && col["image"] < row.size() ? row[col["image"]] : "";
    p.bpp = num(row, "bpp", nan);
    p.psnr_db = num(row, "psnr_db", nan);
    p.msssim = num(row, "msssim", nan);
    p.msssim_db = num(row, "msssim_db", std::isnan(p.msssim) ? nan : msssim_db(p.msssim));
    c.points.push_back(p);
  }
  return c;
}

EvaluationReport evaluate_model(const CodecModel& model, const std::filesystem::path& dir) {
  const auto files = list_images(dir);
  if (files.empty()) throw std::invalid_argument("no images found in " + dir.string());
  using clock = std::chrono::steady_clock;
  EvaluationReport rep;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& path : files) {
    const Tensor raw = load_image(path);
    const ImageBuffer img = pad_image(raw);

    const auto t0 = clock::now();
    const CompressResult enc = compress_image(img, model);
    const auto bytes = enc.container.serialize();
    const auto t1 = clock::now();
    const auto parsed = BitstreamContainer::parse(bytes, model.layout.num_slices);
    const DecompressResult dec = decompress_image(parsed, model);
    const auto t2 = clock::now();

    if (dec.y_hat.data != enc.y_hat.data || dec.x_hat.data != enc.x_hat.data) {
      throw std::runtime_error("round-trip mismatch between encoder and decoder for " + path.filename().string());
    }
    RDPoint p;
    p.image = path.filename().string();
    p.bpp = 8.0 * static_cast<double>(bytes.size()) / (static_cast<double>(raw.dim(1)) * raw.dim(2));
    p.psnr_db = psnr(raw, dec.x_hat);
    if (std::min(raw.dim(1), raw.dim(2)) >= kMsSsimMinSize) {
      const auto m = ms_ssim_value(raw, dec.x_hat);
      p.msssim = m.raw;
      p.msssim_db = m.db;
    } else {
      p.msssim = nan;
      p.msssim_db = nan;
    }
    p.enc_seconds = std::chrono::duration<double>(t1 - t0).count();
    p.dec_seconds = std::chrono::duration<double>(t2 - t1).count();
    rep.points.push_back(p);
  }
  RDPoint& a = rep.aggregate;
  a.image = "mean";
  const double n = static_cast<double>(rep.points.size());
  for (const auto& p : rep.points) {
    if (std::isinf(p.psnr_db)) {
      throw std::runtime_error("lossless reconstruction of " + p.image + " (infinite PSNR) cannot be averaged");
    }
    a.bpp += p.bpp / n;
    a.psnr_db += p.psnr_db / n;
    a.msssim += p.msssim / n;
    a.msssim_db += p.msssim_db / n;
    a.enc_seconds += p.enc_seconds / n;
    a.dec_seconds += p.dec_seconds / n;
  }
  return rep;
}

EntropyMapReport entropy_map_for(const CodecModel& model, const std::string& name, const Tensor& image) {
  NoGradGuard guard;
  const ImageBuffer img = pad_image(image);
  Tensor x = img.pixels;
  x.shape.insert(x.shape.begin(), 1);
  const ForwardOutput f = forward(model, Var(std::move(x)), QuantMode::eval, nullptr);
  EntropyProfile prof = channel_entropy_profile(f.y_hat.value(), f.y_params.mu.value(), f.y_params.sigma.value());
  EntropyMapReport r;
  r.image = name;
  r.entropy_map = std::move(prof.entropy_map);
  r.entropy_map.shape.erase(r.entropy_map.shape.begin());
  r.ranking = std::move(prof.ranking);
  return r;
}

std::vector<unsigned char> normalize_heatmap(std::span<const double> values, double& min_out, double& max_out) {
  if (values.empty()) throw std::invalid_argument("normalize_heatmap: empty map");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  min_out = *lo;
  max_out = *hi;
  std::vector<unsigned char> px(values.size(), 128);
  if (max_out > min_out) {
    const double range = max_out - min_out;
    for (std::size_t i = 0; i < values.size(); ++i) {
      px[i] = static_cast<unsigned char>(std::lround(255.0 * (values[i] - min_out) / range));
    }
  }
  return px;
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f.precision(17);
  return f;
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

nlohmann::json point_json(const RDPoint& p) {
  auto num = [](double v) -> nlohmann::json {
    if (!std::isfinite(v)) return nullptr;
    return v;
  };
  return {{"image", p.image},          {"bpp", num(p.bpp)},
          {"psnr_db", num(p.psnr_db)}, {"msssim", num(p.msssim)},
          {"msssim_db", num(p.msssim_db)}, {"enc_s", num(p.enc_seconds)},
          {"dec_s", num(p.dec_seconds)}};
}

}  // namespace

std::string aggregate_json(const EvaluationReport& report) {
  nlohmann::json j;
  j["images"] = report.points.size();
  j["mean"] = point_json(report.aggregate);
  return j.dump(2);
}

std::string report_json(const EvaluationReport& report) {
  nlohmann::json j;
  j["images"] = report.points.size();
  j["mean"] = point_json(report.aggregate);
  j["points"] = nlohmann::json::array();
  for (const auto& p : report.points) j["points"].push_back(point_json(p));
  return j.dump(2);
}

void emit_reports(const std::filesystem::path& out_dir, const EvaluationReport* report,
                  std::span<const EntropyMapReport> maps, std::span<const int> ranks) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw std::runtime_error("cannot create " + out_dir.string());

  if (report) {
    auto f = open_out(out_dir / "metrics.csv");
    f << "image,bpp,psnr_db,msssim,msssim_db,enc_s,dec_s\n";
    for (const auto& p : report->points) {
      f << p.image << ',' << csv_number(p.bpp) << ',' << csv_number(p.psnr_db) << ',' << csv_number(p.msssim) << ','
        << csv_number(p.msssim_db) << ',' << csv_number(p.enc_seconds) << ',' << csv_number(p.dec_seconds) << '\n';
    }
    auto j = open_out(out_dir / "aggregate.json");
    j << aggregate_json(*report) << '\n';
  }
  if (maps.empty()) return;

  auto side = open_out(out_dir / "heatmaps.csv");
  side << "image,rank,channel,min_bits,max_bits,file\n";
  for (const auto& m : maps) {
    const int channels = m.entropy_map.dim(0), h = m.entropy_map.dim(1), w = m.entropy_map.dim(2);
    const std::string stem = std::filesystem::path(m.image).stem().string();
    {
      auto f = open_out(out_dir / (stem + "_channels.csv"));
      f << "channel,mean_entropy_bits,rank\n";
      std::vector<int> rank_of(static_cast<std::size_t>(channels));
      for (std::size_t r = 0; r < m.ranking.order.size(); ++r) {
        rank_of[static_cast<std::size_t>(m.ranking.order[r])] = static_cast<int>(r) + 1;
      }
      for (int c = 0; c < channels; ++c) {
        f << c << ',' << csv_number(m.ranking.mean_entropy[static_cast<std::size_t>(c)]) << ','
          << rank_of[static_cast<std::size_t>(c)] << '\n';
      }
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int rank : ranks) {
      if (rank < 1 || rank > channels) {
        throw std::invalid_argument("heatmap rank " + std::to_string(rank) + " outside [1, " + std::to_string(channels) +
                                    "]");
      }
      const int c = m.ranking.order[static_cast<std::size_t>(rank - 1)];
      double lo = 0.0, hi = 0.0;
      const auto px = normalize_heatmap(
          std::span<const double>(m.entropy_map.data.data() + static_cast<std::size_t>(c) * plane, plane), lo, hi);
      const std::string name = stem + "_rank" + std::to_string(rank) + "_ch" + std::to_string(c) + ".pgm";
      save_pgm(out_dir / name, px, h, w);
      side << m.image << ',' << rank << ',' << c << ',' << csv_number(lo) << ',' << csv_number(hi) << ',' << name << '\n';
    }
  }
}

}  // namespace feds
