#include <cmath>
#include <fstream>

#include "doctest.h"
#include "feds/bitstream_codec.hpp"
#include "feds/eval_metrics.hpp"
#include "feds/image_io.hpp"
#include "helpers.hpp"
#include "json.hpp"
#include "../support/toy.hpp"

using namespace feds;
using feds::testing::random_tensor;

namespace {

RDCurve curve(const std::string& label, std::vector<double> bpp, std::vector<double> q) {
  RDCurve c{label, {}};
  for (std::size_t i = 0; i < bpp.size(); ++i) {
    RDPoint p;
    p.bpp = bpp[i];
    p.psnr_db = q[i];
    p.msssim_db = q[i] / 2.0;
    c.points.push_back(p);
  }
  return c;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  std::string l;
  while (std::getline(f, l)) out.push_back(l);
  return out;
}

}  // namespace

TEST_SUITE("eval_metrics") {

TEST_CASE("psnr") {
  Rng rng(1);
  const Tensor a = random_tensor({3, 8, 8}, rng, 0.1, 0.8);
  CHECK(psnr(a, a) == kInfinite);

  Tensor base(Shape{3, 8, 8}, 100.0 / 255.0), shifted(Shape{3, 8, 8}, 110.0 / 255.0);
  CHECK(psnr(base, shifted) == doctest::Approx(28.13).epsilon(1e-3));
  CHECK(psnr(base, shifted) == doctest::Approx(20.0 * std::log10(25.5)).epsilon(1e-12));
  CHECK(psnr(Tensor(Shape{3, 4, 4}, 0.0), Tensor(Shape{3, 4, 4}, 1.0)) == 0.0);

  const Tensor b = random_tensor({3, 8, 8}, rng, 0.1, 0.8);
  CHECK(psnr(a, b) == psnr(b, a));
  CHECK(psnr(a, b) < kInfinite);
  CHECK_THROWS_AS(psnr(a, Tensor(Shape{3, 8, 7})), std::invalid_argument);
}

TEST_CASE("ms-ssim") {
  CHECK(msssim_db(0.95) == doctest::Approx(13.0103).epsilon(1e-5));
  CHECK(msssim_db(1.0) == kInfinite);

  const Tensor a = synthetic_images(1, 160, 176, 2)[0];
  Tensor b = a;
  Rng rng(3);
  for (double& v : b.data) v = std::clamp(v + 0.05 * rng.normal(), 0.0, 1.0);
  const MsSsimValue same = ms_ssim_value(a, a);
  CHECK(same.raw == doctest::Approx(1.0).epsilon(1e-12));
  const MsSsimValue ab = ms_ssim_value(a, b), ba = ms_ssim_value(b, a);
  CHECK(ab.raw < 1.0);
  CHECK(ab.raw > 0.0);
  CHECK(ab.raw == doctest::Approx(ba.raw).epsilon(1e-12));
  CHECK(ab.db == doctest::Approx(msssim_db(ab.raw)).epsilon(1e-12));

  const Tensor small = synthetic_images(1, 159, 200, 4)[0];
  try {
    ms_ssim_value(small, small);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("160") != std::string::npos);
  }
}

TEST_CASE("bd-rate") {
  const RDCurve a = curve("a", {0.12, 0.25, 0.48, 0.81, 1.3}, {28.1, 30.4, 32.9, 35.2, 37.6});
  RDCurve cheaper = a;
  for (auto& p : cheaper.points) p.bpp *= 0.9;
  CHECK(bd_rate(a, a, QualityMetric::psnr).percent == 0.0);
  CHECK(bd_rate(a, a, QualityMetric::msssim_db).percent == 0.0);
  CHECK(std::abs(bd_rate(a, cheaper, QualityMetric::psnr).percent + 10.0) <= 0.1);
  CHECK(std::abs(bd_rate(cheaper, a, QualityMetric::psnr).percent - 100.0 / 9.0) <= 0.15);

  const BDRateResult r = bd_rate(a, curve("b", {0.1, 0.2, 0.4, 0.8}, {29.0, 31.0, 33.0, 36.5}), QualityMetric::psnr);
  CHECK(r.quality_low == 29.0);
  CHECK(r.quality_high == 36.5);

  CHECK_THROWS_AS(bd_rate(a, curve("short", {0.1, 0.2, 0.3}, {30, 31, 32}), QualityMetric::psnr), std::invalid_argument);
  CHECK_THROWS_AS(bd_rate(a, curve("far", {0.1, 0.2, 0.3, 0.4}, {40, 41, 42, 43}), QualityMetric::psnr),
                  std::invalid_argument);
  CHECK_THROWS_AS(bd_rate(a, curve("bumpy", {0.1, 0.2, 0.3, 0.4}, {30, 32, 31, 33}), QualityMetric::psnr),
                  std::invalid_argument);
  CHECK(quality_from_string("msssim_db") == QualityMetric::msssim_db);
  CHECK_THROWS_AS(quality_from_string("vmaf"), std::invalid_argument);
}

TEST_CASE("rd curve csv") {
  const auto dir = testing::scratch_dir("rdcsv");
  {
    std::ofstream f(dir / "c.csv");
    f << "bpp,psnr,msssim\n0.1,30,0.95\n0.2,32,0.97\n";
  }
  const RDCurve c = load_rd_curve(dir / "c.csv");
  REQUIRE(c.points.size() == 2);
  CHECK(c.points[1].bpp == 0.2);
  CHECK(c.points[1].psnr_db == 32.0);
  CHECK(c.points[0].msssim_db == doctest::Approx(13.0103).epsilon(1e-5));
  {
    std::ofstream f(dir / "d.csv");
    f << "rate,psnr\n0.1,30\n";
  }
  CHECK_THROWS_AS(load_rd_curve(dir / "d.csv"), std::invalid_argument);
  {
    std::ofstream f(dir / "e.csv");
    f << "bpp,psnr\n0.1,thirty\n";
  }
  CHECK_THROWS_AS(load_rd_curve(dir / "e.csv"), std::invalid_argument);
}

TEST_CASE("heatmap normalisation") {
  double lo = 0.0, hi = 0.0;
  const std::vector<double> flat(12, 3.25);
  const auto px = normalize_heatmap(flat, lo, hi);
  for (unsigned char p : px) CHECK(p == 128);
  CHECK(lo == 3.25);
  CHECK(hi == 3.25);

  Rng rng(5);
  std::vector<double> v(500);
  for (double& x : v) x = rng.uniform(0.0, 9.0);
  const auto q = normalize_heatmap(v, lo, hi);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double back = lo + (hi - lo) * q[i] / 255.0;
    CHECK(std::abs(back - v[i]) <= (hi - lo) / 255.0);
  }
  CHECK(*std::min_element(q.begin(), q.end()) == 0);
  CHECK(*std::max_element(q.begin(), q.end()) == 255);
}

TEST_CASE("heatmap emission") {
  const auto dir = testing::scratch_dir("heatmaps");
  Rng rng(6);
  std::vector<EntropyMapReport> maps;
  for (const char* name : {"one.png", "two.png"}) {
    EntropyMapReport m;
    m.image = name;
    m.entropy_map = random_tensor({160, 3, 5}, rng, 0.0, 6.0);
    std::vector<double> means(160);
    for (int c = 0; c < 160; ++c) {
      for (int i = 0; i < 15; ++i) means[static_cast<std::size_t>(c)] += m.entropy_map.data[static_cast<std::size_t>(c * 15 + i)] / 15.0;
    }
    m.ranking = rank_from_means(means);
    maps.push_back(m);
  }
  const std::vector<int> ranks{1, 40, 80, 120, 160};
  emit_reports(dir, nullptr, maps, ranks);

  int pgm = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) pgm += e.path().extension() == ".pgm" ? 1 : 0;
  CHECK(pgm == 10);
  const auto side = lines_of(dir / "heatmaps.csv");
  CHECK(side.size() == 1 + 2 * 5);
  CHECK(lines_of(dir / "one_channels.csv").size() == 161);

  const int top = maps[0].ranking.order[0];
  const auto path = dir / ("one_rank1_ch" + std::to_string(top) + ".pgm");
  std::ifstream f(path, std::ios::binary);
  const std::string data((std::istreambuf_iterator<char>(f)), {});
  CHECK(data.starts_with("P5\n5 3\n255\n"));
  CHECK(data.size() == std::string("P5\n5 3\n255\n").size() + 15);

  const std::vector<int> bad{161};
  CHECK_THROWS_AS(emit_reports(dir, nullptr, maps, bad), std::invalid_argument);
}

TEST_CASE("dataset evaluation") {
  const auto dir = testing::scratch_dir("evalset");
  const auto imgs = synthetic_images(23, 64, 64, 7);
  for (std::size_t i = 0; i < imgs.size(); ++i) save_image(dir / ("img" + std::to_string(10 + i) + ".png"), imgs[i]);
  save_image(dir / "big.png", synthetic_images(1, 160, 192, 8)[0]);

  const CodecModel model = CodecModel::create(testing::toy_config(Role::student), 9);
  const EvaluationReport rep = evaluate_model(model, dir);
  REQUIRE(rep.points.size() == 24);
  double mean_psnr = 0.0, mean_bpp = 0.0;
  for (const auto& p : rep.points) {
    mean_psnr += p.psnr_db / 24.0;
    mean_bpp += p.bpp / 24.0;
    CHECK(p.enc_seconds >= 0.0);
    CHECK(p.dec_seconds >= 0.0);
    const Tensor raw = load_image(dir / p.image);
    const auto enc = compress_image(pad_image(raw), model);
    CHECK(p.bpp == enc.container.bpp());
    if (p.image == "big.png") {
      CHECK(p.msssim > 0.0);
      CHECK(p.msssim_db == doctest::Approx(msssim_db(p.msssim)).epsilon(1e-12));
    } else {
      CHECK(std::isnan(p.msssim));
    }
  }
  CHECK(rep.aggregate.image == "mean");
  CHECK(rep.aggregate.psnr_db == doctest::Approx(mean_psnr).epsilon(1e-12));
  CHECK(rep.aggregate.bpp == doctest::Approx(mean_bpp).epsilon(1e-12));

  const auto out = testing::scratch_dir("evalout");
  emit_reports(out, &rep, {}, {});
  CHECK(lines_of(out / "metrics.csv").size() == 25);
  CHECK(lines_of(out / "metrics.csv")[0] == "image,bpp,psnr_db,msssim,msssim_db,enc_s,dec_s");
  std::ifstream agg(out / "aggregate.json");
  const auto j = nlohmann::json::parse(agg);
  CHECK(j["images"].get<int>() == 24);
  CHECK(j["mean"]["bpp"].get<double>() == doctest::Approx(rep.aggregate.bpp).epsilon(1e-12));

  const auto full = nlohmann::json::parse(report_json(rep));
  CHECK(full["points"].size() == 24);

  CHECK_THROWS_AS(evaluate_model(model, testing::scratch_dir("empty")), std::invalid_argument);
}

TEST_CASE("entropy map for an image") {
  const NetworkConfig cfg = testing::toy_config(Role::student);
  const CodecModel model = CodecModel::create(cfg, 10);
  const EntropyMapReport r = entropy_map_for(model, "x.png", synthetic_images(1, 70, 130, 11)[0]);
  CHECK(r.entropy_map.shape == Shape{cfg.M, 128 / 16, 192 / 16});
  CHECK(r.ranking.order.size() == static_cast<std::size_t>(cfg.M));
  for (double h : r.entropy_map.data) CHECK(h >= 0.0);
}

}  // TEST_SUITE
