#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "prunevc/bd.hpp"
#include "prunevc/errors.hpp"

using namespace prunevc;

namespace {

std::vector<RDPoint> base_curve() {
  return {{0.10, 30.2}, {0.24, 33.1}, {0.52, 35.9}, {1.05, 38.4},
          {2.10, 40.6}};
}

std::vector<RDPoint> shift_psnr(std::vector<RDPoint> c, double d) {
  for (auto& p : c) p.psnr_db += d;
  return c;
}

std::vector<RDPoint> scale_rate(std::vector<RDPoint> c, double f) {
  for (auto& p : c) p.rate_bpp *= f;
  return c;
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_CASE("identical curves have zero deltas") {
  auto r = bd_metrics(base_curve(), base_curve());
  CHECK(r.bd_rate_percent == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.bd_psnr_db == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("uniform +0.5 dB shift reads as +0.5 BD-PSNR") {
  auto r = bd_metrics(base_curve(), shift_psnr(base_curve(), 0.5));
  CHECK(std::abs(r.bd_psnr_db - 0.5) < 0.001);
  auto worse = bd_metrics(base_curve(), shift_psnr(base_curve(), -0.5));
  CHECK(std::abs(worse.bd_psnr_db + 0.5) < 0.001);
}

TEST_CASE("uniform 10% rate increase reads as +10% BD-rate") {
  auto r = bd_metrics(base_curve(), scale_rate(base_curve(), 1.10));
  CHECK(std::abs(r.bd_rate_percent - 10.0) < 0.1);
  auto cheaper = bd_metrics(base_curve(), scale_rate(base_curve(), 0.90));
  CHECK(std::abs(cheaper.bd_rate_percent + 10.0) < 0.1);
}

TEST_CASE("bd metrics are antisymmetric") {
  auto a = base_curve();
  std::vector<RDPoint> b{{0.13, 30.9}, {0.27, 33.6}, {0.60, 36.6},
                         {1.20, 39.1}, {2.40, 41.0}};
  auto ab = bd_metrics(a, b);
  auto ba = bd_metrics(b, a);
  CHECK(std::abs(ab.bd_psnr_db + ba.bd_psnr_db) < 1e-9);
  CHECK(std::abs(ab.bd_rate_percent + ba.bd_rate_percent) < 0.2);
  CHECK(ab.bd_psnr_db != 0.0);  // the pair is genuinely different
}

TEST_CASE("curve preconditions") {
  auto good = base_curve();

  std::vector<RDPoint> three(good.begin(), good.begin() + 3);
  CHECK_THROWS_AS(bd_metrics(three, good), ConfigError);
  CHECK_THROWS_AS(bd_metrics(good, three), ConfigError);

  auto flat_rate = good;
  flat_rate[2].rate_bpp = flat_rate[1].rate_bpp;
  CHECK_THROWS_AS(bd_metrics(flat_rate, good), ConfigError);

  auto nonmono_psnr = good;
  nonmono_psnr[3].psnr_db = nonmono_psnr[2].psnr_db - 0.1;
  CHECK_THROWS_AS(bd_metrics(good, nonmono_psnr), ConfigError);

  auto negative = good;
  negative[0].rate_bpp = -0.1;
  CHECK_THROWS_AS(bd_metrics(negative, good), ConfigError);

  // disjoint quality and rate ranges
  std::vector<RDPoint> high{{10.0, 50.0}, {12.0, 51.0}, {15.0, 52.0},
                            {20.0, 53.0}};
  CHECK_THROWS_AS(bd_metrics(good, high), ConfigError);

  CHECK_THROWS_AS(bd_metrics(good, good, 10), ConfigError);
}

TEST_CASE("rd csv reader") {
  const std::string path = "/tmp/prunevc_test_bd_curve.csv";
  spit(path, "rate_bpp,psnr_db\n0.1,30.2\n0.24,33.1\n0.52,35.9\n1.05,38.4\n");
  auto pts = read_rd_csv(path);
  REQUIRE(pts.size() == 4);
  CHECK(pts[0].rate_bpp == 0.1);
  CHECK(pts[3].psnr_db == 38.4);

  // CRLF and surrounding spaces are tolerated
  spit(path, "rate_bpp,psnr_db\r\n 0.1 , 30.2 \r\n0.2,31.0\r\n");
  auto crlf = read_rd_csv(path);
  REQUIRE(crlf.size() == 2);
  CHECK(crlf[0].psnr_db == 30.2);

  CHECK_THROWS_AS(read_rd_csv("/tmp/prunevc_test_bd_missing.csv"), IoError);

  spit(path, "");
  CHECK_THROWS_AS(read_rd_csv(path), IoError);

  spit(path, "rate,psnr\n0.1,30\n");
  CHECK_THROWS_AS(read_rd_csv(path), IoError);

  spit(path, "rate_bpp,psnr_db\n0.1\n");
  CHECK_THROWS_AS(read_rd_csv(path), IoError);

  spit(path, "rate_bpp,psnr_db\n0.1,abc\n");
  CHECK_THROWS_AS(read_rd_csv(path), IoError);

  spit(path, "rate_bpp,psnr_db\n");
  CHECK_THROWS_AS(read_rd_csv(path), IoError);
}

TEST_CASE("bd json carries both deltas") {
  auto r = bd_metrics(base_curve(), shift_psnr(base_curve(), 0.5));
  auto j = nlohmann::json::parse(bd_json(r));
  CHECK(j["bd_rate_percent"].get<double>() == r.bd_rate_percent);
  CHECK(j["bd_psnr_db"].get<double>() == r.bd_psnr_db);
}
