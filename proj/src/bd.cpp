#include "prunevc/bd.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "prunevc/errors.hpp"

namespace prunevc {
namespace {

// cubic least squares on a centered abscissa for conditioning
struct Cubic {
  double x0 = 0.0;
  Eigen::Vector4d c = Eigen::Vector4d::Zero();

  double operator()(double x) const {
    const double u = x - x0;
    return c[0] + u * (c[1] + u * (c[2] + u * c[3]));
  }
};

Cubic fit_cubic(const std::vector<double>& xs, const std::vector<double>& ys) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  Cubic f;
  for (double x : xs) f.x0 += x;
  f.x0 /= static_cast<double>(n);
  Eigen::MatrixXd a(n, 4);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = xs[static_cast<std::size_t>(i)] - f.x0;
    a(i, 0) = 1.0;
    a(i, 1) = u;
    a(i, 2) = u * u;
    a(i, 3) = u * u * u;
    b[i] = ys[static_cast<std::size_t>(i)];
  }
  f.c = a.colPivHouseholderQr().solve(b);
  return f;
}

void check_curve(const std::vector<RDPoint>& pts, const char* name) {
  if (pts.size() < 4)
    throw ConfigError(std::string("bd: ") + name + " curve has " +
                      std::to_string(pts.size()) + " points; need at least 4");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!(pts[i].rate_bpp > 0.0) || !std::isfinite(pts[i].rate_bpp) ||
        !std::isfinite(pts[i].psnr_db))
      throw ConfigError(std::string("bd: ") + name + " point " +
                        std::to_string(i) + " is not a positive finite pair");
    if (i > 0 && !(pts[i].rate_bpp > pts[i - 1].rate_bpp))
      throw ConfigError(std::string("bd: ") + name +
                        " rates are not strictly increasing at point " +
                        std::to_string(i));
    if (i > 0 && !(pts[i].psnr_db > pts[i - 1].psnr_db))
      throw ConfigError(std::string("bd: ") + name +
                        " quality is not strictly increasing at point " +
                        std::to_string(i));
  }
}

// mean of (f_test - f_ref) over [lo, hi], trapezoid rule
double mean_gap(const Cubic& ref, const Cubic& test, double lo, double hi,
                int samples) {
  double acc = 0.0;
  const double step = (hi - lo) / samples;
  for (int i = 0; i <= samples; ++i) {
    const double x = lo + step * i;
    const double d = test(x) - ref(x);
    acc += (i == 0 || i == samples) ? 0.5 * d : d;
  }
  return acc * step / (hi - lo);
}

}  // namespace

std::vector<RDPoint> read_rd_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("bd: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("bd: '" + path + "' is empty");
  while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
    line.pop_back();
  if (line != "rate_bpp,psnr_db")
    throw IoError("bd: '" + path + "' header is '" + line +
                  "', expected 'rate_bpp,psnr_db'");
  std::vector<RDPoint> pts;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    RDPoint p;
    char comma = 0;
    if (!(ss >> p.rate_bpp >> comma >> p.psnr_db) || comma != ',')
      throw IoError("bd: '" + path + "' row " + std::to_string(row) +
                    " does not parse as rate,psnr");
    pts.push_back(p);
  }
  if (pts.empty())
    throw IoError("bd: '" + path + "' has a header but no points");
  return pts;
}

BDResult bd_metrics(const std::vector<RDPoint>& reference,
                    const std::vector<RDPoint>& test, int samples) {
  check_curve(reference, "reference");
  check_curve(test, "test");
  if (samples < 1000)
    throw ConfigError("bd: need at least 1000 integration samples");

  std::vector<double> lr_ref, ps_ref, lr_test, ps_test;
  for (const auto& p : reference) {
    lr_ref.push_back(std::log10(p.rate_bpp));
    ps_ref.push_back(p.psnr_db);
  }
  for (const auto& p : test) {
    lr_test.push_back(std::log10(p.rate_bpp));
    ps_test.push_back(p.psnr_db);
  }

  BDResult r;
  {
    // quality as a function of log-rate
    const Cubic fr = fit_cubic(lr_ref, ps_ref);
    const Cubic ft = fit_cubic(lr_test, ps_test);
    const double lo = std::max(lr_ref.front(), lr_test.front());
    const double hi = std::min(lr_ref.back(), lr_test.back());
    if (!(hi > lo))
      throw ConfigError("bd: rate ranges do not overlap");
    r.bd_psnr_db = mean_gap(fr, ft, lo, hi, samples);
  }
  {
    // log-rate as a function of quality
    const Cubic fr = fit_cubic(ps_ref, lr_ref);
    const Cubic ft = fit_cubic(ps_test, lr_test);
    const double lo = std::max(ps_ref.front(), ps_test.front());
    const double hi = std::min(ps_ref.back(), ps_test.back());
    if (!(hi > lo))
      throw ConfigError("bd: quality ranges do not overlap");
    r.bd_rate_percent = (std::pow(10.0, mean_gap(fr, ft, lo, hi, samples)) -
                         1.0) * 100.0;
  }
  return r;
}

std::string bd_json(const BDResult& r) {
  nlohmann::ordered_json j;
  j["bd_rate_percent"] = r.bd_rate_percent;
  j["bd_psnr_db"] = r.bd_psnr_db;
  return j.dump(2) + "\n";
}

}  // namespace prunevc
