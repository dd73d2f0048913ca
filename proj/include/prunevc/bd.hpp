#pragma once

#include <string>
#include <vector>

namespace prunevc {

struct RDPoint {
  double rate_bpp = 0.0;
  double psnr_db = 0.0;
};

struct BDResult {
  double bd_rate_percent = 0.0;  // average rate change at equal quality
  double bd_psnr_db = 0.0;       // average quality change at equal rate
};

// CSV with header `rate_bpp,psnr_db` and one point per row
std::vector<RDPoint> read_rd_csv(const std::string& path);

// Cubic fits of quality against log10(rate) (and the transposed fit),
// averaged over the overlapping range by trapezoidal integration.
// Each curve needs >= 4 points with strictly increasing rate and quality;
// the overlap must be non-empty.
BDResult bd_metrics(const std::vector<RDPoint>& reference,
                    const std::vector<RDPoint>& test, int samples = 2048);

std::string bd_json(const BDResult& r);

}  // namespace prunevc
