#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prunevc/codec.hpp"
#include "prunevc/pruning.hpp"
#include "prunevc/topology.hpp"

namespace prunevc {

struct LayerComplexity {
  std::string id;
  bool decoder = false;
  std::int64_t macs_dense = 0;
  std::int64_t macs_pruned = 0;
  std::int64_t params_dense = 0;
  std::int64_t params_pruned = 0;
};

// MAC counts cover decoder-scope convolutions only; parameter counts cover
// all convolutions (or decoder scope when flagged) plus `extra_params`
// side parameters counted identically on both sides.
struct ComplexityReport {
  std::int64_t params_total = 0;
  std::int64_t params_after = 0;
  std::int64_t macs_total = 0;
  std::int64_t macs_after = 0;
  std::vector<LayerComplexity> layers;
};

// Per conv: out_H*out_W*k^2*c_in_kept*c_out_kept; transposed convs counted
// at their input resolution. Spatial dims propagate from (base_h, base_w)
// through source scales.
ComplexityReport complexity_report(const Topology& topo,
                                   const CompactionPlan& plan,
                                   std::int64_t base_h, std::int64_t base_w,
                                   bool decoder_only_params = false,
                                   std::int64_t extra_params = 0);

std::string complexity_json(const ComplexityReport& r);
std::string plan_json(const CompactionPlan& plan);

// current keep masks of every prunable layer, from dense-weight norms
std::map<std::string, std::vector<char>> model_masks(const CodecModel& m);

// physically smaller dense model: pruned output channels removed, consumer
// input slices removed with concat offsets remapped
CodecModel compact_model(const CodecModel& m, const CompactionPlan& plan);

}  // namespace prunevc
