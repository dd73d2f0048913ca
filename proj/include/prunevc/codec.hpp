#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "prunevc/autograd.hpp"
#include "prunevc/entropy.hpp"
#include "prunevc/tensor.hpp"
#include "prunevc/topology.hpp"

namespace prunevc {

struct CodecConfig {
  std::int64_t input_channels = 1;
  std::int64_t base_width = 32;
  std::int64_t latent_channels = 48;
  int num_downsamples = 3;
};

// Two-branch P-frame layer graph: a frame-prediction branch conditioned on
// the reference and a residual branch, each an analysis stack to a coded
// latent plus a synthesis stack back to pixels. Synthesis (decoder) layers
// carry prunable filters; the pixel-output heads stay fixed-arity.
Topology make_codec_topology(const CodecConfig& cfg);

// Hard row masks plus the surrogate decay factor for the step.
struct PruneRuntime {
  float beta = 1.0f;
  std::map<std::string, std::vector<char>> keep;
};

struct ForwardResult {
  Value xhat;        // reconstruction; clamped to [0,1] in eval mode
  Value rate_pred;   // bits for the prediction-branch latent
  Value rate_res;    // bits for the residual-branch latent
  Value latent_pred; // coded symbols behind rate_pred
  Value latent_res;  // coded symbols behind rate_res
  Value mse;         // mean squared error against the current frame
  std::map<std::string, Value> hidden;  // prunable-layer outputs by id
};

class CodecModel {
 public:
  Topology topo;
  std::map<std::string, Tensor> params;
  std::int64_t input_channels = 1;
  std::int64_t latent_channels = 0;
  int num_downsamples = 0;
  bool shared_threshold = false;

  // fresh model: Xavier-uniform weights, zero biases and thresholds,
  // unit entropy scales
  static CodecModel init(const CodecConfig& cfg, std::uint64_t seed,
                         bool shared_threshold = false);

  // rebuild from checkpoint arrays; per-layer channel counts come from the
  // stored weight shapes, so compacted models round-trip too
  static CodecModel from_arrays(const CodecConfig& cfg,
                                const std::map<std::string, Tensor>& arrays,
                                bool shared_threshold = false);

  std::vector<std::string> prunable_ids() const;
  std::string threshold_param(const std::string& layer_id) const;
  float threshold_of(const std::string& layer_id) const;

  // One coding pass over a batch. In train mode the latents carry seeded
  // uniform noise (counters noise_counter_base and +1) and xhat is left
  // unclamped; eval rounds and clamps. `prune` masks prunable filters;
  // null runs the dense model. Parameter leaves are recorded in
  // `leaves_out` when given, for gradient collection.
  ForwardResult code_frame(Tape& tape, const Tensor& x, const Tensor& xref,
                           CodingMode mode, std::uint64_t noise_seed,
                           std::uint64_t noise_counter_base,
                           const PruneRuntime* prune, bool requires_grad,
                           std::map<std::string, Value>* leaves_out) const;
};

inline double psnr_db(double mse, double peak = 1.0) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

template <typename S>
double psnr(const TensorT<S>& a, const TensorT<S>& b, double peak = 1.0) {
  if (!a.same_shape(b))
    throw ShapeError("psnr: shapes " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data[i]) -
                     static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return psnr_db(acc / static_cast<double>(a.numel()), peak);
}

}  // namespace prunevc
