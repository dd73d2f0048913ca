#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prunevc/codec.hpp"
#include "prunevc/config.hpp"
#include "prunevc/data.hpp"
#include "prunevc/tensor.hpp"

namespace prunevc {

// lr0 up to 40% of training, then halved at 40/60/80/90%
double lr_schedule(std::int64_t k, std::int64_t K, double lr0);

// Adaptive-moment optimizer with per-parameter slots keyed by name.
// Slots round-trip bit-exactly through export/import for resumable runs.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // one in-place update; lr must already include any per-group multiplier
  void step(const std::string& name, Tensor& param, const Tensor& grad,
            double lr);

  void export_state(std::map<std::string, Tensor>& arrays,
                    std::map<std::string, std::string>& meta) const;
  void import_state(const std::map<std::string, Tensor>& arrays,
                    const std::map<std::string, std::string>& meta);

 private:
  double beta1_, beta2_, eps_;
  std::map<std::string, Tensor> m_, v_;
  std::map<std::string, std::int64_t> t_;
};

struct EvalMetrics {
  double rate_bpp = 0.0;
  double psnr_db = 0.0;
  double mse = 0.0;
  double rds = 0.0;  // rate_bpp + lambda1*mse + lambda2*|hard - s_tar|
  double hard_sparsity = 0.0;
};

std::string eval_json(const EvalMetrics& m);

// training clips per the config (synthetic or files)
std::vector<FrameSequence> load_dataset(const ExperimentConfig& cfg);

// Deterministic held-out evaluation: synthetic clips from a seed disjoint
// from the training stream, coded in eval mode (rounding, clamped output).
// `prune` null evaluates the dense model.
EvalMetrics evaluate(const ExperimentConfig& cfg, const CodecModel& model,
                     const PruneRuntime* prune);

struct TrainResult {
  EvalMetrics eval;                // final held-out metrics (completed runs)
  double final_hard_sparsity = 0.0;
  double final_gap_term = 0.0;     // lambda2*|soft - s_tar| at the last step
  std::vector<double> total_loss;  // per executed step
  std::string final_checkpoint;
  bool completed = false;          // false when stop_after ended the run early
};

// rate + lambda1*distortion only; writes dense.pvck and the metric log
TrainResult train_dense(const ExperimentConfig& cfg);

// Full pruning run. `teacher_path` is required unless distill_mode is
// "none". `resume_path` continues a stopped run; the stored manifest must
// equal the config's. `stop_after` > 0 stops once that absolute step count
// is reached and writes mid.pvck instead of finishing.
TrainResult train_sparse(const ExperimentConfig& cfg,
                         const std::string& teacher_path,
                         const std::string& resume_path = "",
                         std::int64_t stop_after = 0);

}  // namespace prunevc
