#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "prunevc/codec.hpp"
#include "prunevc/distill.hpp"
#include "prunevc/pruning.hpp"

namespace prunevc {

// Flat sectioned key-value text: `[section]`, `key = value`, `#` comments.
// Sections may repeat; the last assignment of a key wins.
struct IniFile {
  std::vector<std::pair<std::string,
                        std::vector<std::pair<std::string, std::string>>>>
      sections;

  static IniFile parse(const std::string& text);
  const std::string* find(const std::string& section,
                          const std::string& key) const;
};

// Every experiment knob, resolved to concrete values. The manifest
// serialization is canonical: identical manifests mean identical runs.
struct ExperimentConfig {
  CodecConfig codec;

  std::string data_source = "synth";  // synth | file
  std::string data_path;              // one or more clips, ';'-separated
  std::int64_t synth_sequences = 8;
  std::int64_t synth_length = 16;
  std::int64_t width = 96;
  std::int64_t height = 96;
  double motion = 1.5;
  std::int64_t crop = 32;
  std::int64_t batch = 4;

  ScheduleSet sched;  // L0, L1, tau, s_tar, K, schedule_mode
  std::string step_scaling = "none";  // none | proportional
  std::int64_t dense_steps = 2000;
  std::int64_t save_every = 0;  // 0: final checkpoint only

  double lambda1 = 1024.0;
  double lambda2 = 20.0;
  double lambda3_init = 1.0;

  double lr0 = 1e-4;
  double threshold_lr_mult = 20.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::string approximator = "gd";  // gd | ste
  bool shared_threshold = false;
  bool sparsity_grad_to_weights = false;

  std::string distill_mode = "adaptive";  // none | full | adaptive
  std::string stage_plan_text = "pred:0.3,res:0.3,all:0.4";
  bool per_channel_norm = false;

  std::uint64_t seed = 1;
  std::string out_dir = "run";

  static ExperimentConfig from_text(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);

  void validate() const;
  std::string manifest() const;

  // stage names resolve against the codec topology's prunable groups
  StagePlan resolve_stage_plan(const std::vector<std::string>& prunable) const;

  // out_dir, prefixed by the output-root environment override when set
  std::string resolved_out_dir() const;

  std::int64_t prune_steps() const;  // K after step_scaling
};

inline constexpr const char* kOutRootEnv = "PRUNEVC_OUT_ROOT";

}  // namespace prunevc
