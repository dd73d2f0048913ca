#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prunevc/bd.hpp"
#include "prunevc/checkpoint.hpp"
#include "prunevc/complexity.hpp"
#include "prunevc/config.hpp"
#include "prunevc/errors.hpp"
#include "prunevc/gradsuite.hpp"
#include "prunevc/training.hpp"

namespace pv = prunevc;

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw pv::IoError("cannot write '" + path + "'");
  out << text;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

pv::EvalMetrics eval_checkpoint(const pv::ExperimentConfig& cfg,
                                const std::string& ckpt_path, bool dense) {
  pv::Checkpoint ckpt = pv::load_checkpoint(ckpt_path);
  pv::CodecModel model = pv::CodecModel::from_arrays(cfg.codec, ckpt.arrays,
                                                     cfg.shared_threshold);
  if (dense || model.prunable_ids().empty())
    return pv::evaluate(cfg, model, nullptr);
  pv::PruneRuntime pr{1.0f, pv::model_masks(model)};
  return pv::evaluate(cfg, model, &pr);
}

struct AblateCell {
  std::string approximator;
  std::string distill;
  double s_tar;
};

int run_ablate(const pv::ExperimentConfig& base,
               const std::vector<std::string>& approximators,
               const std::vector<std::string>& distill_modes,
               const std::vector<double>& s_tars, int seeds,
               const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<AblateCell> cells;
  for (const auto& a : approximators)
    for (const auto& d : distill_modes)
      for (double s : s_tars) cells.push_back({a, d, s});

  bool needs_teacher = false;
  for (const auto& c : cells)
    if (c.distill != "none") needs_teacher = true;

  std::map<int, std::string> teacher_paths;
  for (int si = 0; si < seeds; ++si) {
    if (!needs_teacher) break;
    pv::ExperimentConfig tcfg = base;
    tcfg.seed = base.seed + static_cast<std::uint64_t>(si);
    tcfg.out_dir = out_dir + "/teacher/seed" + std::to_string(si);
    std::cout << "[ablate] teacher seed " << tcfg.seed << "\n" << std::flush;
    pv::TrainResult tr = pv::train_dense(tcfg);
    teacher_paths[si] = tr.final_checkpoint;
  }

  std::ofstream rows(out_dir + "/ablation.csv", std::ios::trunc);
  if (!rows) throw pv::IoError("cannot write ablation.csv");
  rows << "approximator,distill_mode,s_tar,seed,eval_rds,eval_rate_bpp,"
          "eval_psnr_db,eval_mse,hard_sparsity\n";

  std::map<std::string, std::vector<pv::EvalMetrics>> per_cell;
  for (const auto& c : cells) {
    for (int si = 0; si < seeds; ++si) {
      pv::ExperimentConfig cfg = base;
      cfg.approximator = c.approximator;
      cfg.distill_mode = c.distill;
      cfg.sched.s_tar = c.s_tar;
      cfg.seed = base.seed + static_cast<std::uint64_t>(si);
      char sbuf[32];
      std::snprintf(sbuf, sizeof sbuf, "%g", c.s_tar);
      const std::string cell =
          c.approximator + "_" + c.distill + "_s" + sbuf;
      cfg.out_dir = out_dir + "/" + cell + "/seed" + std::to_string(si);
      std::cout << "[ablate] " << cell << " seed " << cfg.seed << "\n"
                << std::flush;
      pv::TrainResult r = pv::train_sparse(
          cfg, c.distill == "none" ? std::string() : teacher_paths.at(si));
      rows << c.approximator << ',' << c.distill << ',' << fmt_g(c.s_tar)
           << ',' << cfg.seed << ',' << fmt_g(r.eval.rds) << ','
           << fmt_g(r.eval.rate_bpp) << ',' << fmt_g(r.eval.psnr_db) << ','
           << fmt_g(r.eval.mse) << ',' << fmt_g(r.eval.hard_sparsity)
           << '\n'
           << std::flush;
      per_cell[cell].push_back(r.eval);
    }
  }

  std::ofstream med(out_dir + "/ablation_median.csv", std::ios::trunc);
  if (!med) throw pv::IoError("cannot write ablation_median.csv");
  med << "cell,median_eval_rds,median_rate_bpp,median_psnr_db\n";
  for (const auto& [cell, metrics] : per_cell) {
    std::vector<double> rds, rate, psnr;
    for (const auto& m : metrics) {
      rds.push_back(m.rds);
      rate.push_back(m.rate_bpp);
      psnr.push_back(m.psnr_db);
    }
    med << cell << ',' << fmt_g(median(rds)) << ',' << fmt_g(median(rate))
        << ',' << fmt_g(median(psnr)) << '\n';
  }
  std::cout << "[ablate] wrote " << out_dir << "/ablation.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured pruning for a toy learned P-frame codec"};
  app.require_subcommand(1);

  std::string config_path, out_override, teacher_path, resume_path;
  std::string ckpt_path, out_path, report_path, plan_path, json_path;
  std::string ref_csv, test_csv, rd_csv;
  std::vector<std::string> ckpt_paths, approximators{"ste", "gd"},
      distill_modes{"none", "adaptive"};
  std::vector<double> s_tars;
  std::int64_t stop_after = 0;
  int gc_configs = 20, seeds = 1;
  std::uint64_t gc_seed = 1;
  bool eval_dense = false, all_params = false;

  auto* dense = app.add_subcommand("train-dense", "pretrain a dense teacher");
  dense->add_option("--config", config_path, "experiment config")->required();
  dense->add_option("--out", out_override, "override [run] out_dir");

  auto* prune = app.add_subcommand("prune", "sparsity-scheduled prune run");
  prune->add_option("--config", config_path, "experiment config")->required();
  prune->add_option("--teacher", teacher_path,
                    "dense teacher checkpoint (needed unless distill none)");
  prune->add_option("--resume", resume_path, "mid-run checkpoint to continue");
  prune->add_option("--stop-after", stop_after,
                    "stop once this many total steps are done");
  prune->add_option("--out", out_override, "override [run] out_dir");

  auto* ev = app.add_subcommand("eval", "evaluate checkpoints; emit RD curve");
  ev->add_option("--config", config_path, "experiment config")->required();
  ev->add_option("--ckpt", ckpt_paths, "checkpoint(s), one per rate point")
      ->required();
  ev->add_flag("--dense", eval_dense, "ignore thresholds, run unmasked");
  ev->add_option("--rd-csv", rd_csv, "write rate_bpp,psnr_db CSV");
  ev->add_option("--json", json_path, "write metrics JSON (single ckpt)");

  auto* compact = app.add_subcommand("compact",
                                     "materialize the pruned model");
  compact->add_option("--config", config_path, "experiment config")
      ->required();
  compact->add_option("--ckpt", ckpt_path, "pruned checkpoint")->required();
  compact->add_option("--out", out_path, "compacted checkpoint path")
      ->required();
  compact->add_option("--report", report_path, "complexity report JSON");
  compact->add_option("--plan", plan_path, "kept-channel plan JSON");
  compact->add_flag("--all-params", all_params,
                    "count parameters model-wide, not decoder-only");

  auto* bd = app.add_subcommand("bd", "Bjontegaard deltas between RD curves");
  bd->add_option("--reference", ref_csv, "reference RD CSV")->required();
  bd->add_option("--test", test_csv, "test RD CSV")->required();
  bd->add_option("--out", out_path, "write BD JSON");

  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference gradient verification");
  gc->add_option("--configs", gc_configs, "configurations per family")
      ->check(CLI::PositiveNumber);
  gc->add_option("--seed", gc_seed, "suite seed");

  auto* ab = app.add_subcommand("ablate", "approximator/distillation grid");
  ab->add_option("--config", config_path, "base experiment config")
      ->required();
  ab->add_option("--approximators", approximators, "grid: ste,gd")
      ->delimiter(',');
  ab->add_option("--distill-modes", distill_modes,
                 "grid: none,full,adaptive")
      ->delimiter(',');
  ab->add_option("--s-tar", s_tars, "grid of target sparsities")
      ->delimiter(',');
  ab->add_option("--seeds", seeds, "number of seeds (base seed + i)")
      ->check(CLI::PositiveNumber);
  ab->add_option("--out", out_path, "ablation output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(pv::ExitCode::config_error);
  }

  try {
    if (dense->parsed()) {
      pv::ExperimentConfig cfg = pv::ExperimentConfig::from_file(config_path);
      if (!out_override.empty()) cfg.out_dir = out_override;
      pv::TrainResult r = pv::train_dense(cfg);
      std::cout << "dense run done: " << r.final_checkpoint
                << " eval_rds=" << fmt_g(r.eval.rds) << "\n";
    } else if (prune->parsed()) {
      pv::ExperimentConfig cfg = pv::ExperimentConfig::from_file(config_path);
      if (!out_override.empty()) cfg.out_dir = out_override;
      pv::TrainResult r =
          pv::train_sparse(cfg, teacher_path, resume_path, stop_after);
      if (r.completed)
        std::cout << "prune run done: " << r.final_checkpoint
                  << " eval_rds=" << fmt_g(r.eval.rds)
                  << " hard_sparsity=" << fmt_g(r.final_hard_sparsity)
                  << "\n";
      else
        std::cout << "prune run stopped early: " << r.final_checkpoint
                  << "\n";
    } else if (ev->parsed()) {
      pv::ExperimentConfig cfg = pv::ExperimentConfig::from_file(config_path);
      std::vector<std::pair<std::string, pv::EvalMetrics>> results;
      for (const auto& p : ckpt_paths)
        results.emplace_back(p, eval_checkpoint(cfg, p, eval_dense));
      for (const auto& [p, m] : results)
        std::cout << p << ": rate_bpp=" << fmt_g(m.rate_bpp)
                  << " psnr_db=" << fmt_g(m.psnr_db)
                  << " rds=" << fmt_g(m.rds) << "\n";
      if (!rd_csv.empty()) {
        auto sorted = results;
        std::sort(sorted.begin(), sorted.end(),
                  [](const auto& a, const auto& b) {
                    return a.second.rate_bpp < b.second.rate_bpp;
                  });
        std::string text = "rate_bpp,psnr_db\n";
        for (const auto& [p, m] : sorted)
          text += fmt_g(m.rate_bpp) + "," + fmt_g(m.psnr_db) + "\n";
        write_text(rd_csv, text);
      }
      if (!json_path.empty()) {
        if (results.size() != 1)
          throw pv::ConfigError("--json expects exactly one --ckpt");
        write_text(json_path, pv::eval_json(results[0].second));
      }
    } else if (compact->parsed()) {
      pv::ExperimentConfig cfg = pv::ExperimentConfig::from_file(config_path);
      pv::Checkpoint ckpt = pv::load_checkpoint(ckpt_path);
      pv::CodecModel model = pv::CodecModel::from_arrays(
          cfg.codec, ckpt.arrays, cfg.shared_threshold);
      if (model.prunable_ids().empty())
        throw pv::ConfigError("compact: checkpoint has no thresholds; "
                              "nothing to prune away");
      auto plan = pv::compaction_plan(model.topo, pv::model_masks(model));
      pv::CodecModel small = pv::compact_model(model, plan);
      pv::Checkpoint out;
      out.manifest = ckpt.manifest;
      out.arrays = small.params;
      out.meta["kind"] = "compact";
      pv::save_checkpoint(out_path, out);
      auto report = pv::complexity_report(model.topo, plan, cfg.height,
                                          cfg.width, !all_params, 0);
      const std::string rj = pv::complexity_json(report);
      std::cout << rj;
      if (!report_path.empty()) write_text(report_path, rj);
      if (!plan_path.empty()) write_text(plan_path, pv::plan_json(plan));
    } else if (bd->parsed()) {
      pv::BDResult r = pv::bd_metrics(pv::read_rd_csv(ref_csv),
                                      pv::read_rd_csv(test_csv));
      const std::string j = pv::bd_json(r);
      std::cout << j;
      if (!out_path.empty()) write_text(out_path, j);
    } else if (gc->parsed()) {
      auto results = pv::run_grad_suite(gc_configs, gc_seed);
      bool all_ok = true;
      for (const auto& r : results) {
        std::cout << (r.ok ? "PASS " : "FAIL ") << r.family << " ("
                  << r.configs << " configs, worst rel err "
                  << fmt_g(r.worst_rel_err) << ")\n";
        all_ok = all_ok && r.ok;
      }
      return all_ok ? 0 : static_cast<int>(pv::ExitCode::failure);
    } else if (ab->parsed()) {
      pv::ExperimentConfig cfg = pv::ExperimentConfig::from_file(config_path);
      if (s_tars.empty()) s_tars.push_back(cfg.sched.s_tar);
      if (out_path.empty()) out_path = cfg.resolved_out_dir() + "/ablate";
      return run_ablate(cfg, approximators, distill_modes, s_tars, seeds,
                        out_path);
    }
  } catch (const pv::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(pv::ExitCode::failure);
  }
  return 0;
}
