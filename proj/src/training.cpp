#include "prunevc/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "prunevc/checkpoint.hpp"
#include "prunevc/complexity.hpp"
#include "prunevc/distill.hpp"
#include "prunevc/entropy.hpp"
#include "prunevc/errors.hpp"
#include "prunevc/ops.hpp"
#include "prunevc/pruning.hpp"
#include "prunevc/rng.hpp"

namespace prunevc {
namespace {

constexpr const char* kLogName = "train_log.csv";
constexpr const char* kLogHeader =
    "step,beta,lambda3,lr,soft_sparsity,hard_sparsity,target_sparsity,"
    "rate_bpp,psnr_db,rds_loss,distill_loss,total_loss";
constexpr std::int64_t kEvalClips = 4;
constexpr std::int64_t kEvalLength = 8;
// salts keep the training and evaluation clip streams disjoint
constexpr std::uint64_t kTrainSalt = 0x7452'41494eull;
constexpr std::uint64_t kEvalSalt = 0x45'564cull;

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double sv(const Value& v) { return static_cast<double>(v.val().data[0]); }

double hard_from_masks(const std::map<std::string, std::vector<char>>& masks) {
  std::int64_t total = 0, pruned = 0;
  for (const auto& [id, keep] : masks) {
    total += static_cast<std::int64_t>(keep.size());
    for (char c : keep)
      if (!c) ++pruned;
  }
  return total ? static_cast<double>(pruned) / static_cast<double>(total)
               : 0.0;
}

double soft_sparsity_scalar(const CodecModel& m, double tau) {
  std::int64_t total = 0;
  double acc = 0.0;
  for (const auto& id : m.prunable_ids()) {
    Tensor n = row_norms(m.params.at(id + ".w"));
    const double t = m.threshold_of(id);
    total += n.numel();
    for (std::int64_t i = 0; i < n.numel(); ++i)
      acc += sigmoid_d(tau * (static_cast<double>(n.data[i]) - t));
  }
  return total ? 1.0 - acc / static_cast<double>(total) : 0.0;
}

void write_run_records(const std::string& dir, const ExperimentConfig& cfg) {
  const std::string mpath = dir + "/manifest.ini";
  std::ofstream m(mpath, std::ios::trunc);
  if (!m) throw IoError("training: cannot write '" + mpath + "'");
  m << cfg.manifest();
  const std::string spath = dir + "/seed.txt";
  std::ofstream s(spath, std::ios::trunc);
  if (!s) throw IoError("training: cannot write '" + spath + "'");
  s << cfg.seed << "\n";
}

std::ofstream open_log(const std::string& dir, std::int64_t start_step) {
  const std::string path = dir + "/" + kLogName;
  if (start_step == 0) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("training: cannot write '" + path + "'");
    out << kLogHeader << "\n";
    return out;
  }
  const bool existed = std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("training: cannot append to '" + path + "'");
  if (!existed) out << kLogHeader << "\n";
  return out;
}

void write_row(std::ofstream& log, std::int64_t step, double beta,
               double lambda3, double lr, double soft, double hard,
               double target, double rate_bpp, double psnr, double rds,
               double distill, double total) {
  log << step << ',' << fmt_g(beta) << ',' << fmt_g(lambda3) << ','
      << fmt_g(lr) << ',' << fmt_g(soft) << ',' << fmt_g(hard) << ','
      << fmt_g(target) << ',' << fmt_g(rate_bpp) << ',' << fmt_g(psnr) << ','
      << fmt_g(rds) << ',' << fmt_g(distill) << ',' << fmt_g(total) << '\n';
}

void save_run_checkpoint(const std::string& path, const ExperimentConfig& cfg,
                         const CodecModel& model, const Adam& opt,
                         std::int64_t steps_done, const std::string& kind,
                         const std::map<std::string, std::string>& extra) {
  Checkpoint ckpt;
  ckpt.manifest = cfg.manifest();
  ckpt.arrays = model.params;
  ckpt.meta["kind"] = kind;
  ckpt.meta["steps_done"] = std::to_string(steps_done);
  opt.export_state(ckpt.arrays, ckpt.meta);
  for (const auto& kv : extra) ckpt.meta.insert(kv);
  save_checkpoint(path, ckpt);
}

[[noreturn]] void abort_non_finite(const std::string& dir, std::int64_t step,
                                   const std::string& detail,
                                   const CodecModel& model) {
  const std::string path = dir + "/diagnostics.txt";
  std::ofstream out(path, std::ios::trunc);
  out << "non-finite loss at step " << step << ": " << detail << "\n";
  for (const auto& id : model.prunable_ids()) {
    Tensor n = row_norms(model.params.at(id + ".w"));
    out << id << " threshold " << fmt_g(model.threshold_of(id)) << " norms";
    for (std::int64_t i = 0; i < n.numel(); ++i)
      out << ' ' << fmt_g(static_cast<double>(n.data[i]));
    out << "\n";
  }
  throw NumericFault("training: non-finite loss at step " +
                     std::to_string(step) + "; diagnostics dumped to '" +
                     path + "'");
}

Tensor stack_frames(const std::vector<Tensor>& frames, std::int64_t first,
                    std::int64_t count) {
  const Shape& fs = frames[static_cast<std::size_t>(first)].shape;
  Tensor out(Shape{count, fs[0], fs[1], fs[2]});
  const std::int64_t per = fs[0] * fs[1] * fs[2];
  for (std::int64_t i = 0; i < count; ++i)
    out.data.segment(i * per, per) =
        frames[static_cast<std::size_t>(first + i)].data;
  return out;
}

}  // namespace

double lr_schedule(std::int64_t k, std::int64_t K, double lr0) {
  const double r = static_cast<double>(k) / static_cast<double>(K);
  if (r < 0.4) return lr0;
  if (r < 0.6) return lr0 / 2.0;
  if (r < 0.8) return lr0 / 4.0;
  if (r < 0.9) return lr0 / 8.0;
  return lr0 / 16.0;
}

void Adam::step(const std::string& name, Tensor& param, const Tensor& grad,
                double lr) {
  if (!param.same_shape(grad))
    throw ShapeError("adam: gradient shape " + shape_str(grad.shape) +
                     " does not match parameter '" + name + "' " +
                     shape_str(param.shape));
  Tensor& m = m_[name];
  Tensor& v = v_[name];
  if (m.numel() != param.numel()) {
    m = Tensor::zeros(param.shape);
    v = Tensor::zeros(param.shape);
  }
  const std::int64_t t = ++t_[name];
  const float b1 = static_cast<float>(beta1_);
  const float b2 = static_cast<float>(beta2_);
  const float c1 = static_cast<float>(
      1.0 / (1.0 - std::pow(beta1_, static_cast<double>(t))));
  const float c2 = static_cast<float>(
      1.0 / (1.0 - std::pow(beta2_, static_cast<double>(t))));
  const float feps = static_cast<float>(eps_);
  const float flr = static_cast<float>(lr);
  m.data = b1 * m.data + (1.0f - b1) * grad.data;
  v.data = b2 * v.data + (1.0f - b2) * grad.data.square();
  param.data -= (flr * c1) * m.data / ((c2 * v.data).sqrt() + feps);
}

void Adam::export_state(std::map<std::string, Tensor>& arrays,
                        std::map<std::string, std::string>& meta) const {
  for (const auto& [name, t] : m_) arrays["opt.m." + name] = t;
  for (const auto& [name, t] : v_) arrays["opt.v." + name] = t;
  for (const auto& [name, t] : t_)
    meta["opt.t." + name] = std::to_string(t);
}

void Adam::import_state(const std::map<std::string, Tensor>& arrays,
                        const std::map<std::string, std::string>& meta) {
  m_.clear();
  v_.clear();
  t_.clear();
  for (const auto& [name, t] : arrays) {
    if (name.rfind("opt.m.", 0) == 0) m_[name.substr(6)] = t;
    if (name.rfind("opt.v.", 0) == 0) v_[name.substr(6)] = t;
  }
  for (const auto& [key, val] : meta)
    if (key.rfind("opt.t.", 0) == 0) t_[key.substr(6)] = std::stoll(val);
  if (m_.size() != v_.size() || m_.size() != t_.size())
    throw IoError("checkpoint: optimizer slots are inconsistent");
}

std::string eval_json(const EvalMetrics& m) {
  nlohmann::ordered_json j;
  j["rate_bpp"] = m.rate_bpp;
  j["psnr_db"] = m.psnr_db;
  j["mse"] = m.mse;
  j["rds"] = m.rds;
  j["hard_sparsity"] = m.hard_sparsity;
  return j.dump(2) + "\n";
}

std::vector<FrameSequence> load_dataset(const ExperimentConfig& cfg) {
  std::vector<FrameSequence> seqs;
  if (cfg.data_source == "synth") {
    const std::uint64_t salt = mix64(cfg.seed ^ kTrainSalt);
    for (std::int64_t i = 0; i < cfg.synth_sequences; ++i)
      seqs.push_back(synth_sequence(salt + static_cast<std::uint64_t>(i),
                                    cfg.synth_length, cfg.width, cfg.height,
                                    cfg.codec.input_channels, cfg.motion));
    return seqs;
  }
  std::istringstream in(cfg.data_path);
  std::string path;
  while (std::getline(in, path, ';')) {
    if (path.empty()) continue;
    seqs.push_back(load_raw(path));
    if (seqs.back().channels != cfg.codec.input_channels)
      throw ConfigError("data: '" + path + "' has " +
                        std::to_string(seqs.back().channels) +
                        " channels, codec expects " +
                        std::to_string(cfg.codec.input_channels));
  }
  if (seqs.empty()) throw ConfigError("data: data_path names no clips");
  return seqs;
}

EvalMetrics evaluate(const ExperimentConfig& cfg, const CodecModel& model,
                     const PruneRuntime* prune) {
  std::vector<FrameSequence> seqs;
  if (cfg.data_source == "synth") {
    const std::uint64_t salt = mix64(cfg.seed ^ kEvalSalt);
    for (std::int64_t i = 0; i < kEvalClips; ++i)
      seqs.push_back(synth_sequence(salt + static_cast<std::uint64_t>(i),
                                    kEvalLength, cfg.width, cfg.height,
                                    cfg.codec.input_channels, cfg.motion));
  } else {
    seqs = load_dataset(cfg);
  }

  double bits = 0.0, pixels = 0.0, mse_acc = 0.0;
  std::int64_t frames = 0;
  for (const auto& seq : seqs) {
    const std::int64_t n =
        static_cast<std::int64_t>(seq.frames.size()) - 1;
    if (n < 1)
      throw ConfigError("eval: clip '" + seq.source +
                        "' has fewer than 2 frames");
    Tensor cur = stack_frames(seq.frames, 1, n);
    Tensor ref = stack_frames(seq.frames, 0, n);
    Tape tape;
    ForwardResult fwd = model.code_frame(tape, cur, ref, CodingMode::eval, 0,
                                         0, prune, false, nullptr);
    bits += sv(fwd.rate_pred) + sv(fwd.rate_res);
    pixels += static_cast<double>(n * seq.height * seq.width);
    mse_acc += sv(fwd.mse) * static_cast<double>(n);
    frames += n;
  }

  EvalMetrics m;
  m.mse = mse_acc / static_cast<double>(frames);
  m.rate_bpp = bits / pixels;
  m.psnr_db = psnr_db(m.mse);
  m.hard_sparsity = prune ? hard_from_masks(prune->keep) : 0.0;
  m.rds = m.rate_bpp + cfg.lambda1 * m.mse +
          cfg.lambda2 * std::abs(m.hard_sparsity - cfg.sched.s_tar);
  return m;
}

TrainResult train_dense(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::string dir = cfg.resolved_out_dir();
  std::filesystem::create_directories(dir);
  write_run_records(dir, cfg);
  auto data = load_dataset(cfg);
  const std::int64_t K = cfg.dense_steps;

  CodecModel model = CodecModel::init(cfg.codec, cfg.seed,
                                      cfg.shared_threshold);
  Adam opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::ofstream log = open_log(dir, 0);
  TrainResult result;

  for (std::int64_t k = 0; k < K; ++k) try {
    const double lr = lr_schedule(k, K, cfg.lr0);
    FrameBatch b = make_batch(data, cfg.batch, cfg.crop, cfg.seed, k);
    Tape tape;
    std::map<std::string, Value> leaves;
    ForwardResult fwd = model.code_frame(
        tape, b.current, b.reference, CodingMode::train, cfg.seed,
        2 * static_cast<std::uint64_t>(k), nullptr, true, &leaves);
    const float inv_pix = static_cast<float>(
        1.0 / static_cast<double>(cfg.batch * cfg.crop * cfg.crop));
    Value rate_bpp = mul_const(add(fwd.rate_pred, fwd.rate_res), inv_pix);
    Value loss = add(rate_bpp,
                     mul_const(fwd.mse, static_cast<float>(cfg.lambda1)));

    const double loss_v = sv(loss);
    if (!std::isfinite(loss_v))
      throw NumericFault("loss value " + fmt_g(loss_v));
    tape.backward(loss);
    for (auto& [name, leaf] : leaves) {
      if (!leaf.has_grad()) continue;
      opt.step(name, model.params.at(name), leaf.grad(), lr);
    }

    result.total_loss.push_back(loss_v);
    write_row(log, k, 1.0, 0.0, lr, 0.0, 0.0, 0.0, sv(rate_bpp),
              psnr_db(sv(fwd.mse)), loss_v, 0.0, loss_v);
  } catch (const NumericFault& e) {
    abort_non_finite(dir, k, e.what(), model);
  }

  result.eval = evaluate(cfg, model, nullptr);
  result.completed = true;
  result.final_checkpoint = dir + "/dense.pvck";
  std::map<std::string, std::string> extra{
      {"eval_rate_bpp", fmt_g(result.eval.rate_bpp)},
      {"eval_psnr_db", fmt_g(result.eval.psnr_db)},
      {"eval_rds", fmt_g(result.eval.rds)}};
  save_run_checkpoint(result.final_checkpoint, cfg, model, opt, K, "dense",
                      extra);
  std::ofstream(dir + "/eval.json") << eval_json(result.eval);
  return result;
}

TrainResult train_sparse(const ExperimentConfig& cfg,
                         const std::string& teacher_path,
                         const std::string& resume_path,
                         std::int64_t stop_after) {
  cfg.validate();
  const std::string dir = cfg.resolved_out_dir();
  std::filesystem::create_directories(dir);
  write_run_records(dir, cfg);
  auto data = load_dataset(cfg);

  const std::int64_t K = cfg.prune_steps();
  ScheduleSet sched = cfg.sched;
  sched.K = K;
  const bool gd = cfg.approximator == "gd";
  const bool distill_on = cfg.distill_mode != "none" && cfg.lambda3_init > 0;

  CodecModel model = CodecModel::init(cfg.codec, cfg.seed,
                                      cfg.shared_threshold);
  Adam opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::int64_t start = 0;
  if (!resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    if (ckpt.manifest != cfg.manifest())
      throw ConfigError("resume: checkpoint manifest does not match the "
                        "current configuration");
    model = CodecModel::from_arrays(cfg.codec, ckpt.arrays,
                                    cfg.shared_threshold);
    opt.import_state(ckpt.arrays, ckpt.meta);
    start = std::stoll(ckpt.meta.at("steps_done"));
    if (start >= K)
      throw ConfigError("resume: checkpoint already has " +
                        std::to_string(start) + " of " + std::to_string(K) +
                        " steps");
  }

  CodecModel teacher;
  StagePlan plan;
  if (cfg.distill_mode != "none") {
    if (teacher_path.empty())
      throw ConfigError("training: distillation needs a teacher checkpoint");
    Checkpoint tc = load_checkpoint(teacher_path);
    teacher = CodecModel::from_arrays(cfg.codec, tc.arrays, false);
    plan = cfg.resolve_stage_plan(model.prunable_ids());
  }

  const auto prunable = model.prunable_ids();
  std::ofstream log = open_log(dir, start);
  TrainResult result;

  for (std::int64_t k = start; k < K; ++k) try {
    const double lr = lr_schedule(k, K, cfg.lr0);
    const double beta = gd ? beta_schedule(k, sched) : 1.0;
    const double s_tar_k = target_sparsity(k, sched);
    const double lambda3_k =
        distill_on ? lambda3_schedule(k, K, cfg.lambda3_init, sched.L0,
                                      sched.L1)
                   : 0.0;

    auto masks = model_masks(model);
    const double hard = hard_from_masks(masks);
    PruneRuntime pr{static_cast<float>(beta), std::move(masks)};

    FrameBatch b = make_batch(data, cfg.batch, cfg.crop, cfg.seed, k);
    Tape tape;
    std::map<std::string, Value> leaves;
    ForwardResult fwd = model.code_frame(
        tape, b.current, b.reference, CodingMode::train, cfg.seed,
        2 * static_cast<std::uint64_t>(k), &pr, true, &leaves);

    const float inv_pix = static_cast<float>(
        1.0 / static_cast<double>(cfg.batch * cfg.crop * cfg.crop));
    Value rate_bpp = mul_const(add(fwd.rate_pred, fwd.rate_res), inv_pix);
    Value rds = add(rate_bpp,
                    mul_const(fwd.mse, static_cast<float>(cfg.lambda1)));

    double soft_logged;
    double gap_logged = 0.0;
    std::map<std::string, Value> thr_leaves;
    if (cfg.lambda2 > 0) {
      std::vector<Value> norm_vals, thr_vals;
      for (const auto& id : prunable) {
        if (cfg.sparsity_grad_to_weights) {
          norm_vals.push_back(row_norms_op(leaves.at(id + ".w")));
        } else {
          norm_vals.push_back(
              tape.constant(row_norms(model.params.at(id + ".w"))));
        }
        const std::string tname = model.threshold_param(id);
        auto it = thr_leaves.find(tname);
        if (it == thr_leaves.end())
          it = thr_leaves
                   .emplace(tname, tape.leaf(model.params.at(tname), true))
                   .first;
        thr_vals.push_back(it->second);
      }
      Value s_soft = soft_sparsity(norm_vals, thr_vals,
                                   static_cast<float>(sched.tau));
      Value gap = mul_const(
          abs_op(add_const(s_soft, static_cast<float>(-s_tar_k))),
          static_cast<float>(cfg.lambda2));
      rds = add(rds, gap);
      soft_logged = sv(s_soft);
      gap_logged = sv(gap);
    } else {
      soft_logged = soft_sparsity_scalar(model, sched.tau);
    }

    Value total = rds;
    double distill_logged = 0.0;
    if (distill_on && lambda3_k > 0) {
      ForwardResult tf = teacher.code_frame(
          tape, b.current, b.reference, CodingMode::train, cfg.seed,
          2 * static_cast<std::uint64_t>(k), nullptr, false, nullptr);
      const auto& P = active_stage(k, K, plan).layers;
      std::map<std::string, Value> sh = fwd.hidden, th = tf.hidden;
      if (cfg.per_channel_norm) {
        auto remap = [](std::map<std::string, Value>& h) {
          for (auto& [id, v] : h) {
            const Shape& s = v.shape();
            v = reshape(v, Shape{s[0] * s[1], s[2] * s[3]});
          }
        };
        remap(sh);
        remap(th);
      }
      Value dl = distill_loss(sh, th, P);
      total = add(rds, mul_const(dl, static_cast<float>(lambda3_k)));
      distill_logged = sv(dl);
    }

    const double total_v = sv(total);
    if (!std::isfinite(total_v))
      throw NumericFault("loss value " + fmt_g(total_v));
    tape.backward(total);

    for (auto& [name, leaf] : leaves) {
      if (!leaf.has_grad()) continue;
      opt.step(name, model.params.at(name), leaf.grad(), lr);
    }
    for (auto& [tname, leaf] : thr_leaves) {
      if (!leaf.has_grad()) continue;
      Tensor& t = model.params.at(tname);
      opt.step(tname, t, leaf.grad(), lr * cfg.threshold_lr_mult);
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data[i] = std::max(t.data[i], 0.0f);
    }

    result.total_loss.push_back(total_v);
    result.final_gap_term = gap_logged;
    write_row(log, k, beta, lambda3_k, lr, soft_logged, hard, s_tar_k,
              sv(rate_bpp), psnr_db(sv(fwd.mse)), sv(rds), distill_logged,
              total_v);

    const std::int64_t done = k + 1;
    if (cfg.save_every > 0 && done % cfg.save_every == 0 && done < K) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06lld.pvck",
                    static_cast<long long>(done));
      save_run_checkpoint(dir + "/" + name, cfg, model, opt, done,
                          "sparse-mid", {});
    }
    if (stop_after > 0 && done >= stop_after && done < K) {
      result.final_checkpoint = dir + "/mid.pvck";
      save_run_checkpoint(result.final_checkpoint, cfg, model, opt, done,
                          "sparse-mid", {});
      result.final_hard_sparsity = hard_from_masks(model_masks(model));
      return result;
    }
  } catch (const NumericFault& e) {
    abort_non_finite(dir, k, e.what(), model);
  }

  auto final_masks = model_masks(model);
  result.final_hard_sparsity = hard_from_masks(final_masks);
  PruneRuntime pr{1.0f, std::move(final_masks)};
  result.eval = evaluate(cfg, model, &pr);
  result.completed = true;
  result.final_checkpoint = dir + "/final.pvck";
  std::map<std::string, std::string> extra{
      {"hard_sparsity", fmt_g(result.final_hard_sparsity)},
      {"eval_rate_bpp", fmt_g(result.eval.rate_bpp)},
      {"eval_psnr_db", fmt_g(result.eval.psnr_db)},
      {"eval_rds", fmt_g(result.eval.rds)}};
  save_run_checkpoint(result.final_checkpoint, cfg, model, opt, K,
                      "sparse-final", extra);
  std::ofstream(dir + "/eval.json") << eval_json(result.eval);
  return result;
}

}  // namespace prunevc
