#include "prunevc/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "prunevc/errors.hpp"

namespace prunevc {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

IniFile IniFile::parse(const std::string& text) {
  IniFile ini;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": empty section name");
      ini.sections.push_back({section, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": key '" + key + "' outside any section");
    ini.sections.back().second.push_back({key, value});
  }
  return ini;
}

const std::string* IniFile::find(const std::string& section,
                                 const std::string& key) const {
  // last assignment wins so a base config can be extended by appending
  const std::string* hit = nullptr;
  for (const auto& [s, kvs] : sections) {
    if (s != section) continue;
    for (const auto& [k, v] : kvs)
      if (k == key) hit = &v;
  }
  return hit;
}

namespace {

// consumes keys so leftovers can be rejected by name
struct Reader {
  const IniFile& ini;
  std::set<std::pair<std::string, std::string>> used;

  double num(const std::string& sec, const std::string& key, double defv) {
    const std::string* v = ini.find(sec, key);
    if (!v) return defv;
    used.insert({sec, key});
    try {
      std::size_t pos = 0;
      const double d = std::stod(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("");
      return d;
    } catch (...) {
      throw ConfigError("config: [" + sec + "] " + key + " = '" + *v +
                        "' is not a number");
    }
  }

  std::int64_t integer(const std::string& sec, const std::string& key,
                       std::int64_t defv) {
    const double d = num(sec, key, static_cast<double>(defv));
    const std::int64_t i = static_cast<std::int64_t>(d);
    if (static_cast<double>(i) != d)
      throw ConfigError("config: [" + sec + "] " + key +
                        " must be an integer");
    return i;
  }

  std::string str(const std::string& sec, const std::string& key,
                  const std::string& defv) {
    const std::string* v = ini.find(sec, key);
    if (!v) return defv;
    used.insert({sec, key});
    return *v;
  }

  bool boolean(const std::string& sec, const std::string& key, bool defv) {
    const std::string* v = ini.find(sec, key);
    if (!v) return defv;
    used.insert({sec, key});
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw ConfigError("config: [" + sec + "] " + key + " = '" + *v +
                      "' is not a boolean");
  }

  void reject_unknown() const {
    for (const auto& [sec, kvs] : ini.sections)
      for (const auto& [k, v] : kvs)
        if (!used.count({sec, k}))
          throw ConfigError("config: unknown key [" + sec + "] " + k);
  }
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  const IniFile ini = IniFile::parse(text);
  Reader r{ini, {}};
  ExperimentConfig c;

  c.codec.input_channels = r.integer("codec", "input_channels", 1);
  c.codec.base_width = r.integer("codec", "base_width", 32);
  c.codec.latent_channels = r.integer("codec", "latent_channels", 48);
  c.codec.num_downsamples =
      static_cast<int>(r.integer("codec", "num_downsamples", 3));

  c.data_source = r.str("data", "source", "synth");
  c.data_path = r.str("data", "path", "");
  c.synth_sequences = r.integer("data", "synth_sequences", 8);
  c.synth_length = r.integer("data", "synth_length", 16);
  c.width = r.integer("data", "width", 96);
  c.height = r.integer("data", "height", 96);
  c.motion = r.num("data", "motion", 1.5);
  c.crop = r.integer("data", "crop", 32);
  c.batch = r.integer("data", "batch", 4);

  c.sched.L0 = r.num("schedule", "L0", -6.0);
  c.sched.L1 = r.num("schedule", "L1", 6.0);
  c.sched.tau = r.num("schedule", "tau", 20.0);
  c.sched.s_tar = r.num("schedule", "s_tar", 0.5);
  c.sched.K = r.integer("schedule", "K", 5000);
  const std::string mode = r.str("schedule", "schedule_mode",
                                 "corrected-cubic");
  if (mode == "corrected-cubic")
    c.sched.mode = ScheduleSet::Mode::corrected_cubic;
  else if (mode == "as-written")
    c.sched.mode = ScheduleSet::Mode::as_written;
  else
    throw ConfigError("config: schedule_mode must be corrected-cubic or "
                      "as-written, got '" + mode + "'");
  c.step_scaling = r.str("schedule", "step_scaling", "none");
  c.dense_steps = r.integer("schedule", "dense_steps", 2000);
  c.save_every = r.integer("schedule", "save_every", 0);

  c.lambda1 = r.num("loss", "lambda1", 1024.0);
  c.lambda2 = r.num("loss", "lambda2", 20.0);
  c.lambda3_init = r.num("loss", "lambda3_init", 1.0);

  c.lr0 = r.num("optim", "lr0", 1e-4);
  c.threshold_lr_mult = r.num("optim", "threshold_lr_mult", 20.0);
  c.adam_beta1 = r.num("optim", "adam_beta1", 0.9);
  c.adam_beta2 = r.num("optim", "adam_beta2", 0.999);
  c.adam_eps = r.num("optim", "adam_eps", 1e-8);

  c.approximator = r.str("prune", "approximator", "gd");
  c.shared_threshold = r.boolean("prune", "shared_threshold", false);
  c.sparsity_grad_to_weights =
      r.boolean("prune", "sparsity_grad_to_weights", false);

  c.distill_mode = r.str("distill", "mode", "adaptive");
  c.stage_plan_text =
      r.str("distill", "stage_plan", "pred:0.3,res:0.3,all:0.4");
  c.per_channel_norm = r.boolean("distill", "per_channel_norm", false);

  c.seed = static_cast<std::uint64_t>(r.integer("run", "seed", 1));
  c.out_dir = r.str("run", "out_dir", "run");

  r.reject_unknown();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

void ExperimentConfig::validate() const {
  if (codec.input_channels != 1 && codec.input_channels != 3)
    throw ConfigError("config: input_channels must be 1 or 3");
  if (codec.base_width < 2 || codec.latent_channels < 1 ||
      codec.num_downsamples < 1)
    throw ConfigError("config: degenerate codec dimensions");
  if (data_source != "synth" && data_source != "file")
    throw ConfigError("config: data source must be synth or file");
  if (data_source == "file" && data_path.empty())
    throw ConfigError("config: data source 'file' needs a path");
  const std::int64_t div = std::int64_t(1) << codec.num_downsamples;
  if (crop < div || crop % div != 0)
    throw ConfigError("config: crop must be a positive multiple of " +
                      std::to_string(div));
  if (width < crop || height < crop)
    throw ConfigError("config: frame size smaller than crop");
  if (batch < 1) throw ConfigError("config: batch must be >= 1");
  if (synth_sequences < 1 || synth_length < 2)
    throw ConfigError("config: synthetic data needs >=1 clips of >=2 frames");
  if (!(sched.L1 > sched.L0))
    throw ConfigError("config: L1 must exceed L0");
  if (sched.tau <= 0.0) throw ConfigError("config: tau must be positive");
  if (sched.s_tar < 0.0 || sched.s_tar >= 1.0)
    throw ConfigError("config: s_tar must be in [0,1)");
  if (sched.K < 1 || dense_steps < 1)
    throw ConfigError("config: step counts must be >= 1");
  if (save_every < 0) throw ConfigError("config: save_every must be >= 0");
  if (step_scaling != "none" && step_scaling != "proportional")
    throw ConfigError("config: step_scaling must be none or proportional");
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3_init < 0.0)
    throw ConfigError("config: loss weights must be >= 0");
  if (lr0 <= 0.0 || threshold_lr_mult <= 0.0)
    throw ConfigError("config: learning rates must be positive");
  if (approximator != "gd" && approximator != "ste")
    throw ConfigError("config: approximator must be gd or ste");
  if (distill_mode != "none" && distill_mode != "full" &&
      distill_mode != "adaptive")
    throw ConfigError("config: distill mode must be none, full or adaptive");
  if (out_dir.empty()) throw ConfigError("config: out_dir must be set");
}

std::string ExperimentConfig::manifest() const {
  std::ostringstream os;
  os << "[codec]\n";
  os << "input_channels = " << codec.input_channels << "\n";
  os << "base_width = " << codec.base_width << "\n";
  os << "latent_channels = " << codec.latent_channels << "\n";
  os << "num_downsamples = " << codec.num_downsamples << "\n";
  os << "\n[data]\n";
  os << "source = " << data_source << "\n";
  os << "path = " << data_path << "\n";
  os << "synth_sequences = " << synth_sequences << "\n";
  os << "synth_length = " << synth_length << "\n";
  os << "width = " << width << "\n";
  os << "height = " << height << "\n";
  os << "motion = " << fmt_double(motion) << "\n";
  os << "crop = " << crop << "\n";
  os << "batch = " << batch << "\n";
  os << "\n[schedule]\n";
  os << "L0 = " << fmt_double(sched.L0) << "\n";
  os << "L1 = " << fmt_double(sched.L1) << "\n";
  os << "tau = " << fmt_double(sched.tau) << "\n";
  os << "s_tar = " << fmt_double(sched.s_tar) << "\n";
  os << "K = " << sched.K << "\n";
  os << "schedule_mode = "
     << (sched.mode == ScheduleSet::Mode::corrected_cubic ? "corrected-cubic"
                                                          : "as-written")
     << "\n";
  os << "step_scaling = " << step_scaling << "\n";
  os << "dense_steps = " << dense_steps << "\n";
  os << "save_every = " << save_every << "\n";
  os << "\n[loss]\n";
  os << "lambda1 = " << fmt_double(lambda1) << "\n";
  os << "lambda2 = " << fmt_double(lambda2) << "\n";
  os << "lambda3_init = " << fmt_double(lambda3_init) << "\n";
  os << "\n[optim]\n";
  os << "lr0 = " << fmt_double(lr0) << "\n";
  os << "threshold_lr_mult = " << fmt_double(threshold_lr_mult) << "\n";
  os << "adam_beta1 = " << fmt_double(adam_beta1) << "\n";
  os << "adam_beta2 = " << fmt_double(adam_beta2) << "\n";
  os << "adam_eps = " << fmt_double(adam_eps) << "\n";
  os << "\n[prune]\n";
  os << "approximator = " << approximator << "\n";
  os << "shared_threshold = " << (shared_threshold ? "true" : "false") << "\n";
  os << "sparsity_grad_to_weights = "
     << (sparsity_grad_to_weights ? "true" : "false") << "\n";
  os << "\n[distill]\n";
  os << "mode = " << distill_mode << "\n";
  os << "stage_plan = " << stage_plan_text << "\n";
  os << "per_channel_norm = " << (per_channel_norm ? "true" : "false") << "\n";
  os << "\n[run]\n";
  os << "seed = " << seed << "\n";
  return os.str();
}

StagePlan ExperimentConfig::resolve_stage_plan(
    const std::vector<std::string>& prunable) const {
  std::set<std::string> all(prunable.begin(), prunable.end());
  std::set<std::string> pred, res;
  for (const auto& id : prunable) {
    if (id.rfind("pred.", 0) == 0) pred.insert(id);
    if (id.rfind("res.", 0) == 0) res.insert(id);
  }

  StagePlan plan;
  if (distill_mode == "full") {
    plan.stages.push_back({"all", all, 1.0});
    plan.validate(all);
    return plan;
  }

  std::istringstream in(stage_plan_text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError("config: stage plan entry '" + item +
                        "' is not name:fraction");
    const std::string name = item.substr(0, colon);
    double frac;
    try {
      std::size_t pos = 0;
      frac = std::stod(item.substr(colon + 1), &pos);
      if (pos != item.size() - colon - 1) throw std::invalid_argument("");
    } catch (...) {
      throw ConfigError("config: stage plan fraction in '" + item +
                        "' is not a number");
    }
    std::set<std::string> layers;
    if (name == "pred")
      layers = pred;
    else if (name == "res")
      layers = res;
    else if (name == "all")
      layers = all;
    else
      throw ConfigError("config: stage plan group '" + name +
                        "' is not one of pred, res, all");
    plan.stages.push_back({name, std::move(layers), frac});
  }
  plan.validate(all);
  return plan;
}

std::string ExperimentConfig::resolved_out_dir() const {
  const char* root = std::getenv(kOutRootEnv);
  if (root && *root && !out_dir.empty() && out_dir.front() != '/')
    return std::string(root) + "/" + out_dir;
  return out_dir;
}

std::int64_t ExperimentConfig::prune_steps() const {
  if (step_scaling == "proportional") {
    const std::int64_t k = static_cast<std::int64_t>(
        std::llround(static_cast<double>(sched.K) * sched.s_tar));
    return std::max<std::int64_t>(k, 1);
  }
  return sched.K;
}

}  // namespace prunevc
