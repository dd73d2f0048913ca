#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "prunevc/checkpoint.hpp"
#include "prunevc/config.hpp"
#include "prunevc/errors.hpp"

using namespace prunevc;

namespace {

std::string fresh_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "prunevc_cli" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  REQUIRE(out.good());
  out << text;
}

// runs the CLI with stdout+stderr captured; returns the exit code
int run_cli(const std::string& args, std::string* output = nullptr) {
  static int counter = 0;
  const std::string cap = fresh_dir("cap" + std::to_string(counter++)) +
                          "/out.txt";
  const std::string cmd =
      std::string(PRUNEVC_CLI_PATH) + " " + args + " > " + cap + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  if (output) *output = slurp(cap);
  return WEXITSTATUS(status);
}

std::string tiny_ini(const std::string& out_dir, const std::string& extra) {
  return "[codec]\n"
         "input_channels = 1\n"
         "base_width = 8\n"
         "latent_channels = 4\n"
         "num_downsamples = 2\n"
         "[data]\n"
         "synth_sequences = 2\n"
         "synth_length = 4\n"
         "width = 16\n"
         "height = 16\n"
         "motion = 1\n"
         "crop = 16\n"
         "batch = 2\n"
         "[schedule]\n"
         "K = 8\n"
         "dense_steps = 4\n"
         "[loss]\n"
         "lambda1 = 256\n"
         "[distill]\n"
         "mode = none\n"
         "[run]\n"
         "seed = 7\n"
         "out_dir = " + out_dir + "\n" + extra;
}

constexpr const char* kFourPoint =
    "rate_bpp,psnr_db\n"
    "0.10,30.2\n"
    "0.24,33.1\n"
    "0.52,35.9\n"
    "1.05,38.4\n";

}  // namespace

TEST_CASE("argument errors exit with the config-error code") {
  unsetenv(kOutRootEnv);
  std::string out;
  CHECK(run_cli("", &out) == 2);
  CHECK(run_cli("train-dense", &out) == 2);
  CHECK(run_cli("no-such-command", &out) == 2);
  CHECK(run_cli("gradcheck --configs 0", &out) == 2);
  CHECK(run_cli("--help", &out) == 0);
  CHECK(out.find("train-dense") != std::string::npos);
}

TEST_CASE("config problems map to io and config error codes") {
  unsetenv(kOutRootEnv);
  const std::string dir = fresh_dir("badcfg");
  std::string out;
  CHECK(run_cli("train-dense --config " + dir + "/missing.ini", &out) == 4);
  CHECK(out.find("cannot open") != std::string::npos);

  spit(dir + "/unknown.ini", tiny_ini(dir + "/run", "[codec]\nwidth = 3\n"));
  CHECK(run_cli("train-dense --config " + dir + "/unknown.ini", &out) == 2);
  CHECK(out.find("unknown key") != std::string::npos);

  spit(dir + "/badval.ini", tiny_ini(dir + "/run", "[data]\nbatch = 0\n"));
  CHECK(run_cli("train-dense --config " + dir + "/badval.ini", &out) == 2);
}

TEST_CASE("a diverging run exits with the numeric-fault code") {
  unsetenv(kOutRootEnv);
  const std::string dir = fresh_dir("fault");
  spit(dir + "/cfg.ini", tiny_ini(dir + "/run", "[optim]\nlr0 = 1e18\n"));
  std::string out;
  CHECK(run_cli("train-dense --config " + dir + "/cfg.ini", &out) == 3);
  CHECK(out.find("non-finite") != std::string::npos);
  CHECK(std::filesystem::exists(dir + "/run/diagnostics.txt"));
}

TEST_CASE("train, prune, resume, eval, compact, and bd chain together") {
  unsetenv(kOutRootEnv);
  const std::string dir = fresh_dir("pipeline");
  std::string out;

  spit(dir + "/dense.ini", tiny_ini(dir + "/dense", ""));
  CHECK(run_cli("train-dense --config " + dir + "/dense.ini", &out) == 0);
  CHECK(out.find("dense run done") != std::string::npos);
  CHECK(std::filesystem::exists(dir + "/dense/dense.pvck"));
  CHECK(std::filesystem::exists(dir + "/dense/manifest.ini"));
  CHECK(std::filesystem::exists(dir + "/dense/seed.txt"));

  CHECK(run_cli("train-dense --config " + dir + "/dense.ini --out " + dir +
                    "/dense2",
                &out) == 0);
  CHECK(std::filesystem::exists(dir + "/dense2/dense.pvck"));

  // enough steps and threshold rate for pruning to bite; the shared
  // threshold keeps every layer populated at this scale
  const std::string prune_extra =
      "[schedule]\nK = 80\ns_tar = 0.25\n"
      "[optim]\nthreshold_lr_mult = 500\n"
      "[prune]\nshared_threshold = true\n"
      "[distill]\nmode = adaptive\n";
  const std::string teacher = " --teacher " + dir + "/dense/dense.pvck";
  spit(dir + "/prune.ini", tiny_ini(dir + "/prune", prune_extra));
  CHECK(run_cli("prune --config " + dir + "/prune.ini" + teacher, &out) == 0);
  CHECK(out.find("prune run done") != std::string::npos);
  CHECK(out.find("hard_sparsity=") != std::string::npos);
  CHECK(std::filesystem::exists(dir + "/prune/final.pvck"));

  spit(dir + "/split.ini", tiny_ini(dir + "/split", prune_extra));
  CHECK(run_cli("prune --config " + dir + "/split.ini --stop-after 40" +
                    teacher,
                &out) == 0);
  CHECK(out.find("stopped early") != std::string::npos);
  REQUIRE(std::filesystem::exists(dir + "/split/mid.pvck"));
  CHECK(run_cli("prune --config " + dir + "/split.ini --resume " + dir +
                    "/split/mid.pvck" + teacher,
                &out) == 0);
  CHECK(out.find("prune run done") != std::string::npos);
  CHECK(slurp(dir + "/split/final.pvck") == slurp(dir + "/prune/final.pvck"));
  CHECK(slurp(dir + "/split/train_log.csv") ==
        slurp(dir + "/prune/train_log.csv"));

  CHECK(run_cli("eval --config " + dir + "/prune.ini --ckpt " + dir +
                    "/prune/final.pvck --json " + dir + "/m.json",
                &out) == 0);
  CHECK(out.find("rate_bpp=") != std::string::npos);
  const auto m = nlohmann::json::parse(slurp(dir + "/m.json"));
  CHECK(m.contains("rate_bpp"));
  CHECK(m.contains("psnr_db"));
  CHECK(m["hard_sparsity"].get<double>() > 0.0);

  CHECK(run_cli("eval --config " + dir + "/prune.ini --ckpt " + dir +
                    "/prune/final.pvck --ckpt " + dir +
                    "/dense/dense.pvck --rd-csv " + dir + "/rd.csv",
                &out) == 0);
  const std::string rd = slurp(dir + "/rd.csv");
  CHECK(rd.rfind("rate_bpp,psnr_db\n", 0) == 0);
  CHECK(std::count(rd.begin(), rd.end(), '\n') == 3);

  CHECK(run_cli("eval --config " + dir + "/prune.ini --ckpt " + dir +
                    "/prune/final.pvck --ckpt " + dir +
                    "/dense/dense.pvck --json " + dir + "/two.json",
                &out) == 2);

  CHECK(run_cli("compact --config " + dir + "/prune.ini --ckpt " + dir +
                    "/prune/final.pvck --out " + dir +
                    "/compact.pvck --report " + dir + "/report.json --plan " +
                    dir + "/plan.json",
                &out) == 0);
  Checkpoint small = load_checkpoint(dir + "/compact.pvck");
  CHECK(small.meta.at("kind") == "compact");
  const auto rep = nlohmann::json::parse(slurp(dir + "/report.json"));
  CHECK(rep["macs_after"].get<double>() <= rep["macs_total"].get<double>());
  const auto plan = nlohmann::json::parse(slurp(dir + "/plan.json"));
  CHECK(plan.contains("order"));

  CHECK(run_cli("compact --config " + dir + "/prune.ini --ckpt " + dir +
                    "/compact.pvck --out " + dir + "/again.pvck",
                &out) == 2);

  spit(dir + "/ref.csv", kFourPoint);
  spit(dir + "/test.csv", kFourPoint);
  CHECK(run_cli("bd --reference " + dir + "/ref.csv --test " + dir +
                    "/test.csv --out " + dir + "/bd.json",
                &out) == 0);
  const auto bd = nlohmann::json::parse(slurp(dir + "/bd.json"));
  CHECK(std::abs(bd["bd_rate_percent"].get<double>()) < 1e-9);
  CHECK(std::abs(bd["bd_psnr_db"].get<double>()) < 1e-12);

  spit(dir + "/short.csv",
       "rate_bpp,psnr_db\n0.1,30.0\n0.2,33.0\n0.4,35.0\n");
  CHECK(run_cli("bd --reference " + dir + "/ref.csv --test " + dir +
                    "/short.csv",
                &out) == 2);
  CHECK(run_cli("bd --reference " + dir + "/ref.csv --test " + dir +
                    "/absent.csv",
                &out) == 4);
}

TEST_CASE("gradcheck subcommand verifies gradients") {
  std::string out;
  CHECK(run_cli("gradcheck --configs 3 --seed 1", &out) == 0);
  CHECK(out.find("PASS") != std::string::npos);
  CHECK(out.find("FAIL") == std::string::npos);
}

TEST_CASE("a small ablation grid writes per-run and median tables") {
  unsetenv(kOutRootEnv);
  const std::string dir = fresh_dir("ablate");
  spit(dir + "/cfg.ini",
       tiny_ini(dir + "/runs", "[schedule]\nK = 2\ndense_steps = 2\n"));
  std::string out;
  CHECK(run_cli("ablate --config " + dir + "/cfg.ini --approximators ste,gd "
                "--distill-modes none --s-tar 0.5 --seeds 1 --out " +
                    dir + "/grid",
                &out) == 0);
  const std::string rows = slurp(dir + "/grid/ablation.csv");
  CHECK(rows.rfind("approximator,distill_mode,s_tar,seed,", 0) == 0);
  CHECK(std::count(rows.begin(), rows.end(), '\n') == 3);
  const std::string med = slurp(dir + "/grid/ablation_median.csv");
  CHECK(med.find("ste_none_s0.5") != std::string::npos);
  CHECK(med.find("gd_none_s0.5") != std::string::npos);
}
