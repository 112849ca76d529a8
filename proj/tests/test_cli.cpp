#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "qgnet/config.hpp"
#include "qgnet/data_io.hpp"
#include "qgnet/learnable.hpp"
#include "qgnet/training.hpp"

using namespace qgnet;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "qgnet_test_cli";

const char* kSmall =
    "[grid]\nnx = 24\nny = 20\n"
    "[step]\nn_steps = 12\n"
    "[data]\nspinup_steps = 12\nstride = 6\nn_train = 3\ngap = 1\nn_test = 2\n"
    "[filter]\nmax_epochs = 4\n"
    "[convnet]\nmax_epochs = 2\nbatch_size = 2\n";

struct Run {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const std::string& args) {
  const fs::path o = kRoot / "stdout.txt", e = kRoot / "stderr.txt";
  const std::string cmd = std::string(QGNET_CLI) + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

fs::path fresh(const std::string& name) {
  const fs::path d = kRoot / name;
  fs::remove_all(d);
  return d;
}

fs::path small_config() {
  fs::create_directories(kRoot);
  const fs::path p = kRoot / "small.cfg";
  std::ofstream(p) << kSmall;
  return p;
}

bool leftovers(const std::string& name) {
  for (const auto& e : fs::directory_iterator(kRoot))
    if (e.path().filename().string().rfind("." + name + ".tmp-", 0) == 0) return true;
  return false;
}

/// Generated once and shared by the dataset-driven cases.
const fs::path& small_dataset() {
  static const fs::path manifest = [] {
    const fs::path d = fresh("dataset");
    const Run r = cli("generate --config " + small_config().string() + " --seed 11 --out " + d.string());
    REQUIRE(r.code == 0);
    return d / "manifest.txt";
  }();
  return manifest;
}

}  // namespace

TEST_CASE("simulate with zero steps reproduces the input file") {
  const fs::path in = kRoot / "h0.qga";
  fs::create_directories(kRoot);
  io::GeneratorConfig g;
  g.grid = GridSpec{24, 20, 10e3, 10e3};
  io::save_field(io::eddy_field(g, 3), in);
  const fs::path out = fresh("sim_zero");
  const Run r = cli("simulate --config " + small_config().string() + " --override step.n_steps=0 --override simulate.input=" +
                      in.string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(slurp(out / "final.qga") == slurp(in));
  CHECK(slurp(out / "diagnostics.csv") == "step,courant,cg_iterations,cg_residual\n");
}

TEST_CASE("simulate is bit-reproducible and logs every step") {
  const fs::path a = fresh("sim_a"), b = fresh("sim_b");
  const std::string base = "simulate --config " + small_config().string() + " --seed 4 --threads 1 --out ";
  REQUIRE(cli(base + a.string()).code == 0);
  REQUIRE(cli(base + b.string()).code == 0);
  for (const char* f : {"final.qga", "sequence.qga", "diagnostics.csv", "run_record.txt"})
    CHECK(slurp(a / f) == slurp(b / f));
  const io::Array seq = io::load_array(a / "sequence.qga");
  CHECK(seq.shape == std::vector<std::uint64_t>{13, 20, 24});
  const std::string diag = slurp(a / "diagnostics.csv");
  CHECK(std::count(diag.begin(), diag.end(), '\n') == 13);

  // The run record is itself a config that reproduces the run.
  const fs::path c = fresh("sim_c");
  REQUIRE(cli("simulate --config " + (a / "run_record.txt").string() + " --out " + c.string()).code == 0);
  CHECK(slurp(c / "final.qga") == slurp(a / "final.qga"));
}

TEST_CASE("configuration errors exit with 2 and leave nothing behind") {
  const fs::path out = fresh("bad_cfg");
  const fs::path cfg = kRoot / "bad.cfg";
  std::ofstream(cfg) << "[grid]\nnx 24\n";
  Run r = cli("simulate --config " + cfg.string() + " --out " + out.string());
  CHECK(r.code == 2);
  CHECK(r.err.find("bad.cfg:2") != std::string::npos);
  CHECK_FALSE(fs::exists(out));

  r = cli("simulate --override grid.nz=3 --out " + out.string());
  CHECK(r.code == 2);
  CHECK(r.err.find("grid.nz") != std::string::npos);
  r = cli("simulate --override step.dt=-5 --out " + out.string());
  CHECK(r.code == 2);
  r = cli("simulate --override grid.nx=4 --out " + out.string());
  CHECK(r.code == 2);
  r = cli("simulate --seed nope --out " + out.string());
  CHECK(r.code == 2);
  r = cli("frobnicate --out " + out.string());
  CHECK(r.code == 2);
  CHECK_FALSE(fs::exists(out));
  CHECK_FALSE(leftovers("bad_cfg"));
}

TEST_CASE("a step above the courant limit is a numerical failure") {
  const fs::path out = fresh("cfl");
  const Run r = cli("simulate --config " + small_config().string() + " --override step.dt=60000 --out " + out.string());
  CHECK(r.code == 3);
  CHECK(r.err.find("at step 1") != std::string::npos);
  CHECK_FALSE(fs::exists(out));
  CHECK_FALSE(leftovers("cfl"));
}

TEST_CASE("i/o failures exit with 4") {
  const fs::path out = fresh("io");
  Run r = cli("simulate --override simulate.input=" + (kRoot / "absent.qga").string() + " --out " + out.string());
  CHECK(r.code == 4);
  CHECK_FALSE(fs::exists(out));
  r = cli("evaluate --override data.dataset=" + (kRoot / "absent" / "manifest.txt").string() + " --out " + out.string());
  CHECK(r.code == 4);
}

TEST_CASE("generate is bit-reproducible") {
  const fs::path m = small_dataset();
  const fs::path again = fresh("dataset_again");
  REQUIRE(cli("generate --config " + small_config().string() + " --seed 11 --out " + again.string()).code == 0);
  for (const auto& e : fs::directory_iterator(m.parent_path()))
    CHECK(slurp(e.path()) == slurp(again / e.path().filename()));
}

TEST_CASE("train-filter matches the library driver and evaluate rereads its component") {
  const fs::path m = small_dataset();
  const fs::path out = fresh("train_filter");
  const std::string common = " --config " + small_config().string() + " --override data.dataset=" + m.string();
  const Run r = cli("train-filter" + common + " --seed 5 --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("F =") != std::string::npos);

  ConfigFile file = ConfigFile::load(small_config().string());
  file.set("data.dataset", m.string());
  file.set("run.seed", "5");
  const RunConfig cfg = RunConfig::resolve(file);
  const io::Dataset ds = io::load_dataset(m);
  VelocityModel model = VelocityModel::random_filter(cfg.physics(), 5, cfg.filter_init_amplitude);
  const TrainReport rep = train_filter(model, ds.train, cfg.forecast(), cfg.loss, cfg.filter_optimizer, 1);
  CHECK(slurp(out / "report.txt") == serialize(rep));
  CHECK(import_component(out / "filter.qgc", cfg.physics()).params().flatten() == rep.final_params);

  const fs::path ev = fresh("evaluate");
  REQUIRE(cli("evaluate" + common + " --override evaluate.components=" + (out / "filter.qgc").string() + " --out " +
                ev.string())
              .code == 0);
  CHECK(slurp(ev / "rmse.csv") == slurp(out / "rmse.csv"));
}

TEST_CASE("evaluate writes one row per test sample and model") {
  const fs::path out = fresh("evaluate_plain");
  const Run r = cli("evaluate --config " + small_config().string() + " --override data.dataset=" +
                      small_dataset().string() + " --out " + out.string());
  REQUIRE(r.code == 0);
  const std::string csv = slurp(out / "rmse.csv");
  CHECK(csv.rfind("sample_id,model,rmse\ntest_000,persistence,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2);
  CHECK(r.out.find("median rmse persistence") != std::string::npos);
}

TEST_CASE("a dataset generated with other settings is refused") {
  const fs::path out = fresh("mismatch");
  const Run r = cli("train-filter --config " + small_config().string() + " --override step.n_steps=6 --override data.dataset=" +
                      small_dataset().string() + " --out " + out.string());
  CHECK(r.code == 2);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("train-convnet runs and is reproducible") {
  const std::string args = "train-convnet --config " + small_config().string() + " --override data.dataset=" +
                           small_dataset().string() + " --seed 2 --threads 1 --out ";
  const fs::path a = fresh("convnet_a"), b = fresh("convnet_b");
  REQUIRE(cli(args + a.string()).code == 0);
  REQUIRE(cli(args + b.string()).code == 0);
  for (const char* f : {"hybrid.qgc", "report.txt", "rmse.csv", "rmse_train.csv", "run_record.txt"})
    CHECK(slurp(a / f) == slurp(b / f));
  CHECK(import_component(a / "hybrid.qgc", PhysicalParams::at_latitude(35.0)).parameter_count() == 2545);
}

TEST_CASE("gradcheck reports pass at the default threshold") {
  const fs::path out = fresh("gradcheck");
  const Run r = cli("gradcheck --config " + small_config().string() + " --seed 8 --out " + out.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
  const std::string csv = slurp(out / "gradcheck.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
}
