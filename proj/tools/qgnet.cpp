// qgnet command-line driver: simulate, generate, train-filter, train-convnet, gradcheck, evaluate.

#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "qgnet/config.hpp"
#include "qgnet/data_io.hpp"
#include "qgnet/learnable.hpp"
#include "qgnet/training.hpp"

namespace fs = std::filesystem;
using namespace qgnet;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Options {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& p, const std::string& s) {
  std::FILE* f = std::fopen(p.c_str(), "wb");
  if (!f) throw IoError("cannot write " + p.string());
  const bool ok = std::fwrite(s.data(), 1, s.size(), f) == s.size();
  if (std::fclose(f) != 0 || !ok) throw IoError("cannot write " + p.string());
}

/// Outputs go to a hidden sibling directory that is renamed into place on success.
class Staging {
 public:
  explicit Staging(const fs::path& out) : final_(fs::absolute(out)) {
    if (fs::exists(final_) && !(fs::is_directory(final_) && fs::is_empty(final_)))
      throw IoError("output directory " + final_.string() + " already exists and is not empty");
    tmp_ = final_.parent_path() / ("." + final_.filename().string() + ".tmp-" + std::to_string(::getpid()));
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~Staging() {
    std::error_code ec;
    if (!done_) fs::remove_all(tmp_, ec);
  }
  const fs::path& dir() const { return tmp_; }
  void commit() {
    if (fs::exists(final_)) fs::remove(final_);
    fs::rename(tmp_, final_);
    done_ = true;
  }

 private:
  fs::path final_, tmp_;
  bool done_ = false;
};

RunConfig resolve(const Options& o) {
  ConfigFile file = o.config.empty() ? ConfigFile{} : ConfigFile::load(o.config);
  for (const auto& ov : o.overrides) file.apply_override(ov);
  if (o.seed) file.set("run.seed", std::to_string(*o.seed));
  if (o.threads) file.set("run.threads", std::to_string(*o.threads));
  return RunConfig::resolve(file);
}

void write_record(const fs::path& dir, const std::string& command, const RunConfig& cfg) {
  write_text(dir / "run_record.txt",
             std::string("# qgnet ") + kVersion + "\n# command: " + command + "\n" + cfg.text());
}

io::Dataset dataset_for(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw ConfigError("data.dataset (path to a manifest) is required");
  io::Dataset ds = io::load_dataset(cfg.dataset);
  const io::GeneratorConfig& a = ds.manifest.generator;
  const io::GeneratorConfig& b = cfg.generator;
  const bool same = a.grid == b.grid && a.physics.g == b.physics.g && a.physics.f == b.physics.f &&
                    a.physics.beta == b.physics.beta && a.physics.L_R == b.physics.L_R &&
                    a.physics.D == b.physics.D && a.forecast.step.dt == b.forecast.step.dt &&
                    a.forecast.step.n_steps == b.forecast.step.n_steps &&
                    a.forecast.step.cfl_max == b.forecast.step.cfl_max &&
                    a.forecast.cg.max_iters == b.forecast.cg.max_iters && a.forecast.cg.tol == b.forecast.cg.tol &&
                    a.forecast.cg.unrolled == b.forecast.cg.unrolled;
  if (!same)
    throw ConfigError("dataset " + cfg.dataset +
                      " was generated with different grid, physics, step or solver settings than this run");
  return ds;
}

VelocityModel model_from(const std::string& component, const PhysicalParams& p) {
  return component.empty() ? VelocityModel::fixed_qg(p) : import_component(component, p);
}

void print_medians(const std::vector<RmseRow>& rows, const std::vector<NamedModel>& models) {
  for (const auto& m : models) std::cout << "median rmse " << m.name << " = " << g6(median_rmse(rows, m.name)) << "\n";
}

int cmd_simulate(const RunConfig& cfg, Staging& out) {
  const GridSpec& g = cfg.grid();
  Field2D h = cfg.input.empty() ? io::eddy_field(cfg.generator, cfg.seed) : io::load_field(cfg.input, g.dx, g.dy);
  if (h.nx() != g.nx || h.ny() != g.ny)
    throw ConfigError("initial field is " + std::to_string(h.nx()) + "x" + std::to_string(h.ny()) +
                      " but the grid is " + std::to_string(g.nx) + "x" + std::to_string(g.ny));
  const VelocityModel model = model_from(cfg.component, cfg.physics());
  const ForecastConfig& fc = cfg.forecast();

  std::vector<Field2D> frames = {h};
  std::string diag = "step,courant,cg_iterations,cg_residual\n";
  double max_courant = 0.0;
  const StepObserver obs = [&](const StepDiagnostics& d) {
    max_courant = std::max(max_courant, d.courant);
    diag += std::to_string(d.step) + "," + g17(d.courant) + "," + std::to_string(d.cg.iterations) + "," +
            g17(d.cg.residuals.empty() ? 0.0 : d.cg.residuals.back()) + "\n";
  };
  const VelocityBinder vel = model.binder();
  std::optional<Field2D> prev;
  for (int k = 0; k < fc.step.n_steps; ++k) {
    ad::Tape t;
    IntegrationState s{t.constant(h), std::nullopt, k};
    if (prev) s.h_prev = t.constant(*prev);
    const IntegrationState next = qg_step(s, vel(t), fc.step, cfg.physics(), fc.cg, &obs);
    prev = std::move(h);
    h = next.h.field();
    frames.push_back(h);
  }
  io::save_field(h, out.dir() / "final.qga");
  io::save_sequence(frames, out.dir() / "sequence.qga");
  write_text(out.dir() / "diagnostics.csv", diag);
  std::cout << "simulated " << fc.step.n_steps << " steps of " << g6(fc.step.dt) << " s on " << g.nx << "x" << g.ny
            << ", max courant " << g6(max_courant) << " (limit " << g6(fc.step.cfl_max) << ")\n";
  return 0;
}

int cmd_generate(const RunConfig& cfg, Staging& out) {
  const io::DatasetManifest m = io::generate_synthetic(cfg.generator, cfg.seed, out.dir());
  std::size_t train = 0;
  for (const auto& s : m.samples) train += s.role == "train";
  std::cout << "generated " << train << " training and " << m.samples.size() - train << " test samples\n";
  return 0;
}

int cmd_train_filter(const RunConfig& cfg, Staging& out) {
  const io::Dataset ds = dataset_for(cfg);
  VelocityModel m = VelocityModel::random_filter(cfg.physics(), cfg.seed, cfg.filter_init_amplitude);
  const TrainReport rep = train_filter(m, ds.train, cfg.forecast(), cfg.loss, cfg.filter_optimizer, cfg.threads);
  export_component(m, out.dir() / "filter.qgc");
  write_text(out.dir() / "report.txt", serialize(rep));
  const auto& F = rep.final_params;
  std::string ftxt;
  for (int r = 0; r < 2; ++r) ftxt += g17(F[3 * r]) + " " + g17(F[3 * r + 1]) + " " + g17(F[3 * r + 2]) + "\n";
  write_text(out.dir() / "filter.txt", ftxt);

  const VelocityModel qg = VelocityModel::fixed_qg(cfg.physics());
  const std::vector<NamedModel> models = {{"persistence", nullptr}, {"fixed-qg", &qg}, {"filter", &m}};
  const auto rows = evaluate(models, ds.test.empty() ? ds.train : ds.test, cfg.forecast(), cfg.threads);
  write_text(out.dir() / "rmse.csv", rmse_csv(rows));

  std::cout << "stop: " << rep.stop_reason << " after " << rep.epochs.size() - 1 << " iterations\n";
  std::cout << "F =\n";
  for (int r = 0; r < 2; ++r) std::cout << "  " << g6(F[3 * r]) << " " << g6(F[3 * r + 1]) << " " << g6(F[3 * r + 2]) << "\n";
  print_medians(rows, models);
  return 0;
}

int cmd_train_convnet(const RunConfig& cfg, Staging& out) {
  const io::Dataset ds = dataset_for(cfg);
  VelocityModel m = VelocityModel::hybrid(cfg.physics(), cfg.seed);
  const TrainReport rep = train_convnet(m, ds.train, cfg.forecast(), cfg.loss, cfg.convnet_optimizer, cfg.threads);
  export_component(m, out.dir() / "hybrid.qgc");
  write_text(out.dir() / "report.txt", serialize(rep));

  const VelocityModel qg = VelocityModel::fixed_qg(cfg.physics());
  const std::vector<NamedModel> models = {{"persistence", nullptr}, {"fixed-qg", &qg}, {"hybrid", &m}};
  const auto train_rows = evaluate(models, ds.train, cfg.forecast(), cfg.threads);
  write_text(out.dir() / "rmse_train.csv", rmse_csv(train_rows));
  std::cout << "trained " << m.parameter_count() << " parameters for " << rep.epochs.size() << " epochs, final loss "
            << g6(rep.epochs.empty() ? 0.0 : rep.epochs.back().loss.total) << "\n";
  if (!ds.test.empty()) {
    const auto rows = evaluate(models, ds.test, cfg.forecast(), cfg.threads);
    write_text(out.dir() / "rmse.csv", rmse_csv(rows));
    print_medians(rows, models);
  }
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, Staging& out) {
  std::vector<Sample> batch;
  if (!cfg.dataset.empty()) {
    const io::Dataset ds = dataset_for(cfg);
    batch.assign(ds.train.begin(), ds.train.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(2, ds.train.size())));
  } else {
    Sample s;
    s.id = "generated";
    s.h0 = io::eddy_field(cfg.generator, cfg.seed);
    s.target = integrate_day(s.h0, fixed_qg_binder(cfg.physics()), cfg.forecast().step, cfg.physics(), cfg.forecast().cg);
    s.sigma = target_sigma(s.target);
    batch.push_back(std::move(s));
  }
  if (batch.empty()) throw DataError("gradcheck needs at least one sample");
  VelocityModel m = VelocityModel::random_filter(cfg.physics(), cfg.seed, cfg.filter_init_amplitude);
  const ad::LossProgram program = [&](ad::Tape& t) { return total_loss(t, m, batch, cfg.forecast(), cfg.loss); };
  const ad::GradCheckReport rep = ad::grad_check(program, m.params(), cfg.gradcheck_eps, cfg.gradcheck_threshold);

  std::string txt = "param,index,analytic,numeric,rel_error\n";
  for (const auto& e : rep.entries)
    txt += e.param + "," + std::to_string(e.index) + "," + g17(e.analytic) + "," + g17(e.numeric) + "," +
           g17(e.rel_error) + "\n";
  write_text(out.dir() / "gradcheck.csv", txt);
  std::cout << "max relative error " << g6(rep.max_rel_error) << " (threshold " << g6(rep.threshold) << "): "
            << (rep.passed ? "PASS" : "FAIL") << "\n";
  return rep.passed ? 0 : 3;
}

int cmd_evaluate(const RunConfig& cfg, Staging& out) {
  const io::Dataset ds = dataset_for(cfg);
  std::vector<VelocityModel> loaded;
  loaded.reserve(cfg.components.size() + 1);
  loaded.push_back(VelocityModel::fixed_qg(cfg.physics()));
  std::vector<NamedModel> models = {{"persistence", nullptr}, {"fixed-qg", &loaded[0]}};
  for (const auto& c : cfg.components) {
    loaded.push_back(import_component(c, cfg.physics()));
    models.push_back({fs::path(c).stem().string(), &loaded.back()});
  }
  const auto& data = cfg.eval_role == "train" ? ds.train : ds.test;
  if (data.empty()) throw DataError("dataset has no " + cfg.eval_role + " samples");
  const auto rows = evaluate(models, data, cfg.forecast(), cfg.threads);
  write_text(out.dir() / "rmse.csv", rmse_csv(rows));
  print_medians(rows, models);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable quasi-geostrophic SSH model"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options opt;
  using Cmd = int (*)(const RunConfig&, Staging&);
  std::vector<std::pair<CLI::App*, Cmd>> cmds;
  auto add = [&](const char* name, const char* help, Cmd fn) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "config file ([section] key = value)")->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory (created atomically)")->required();
    sub->add_option("--seed", opt.seed, "random seed");
    sub->add_option("--threads", opt.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--override", opt.overrides, "section.key=value, repeatable")->take_all();
    cmds.emplace_back(sub, fn);
  };
  add("simulate", "forecast from an SSH field and write the trajectory", cmd_simulate);
  add("generate", "write a synthetic eddy dataset", cmd_generate);
  add("train-filter", "fit the 6-entry gradient filter", cmd_train_filter);
  add("train-convnet", "train the gated residual ConvNet", cmd_train_convnet);
  add("gradcheck", "compare reverse-mode and finite-difference gradients", cmd_gradcheck);
  add("evaluate", "per-sample RMSE of persistence, fixed QG and saved components", cmd_evaluate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    for (auto& [sub, fn] : cmds) {
      if (!sub->parsed()) continue;
      const RunConfig cfg = resolve(opt);
      Staging out(opt.out);
      write_record(out.dir(), sub->get_name(), cfg);
      const int rc = fn(cfg, out);
      out.commit();
      return rc;
    }
  } catch (const Error& e) {
    std::cerr << "qgnet: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "qgnet: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "qgnet: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
