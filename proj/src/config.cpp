#include "qgnet/config.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>

#include "binio.hpp"

namespace qgnet {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(d)) throw ConfigError(key + ": '" + v + "' is not a finite number");
  return d;
}

long long to_integer(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long n = 0;
  try {
    n = std::stoll(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (v.empty() || used != v.size()) throw ConfigError(key + ": '" + v + "' is not an integer");
  return n;
}

int to_int(const std::string& key, const std::string& v) {
  const long long n = to_integer(key, v);
  if (n < -2147483647LL || n > 2147483647LL) throw ConfigError(key + ": out of range");
  return static_cast<int>(n);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key + ": '" + v + "' is not an unsigned integer");
  try {
    return std::stoull(v);
  } catch (const std::out_of_range&) {
    throw ConfigError(key + ": out of range");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Binding {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define QG_REAL(key, expr) \
  Binding{key, [](RunConfig& c, const std::string& v) { expr = to_double(key, v); }, [](const RunConfig& c) { return fmt(expr); }}
#define QG_INT(key, expr) \
  Binding{key, [](RunConfig& c, const std::string& v) { expr = to_int(key, v); }, [](const RunConfig& c) { return std::to_string(expr); }}
#define QG_BOOL(key, expr)                                                      \
  Binding{key, [](RunConfig& c, const std::string& v) { expr = to_bool(key, v); }, \
          [](const RunConfig& c) { return std::string(expr ? "true" : "false"); }}
#define QG_STR(key, expr) \
  Binding{key, [](RunConfig& c, const std::string& v) { expr = v; }, [](const RunConfig& c) { return expr; }}

void add_optimizer(std::vector<Binding>& b, const std::string& sec, OptimizerConfig RunConfig::*opt) {
  auto o = [opt](RunConfig& c) -> OptimizerConfig& { return c.*opt; };
  auto co = [opt](const RunConfig& c) -> const OptimizerConfig& { return c.*opt; };
  auto k = [&](const char* name) { return sec + "." + name; };
  b.push_back({k("algorithm"), [o](RunConfig& c, const std::string& v) { o(c).algorithm = parse_algorithm(v); },
               [co](const RunConfig& c) { return std::string(to_string(co(c).algorithm)); }});
  const std::string lr = k("learning_rate"), df = k("decay_factor"), dp = k("decay_period"), me = k("max_epochs"),
                    bs = k("batch_size"), lh = k("lbfgs_history"), gt = k("grad_tol");
  b.push_back({lr, [o, lr](RunConfig& c, const std::string& v) { o(c).learning_rate = to_double(lr, v); },
               [co](const RunConfig& c) { return fmt(co(c).learning_rate); }});
  b.push_back({df, [o, df](RunConfig& c, const std::string& v) { o(c).decay_factor = to_double(df, v); },
               [co](const RunConfig& c) { return fmt(co(c).decay_factor); }});
  b.push_back({dp, [o, dp](RunConfig& c, const std::string& v) { o(c).decay_period = to_int(dp, v); },
               [co](const RunConfig& c) { return std::to_string(co(c).decay_period); }});
  b.push_back({me, [o, me](RunConfig& c, const std::string& v) { o(c).max_epochs = to_int(me, v); },
               [co](const RunConfig& c) { return std::to_string(co(c).max_epochs); }});
  b.push_back({bs, [o, bs](RunConfig& c, const std::string& v) { o(c).batch_size = to_int(bs, v); },
               [co](const RunConfig& c) { return std::to_string(co(c).batch_size); }});
  b.push_back({lh, [o, lh](RunConfig& c, const std::string& v) { o(c).lbfgs_history = to_int(lh, v); },
               [co](const RunConfig& c) { return std::to_string(co(c).lbfgs_history); }});
  b.push_back({gt, [o, gt](RunConfig& c, const std::string& v) { o(c).grad_tol = to_double(gt, v); },
               [co](const RunConfig& c) { return fmt(co(c).grad_tol); }});
}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = [] {
    std::vector<Binding> b = {
        Binding{"run.seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64("run.seed", v); },
                [](const RunConfig& c) { return std::to_string(c.seed); }},
        QG_INT("run.threads", c.threads),
        QG_INT("grid.nx", c.generator.grid.nx),
        QG_INT("grid.ny", c.generator.grid.ny),
        QG_REAL("grid.dx", c.generator.grid.dx),
        QG_REAL("grid.dy", c.generator.grid.dy),
        QG_REAL("physics.latitude", c.generator.latitude),
        QG_REAL("physics.g", c.generator.physics.g),
        QG_REAL("physics.f", c.generator.physics.f),
        QG_REAL("physics.beta", c.generator.physics.beta),
        QG_REAL("physics.L_R", c.generator.physics.L_R),
        QG_REAL("physics.D", c.generator.physics.D),
        QG_REAL("step.dt", c.generator.forecast.step.dt),
        QG_INT("step.n_steps", c.generator.forecast.step.n_steps),
        QG_REAL("step.cfl_max", c.generator.forecast.step.cfl_max),
        QG_INT("solver.max_iters", c.generator.forecast.cg.max_iters),
        QG_REAL("solver.tol", c.generator.forecast.cg.tol),
        QG_BOOL("solver.unrolled", c.generator.forecast.cg.unrolled),
        QG_REAL("loss.lambda_l2", c.loss.lambda_l2),
        QG_REAL("loss.divergence_weight", c.loss.divergence_weight),
        QG_BOOL("loss.scale_by_target_variance", c.loss.scale_by_target_variance),
        QG_INT("loss.checkpoint_every", c.generator.forecast.checkpoint_every),
        QG_INT("data.eddies_min", c.generator.eddies.count_min),
        QG_INT("data.eddies_max", c.generator.eddies.count_max),
        QG_REAL("data.amplitude_min", c.generator.eddies.amplitude_min),
        QG_REAL("data.amplitude_max", c.generator.eddies.amplitude_max),
        QG_REAL("data.radius_min", c.generator.eddies.radius_min),
        QG_REAL("data.radius_max", c.generator.eddies.radius_max),
        QG_INT("data.spinup_steps", c.generator.spinup_steps),
        QG_INT("data.stride", c.generator.stride),
        QG_INT("data.n_train", c.generator.n_train),
        QG_INT("data.gap", c.generator.gap),
        QG_INT("data.n_test", c.generator.n_test),
        QG_REAL("data.ageostrophic", c.generator.ageostrophic),
        QG_STR("data.dataset", c.dataset),
        QG_STR("simulate.input", c.input),
        QG_STR("simulate.component", c.component),
        Binding{"evaluate.components",
                [](RunConfig& c, const std::string& v) { c.components = split_list(v); },
                [](const RunConfig& c) {
                  std::string s;
                  for (const auto& x : c.components) s += (s.empty() ? "" : ",") + x;
                  return s;
                }},
        QG_STR("evaluate.role", c.eval_role),
        QG_REAL("gradcheck.eps", c.gradcheck_eps),
        QG_REAL("gradcheck.threshold", c.gradcheck_threshold),
    };
    add_optimizer(b, "filter", &RunConfig::filter_optimizer);
    b.push_back(QG_REAL("filter.init_amplitude", c.filter_init_amplitude));
    add_optimizer(b, "convnet", &RunConfig::convnet_optimizer);
    return b;
  }();
  return table;
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cf;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty() || section.empty()) throw ConfigError(where + ": key outside a [section]");
    cf.entries_[section + "." + key] = trim(line.substr(eq + 1));
  }
  return cf;
}

ConfigFile ConfigFile::load(const std::string& path) {
  const auto bytes = bin::read_file(path);
  return parse(std::string(bytes.begin(), bytes.end()), path);
}

void ConfigFile::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const std::string key = trim(assignment.substr(0, eq));
  if (eq == std::string::npos || key.find('.') == std::string::npos || key.front() == '.' || key.back() == '.')
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  entries_[key] = trim(assignment.substr(eq + 1));
}

RunConfig RunConfig::resolve(const ConfigFile& file) {
  RunConfig c;
  c.filter_optimizer.algorithm = Algorithm::LBFGS;
  c.filter_optimizer.learning_rate = 0.05;
  c.convnet_optimizer.algorithm = Algorithm::Adam;
  c.convnet_optimizer.max_epochs = 200;

  const auto& e = file.entries();
  std::optional<std::string> f_explicit, beta_explicit;
  if (auto it = e.find("physics.f"); it != e.end()) f_explicit = it->second;
  if (auto it = e.find("physics.beta"); it != e.end()) beta_explicit = it->second;
  for (const auto& [key, value] : e) {
    bool known = false;
    for (const auto& b : bindings())
      if (b.key == key) {
        b.set(c, value);
        known = true;
      }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  // Coriolis terms follow the latitude unless given explicitly.
  const PhysicalParams at = PhysicalParams::at_latitude(c.generator.latitude);
  if (!f_explicit) c.generator.physics.f = at.f;
  if (!beta_explicit) c.generator.physics.beta = at.beta;

  if (c.threads < 1) throw ConfigError("run.threads must be at least 1");
  if (c.eval_role != "train" && c.eval_role != "test") throw ConfigError("evaluate.role must be train or test");
  if (!(c.filter_init_amplitude >= 0.0)) throw ConfigError("filter.init_amplitude must be non-negative");
  if (!(c.gradcheck_eps > 0.0 && c.gradcheck_threshold > 0.0)) throw ConfigError("gradcheck settings must be positive");
  c.generator.validate();
  c.loss.validate();
  c.filter_optimizer.validate();
  c.convnet_optimizer.validate();
  return c;
}

std::string RunConfig::text() const {
  std::string out, section;
  for (const auto& b : bindings()) {
    const std::string sec = b.key.substr(0, b.key.find('.'));
    if (sec != section) {
      out += (out.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += b.key.substr(sec.size() + 1) + " = " + b.get(*this) + "\n";
  }
  return out;
}

}  // namespace qgnet
