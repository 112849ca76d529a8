#include "qgnet/data_io.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <sstream>

#include "binio.hpp"
#include "qgnet/dynamics.hpp"

namespace qgnet::io {

namespace {

constexpr char kArrayMagic[8] = {'Q', 'G', 'N', 'A', 'R', 'R', 'A', 'Y'};
constexpr std::uint32_t kDtypeF64 = 1;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_array(const Array& a, const fs::path& path) {
  std::uint64_t count = 1;
  for (auto d : a.shape) count *= d;
  if (a.shape.empty() || count != a.data.size()) throw DimensionError("save_array: shape does not match payload");
  bin::Writer w;
  w.bytes(kArrayMagic, 8);
  w.u32(kArrayVersion);
  w.u32(kDtypeF64);
  w.u32(static_cast<std::uint32_t>(a.shape.size()));
  for (auto d : a.shape) w.u64(d);
  const std::size_t start = w.size();
  w.f64s(a.data);
  w.u32(bin::crc32(w.data().data() + start, w.size() - start));
  bin::write_file_atomic(path, w.data());
}

Array load_array(const fs::path& path) {
  const auto buf = bin::read_file(path);
  const std::string what = "array " + path.string();
  bin::Reader r(buf, what);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kArrayMagic, 8) != 0) throw IoError(what + ": not an array file");
  const std::uint32_t version = r.u32();
  if (version != kArrayVersion) throw IoError(what + ": unsupported version " + std::to_string(version));
  if (r.u32() != kDtypeF64) throw IoError(what + ": unsupported dtype");
  const std::uint32_t nd = r.u32();
  if (nd < 1 || nd > 3) throw IoError(what + ": unsupported rank " + std::to_string(nd));
  Array a;
  std::uint64_t count = 1;
  for (std::uint32_t k = 0; k < nd; ++k) {
    a.shape.push_back(r.u64());
    count *= a.shape.back();
  }
  if (count * sizeof(double) + 4 != r.remaining()) throw IoError(what + ": payload length does not match shape (truncated?)");
  const std::size_t start = r.pos();
  a.data = r.f64s(count);
  const std::uint32_t stored = r.u32();
  if (stored != bin::crc32(buf.data() + start, count * sizeof(double))) throw IoError(what + ": checksum mismatch");
  return a;
}

void save_field(const Field2D& f, const fs::path& path) {
  save_array({{static_cast<std::uint64_t>(f.ny()), static_cast<std::uint64_t>(f.nx())}, f.storage()}, path);
}

void save_sequence(const std::vector<Field2D>& frames, const fs::path& path) {
  if (frames.empty()) throw DimensionError("save_sequence: no frames");
  const GridSpec& g = frames[0].grid();
  Array a{{frames.size(), static_cast<std::uint64_t>(g.ny), static_cast<std::uint64_t>(g.nx)}, {}};
  for (const auto& f : frames) {
    require_same_grid(f, frames[0], "save_sequence");
    a.data.insert(a.data.end(), f.storage().begin(), f.storage().end());
  }
  save_array(a, path);
}

std::size_t frame_count(const Array& a) { return a.shape.size() == 3 ? static_cast<std::size_t>(a.shape[0]) : 1; }

Field2D frame(const Array& a, std::size_t k, double dx, double dy) {
  if (a.shape.size() < 2) throw DimensionError("array is not a field or a sequence");
  if (k >= frame_count(a)) throw DimensionError("frame index out of range");
  const auto ny = static_cast<int>(a.shape[a.shape.size() - 2]);
  const auto nx = static_cast<int>(a.shape[a.shape.size() - 1]);
  const GridSpec g{nx, ny, dx, dy};
  const auto off = static_cast<std::ptrdiff_t>(k * g.size());
  return Field2D(g, std::vector<double>(a.data.begin() + off, a.data.begin() + off + static_cast<std::ptrdiff_t>(g.size())));
}

Field2D load_field(const fs::path& path, double dx, double dy) {
  const Array a = load_array(path);
  if (a.shape.size() != 2) throw IoError("array " + path.string() + ": expected a 2-D field");
  return frame(a, 0, dx, dy);
}

std::string to_csv(const Field2D& f) {
  std::string out = "y,x,value\n";
  for (int j = 0; j < f.ny(); ++j)
    for (int i = 0; i < f.nx(); ++i) out += std::to_string(j) + "," + std::to_string(i) + "," + fmt(f(j, i)) + "\n";
  return out;
}

// ---- synthetic data ---------------------------------------------------------------------

void EddyConfig::validate() const {
  if (count_min < 0 || count_max < count_min) throw ConfigError("eddy count range is invalid");
  if (!(amplitude_min >= 0.0 && amplitude_max >= amplitude_min)) throw ConfigError("eddy amplitude range is invalid");
  if (!(radius_min > 0.0 && radius_max >= radius_min)) throw ConfigError("eddy radius range is invalid");
}

void GeneratorConfig::validate() const {
  grid.validate();
  physics.validate();
  forecast.validate();
  eddies.validate();
  if (spinup_steps < 0 || stride < 1) throw ConfigError("spin-up must be >= 0 and stride >= 1");
  if (n_train < 0 || n_test < 0 || gap < 0 || n_train + n_test == 0) throw ConfigError("sample counts are invalid");
  if (!std::isfinite(ageostrophic)) throw ConfigError("ageostrophic coefficient must be finite");
}

Field2D eddy_field(const GeneratorConfig& cfg, std::uint64_t seed) {
  const GridSpec& g = cfg.grid;
  const EddyConfig& e = cfg.eddies;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = e.count_min + static_cast<int>(u(rng) * (e.count_max - e.count_min + 1));
  Field2D h(g);
  for (int k = 0; k < std::min(n, e.count_max); ++k) {
    const double cx = (0.1 + 0.8 * u(rng)) * g.nx * g.dx;
    const double cy = (0.1 + 0.8 * u(rng)) * g.ny * g.dy;
    const double amp = (e.amplitude_min + (e.amplitude_max - e.amplitude_min) * u(rng)) * (u(rng) < 0.5 ? -1.0 : 1.0);
    const double r = e.radius_min + (e.radius_max - e.radius_min) * u(rng);
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        const double dx = (i + 0.5) * g.dx - cx, dy = (j + 0.5) * g.dy - cy;
        h(j, i) += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
      }
  }
  return h;
}

namespace {

VelocityBinder teacher(const PhysicalParams& p, double kappa) {
  return [p, kappa](ad::Tape&) -> VelocityFn {
    return [p, kappa](const ad::Var& h) {
      auto [U, V] = geostrophic_velocities(h, p);
      if (kappa == 0.0) return std::pair{U, V};
      const double c = kappa * p.g_over_f();
      return std::pair{U + c * ad::grad_x(h), V + c * ad::grad_y(h)};
    };
  };
}

Field2D run(const Field2D& h, int steps, const VelocityBinder& vel, const GeneratorConfig& cfg) {
  StepConfig sc = cfg.forecast.step;
  sc.n_steps = steps;
  return integrate_day(h, vel, sc, cfg.physics, cfg.forecast.cg);
}

}  // namespace

DatasetManifest generate_synthetic(const GeneratorConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  cfg.validate();
  fs::create_directories(dir);
  const VelocityBinder vel = teacher(cfg.physics, cfg.ageostrophic);
  DatasetManifest m{cfg, seed, {}};

  Field2D h = run(eddy_field(cfg, seed), cfg.spinup_steps, vel, cfg);
  const int total = cfg.n_train + cfg.gap + cfg.n_test;
  for (int k = 0; k < total; ++k) {
    if (k > 0) h = run(h, cfg.stride, vel, cfg);
    const bool train = k < cfg.n_train;
    if (!train && k < cfg.n_train + cfg.gap) continue;
    const int idx = train ? k : k - cfg.n_train - cfg.gap;
    char name[32];
    std::snprintf(name, sizeof name, "%s_%03d", train ? "train" : "test", idx);
    const Field2D target = run(h, cfg.forecast.step.n_steps, vel, cfg);
    SampleRecord rec;
    rec.id = name;
    rec.file = std::string(name) + ".qga";
    rec.time_offset = static_cast<long>(k) * cfg.stride;
    rec.role = train ? "train" : "test";
    rec.sigma = target_sigma(target);
    save_sequence({h, target}, dir / rec.file);
    m.samples.push_back(rec);
  }
  write_manifest(m, dir / "manifest.txt");
  return m;
}

// ---- manifest ---------------------------------------------------------------------------

std::string manifest_text(const DatasetManifest& m) {
  const GeneratorConfig& c = m.generator;
  std::ostringstream os;
  os << "format = qgnet-dataset 1\n";
  os << "seed = " << m.seed << "\n";
  os << "grid.nx = " << c.grid.nx << "\ngrid.ny = " << c.grid.ny << "\n";
  os << "grid.dx = " << fmt(c.grid.dx) << "\ngrid.dy = " << fmt(c.grid.dy) << "\n";
  os << "physics.latitude = " << fmt(c.latitude) << "\n";
  os << "physics.g = " << fmt(c.physics.g) << "\nphysics.f = " << fmt(c.physics.f) << "\n";
  os << "physics.beta = " << fmt(c.physics.beta) << "\nphysics.L_R = " << fmt(c.physics.L_R) << "\n";
  os << "physics.D = " << fmt(c.physics.D) << "\n";
  os << "step.dt = " << fmt(c.forecast.step.dt) << "\nstep.n_steps = " << c.forecast.step.n_steps << "\n";
  os << "step.cfl_max = " << fmt(c.forecast.step.cfl_max) << "\n";
  os << "solver.max_iters = " << c.forecast.cg.max_iters << "\nsolver.tol = " << fmt(c.forecast.cg.tol) << "\n";
  os << "solver.unrolled = " << (c.forecast.cg.unrolled ? "true" : "false") << "\n";
  os << "data.eddies_min = " << c.eddies.count_min << "\ndata.eddies_max = " << c.eddies.count_max << "\n";
  os << "data.amplitude_min = " << fmt(c.eddies.amplitude_min) << "\n";
  os << "data.amplitude_max = " << fmt(c.eddies.amplitude_max) << "\n";
  os << "data.radius_min = " << fmt(c.eddies.radius_min) << "\ndata.radius_max = " << fmt(c.eddies.radius_max) << "\n";
  os << "data.spinup_steps = " << c.spinup_steps << "\ndata.stride = " << c.stride << "\n";
  os << "data.n_train = " << c.n_train << "\ndata.gap = " << c.gap << "\ndata.n_test = " << c.n_test << "\n";
  os << "data.ageostrophic = " << fmt(c.ageostrophic) << "\n";
  os << "[samples]\n# id file time_offset role sigma\n";
  for (const auto& s : m.samples)
    os << s.id << ' ' << s.file << ' ' << s.time_offset << ' ' << s.role << ' ' << fmt(s.sigma) << "\n";
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

DatasetManifest parse_manifest(const std::string& text) {
  std::map<std::string, std::string> kv;
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  bool table = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line == "[samples]") {
      table = true;
      continue;
    }
    if (table) {
      std::istringstream row(line);
      SampleRecord s;
      if (!(row >> s.id >> s.file >> s.time_offset >> s.role >> s.sigma) || (s.role != "train" && s.role != "test"))
        throw IoError("manifest line " + std::to_string(lineno) + ": malformed sample record");
      m.samples.push_back(s);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("manifest line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw IoError("manifest: missing key '" + k + "'");
    return it->second;
  };
  auto num = [&](const std::string& k) {
    try {
      return std::stod(get(k));
    } catch (const std::logic_error&) {
      throw IoError("manifest: bad number for '" + k + "'");
    }
  };
  auto integer = [&](const std::string& k) { return static_cast<int>(num(k)); };
  if (get("format") != "qgnet-dataset 1") throw IoError("manifest: unsupported format '" + get("format") + "'");
  m.seed = std::stoull(get("seed"));
  GeneratorConfig& c = m.generator;
  c.grid = GridSpec{integer("grid.nx"), integer("grid.ny"), num("grid.dx"), num("grid.dy")};
  c.latitude = num("physics.latitude");
  c.physics.g = num("physics.g");
  c.physics.f = num("physics.f");
  c.physics.beta = num("physics.beta");
  c.physics.L_R = num("physics.L_R");
  c.physics.D = num("physics.D");
  c.forecast.step.dt = num("step.dt");
  c.forecast.step.n_steps = integer("step.n_steps");
  c.forecast.step.cfl_max = num("step.cfl_max");
  c.forecast.cg.max_iters = integer("solver.max_iters");
  c.forecast.cg.tol = num("solver.tol");
  c.forecast.cg.unrolled = get("solver.unrolled") == "true";
  c.eddies.count_min = integer("data.eddies_min");
  c.eddies.count_max = integer("data.eddies_max");
  c.eddies.amplitude_min = num("data.amplitude_min");
  c.eddies.amplitude_max = num("data.amplitude_max");
  c.eddies.radius_min = num("data.radius_min");
  c.eddies.radius_max = num("data.radius_max");
  c.spinup_steps = integer("data.spinup_steps");
  c.stride = integer("data.stride");
  c.n_train = integer("data.n_train");
  c.gap = integer("data.gap");
  c.n_test = integer("data.n_test");
  c.ageostrophic = num("data.ageostrophic");

  long last_train = -1, first_test = -1;
  for (const auto& s : m.samples) {
    if (s.role == "train") last_train = std::max(last_train, s.time_offset);
    if (s.role == "test" && (first_test < 0 || s.time_offset < first_test)) first_test = s.time_offset;
  }
  if (last_train >= 0 && first_test >= 0 && first_test - last_train < static_cast<long>(c.gap + 1) * c.stride)
    throw IoError("manifest: test block does not follow the training block after the declared gap");
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) { bin::write_text_atomic(path, manifest_text(m)); }

DatasetManifest read_manifest(const fs::path& path) {
  const auto bytes = bin::read_file(path);
  try {
    return parse_manifest(std::string(bytes.begin(), bytes.end()));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset d;
  d.manifest = read_manifest(manifest_path);
  const GridSpec& g = d.manifest.generator.grid;
  const fs::path dir = manifest_path.parent_path();
  for (const auto& rec : d.manifest.samples) {
    const Array a = load_array(dir / rec.file);
    if (a.shape != std::vector<std::uint64_t>{2, static_cast<std::uint64_t>(g.ny), static_cast<std::uint64_t>(g.nx)})
      throw IoError("sample " + rec.file + ": shape does not match the manifest grid");
    Sample s{rec.id, frame(a, 0, g.dx, g.dy), frame(a, 1, g.dx, g.dy), rec.sigma};
    const double sigma = target_sigma(s.target);
    if (sigma != rec.sigma) throw IoError("sample " + rec.file + ": sigma differs from the manifest");
    (rec.role == "train" ? d.train : d.test).push_back(std::move(s));
  }
  return d;
}

}  // namespace qgnet::io
