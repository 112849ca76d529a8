#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "qgnet/data_io.hpp"
#include "qgnet/error.hpp"
#include "test_support.hpp"

using namespace qgnet;
using namespace qgtest;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "qgnet_test_data_io" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<char> slurp(const fs::path& p) {
  std::vector<char> b(fs::file_size(p));
  std::ifstream(p, std::ios::binary).read(b.data(), static_cast<std::streamsize>(b.size()));
  return b;
}

void spit(const fs::path& p, const std::vector<char>& b) {
  std::ofstream(p, std::ios::binary | std::ios::trunc).write(b.data(), static_cast<std::streamsize>(b.size()));
}

io::GeneratorConfig small_generator() {
  io::GeneratorConfig c;
  c.grid = GridSpec{24, 20, 10e3, 10e3};
  c.forecast.step.n_steps = 12;
  c.spinup_steps = 12;
  c.stride = 6;
  c.n_train = 3;
  c.gap = 1;
  c.n_test = 2;
  return c;
}

}  // namespace

TEST_CASE("field files round trip bit-exactly") {
  const fs::path d = scratch("roundtrip");
  const Field2D f = random_field(grid(64, 48, 1e4, 1e4), 1);
  io::save_field(f, d / "f.qga");
  const Field2D r = io::load_field(d / "f.qga", 1e4, 1e4);
  CHECK(r.grid() == f.grid());
  CHECK(std::memcmp(r.storage().data(), f.storage().data(), f.size() * sizeof(double)) == 0);

  Field2D odd(grid(8, 9));
  odd[0] = -0.0;
  odd[1] = 1e-310;
  odd[2] = std::nextafter(1.0, 2.0);
  io::save_field(odd, d / "odd.qga");
  const Field2D ro = io::load_field(d / "odd.qga", 1.0, 1.0);
  CHECK(std::signbit(ro[0]));
  CHECK(ro.storage() == odd.storage());
}

TEST_CASE("array header layout") {
  const fs::path d = scratch("layout");
  const Field2D f = random_field(grid(9, 8), 2);
  io::save_field(f, d / "f.qga");
  const auto b = slurp(d / "f.qga");
  CHECK(b.size() == 8 + 4 + 4 + 4 + 2 * 8 + f.size() * 8 + 4);
  CHECK(std::string(b.data(), 8) == "QGNARRAY");
  std::uint64_t ny;
  std::memcpy(&ny, b.data() + 20, 8);
  CHECK(ny == 8);
}

TEST_CASE("damaged array files are rejected") {
  const fs::path d = scratch("damaged");
  const fs::path p = d / "f.qga";
  io::save_field(random_field(grid(10, 8), 3), p);
  const auto good = slurp(p);

  auto flipped = good;
  flipped[40] ^= 0x10;
  spit(p, flipped);
  CHECK_THROWS_WITH_AS(io::load_array(p), doctest::Contains("checksum"), IoError);

  spit(p, std::vector<char>(good.begin(), good.end() - 9));
  CHECK_THROWS_WITH_AS(io::load_array(p), doctest::Contains("truncated"), IoError);

  auto newer = good;
  newer[8] = 7;
  spit(p, newer);
  CHECK_THROWS_WITH_AS(io::load_array(p), doctest::Contains("version 7"), IoError);

  auto foreign = good;
  foreign[0] = 'X';
  spit(p, foreign);
  CHECK_THROWS_AS(io::load_array(p), IoError);

  CHECK_THROWS_AS(io::load_array(d / "absent.qga"), IoError);
}

TEST_CASE("sequence frames match separately saved fields") {
  const fs::path d = scratch("sequence");
  const GridSpec g = grid(11, 9, 2.0, 3.0);
  const std::vector<Field2D> frames = {random_field(g, 4), random_field(g, 5), random_field(g, 6)};
  io::save_sequence(frames, d / "seq.qga");
  io::save_field(frames[0], d / "f0.qga");
  const io::Array a = io::load_array(d / "seq.qga");
  CHECK(a.shape == std::vector<std::uint64_t>{3, 9, 11});
  CHECK(io::frame_count(a) == 3);
  CHECK(io::frame(a, 0, 2.0, 3.0).storage() == io::load_field(d / "f0.qga", 2.0, 3.0).storage());
  CHECK(io::frame(a, 2, 2.0, 3.0).storage() == frames[2].storage());
  CHECK_THROWS_AS(io::frame(a, 3, 2.0, 3.0), DimensionError);
  CHECK_THROWS_AS(io::load_field(d / "seq.qga", 2.0, 3.0), IoError);
}

TEST_CASE("csv export") {
  Field2D f(grid(8, 8));
  f(0, 1) = 0.5;
  f(2, 0) = -1.25;
  const std::string csv = io::to_csv(f);
  CHECK(csv.rfind("y,x,value\n0,0,0\n0,1,0.5\n", 0) == 0);
  CHECK(csv.find("\n2,0,-1.25\n") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 65);
}

TEST_CASE("manifest text round trips") {
  io::DatasetManifest m;
  m.generator = small_generator();
  m.generator.ageostrophic = 0.15;
  m.seed = 123456789012345ULL;
  m.samples = {{"train_000", "train_000.qga", 0, "train", 0.0123},
               {"test_000", "test_000.qga", 24, "test", 1.0 / 3.0}};
  const io::DatasetManifest r = io::parse_manifest(io::manifest_text(m));
  CHECK(io::manifest_text(r) == io::manifest_text(m));
  CHECK(r.samples[1].sigma == 1.0 / 3.0);
  CHECK(r.generator.physics.beta == m.generator.physics.beta);

  m.samples[1].time_offset = 6;
  CHECK_THROWS_WITH_AS(io::parse_manifest(io::manifest_text(m)), doctest::Contains("gap"), IoError);
  CHECK_THROWS_AS(io::parse_manifest("format = other\n"), IoError);
}

TEST_CASE("generation is deterministic per seed") {
  const io::GeneratorConfig c = small_generator();
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), other = scratch("gen_c");
  const io::DatasetManifest ma = io::generate_synthetic(c, 42, a);
  io::generate_synthetic(c, 42, b);
  io::generate_synthetic(c, 43, other);
  REQUIRE(ma.samples.size() == 5);
  for (const auto& s : ma.samples) CHECK(slurp(a / s.file) == slurp(b / s.file));
  CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
  CHECK(slurp(a / "train_000.qga") != slurp(other / "train_000.qga"));
  CHECK(ma.samples[3].id == "test_000");
  CHECK(ma.samples[3].time_offset == 24);
}

TEST_CASE("zero-eddy generation is rejected as a constant target") {
  io::GeneratorConfig c = small_generator();
  c.eddies.count_min = c.eddies.count_max = 0;
  CHECK(io::eddy_field(c, 1).max_abs() == 0.0);
  CHECK_THROWS_WITH_AS(io::generate_synthetic(c, 1, scratch("zero")), doctest::Contains("constant target"), DataError);
}

TEST_CASE("generated data reloads and is consistent with the fixed model") {
  const fs::path d = scratch("consistent");
  const io::GeneratorConfig c = small_generator();
  io::generate_synthetic(c, 7, d);
  const io::Dataset ds = io::load_dataset(d / "manifest.txt");
  REQUIRE(ds.train.size() == 3);
  REQUIRE(ds.test.size() == 2);
  const VelocityModel qg = VelocityModel::fixed_qg(ds.manifest.generator.physics);
  const std::vector<NamedModel> models = {{"persistence", nullptr}, {"fixed-qg", &qg}};
  const auto rows = evaluate(models, ds.test, ds.manifest.generator.forecast, 1);
  CHECK(median_rmse(rows, "fixed-qg") < 1e-3 * median_rmse(rows, "persistence"));
  CHECK(median_rmse(rows, "persistence") > 0.0);
}

TEST_CASE("a non-geostrophic teacher separates the fixed model from the data") {
  io::GeneratorConfig c = small_generator();
  c.ageostrophic = 0.2;
  const fs::path d = scratch("perturbed");
  io::generate_synthetic(c, 7, d);
  const io::Dataset ds = io::load_dataset(d / "manifest.txt");
  const VelocityModel qg = VelocityModel::fixed_qg(ds.manifest.generator.physics);
  const std::vector<NamedModel> models = {{"persistence", nullptr}, {"fixed-qg", &qg}};
  const auto rows = evaluate(models, ds.train, ds.manifest.generator.forecast, 1);
  CHECK(median_rmse(rows, "fixed-qg") > 0.0);
  CHECK(median_rmse(rows, "fixed-qg") < median_rmse(rows, "persistence"));
}

TEST_CASE("dataset validation catches missing and corrupt members") {
  const fs::path d = scratch("validate");
  io::generate_synthetic(small_generator(), 9, d);
  auto bytes = slurp(d / "test_001.qga");
  bytes[100] ^= 0x01;
  spit(d / "test_001.qga", bytes);
  CHECK_THROWS_WITH_AS(io::load_dataset(d / "manifest.txt"), doctest::Contains("test_001"), IoError);
  fs::remove(d / "train_001.qga");
  CHECK_THROWS_WITH_AS(io::load_dataset(d / "manifest.txt"), doctest::Contains("train_001"), IoError);
}
