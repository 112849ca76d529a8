#pragma once

// Array files, dataset manifests and the synthetic eddy-field generator.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qgnet/grid.hpp"
#include "qgnet/params.hpp"
#include "qgnet/training.hpp"

namespace qgnet::io {

namespace fs = std::filesystem;

/// Layout: "QGNARRAY", u32 version, u32 dtype (1 = f64 LE), u32 ndim, u64 dims[ndim],
/// row-major payload, u32 CRC-32 of the payload.
struct Array {
  std::vector<std::uint64_t> shape;
  std::vector<double> data;
};

inline constexpr std::uint32_t kArrayVersion = 1;

void save_array(const Array& a, const fs::path& path);
Array load_array(const fs::path& path);

void save_field(const Field2D& f, const fs::path& path);
/// (t, ny, nx)
void save_sequence(const std::vector<Field2D>& frames, const fs::path& path);

/// Frame `k` of a 2-D (k = 0 only) or 3-D array on a grid with the given spacing.
Field2D frame(const Array& a, std::size_t k, double dx, double dy);
std::size_t frame_count(const Array& a);
Field2D load_field(const fs::path& path, double dx, double dy);

/// "y,x,value" rows, %.17g.
std::string to_csv(const Field2D& f);

// ---- synthetic data ---------------------------------------------------------------------

struct EddyConfig {
  int count_min = 4;
  int count_max = 8;
  double amplitude_min = 0.1;  // m
  double amplitude_max = 0.5;
  double radius_min = 40e3;  // m
  double radius_max = 120e3;

  void validate() const;
};

struct GeneratorConfig {
  GridSpec grid{64, 48, 10e3, 10e3};
  PhysicalParams physics = PhysicalParams::at_latitude(35.0);
  double latitude = 35.0;
  /// Forecast horizon and solver shared with training.
  ForecastConfig forecast;
  EddyConfig eddies;
  int spinup_steps = 288;
  /// Steps between consecutive initial states.
  int stride = 36;
  int n_train = 18;
  /// Initial states skipped between the training and test blocks.
  int gap = 4;
  int n_test = 6;
  /// Coefficient of the non-geostrophic component kappa (g/f) grad(h) added to the teacher.
  double ageostrophic = 0.0;

  void validate() const;
};

struct SampleRecord {
  std::string id;
  std::string file;  // relative to the manifest
  long time_offset = 0;  // teacher step of the initial state, after spin-up
  std::string role;  // train | test
  double sigma = 0.0;
};

struct DatasetManifest {
  GeneratorConfig generator;
  std::uint64_t seed = 0;
  std::vector<SampleRecord> samples;
};

/// Key = value header followed by a `[samples]` table.
std::string manifest_text(const DatasetManifest& m);
DatasetManifest parse_manifest(const std::string& text);
void write_manifest(const DatasetManifest& m, const fs::path& path);
DatasetManifest read_manifest(const fs::path& path);

/// Spins up a teacher run from random Gaussian eddies, then emits (h0, one-day target)
/// pairs as (2, ny, nx) arrays in `dir` together with manifest.txt.
DatasetManifest generate_synthetic(const GeneratorConfig& cfg, std::uint64_t seed, const fs::path& dir);

/// Initial Gaussian eddy field for a seed.
Field2D eddy_field(const GeneratorConfig& cfg, std::uint64_t seed);

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Loads and validates every member of the manifest in `manifest_path`'s directory.
Dataset load_dataset(const fs::path& manifest_path);

}  // namespace qgnet::io
