#pragma once

// Flat run configuration: `[section]` headers, `key = value` lines, `#` comments.
// Overrides use `section.key=value`.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qgnet/data_io.hpp"
#include "qgnet/training.hpp"

namespace qgnet {

class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& origin = "config");
  static ConfigFile load(const std::string& path);

  /// `section.key=value`
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;

  io::GeneratorConfig generator;  // grid, physics, step, solver and dataset settings
  LossConfig loss;
  OptimizerConfig filter_optimizer;
  OptimizerConfig convnet_optimizer;
  double filter_init_amplitude = 0.05;

  std::string dataset;      // manifest path
  std::string input;        // simulate: initial SSH array; empty means a generated eddy field
  std::string component;    // simulate: velocity component; empty means fixed QG
  std::vector<std::string> components;  // evaluate
  std::string eval_role = "test";
  double gradcheck_eps = 1e-6;
  double gradcheck_threshold = 1e-5;

  const GridSpec& grid() const { return generator.grid; }
  const PhysicalParams& physics() const { return generator.physics; }
  const ForecastConfig& forecast() const { return generator.forecast; }

  /// Typed view of a config file; unknown keys and invalid values throw ConfigError.
  static RunConfig resolve(const ConfigFile& file);
  /// Every setting, in a form `resolve` reads back to the same configuration.
  std::string text() const;
};

}  // namespace qgnet
