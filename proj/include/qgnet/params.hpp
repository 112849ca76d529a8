#pragma once

namespace qgnet {

/// Physical constants of the one-layer QG model.
struct PhysicalParams {
  static constexpr double kEarthRotation = 7.2921e-5;  // 1/s
  static constexpr double kEarthRadius = 6.371e6;      // m

  double g = 9.81;         // m/s^2
  double f = 0.0;          // Coriolis parameter, 1/s
  double beta = 0.0;       // df/dy, 1/(m s)
  double L_R = 25000.0;    // first Rossby deformation radius, m
  double D = 0.0;          // PV diffusion, m^2/s

  /// f = 2 Omega sin(lat), beta = 2 Omega cos(lat) / R.
  static PhysicalParams at_latitude(double latitude_deg);

  double g_over_f() const { return g / f; }
  /// Throws ConfigError unless f != 0, L_R > 0, D >= 0 and everything is finite.
  void validate() const;
};

struct StepConfig {
  double dt = 600.0;     // s
  int n_steps = 144;
  double cfl_max = 0.5;

  void validate() const;
};

struct CGConfig {
  int max_iters = 4;
  /// Stop once ||r|| <= tol * ||rhs|| over the interior unknowns.
  double tol = 1e-12;
  /// Replace the truncated solve by a single steepest-descent CG step.
  bool unrolled = false;

  void validate() const;
};

}  // namespace qgnet
