#include "qgnet/params.hpp"

#include <cmath>
#include <numbers>

#include "qgnet/error.hpp"

namespace qgnet {

PhysicalParams PhysicalParams::at_latitude(double latitude_deg) {
  const double phi = latitude_deg * std::numbers::pi / 180.0;
  PhysicalParams p;
  p.f = 2.0 * kEarthRotation * std::sin(phi);
  p.beta = 2.0 * kEarthRotation * std::cos(phi) / kEarthRadius;
  return p;
}

void PhysicalParams::validate() const {
  if (!std::isfinite(g) || !std::isfinite(f) || !std::isfinite(beta) || !std::isfinite(L_R) || !std::isfinite(D))
    throw ConfigError("physical parameters must be finite");
  if (f == 0.0) throw ConfigError("Coriolis parameter f must be non-zero");
  if (!(L_R > 0.0)) throw ConfigError("deformation radius L_R must be positive");
  if (D < 0.0) throw ConfigError("diffusion coefficient D must be non-negative");
}

void StepConfig::validate() const {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("dt must be positive");
  if (n_steps < 0) throw ConfigError("n_steps must be non-negative");
  if (!(cfl_max > 0.0 && cfl_max <= 1.0)) throw ConfigError("cfl_max must lie in (0, 1]");
}

void CGConfig::validate() const {
  if (max_iters < 1) throw ConfigError("cg max_iters must be at least 1");
  if (!(tol >= 0.0)) throw ConfigError("cg tol must be non-negative");
}

}  // namespace qgnet
