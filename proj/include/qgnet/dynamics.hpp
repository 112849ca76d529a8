#pragma once

// One-layer quasi-geostrophic dynamics: PV diagnosis, geostrophic velocities, upwind
// advection with forward Euler in time, and the step loop that alternates advection with
// Helmholtz inversion.

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "qgnet/autodiff.hpp"
#include "qgnet/elliptic.hpp"
#include "qgnet/grid.hpp"
#include "qgnet/params.hpp"
#include "qgnet/upwind.hpp"

namespace qgnet {

/// q = (g/f) (laplacian(h) - h / L_R^2)
ad::Var pv_from_ssh(const ad::Var& h, const PhysicalParams& p);
Field2D pv_from_ssh(const Field2D& h, const PhysicalParams& p);

/// The 2x3 gradient filter
///
///     [ -0.25  0  0.25 ]   <- row j      (anchor: row j, column i)
///     [ -0.25  0  0.25 ]   <- row j+1
///
/// V uses it along x. U uses the 3x2 transpose along y, which covers rows j-1..j+1 and
/// columns i..i+1.
inline constexpr KernelLayout kGradientFilterLayout{2, 3, 0, 1};
std::vector<double> qg_gradient_filter();
/// Flat indices taking a 2x3 filter to its 3x2 transpose.
std::vector<std::size_t> gradient_filter_transpose_index();

/// U = -(g/f) (F^T * h) / dy,  V = (g/f) (F * h) / dx  for a differentiable 2x3 filter F.
std::pair<ad::Var, ad::Var> filter_velocities(const ad::Var& h, const ad::Var& filter, const PhysicalParams& p);

/// Geostrophic velocities with the fixed QG gradient filter.
std::pair<ad::Var, ad::Var> geostrophic_velocities(const ad::Var& h, const PhysicalParams& p);
std::pair<Field2D, Field2D> geostrophic_velocities(const Field2D& h, const PhysicalParams& p);

/// max|U| dt/dx + max|V| dt/dy
double cfl_check(const Field2D& U, const Field2D& V, double dt);
double cfl_check(std::span<const double> U, std::span<const double> V, const GridSpec& g, double dt);

/// q - dt (U dq/dx + V dq/dy + beta V) + dt D laplacian(q), upwind derivatives.
ad::Var advect_pv(const ad::Var& q, const ad::Var& U, const ad::Var& V, double dt, const PhysicalParams& p);

struct ModelState {
  Field2D h;
  Field2D q;
  double t = 0.0;
  /// Most recent SSH fields, oldest first, at most two.
  std::vector<Field2D> history;
  bool diagnosed = false;

  static ModelState from_ssh(const Field2D& h, const PhysicalParams& p);
};

/// Advects the state's PV by (U, V) over one step; rejects steps above cfg.cfl_max.
ModelState advection_step(const ModelState& state, const Field2D& U, const Field2D& V, const StepConfig& cfg,
                          const PhysicalParams& p);

/// Velocity pair from SSH, evaluated on h's tape.
using VelocityFn = std::function<std::pair<ad::Var, ad::Var>(const ad::Var& h)>;
/// Produces a VelocityFn whose parameters live on the given tape.
using VelocityBinder = std::function<VelocityFn(ad::Tape&)>;

struct StepDiagnostics {
  long step = 0;
  double courant = 0.0;
  CgTrace cg;
};
using StepObserver = std::function<void(const StepDiagnostics&)>;

/// SSH at step k plus the previous one (absent at k = 0).
struct IntegrationState {
  ad::Var h;
  std::optional<ad::Var> h_prev;
  long step = 0;
};

/// One block: velocities from h, PV advection, inversion with the extrapolated guess.
IntegrationState qg_step(const IntegrationState& s, const VelocityFn& velocities, const StepConfig& cfg,
                         const PhysicalParams& p, const CGConfig& cg, const StepObserver* observer = nullptr);

/// n_steps blocks on one tape with shared parameters (the differentiable path).
IntegrationState integrate(const IntegrationState& s, int n_steps, const VelocityFn& velocities,
                           const StepConfig& cfg, const PhysicalParams& p, const CGConfig& cg,
                           const StepObserver* observer = nullptr);

/// Forward-only forecast over cfg.n_steps; each block runs on its own short-lived tape.
Field2D integrate_day(const Field2D& h0, const VelocityBinder& velocities, const StepConfig& cfg,
                      const PhysicalParams& p, const CGConfig& cg, const StepObserver* observer = nullptr);

/// Binder for the fixed QG velocities.
VelocityBinder fixed_qg_binder(const PhysicalParams& p);

}  // namespace qgnet
