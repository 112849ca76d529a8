#include "qgnet/dynamics.hpp"

#include <algorithm>
#include <cmath>

namespace qgnet {

using ad::Var;

Var pv_from_ssh(const Var& h, const PhysicalParams& p) {
  const Var inner = ad::laplacian(h) - (1.0 / (p.L_R * p.L_R)) * h;
  return p.g_over_f() * inner;
}

Field2D pv_from_ssh(const Field2D& h, const PhysicalParams& p) {
  ad::Tape t;
  return pv_from_ssh(t.constant(h), p).field();
}

std::vector<double> qg_gradient_filter() { return {-0.25, 0.0, 0.25, -0.25, 0.0, 0.25}; }

std::vector<std::size_t> gradient_filter_transpose_index() {
  const KernelLayout f = kGradientFilterLayout;
  const KernelLayout t = f.transposed();
  std::vector<std::size_t> idx(f.size());
  for (int a = 0; a < f.kh; ++a)
    for (int b = 0; b < f.kw; ++b) idx[static_cast<std::size_t>(b * t.kw + a)] = static_cast<std::size_t>(a * f.kw + b);
  return idx;
}

std::pair<Var, Var> filter_velocities(const Var& h, const Var& filter, const PhysicalParams& p) {
  const GridSpec& g = h.grid();
  const double gf = p.g_over_f();
  const Var fx = ad::correlate(h, filter, kGradientFilterLayout, g.dx);
  const Var ft = ad::gather(filter, gradient_filter_transpose_index());
  const Var fy = ad::correlate(h, ft, kGradientFilterLayout.transposed(), g.dy);
  return {(-gf) * fy, gf * fx};
}

std::pair<Var, Var> geostrophic_velocities(const Var& h, const PhysicalParams& p) {
  return filter_velocities(h, h.tape().constant_flat(qg_gradient_filter()), p);
}

std::pair<Field2D, Field2D> geostrophic_velocities(const Field2D& h, const PhysicalParams& p) {
  ad::Tape t;
  auto [U, V] = geostrophic_velocities(t.constant(h), p);
  return {U.field(), V.field()};
}

double cfl_check(std::span<const double> U, std::span<const double> V, const GridSpec& g, double dt) {
  double umax = 0.0, vmax = 0.0;
  for (double u : U) umax = std::max(umax, std::abs(u));
  for (double v : V) vmax = std::max(vmax, std::abs(v));
  return umax * dt / g.dx + vmax * dt / g.dy;
}

double cfl_check(const Field2D& U, const Field2D& V, double dt) {
  require_same_grid(U, V, "cfl_check");
  return cfl_check(U.values(), V.values(), U.grid(), dt);
}

Var advect_pv(const Var& q, const Var& U, const Var& V, double dt, const PhysicalParams& p) {
  Var tendency = U * ad::upwind_deriv(q, U, Axis::X) + V * ad::upwind_deriv(q, V, Axis::Y);
  if (p.beta != 0.0) tendency = tendency + p.beta * V;
  Var q1 = q - dt * tendency;
  if (p.D > 0.0) q1 = q1 + (dt * p.D) * ad::laplacian(q);
  return q1;
}

ModelState ModelState::from_ssh(const Field2D& h, const PhysicalParams& p) {
  ModelState s;
  s.h = h;
  s.q = pv_from_ssh(h, p);
  s.history = {h};
  s.diagnosed = true;
  return s;
}

ModelState advection_step(const ModelState& state, const Field2D& U, const Field2D& V, const StepConfig& cfg,
                          const PhysicalParams& p) {
  const double c = cfl_check(U, V, cfg.dt);
  if (c > cfg.cfl_max) throw CflError(c, cfg.cfl_max);
  ad::Tape t;
  ModelState out = state;
  out.q = advect_pv(t.constant(state.q), t.constant(U), t.constant(V), cfg.dt, p).field();
  out.t = state.t + cfg.dt;
  out.diagnosed = false;
  return out;
}

IntegrationState qg_step(const IntegrationState& s, const VelocityFn& velocities, const StepConfig& cfg,
                         const PhysicalParams& p, const CGConfig& cg, const StepObserver* observer) {
  const long k = s.step + 1;
  const auto [U, V] = velocities(s.h);
  StepDiagnostics d;
  d.step = k;
  d.courant = cfl_check(U.value(), V.value(), s.h.grid(), cfg.dt);
  if (d.courant > cfg.cfl_max) throw CflError(d.courant, cfg.cfl_max, k);

  const Var q = advect_pv(pv_from_ssh(s.h, p), U, V, cfg.dt, p);
  std::vector<Var> history;
  if (s.h_prev) history.push_back(*s.h_prev);
  history.push_back(s.h);
  const Var guess = guess_extrapolate(history, k);

  Var h1;
  try {
    h1 = ssh_from_pv(q, guess, p, cg, &d.cg);
  } catch (const SolverError& e) {
    throw SolverError(std::string(e.what()) + " at step " + std::to_string(k));
  }
  if (observer && *observer) (*observer)(d);
  return IntegrationState{h1, s.h, k};
}

IntegrationState integrate(const IntegrationState& s, int n_steps, const VelocityFn& velocities,
                           const StepConfig& cfg, const PhysicalParams& p, const CGConfig& cg,
                           const StepObserver* observer) {
  IntegrationState cur = s;
  for (int n = 0; n < n_steps; ++n) cur = qg_step(cur, velocities, cfg, p, cg, observer);
  return cur;
}

Field2D integrate_day(const Field2D& h0, const VelocityBinder& velocities, const StepConfig& cfg,
                      const PhysicalParams& p, const CGConfig& cg, const StepObserver* observer) {
  cfg.validate();
  Field2D h = h0;
  std::optional<Field2D> prev;
  for (int k = 0; k < cfg.n_steps; ++k) {
    ad::Tape t;
    IntegrationState s{t.constant(h), std::nullopt, k};
    if (prev) s.h_prev = t.constant(*prev);
    const IntegrationState next = qg_step(s, velocities(t), cfg, p, cg, observer);
    prev = std::move(h);
    h = next.h.field();
  }
  return h;
}

VelocityBinder fixed_qg_binder(const PhysicalParams& p) {
  return [p](ad::Tape&) -> VelocityFn {
    return [p](const Var& h) { return geostrophic_velocities(h, p); };
  };
}

}  // namespace qgnet
