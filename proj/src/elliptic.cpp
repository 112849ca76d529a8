#include "qgnet/elliptic.hpp"

#include <cmath>

namespace qgnet {

using ad::Var;

LinearOperator as_linear_operator(const HelmholtzOperator& op) {
  return LinearOperator{[op](const Var& h) { return helmholtz_apply(op, h); }, -1};
}

Var helmholtz_apply(const HelmholtzOperator& op, const Var& h) {
  if (!(h.grid() == op.grid)) throw DimensionError("helmholtz_apply: field grid differs from operator grid");
  const Var inner = ad::laplacian(h) - (1.0 / (op.L_R * op.L_R)) * h;
  return ad::select_interior(inner, h);
}

Field2D helmholtz_apply(const HelmholtzOperator& op, const Field2D& h) {
  ad::Tape t;
  return helmholtz_apply(op, t.constant(h)).field();
}

Var guess_extrapolate(const std::vector<Var>& history, long k) {
  if (k < 1) throw UsageError("guess_extrapolate: step index must be >= 1");
  if (history.empty()) throw UsageError("guess_extrapolate: empty history");
  if (k == 1) return history.back();
  if (history.size() < 2) throw UsageError("guess_extrapolate: two past fields needed for k >= 2");
  const Var& h1 = history[history.size() - 1];
  const Var& h2 = history[history.size() - 2];
  return 2.0 * h1 - h2;
}

Field2D guess_extrapolate(const std::vector<Field2D>& history, long k) {
  if (k < 1) throw UsageError("guess_extrapolate: step index must be >= 1");
  if (history.empty()) throw UsageError("guess_extrapolate: empty history");
  if (k == 1) return history.back();
  if (history.size() < 2) throw UsageError("guess_extrapolate: two past fields needed for k >= 2");
  return 2.0 * history[history.size() - 1] - history[history.size() - 2];
}

namespace {

double norm_of(const Var& v) {
  double s = 0.0;
  for (double x : v.value()) s += x * x;
  return std::sqrt(s);
}

bool all_zero(const Var& v) {
  for (double x : v.value())
    if (x != 0.0) return false;
  return true;
}

void check_curvature(double curvature, int definiteness, const char* where) {
  if (curvature == 0.0 || curvature * definiteness < 0.0)
    throw SolverError(std::string(where) + ": CG breakdown (search direction has non-definite curvature)");
}

}  // namespace

Var cg_solve(const LinearOperator& op, const Var& rhs, const Var& guess, const CGConfig& cfg, CgTrace* trace) {
  cfg.validate();
  Var x = guess;
  Var r = ad::mask_interior(rhs - op.apply(x));
  Var rr = ad::dot(r, r);
  double rnorm = std::sqrt(rr.scalar());
  double scale = norm_of(ad::mask_interior(rhs));
  if (scale == 0.0) scale = rnorm;
  const double stop = cfg.tol * scale;
  if (trace) {
    trace->residuals.push_back(rnorm);
    trace->iterations = 0;
  }
  if (rr.scalar() == 0.0 || rnorm <= stop) return x;

  Var p = r;
  for (int it = 0; it < cfg.max_iters; ++it) {
    const Var Ap = op.apply(p);
    const Var pAp = ad::dot(p, Ap);
    check_curvature(pAp.scalar(), op.definiteness, "cg_solve");
    const Var alpha = rr / pAp;
    x = x + alpha * p;
    r = r - alpha * Ap;
    const Var rr_new = ad::dot(r, r);
    rnorm = std::sqrt(rr_new.scalar());
    if (trace) {
      trace->residuals.push_back(rnorm);
      trace->iterations = it + 1;
    }
    if (rr_new.scalar() == 0.0 || rnorm <= stop) break;
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  return x;
}

Field2D cg_solve(const HelmholtzOperator& op, const Field2D& rhs, const Field2D& guess, const CGConfig& cfg,
                 CgTrace* trace) {
  ad::Tape t;
  return cg_solve(as_linear_operator(op), t.constant(rhs), t.constant(guess), cfg, trace).field();
}

Var cg_one_iteration(const LinearOperator& op, const Var& rhs, const Var& guess, CgTrace* trace) {
  const Var r = ad::mask_interior(rhs - op.apply(guess));
  if (trace) {
    trace->residuals.push_back(norm_of(r));
    trace->iterations = 0;
  }
  if (all_zero(r)) return guess;
  const Var rr = ad::dot(r, r);
  const Var rAr = ad::dot(r, op.apply(r));
  check_curvature(rAr.scalar(), op.definiteness, "cg_one_iteration");
  const Var out = guess + (rr / rAr) * r;
  if (trace) {
    trace->residuals.push_back(norm_of(ad::mask_interior(rhs - op.apply(out))));
    trace->iterations = 1;
  }
  return out;
}

Field2D cg_one_iteration(const HelmholtzOperator& op, const Field2D& rhs, const Field2D& guess) {
  ad::Tape t;
  return cg_one_iteration(as_linear_operator(op), t.constant(rhs), t.constant(guess)).field();
}

Var ssh_from_pv(const Var& q, const Var& guess, const PhysicalParams& p, const CGConfig& cfg, CgTrace* trace) {
  const HelmholtzOperator op{q.grid(), p.L_R};
  const Var rhs = (1.0 / p.g_over_f()) * q;
  if (cfg.unrolled) return cg_one_iteration(as_linear_operator(op), rhs, guess, trace);
  return cg_solve(as_linear_operator(op), rhs, guess, cfg, trace);
}

Field2D ssh_from_pv(const Field2D& q, const Field2D& guess, const PhysicalParams& p, const CGConfig& cfg,
                    CgTrace* trace) {
  ad::Tape t;
  return ssh_from_pv(t.constant(q), t.constant(guess), p, cfg, trace).field();
}

}  // namespace qgnet
