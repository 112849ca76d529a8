#pragma once

// Helmholtz inversion of potential vorticity back to sea surface height.
//
// The unknowns are the interior cells; the outer ring is Dirichlet data taken from the
// guess field and is never modified by the solvers.

#include <functional>
#include <vector>

#include "qgnet/autodiff.hpp"
#include "qgnet/grid.hpp"
#include "qgnet/params.hpp"

namespace qgnet {

struct HelmholtzOperator {
  GridSpec grid;
  double L_R = 25000.0;
};

/// A linear operator on fields plus the sign of its definiteness on interior-supported
/// vectors (-1 for the Helmholtz operator, which is negative definite).
struct LinearOperator {
  std::function<ad::Var(const ad::Var&)> apply;
  int definiteness = -1;
};

LinearOperator as_linear_operator(const HelmholtzOperator& op);

/// laplacian(h) - h / L_R^2 on the interior; the outer ring carries h unchanged.
ad::Var helmholtz_apply(const HelmholtzOperator& op, const ad::Var& h);
Field2D helmholtz_apply(const HelmholtzOperator& op, const Field2D& h);

/// Warm start for step k: h0 when k == 1, otherwise 2 h_{k-1} - h_{k-2}.
ad::Var guess_extrapolate(const std::vector<ad::Var>& history, long k);
Field2D guess_extrapolate(const std::vector<Field2D>& history, long k);

/// Residual 2-norms seen by a solve: the initial one, then one per iteration.
struct CgTrace {
  std::vector<double> residuals;
  int iterations = 0;
};

/// Conjugate gradients on the interior unknowns, started from `guess`. Stops after
/// cfg.max_iters iterations or once the residual drops to cfg.tol * ||rhs|| (the initial
/// residual stands in for ||rhs|| when rhs vanishes).
/// Every iteration is recorded on the tape, so the result is differentiable.
ad::Var cg_solve(const LinearOperator& op, const ad::Var& rhs, const ad::Var& guess, const CGConfig& cfg,
                 CgTrace* trace = nullptr);
Field2D cg_solve(const HelmholtzOperator& op, const Field2D& rhs, const Field2D& guess, const CGConfig& cfg,
                 CgTrace* trace = nullptr);

/// First CG step from `guess`:  r = rhs - A guess,  alpha = <r,r> / <r, A r>,  guess + alpha r.
ad::Var cg_one_iteration(const LinearOperator& op, const ad::Var& rhs, const ad::Var& guess,
                         CgTrace* trace = nullptr);
Field2D cg_one_iteration(const HelmholtzOperator& op, const Field2D& rhs, const Field2D& guess);

/// Solves (laplacian - 1/L_R^2) h = (f/g) q with the outer ring of h fixed from `guess`.
ad::Var ssh_from_pv(const ad::Var& q, const ad::Var& guess, const PhysicalParams& p, const CGConfig& cfg,
                    CgTrace* trace = nullptr);
Field2D ssh_from_pv(const Field2D& q, const Field2D& guess, const PhysicalParams& p, const CGConfig& cfg,
                    CgTrace* trace = nullptr);

}  // namespace qgnet
