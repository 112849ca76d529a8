#pragma once

// Shared helpers for the unit tests: seeded random fields, smooth eddy fields, and
// explicitly assembled dense operators used as independent oracles.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

#include "qgnet/grid.hpp"

namespace qgtest {

using qgnet::Field2D;
using qgnet::GridSpec;

inline GridSpec grid(int nx, int ny, double dx = 1.0, double dy = 1.0) { return GridSpec{nx, ny, dx, dy}; }

inline Field2D random_field(const GridSpec& g, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  return Field2D::from_function(g, [&](int, int) { return u(rng); });
}

/// Sum of a few Gaussian bumps; smooth on the grid scale when radii span several cells.
inline Field2D eddy_field(const GridSpec& g, unsigned seed, int n = 5, double amp = 0.3, double radius_cells = 6.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Field2D f(g);
  for (int e = 0; e < n; ++e) {
    const double cx = (0.2 + 0.6 * u(rng)) * g.nx;
    const double cy = (0.2 + 0.6 * u(rng)) * g.ny;
    const double a = amp * (u(rng) < 0.5 ? -1.0 : 1.0) * (0.5 + u(rng));
    const double r = radius_cells * (0.7 + 0.6 * u(rng));
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        const double d2 = (i - cx) * (i - cx) + (j - cy) * (j - cy);
        f(j, i) += a * std::exp(-d2 / (2.0 * r * r));
      }
  }
  return f;
}

inline double max_abs_diff(const Field2D& a, const Field2D& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

inline double max_abs_diff_interior(const Field2D& a, const Field2D& b) {
  double m = 0.0;
  const GridSpec& g = a.grid();
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) m = std::max(m, std::abs(a(j, i) - b(j, i)));
  return m;
}

inline double rel_l2(const Field2D& a, const Field2D& ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    num += (a[k] - ref[k]) * (a[k] - ref[k]);
    den += ref[k] * ref[k];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

inline Eigen::VectorXd to_vec(const Field2D& f) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(f.size()));
  for (std::size_t k = 0; k < f.size(); ++k) v[static_cast<Eigen::Index>(k)] = f[k];
  return v;
}

/// Five-point Laplacian over all cells with edge replication, assembled entry by entry.
inline Eigen::MatrixXd dense_laplacian(const GridSpec& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  auto id = [&](int j, int i) {
    j = std::clamp(j, 0, g.ny - 1);
    i = std::clamp(i, 0, g.nx - 1);
    return static_cast<Eigen::Index>(j * g.nx + i);
  };
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      const auto r = id(j, i);
      L(r, id(j, i + 1)) += 1.0 / (g.dx * g.dx);
      L(r, id(j, i - 1)) += 1.0 / (g.dx * g.dx);
      L(r, id(j, i)) -= 2.0 / (g.dx * g.dx);
      L(r, id(j + 1, i)) += 1.0 / (g.dy * g.dy);
      L(r, id(j - 1, i)) += 1.0 / (g.dy * g.dy);
      L(r, id(j, i)) -= 2.0 / (g.dy * g.dy);
    }
  return L;
}

/// Interior-unknown Helmholtz system (laplacian - 1/L^2) with Dirichlet data from `boundary`.
/// Returns the matrix and the right-hand-side correction moved over from boundary cells.
struct InteriorSystem {
  Eigen::MatrixXd A;
  Eigen::VectorXd boundary_term;
};

inline InteriorSystem dense_helmholtz_interior(const GridSpec& g, double L_R, const Field2D& boundary) {
  const int mx = g.nx - 2, my = g.ny - 2;
  const auto n = static_cast<Eigen::Index>(mx * my);
  InteriorSystem s{Eigen::MatrixXd::Zero(n, n), Eigen::VectorXd::Zero(n)};
  auto unknown = [&](int j, int i) { return static_cast<Eigen::Index>((j - 1) * mx + (i - 1)); };
  const double ax = 1.0 / (g.dx * g.dx), ay = 1.0 / (g.dy * g.dy);
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) {
      const auto r = unknown(j, i);
      s.A(r, r) = -2.0 * ax - 2.0 * ay - 1.0 / (L_R * L_R);
      const int nb[4][2] = {{j, i - 1}, {j, i + 1}, {j - 1, i}, {j + 1, i}};
      const double w[4] = {ax, ax, ay, ay};
      for (int q = 0; q < 4; ++q) {
        const int jj = nb[q][0], ii = nb[q][1];
        if (g.is_boundary(jj, ii))
          s.boundary_term[r] += w[q] * boundary(jj, ii);
        else
          s.A(r, unknown(jj, ii)) += w[q];
      }
    }
  return s;
}

/// Solves the interior Helmholtz problem densely; boundary ring copied from `boundary`.
inline Field2D dense_helmholtz_solve(const GridSpec& g, double L_R, const Field2D& rhs, const Field2D& boundary) {
  const InteriorSystem s = dense_helmholtz_interior(g, L_R, boundary);
  const int mx = g.nx - 2;
  Eigen::VectorXd b(s.A.rows());
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) b[(j - 1) * mx + (i - 1)] = rhs(j, i);
  const Eigen::VectorXd x = s.A.fullPivLu().solve(b - s.boundary_term);
  Field2D out = boundary;
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) out(j, i) = x[(j - 1) * mx + (i - 1)];
  return out;
}

}  // namespace qgtest
