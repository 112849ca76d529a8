#include "qgnet/upwind.hpp"

namespace qgnet {

UpwindStencil upwind_stencil(const GridSpec& g, double u, Axis axis, int j, int i) {
  const bool along_x = axis == Axis::X;
  const int n = along_x ? g.nx : g.ny;
  const int p = along_x ? i : j;
  const double h = along_x ? g.dx : g.dy;
  auto at = [&](int q) { return along_x ? g.index(j, q) : g.index(q, i); };

  UpwindStencil s;
  auto push = [&](int q, double w) {
    s.index[static_cast<std::size_t>(s.count)] = at(q);
    s.weight[static_cast<std::size_t>(s.count)] = w;
    ++s.count;
  };

  if (u >= 0.0) {
    if (p >= 2 && p <= n - 2) {
      push(p + 1, 2.0);
      push(p, 3.0);
      push(p - 1, -6.0);
      push(p - 2, 1.0);
      s.denom = 6.0 * h;
    } else if (p >= 1) {
      push(p, 1.0);
      push(p - 1, -1.0);
      s.denom = h;
    } else {
      push(p + 1, 1.0);
      push(p, -1.0);
      s.denom = h;
    }
  } else {
    if (p >= 1 && p <= n - 3) {
      push(p - 1, -2.0);
      push(p, -3.0);
      push(p + 1, 6.0);
      push(p + 2, -1.0);
      s.denom = 6.0 * h;
    } else if (p <= n - 2) {
      push(p + 1, 1.0);
      push(p, -1.0);
      s.denom = h;
    } else {
      push(p, 1.0);
      push(p - 1, -1.0);
      s.denom = h;
    }
  }
  return s;
}

void upwind_deriv_values(std::span<const double> phi, std::span<const double> u, const GridSpec& g, Axis axis,
                         std::span<double> out) {
  for (int j = 0; j < g.ny; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const std::size_t o = g.index(j, i);
      const UpwindStencil s = upwind_stencil(g, u[o], axis, j, i);
      double acc = 0.0;
      for (int t = 0; t < s.count; ++t) acc += s.weight[static_cast<std::size_t>(t)] * phi[s.index[static_cast<std::size_t>(t)]];
      out[o] = acc / s.denom;
    }
  }
}

void upwind_deriv_adjoint(std::span<const double> out_adj, std::span<const double> u, const GridSpec& g,
                          Axis axis, std::span<double> phi_adj) {
  for (int j = 0; j < g.ny; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const std::size_t o = g.index(j, i);
      const UpwindStencil s = upwind_stencil(g, u[o], axis, j, i);
      const double a = out_adj[o] / s.denom;
      for (int t = 0; t < s.count; ++t)
        phi_adj[s.index[static_cast<std::size_t>(t)]] += s.weight[static_cast<std::size_t>(t)] * a;
    }
  }
}

Field2D upwind_deriv_x(const Field2D& phi, const Field2D& u) {
  require_same_grid(phi, u, "upwind_deriv_x");
  Field2D out(phi.grid());
  upwind_deriv_values(phi.values(), u.values(), phi.grid(), Axis::X, out.values());
  return out;
}

Field2D upwind_deriv_y(const Field2D& phi, const Field2D& v) {
  require_same_grid(phi, v, "upwind_deriv_y");
  Field2D out(phi.grid());
  upwind_deriv_values(phi.values(), v.values(), phi.grid(), Axis::Y, out.values());
  return out;
}

}  // namespace qgnet
