#pragma once

#include <array>
#include <span>

#include "qgnet/grid.hpp"

namespace qgnet {

enum class Axis { X, Y };

/// One cell's upwind stencil: derivative = sum(weight * phi[index]) / denom.
struct UpwindStencil {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
  int count = 0;
  double denom = 1.0;
};

/// Third-order upwind-biased first derivative along `axis`, stencil picked by the sign of
/// the advecting velocity u at each cell:
///
///   u >= 0:  ( 2 phi[i+1] + 3 phi[i] - 6 phi[i-1] +   phi[i-2]) / (6 h)
///   u <  0:  (-2 phi[i-1] - 3 phi[i] + 6 phi[i+1] -   phi[i+2]) / (6 h)
///
/// Cells too close to the edge for the biased stencil use a first-order one-sided
/// difference (upwind when possible, otherwise the only side available).
UpwindStencil upwind_stencil(const GridSpec& g, double u, Axis axis, int j, int i);

void upwind_deriv_values(std::span<const double> phi, std::span<const double> u, const GridSpec& g, Axis axis,
                         std::span<double> out);
/// Transpose in phi with the branch selection frozen by u.
void upwind_deriv_adjoint(std::span<const double> out_adj, std::span<const double> u, const GridSpec& g,
                          Axis axis, std::span<double> phi_adj);

Field2D upwind_deriv_x(const Field2D& phi, const Field2D& u);
Field2D upwind_deriv_y(const Field2D& phi, const Field2D& v);

}  // namespace qgnet
