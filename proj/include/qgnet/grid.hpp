#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "qgnet/error.hpp"

namespace qgnet {

/// Uniform grid geometry. Index (j, i) addresses row j (y) and column i (x).
struct GridSpec {
  int nx = 0;
  int ny = 0;
  double dx = 1.0;  // m
  double dy = 1.0;  // m

  static constexpr int kMinPoints = 8;

  std::size_t size() const { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
  std::size_t index(int j, int i) const {
    return static_cast<std::size_t>(j) * static_cast<std::size_t>(nx) + static_cast<std::size_t>(i);
  }
  bool is_boundary(int j, int i) const { return j == 0 || i == 0 || j == ny - 1 || i == nx - 1; }
  std::size_t interior_size() const {
    return static_cast<std::size_t>(nx - 2) * static_cast<std::size_t>(ny - 2);
  }

  /// Throws ConfigError when nx/ny < 8 or spacings are not positive.
  void validate() const;

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct BoundaryPolicy {
  enum class Kind { ReplicateEdge, FixedValue };
  Kind kind = Kind::ReplicateEdge;
  double value = 0.0;

  static BoundaryPolicy replicate() { return {}; }
  static BoundaryPolicy fixed(double c) { return {Kind::FixedValue, c}; }
};

/// Scalar field on a uniform grid, row-major with y as the leading dimension.
class Field2D {
 public:
  Field2D() = default;
  explicit Field2D(const GridSpec& grid, double fill = 0.0);
  Field2D(const GridSpec& grid, std::vector<double> values);

  template <class Fn>
  static Field2D from_function(const GridSpec& grid, Fn&& fn) {
    Field2D f(grid);
    for (int j = 0; j < grid.ny; ++j)
      for (int i = 0; i < grid.nx; ++i) f(j, i) = fn(j, i);
    return f;
  }

  const GridSpec& grid() const { return grid_; }
  int nx() const { return grid_.nx; }
  int ny() const { return grid_.ny; }
  std::size_t size() const { return values_.size(); }

  double& operator()(int j, int i) { return values_[grid_.index(j, i)]; }
  double operator()(int j, int i) const { return values_[grid_.index(j, i)]; }
  double& operator[](std::size_t k) { return values_[k]; }
  double operator[](std::size_t k) const { return values_[k]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  bool all_finite() const;
  double max_abs() const;

 private:
  GridSpec grid_;
  std::vector<double> values_;
};

Field2D operator+(const Field2D& a, const Field2D& b);
Field2D operator-(const Field2D& a, const Field2D& b);
Field2D operator*(const Field2D& a, const Field2D& b);
Field2D operator*(double s, const Field2D& a);

void require_same_grid(const Field2D& a, const Field2D& b, const char* where);

/// Weighted sums over the cells where both fields live; interior excludes the outer ring.
double dot(const Field2D& a, const Field2D& b);
double interior_dot(const Field2D& a, const Field2D& b);
double rmse(const Field2D& a, const Field2D& b);
double l2_norm(const Field2D& a);

/// Rectangular cross-correlation kernel. The anchor is the kernel cell that lands on the
/// output point; odd kernels default to the centre cell.
///
///   out(j, i) = sum_{a,b} w(a, b) * f(j + a - anchor_row, i + b - anchor_col) / normalization
struct KernelLayout {
  int kh = 1;
  int kw = 1;
  int anchor_row = 0;
  int anchor_col = 0;

  KernelLayout transposed() const { return {kw, kh, anchor_col, anchor_row}; }
  std::size_t size() const { return static_cast<std::size_t>(kh) * static_cast<std::size_t>(kw); }
};

class StencilKernel {
 public:
  StencilKernel(int kh, int kw, std::vector<double> weights, double normalization = 1.0);
  StencilKernel(const KernelLayout& layout, std::vector<double> weights, double normalization = 1.0);

  const KernelLayout& layout() const { return layout_; }
  std::span<const double> weights() const { return weights_; }
  double normalization() const { return normalization_; }
  double weight(int a, int b) const { return weights_[static_cast<std::size_t>(a * layout_.kw + b)]; }

  StencilKernel transposed() const;

 private:
  KernelLayout layout_;
  std::vector<double> weights_;
  double normalization_ = 1.0;
};

/// Visits every (output cell, kernel tap) pair. `in` is the source cell index after the
/// boundary policy is applied, or -1 when the tap falls outside a fixed-value boundary.
template <class Fn>
void for_each_tap(const GridSpec& g, const KernelLayout& k, const BoundaryPolicy& bc, Fn&& fn) {
  const bool clamp = bc.kind == BoundaryPolicy::Kind::ReplicateEdge;
  for (int j = 0; j < g.ny; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const std::size_t out = g.index(j, i);
      for (int a = 0; a < k.kh; ++a) {
        int jj = j + a - k.anchor_row;
        const bool yout = jj < 0 || jj >= g.ny;
        if (clamp) jj = jj < 0 ? 0 : (jj >= g.ny ? g.ny - 1 : jj);
        for (int b = 0; b < k.kw; ++b) {
          int ii = i + b - k.anchor_col;
          const bool xout = ii < 0 || ii >= g.nx;
          if (clamp) ii = ii < 0 ? 0 : (ii >= g.nx ? g.nx - 1 : ii);
          const std::size_t tap = static_cast<std::size_t>(a * k.kw + b);
          if (!clamp && (xout || yout))
            fn(out, tap, std::ptrdiff_t{-1});
          else
            fn(out, tap, static_cast<std::ptrdiff_t>(g.index(jj, ii)));
        }
      }
    }
  }
}

void check_kernel_fits(const GridSpec& g, const KernelLayout& k);

Field2D convolve(const Field2D& f, const StencilKernel& k,
                 const BoundaryPolicy& bc = BoundaryPolicy::replicate());
void convolve_values(std::span<const double> f, const GridSpec& g, const StencilKernel& k,
                     const BoundaryPolicy& bc, std::span<double> out);
/// Transpose of convolve() in f; fixed boundary values drop out.
void convolve_adjoint(std::span<const double> out_adj, const GridSpec& g, const StencilKernel& k,
                      const BoundaryPolicy& bc, std::span<double> in_adj);

/// Five-point Laplacian, 1/dx^2 and 1/dy^2 weighted.
StencilKernel laplacian_kernel(const GridSpec& g);
/// Centered first differences (-1/2, 0, 1/2) scaled by 1/dx, resp. 1/dy.
StencilKernel grad_x_kernel(const GridSpec& g);
StencilKernel grad_y_kernel(const GridSpec& g);

Field2D laplacian(const Field2D& f, const BoundaryPolicy& bc = BoundaryPolicy::replicate());
Field2D grad_x(const Field2D& f, const BoundaryPolicy& bc = BoundaryPolicy::replicate());
Field2D grad_y(const Field2D& f, const BoundaryPolicy& bc = BoundaryPolicy::replicate());

}  // namespace qgnet
