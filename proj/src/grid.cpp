#include "qgnet/grid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qgnet {

void GridSpec::validate() const {
  if (nx < kMinPoints || ny < kMinPoints) {
    std::ostringstream os;
    os << "grid " << nx << "x" << ny << " is smaller than the " << kMinPoints << "x" << kMinPoints
       << " minimum";
    throw ConfigError(os.str());
  }
  if (!(dx > 0.0) || !(dy > 0.0) || !std::isfinite(dx) || !std::isfinite(dy))
    throw ConfigError("grid spacing must be positive and finite");
}

Field2D::Field2D(const GridSpec& grid, double fill) : grid_(grid), values_(grid.size(), fill) {}

Field2D::Field2D(const GridSpec& grid, std::vector<double> values)
    : grid_(grid), values_(std::move(values)) {
  if (values_.size() != grid_.size()) throw DimensionError("field payload does not match grid shape");
}

bool Field2D::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Field2D::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

void require_same_grid(const Field2D& a, const Field2D& b, const char* where) {
  if (!(a.grid() == b.grid())) throw DimensionError(std::string(where) + ": fields live on different grids");
}

namespace {
template <class Op>
Field2D zip(const Field2D& a, const Field2D& b, const char* where, Op op) {
  require_same_grid(a, b, where);
  Field2D out(a.grid());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = op(a[k], b[k]);
  return out;
}
}  // namespace

Field2D operator+(const Field2D& a, const Field2D& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Field2D operator-(const Field2D& a, const Field2D& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Field2D operator*(const Field2D& a, const Field2D& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}
Field2D operator*(double s, const Field2D& a) {
  Field2D out(a.grid());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = s * a[k];
  return out;
}

double dot(const Field2D& a, const Field2D& b) {
  require_same_grid(a, b, "dot");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double interior_dot(const Field2D& a, const Field2D& b) {
  require_same_grid(a, b, "interior_dot");
  const GridSpec& g = a.grid();
  double s = 0.0;
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) s += a(j, i) * b(j, i);
  return s;
}

double rmse(const Field2D& a, const Field2D& b) {
  require_same_grid(a, b, "rmse");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

double l2_norm(const Field2D& a) { return std::sqrt(dot(a, a)); }

StencilKernel::StencilKernel(int kh, int kw, std::vector<double> weights, double normalization)
    : StencilKernel(KernelLayout{kh, kw, kh / 2, kw / 2}, std::move(weights), normalization) {
  if (kh % 2 == 0 || kw % 2 == 0)
    throw UsageError("even-sized kernels need an explicit anchor");
}

StencilKernel::StencilKernel(const KernelLayout& layout, std::vector<double> weights, double normalization)
    : layout_(layout), weights_(std::move(weights)), normalization_(normalization) {
  if (layout_.kh < 1 || layout_.kw < 1) throw UsageError("kernel dimensions must be positive");
  if (layout_.anchor_row < 0 || layout_.anchor_row >= layout_.kh || layout_.anchor_col < 0 ||
      layout_.anchor_col >= layout_.kw)
    throw UsageError("kernel anchor outside the kernel");
  if (weights_.size() != layout_.size()) throw DimensionError("kernel weight count does not match shape");
  if (normalization_ == 0.0 || !std::isfinite(normalization_))
    throw UsageError("kernel normalization must be finite and non-zero");
}

StencilKernel StencilKernel::transposed() const {
  const KernelLayout t = layout_.transposed();
  std::vector<double> w(weights_.size());
  for (int a = 0; a < layout_.kh; ++a)
    for (int b = 0; b < layout_.kw; ++b) w[static_cast<std::size_t>(b * t.kw + a)] = weight(a, b);
  return StencilKernel(t, std::move(w), normalization_);
}

void check_kernel_fits(const GridSpec& g, const KernelLayout& k) {
  if (k.kh > g.ny || k.kw > g.nx) {
    std::ostringstream os;
    os << "kernel " << k.kh << "x" << k.kw << " larger than grid " << g.ny << "x" << g.nx;
    throw DimensionError(os.str());
  }
}

void convolve_values(std::span<const double> f, const GridSpec& g, const StencilKernel& k,
                     const BoundaryPolicy& bc, std::span<double> out) {
  check_kernel_fits(g, k.layout());
  const auto w = k.weights();
  const double inv = 1.0 / k.normalization();
  std::fill(out.begin(), out.end(), 0.0);
  for_each_tap(g, k.layout(), bc, [&](std::size_t o, std::size_t t, std::ptrdiff_t in) {
    if (w[t] == 0.0) return;
    out[o] += w[t] * (in < 0 ? bc.value : f[static_cast<std::size_t>(in)]);
  });
  for (double& v : out) v *= inv;
}

Field2D convolve(const Field2D& f, const StencilKernel& k, const BoundaryPolicy& bc) {
  Field2D out(f.grid());
  convolve_values(f.values(), f.grid(), k, bc, out.values());
  return out;
}

void convolve_adjoint(std::span<const double> out_adj, const GridSpec& g, const StencilKernel& k,
                      const BoundaryPolicy& bc, std::span<double> in_adj) {
  const auto w = k.weights();
  const double inv = 1.0 / k.normalization();
  for_each_tap(g, k.layout(), bc, [&](std::size_t o, std::size_t t, std::ptrdiff_t in) {
    if (in < 0 || w[t] == 0.0) return;
    in_adj[static_cast<std::size_t>(in)] += w[t] * inv * out_adj[o];
  });
}

StencilKernel laplacian_kernel(const GridSpec& g) {
  const double ax = 1.0 / (g.dx * g.dx);
  const double ay = 1.0 / (g.dy * g.dy);
  return StencilKernel(3, 3, {0.0, ay, 0.0, ax, -2.0 * ax - 2.0 * ay, ax, 0.0, ay, 0.0});
}

StencilKernel grad_x_kernel(const GridSpec& g) { return StencilKernel(1, 3, {-0.5, 0.0, 0.5}, g.dx); }
StencilKernel grad_y_kernel(const GridSpec& g) { return StencilKernel(3, 1, {-0.5, 0.0, 0.5}, g.dy); }

Field2D laplacian(const Field2D& f, const BoundaryPolicy& bc) { return convolve(f, laplacian_kernel(f.grid()), bc); }
Field2D grad_x(const Field2D& f, const BoundaryPolicy& bc) { return convolve(f, grad_x_kernel(f.grid()), bc); }
Field2D grad_y(const Field2D& f, const BoundaryPolicy& bc) { return convolve(f, grad_y_kernel(f.grid()), bc); }

}  // namespace qgnet
