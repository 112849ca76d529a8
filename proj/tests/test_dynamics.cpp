#include <cmath>
#include <numbers>

#include "doctest.h"
#include "qgnet/dynamics.hpp"
#include "test_support.hpp"

using namespace qgnet;
using namespace qgtest;
using ad::Tape;
using ad::Var;

namespace {

PhysicalParams f_plane() {
  PhysicalParams p = PhysicalParams::at_latitude(35.0);
  p.beta = 0.0;
  return p;
}

GridSpec ocean_grid(int nx, int ny, double d = 5000.0) { return GridSpec{nx, ny, d, d}; }

double interior_mean(const Field2D& f) {
  const GridSpec& g = f.grid();
  double s = 0.0;
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) s += f(j, i);
  return s / static_cast<double>(g.interior_size());
}

}  // namespace

TEST_CASE("pv of zero and constant ssh") {
  const GridSpec g = ocean_grid(8, 8);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  CHECK(pv_from_ssh(Field2D(g), p).max_abs() == 0.0);
  const double c = 0.7;
  const Field2D q = pv_from_ssh(Field2D(g, c), p);
  const double ref = -p.g_over_f() * c / (p.L_R * p.L_R);
  for (int j = 1; j < 7; ++j)
    for (int i = 1; i < 7; ++i) CHECK(q(j, i) == doctest::Approx(ref).epsilon(1e-14));
}

TEST_CASE("pv matches the assembled dense operator") {
  const GridSpec g = ocean_grid(8, 8);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h = random_field(g, 1);
  const auto n = static_cast<Eigen::Index>(g.size());
  const Eigen::MatrixXd M =
      p.g_over_f() * (dense_laplacian(g) - Eigen::MatrixXd::Identity(n, n) / (p.L_R * p.L_R));
  const Eigen::VectorXd ref = M * to_vec(h);
  const Field2D q = pv_from_ssh(h, p);
  for (std::size_t k = 0; k < h.size(); ++k)
    CHECK(q[k] == doctest::Approx(ref[static_cast<Eigen::Index>(k)]).epsilon(1e-12));
}

TEST_CASE("geostrophic velocities of constant and ramp fields") {
  const GridSpec g = ocean_grid(9, 8);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  {
    const auto [U, V] = geostrophic_velocities(Field2D(g, 1.2), p);
    CHECK(U.max_abs() == 0.0);
    CHECK(V.max_abs() == 0.0);
  }
  const double a = 2e-6;
  const Field2D ramp = Field2D::from_function(g, [&](int, int i) { return a * i * g.dx; });
  const auto [U, V] = geostrophic_velocities(ramp, p);
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) {
      CHECK(V(j, i) == doctest::Approx(p.g_over_f() * a).epsilon(1e-12));
      CHECK(std::abs(U(j, i)) < 1e-12 * std::abs(V(j, i)));
    }
  const Field2D yramp = Field2D::from_function(g, [&](int j, int) { return a * j * g.dy; });
  const auto [Uy, Vy] = geostrophic_velocities(yramp, p);
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) {
      CHECK(Uy(j, i) == doctest::Approx(-p.g_over_f() * a).epsilon(1e-12));
      CHECK(std::abs(Vy(j, i)) < 1e-12 * std::abs(Uy(j, i)));
    }
}

TEST_CASE("geostrophic velocities on a 5x5 field match hand correlation") {
  const GridSpec g = GridSpec{5, 5, 2.0, 3.0};
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h = random_field(g, 2);
  const auto [U, V] = geostrophic_velocities(h, p);
  const int j = 2, i = 2;
  const double fx = 0.25 * (h(j, i + 1) - h(j, i - 1)) + 0.25 * (h(j + 1, i + 1) - h(j + 1, i - 1));
  const double fy = 0.25 * (h(j + 1, i) - h(j - 1, i)) + 0.25 * (h(j + 1, i + 1) - h(j - 1, i + 1));
  CHECK(V(j, i) == doctest::Approx(p.g_over_f() * fx / g.dx).epsilon(1e-13));
  CHECK(U(j, i) == doctest::Approx(-p.g_over_f() * fy / g.dy).epsilon(1e-13));
}

TEST_CASE("filter velocities with the fixed filter are bit-identical to the geostrophic path") {
  const GridSpec g = ocean_grid(10, 9);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h = eddy_field(g, 3);
  Tape t;
  const Var hv = t.constant(h);
  const auto [U1, V1] = filter_velocities(hv, t.variable_flat(qg_gradient_filter()), p);
  const auto [U2, V2] = geostrophic_velocities(h, p);
  CHECK(max_abs_diff(U1.field(), U2) == 0.0);
  CHECK(max_abs_diff(V1.field(), V2) == 0.0);
}

TEST_CASE("upwind derivative is exact for linear fields, either sign") {
  const GridSpec g = grid(10, 8, 0.5, 0.25);
  const Field2D lin = Field2D::from_function(g, [&](int j, int i) { return 3.0 * i * g.dx - 2.0 * j * g.dy; });
  for (double s : {1.0, -1.0}) {
    const Field2D u(g, s);
    const Field2D dx = upwind_deriv_x(lin, u), dy = upwind_deriv_y(lin, u);
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        CHECK(dx(j, i) == doctest::Approx(3.0).epsilon(1e-12));
        CHECK(dy(j, i) == doctest::Approx(-2.0).epsilon(1e-12));
      }
  }
}

TEST_CASE("upwind derivative is exact for quadratics in the interior") {
  const GridSpec g = grid(12, 10, 0.5, 0.5);
  const Field2D sq = Field2D::from_function(g, [&](int, int i) { return (i * g.dx) * (i * g.dx); });
  const Field2D cx = grad_x(sq);
  for (double s : {0.7, -0.7}) {
    const Field2D d = upwind_deriv_x(sq, Field2D(g, s));
    for (int j = 0; j < g.ny; ++j)
      for (int i = 2; i < g.nx - 2; ++i) {
        CHECK(d(j, i) == doctest::Approx(2.0 * i * g.dx).epsilon(1e-12));
        CHECK(d(j, i) == doctest::Approx(cx(j, i)).epsilon(1e-12));
      }
  }
  // Cubics separate the two schemes.
  const Field2D cube = Field2D::from_function(g, [&](int, int i) { return std::pow(i * g.dx, 3); });
  const Field2D d = upwind_deriv_x(cube, Field2D(g, 1.0));
  CHECK(std::abs(d(4, 5) - grad_x(cube)(4, 5)) > 1e-3);
}

TEST_CASE("upwind stencil reads only upstream cells") {
  const GridSpec g = grid(9, 9);
  Field2D spike(g);
  spike(4, 6) = 1.0;
  // For u > 0 the stencil at i reaches i+1 at most; the spike at 6 is invisible at i <= 4.
  const Field2D d = upwind_deriv_x(spike, Field2D(g, 1.0));
  CHECK(d(4, 4) == 0.0);
  CHECK(d(4, 5) != 0.0);
  const Field2D dm = upwind_deriv_x(spike, Field2D(g, -1.0));
  CHECK(dm(4, 8) == 0.0);
  CHECK(dm(4, 5) != 0.0);
}

TEST_CASE("upwind derivative converges at third order") {
  const double L = 1.0;
  std::vector<double> errs, hs;
  for (int n : {32, 64, 128}) {
    const GridSpec g{n, 8, L / n, 1.0};
    const Field2D phi = Field2D::from_function(g, [&](int, int i) { return std::sin(2 * std::numbers::pi * i * g.dx / L); });
    const Field2D d = upwind_deriv_x(phi, Field2D(g, 1.0));
    double e = 0.0;
    for (int j = 0; j < g.ny; ++j)
      for (int i = 2; i < n - 2; ++i)
        e = std::max(e, std::abs(d(j, i) - 2 * std::numbers::pi / L * std::cos(2 * std::numbers::pi * i * g.dx / L)));
    errs.push_back(e);
    hs.push_back(g.dx);
  }
  const double s1 = std::log(errs[0] / errs[1]) / std::log(hs[0] / hs[1]);
  const double s2 = std::log(errs[1] / errs[2]) / std::log(hs[1] / hs[2]);
  CHECK(s1 >= 2.7);
  CHECK(s2 >= 2.7);
}

TEST_CASE("advection without transport or with constant pv is the identity") {
  const GridSpec g = ocean_grid(10, 10);
  const PhysicalParams p = f_plane();
  ModelState s = ModelState::from_ssh(eddy_field(g, 4), p);
  const StepConfig cfg;
  const ModelState same = advection_step(s, Field2D(g), Field2D(g), cfg, p);
  CHECK(max_abs_diff(same.q, s.q) == 0.0);
  CHECK(same.t == cfg.dt);

  s.q = Field2D(g, 2.5e-5);
  const ModelState c = advection_step(s, Field2D(g, 0.3), Field2D(g, -0.2), cfg, p);
  CHECK(max_abs_diff(c.q, s.q) <= 1e-12 * 2.5e-5);
}

TEST_CASE("a step above the courant limit is rejected with its courant number") {
  const GridSpec g = ocean_grid(10, 10);
  const PhysicalParams p = f_plane();
  const ModelState s = ModelState::from_ssh(eddy_field(g, 4), p);
  const StepConfig cfg{600.0, 1, 0.5};
  try {
    advection_step(s, Field2D(g, 5.0), Field2D(g), cfg, p);
    FAIL("expected CflError");
  } catch (const CflError& e) {
    CHECK(e.courant == doctest::Approx(0.6));
    CHECK(e.limit == 0.5);
  }
}

TEST_CASE("courant number") {
  const GridSpec g = ocean_grid(8, 8);
  CHECK(cfl_check(Field2D(g), Field2D(g), 600.0) == 0.0);
  Field2D U(g), V(g);
  U(3, 3) = -1.0;
  U(4, 4) = 0.5;
  V(2, 5) = 0.25;
  CHECK(cfl_check(U, Field2D(g), 600.0) == doctest::Approx(0.12));
  CHECK(cfl_check(U, V, 600.0) == doctest::Approx(0.12 + 0.03));
  CHECK(cfl_check(U, V, 1200.0) == doctest::Approx(2 * cfl_check(U, V, 600.0)));
}

TEST_CASE("gaussian blob in uniform flow: centroid, peak decay, mean drift") {
  const GridSpec g = grid(96, 40, 1000.0, 1000.0);
  const PhysicalParams p = f_plane();
  // One cell every 40 steps; the peak is sampled at whole-cell shifts so grid sampling
  // does not mask the amplitude trend.
  const int steps_per_cell = 40;
  const double dt = 600.0, u0 = g.dx / (steps_per_cell * dt);
  const double cx0 = 25.0, cy0 = 19.5, sig = 3.0;
  ModelState s;
  s.h = Field2D(g);
  s.q = Field2D::from_function(g, [&](int j, int i) {
    return std::exp(-((i - cx0) * (i - cx0) + (j - cy0) * (j - cy0)) / (2 * sig * sig));
  });
  const Field2D U(g, u0), V(g);
  const StepConfig cfg{dt, 144, 0.5};
  const double m0 = interior_mean(s.q);
  double peak = s.q.max_abs();
  bool monotone = true;
  for (int k = 1; k <= cfg.n_steps; ++k) {
    s = advection_step(s, U, V, cfg, p);
    if (k % steps_per_cell != 0) continue;
    const double pk = s.q.max_abs();
    monotone = monotone && pk < peak;
    peak = pk;
  }
  double mass = 0.0, mx = 0.0;
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      mass += s.q(j, i);
      mx += s.q(j, i) * i;
    }
  const double shift = u0 * dt * cfg.n_steps / g.dx;
  CHECK(std::abs(mx / mass - (cx0 + shift)) < 0.5);
  CHECK(monotone);
  CHECK(std::abs(interior_mean(s.q) - m0) < 1e-3 * std::abs(m0));
}

TEST_CASE("integrate_day: zero steps returns the input bit-exactly") {
  const GridSpec g = ocean_grid(12, 10);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h0 = eddy_field(g, 5);
  StepConfig cfg;
  cfg.n_steps = 0;
  const Field2D out = integrate_day(h0, fixed_qg_binder(p), cfg, p, CGConfig{});
  CHECK(max_abs_diff(out, h0) == 0.0);
}

TEST_CASE("integrate_day with zero velocities keeps h") {
  const GridSpec g = ocean_grid(16, 12);
  const PhysicalParams p = f_plane();
  const Field2D h0 = eddy_field(g, 6);
  const VelocityBinder zero = [](Tape&) -> VelocityFn {
    return [](const Var& h) { return std::pair{0.0 * h, 0.0 * h}; };
  };
  StepConfig cfg;
  cfg.n_steps = 20;
  const Field2D out = integrate_day(h0, zero, cfg, p, CGConfig{});
  CHECK(rel_l2(out, h0) < 1e-8);
}

TEST_CASE("every accepted step reports a courant number within the limit") {
  const GridSpec g = ocean_grid(24, 20, 10000.0);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h0 = eddy_field(g, 7, 4, 0.3, 3.0);
  StepConfig cfg;
  cfg.n_steps = 12;
  std::vector<StepDiagnostics> seen;
  const StepObserver obs = [&](const StepDiagnostics& d) { seen.push_back(d); };
  integrate_day(h0, fixed_qg_binder(p), cfg, p, CGConfig{}, &obs);
  REQUIRE(seen.size() == 12);
  for (std::size_t k = 0; k < seen.size(); ++k) {
    CHECK(seen[k].step == static_cast<long>(k + 1));
    CHECK(seen[k].courant > 0.0);
    CHECK(seen[k].courant <= cfg.cfl_max);
  }
}

TEST_CASE("a forecast that violates the courant limit fails with its step index") {
  const GridSpec g = ocean_grid(16, 12, 2000.0);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h0 = eddy_field(g, 8, 4, 1.5, 3.0);
  StepConfig cfg;
  cfg.n_steps = 3;
  try {
    integrate_day(h0, fixed_qg_binder(p), cfg, p, CGConfig{});
    FAIL("expected CflError");
  } catch (const CflError& e) {
    CHECK(e.step == 1);
    CHECK(e.courant > cfg.cfl_max);
  }
}

TEST_CASE("the fixed model beats persistence against a converged-solver reference") {
  const GridSpec g = ocean_grid(32, 24, 10000.0);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h0 = eddy_field(g, 9, 5, 0.3, 4.0);
  StepConfig cfg;
  cfg.n_steps = 144;
  const Field2D truth = integrate_day(h0, fixed_qg_binder(p), cfg, p, CGConfig{200, 1e-12, false});
  const Field2D fc = integrate_day(h0, fixed_qg_binder(p), cfg, p, CGConfig{});
  CHECK(rmse(fc, truth) < rmse(h0, truth));
}

TEST_CASE("gradients through shared blocks sum the per-block contributions") {
  const GridSpec g = ocean_grid(12, 10, 10000.0);
  const PhysicalParams p = PhysicalParams::at_latitude(35.0);
  const Field2D h0 = eddy_field(g, 10, 3, 0.3, 2.5);
  const Field2D w = random_field(g, 11);
  const StepConfig cfg{600.0, 2, 0.5};
  const CGConfig cg{4, 1e-12, false};
  std::vector<double> F = qg_gradient_filter();
  F[0] -= 0.01;
  F[4] += 0.02;

  ad::ParamStore shared;
  shared.add("F", {2, 3}, F);
  {
    Tape t(&shared);
    const Var filt = t.param("F");
    const VelocityFn vel = [&](const Var& h) { return filter_velocities(h, filt, p); };
    const IntegrationState out = integrate(IntegrationState{t.constant(h0), std::nullopt, 0}, 2, vel, cfg, p, cg);
    t.backward(ad::dot(out.h, t.constant(w)), shared);
  }
  ad::ParamStore split;
  split.add("F1", {2, 3}, F);
  split.add("F2", {2, 3}, F);
  {
    Tape t(&split);
    const Var f1 = t.param("F1"), f2 = t.param("F2");
    const VelocityFn v1 = [&](const Var& h) { return filter_velocities(h, f1, p); };
    const VelocityFn v2 = [&](const Var& h) { return filter_velocities(h, f2, p); };
    IntegrationState s{t.constant(h0), std::nullopt, 0};
    s = qg_step(s, v1, cfg, p, cg);
    s = qg_step(s, v2, cfg, p, cg);
    t.backward(ad::dot(s.h, t.constant(w)), split);
  }
  const auto& gs = shared.at("F").grad;
  const auto& g1 = split.at("F1").grad;
  const auto& g2 = split.at("F2").grad;
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(g1[k] != 0.0);
    CHECK(gs[k] == doctest::Approx(g1[k] + g2[k]).epsilon(1e-12));
  }
}
