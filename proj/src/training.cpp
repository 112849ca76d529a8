#include "qgnet/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

namespace qgnet {

using ad::Tape;
using ad::Var;

double target_sigma(const Field2D& target) {
  const double n = static_cast<double>(target.size());
  double m = 0.0;
  for (double v : target.values()) m += v;
  m /= n;
  double ss = 0.0;
  for (double v : target.values()) ss += (v - m) * (v - m);
  const double s = std::sqrt(ss / n);
  if (!(s > 0.0)) throw DataError("constant target field (sigma = 0)");
  return s;
}

void LossConfig::validate() const {
  if (!(lambda_l2 >= 0.0) || !(divergence_weight >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

void ForecastConfig::validate() const {
  step.validate();
  cg.validate();
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
}

Var forecast_mse(const Var& pred, const Var& target, double sigma) {
  if (!(sigma > 0.0)) throw DataError("forecast_mse: sigma must be positive");
  const double n = static_cast<double>(pred.value().size());
  return ad::affine(ad::sum_squares(target - pred), 1.0 / (sigma * sigma * n), 0.0);
}

double forecast_mse(const Field2D& pred, const Field2D& target, double sigma) {
  Tape t;
  return forecast_mse(t.constant(pred), t.constant(target), sigma).scalar();
}

Var divergence_penalty(const Var& U, const Var& V) {
  return ad::sum_squares(ad::mask_interior(ad::grad_x(U) + ad::grad_y(V)));
}

double divergence_penalty(const Field2D& U, const Field2D& V) {
  Tape t;
  return divergence_penalty(t.constant(U), t.constant(V)).scalar();
}

// ---- per-sample terms --------------------------------------------------------------------

namespace {

double sigma_for(const Sample& s, const LossConfig& lc) { return lc.scale_by_target_variance ? s.sigma : 1.0; }

/// Velocity function that returns precomputed step-0 velocities for the initial field.
VelocityFn with_initial(const VelocityFn& vel, const Var& h0, std::pair<Var, Var> first) {
  return [vel, id = h0.id(), first](const Var& h) { return h.id() == id ? first : vel(h); };
}

struct SampleTerms {
  Var mse;
  Var div;
};

SampleTerms sample_terms(Tape& t, const VelocityModel& m, const Sample& s, const ForecastConfig& fc,
                         const LossConfig& lc, ad::NormMode mode, StatsLog* observed) {
  const VelocityFn vel = m.bind(t, mode, observed);
  const Var h0 = t.constant(s.h0);
  const auto first = vel(h0);
  const Var div = divergence_penalty(first.first, first.second);
  const IntegrationState end = integrate(IntegrationState{h0, std::nullopt, 0}, fc.step.n_steps,
                                         with_initial(vel, h0, first), fc.step, m.physics(), fc.cg);
  return {forecast_mse(end.h, t.constant(s.target), sigma_for(s, lc)), div};
}

struct SampleResult {
  double mse = 0.0;
  double div = 0.0;
  std::vector<double> grad;  // d(mse + w div)/d(theta)
  StatsLog stats;
};

SampleResult sample_gradient_full(const VelocityModel& m, const Sample& s, const ForecastConfig& fc,
                                  const LossConfig& lc, ad::NormMode mode) {
  SampleResult r;
  Tape t(&m.params());
  const SampleTerms terms = sample_terms(t, m, s, fc, lc, mode, &r.stats);
  r.mse = terms.mse.scalar();
  r.div = terms.div.scalar();
  const Var loss = lc.divergence_weight != 0.0 ? terms.mse + lc.divergence_weight * terms.div : terms.mse;
  r.grad = t.backward(loss).flatten();
  return r;
}

/// Same gradient with the trajectory split into segments of `checkpoint_every` steps that are
/// re-recorded one at a time during the reverse sweep.
SampleResult sample_gradient_checkpointed(const VelocityModel& m, const Sample& s, const ForecastConfig& fc,
                                          const LossConfig& lc, ad::NormMode mode) {
  const int N = fc.step.n_steps;
  const int k = fc.checkpoint_every;
  struct Checkpoint {
    Field2D h;
    std::optional<Field2D> prev;
  };
  std::vector<Checkpoint> cps;
  {
    Field2D h = s.h0;
    std::optional<Field2D> prev;
    for (int step = 0; step < N; ++step) {
      if (step % k == 0) cps.push_back({h, prev});
      Tape t(&m.params());
      IntegrationState st{t.constant(h), std::nullopt, step};
      if (prev) st.h_prev = t.constant(*prev);
      const IntegrationState next = qg_step(st, m.bind(t, mode, nullptr), fc.step, m.physics(), fc.cg);
      prev = std::move(h);
      h = next.h.field();
    }
    if (N == 0) cps.push_back({h, prev});
  }

  SampleResult r;
  r.grad.assign(m.params().total_size(), 0.0);
  std::vector<double> adj_h, adj_prev;
  for (std::size_t seg = cps.size(); seg-- > 0;) {
    const int a = static_cast<int>(seg) * k;
    const int b = std::min(N, a + k);
    Tape t(&m.params());
    const Var h = a == 0 ? t.constant(cps[seg].h) : t.variable(cps[seg].h);
    std::optional<Var> hp;
    if (cps[seg].prev) hp = t.variable(*cps[seg].prev);
    VelocityFn vel = m.bind(t, mode, &r.stats);
    std::vector<std::pair<Var, std::vector<double>>> seeds;
    if (a == 0) {
      const auto first = vel(h);
      const Var div = divergence_penalty(first.first, first.second);
      r.div = div.scalar();
      if (lc.divergence_weight != 0.0) seeds.push_back({div, {lc.divergence_weight}});
      vel = with_initial(vel, h, first);
    }
    const IntegrationState end = integrate(IntegrationState{h, hp, a}, b - a, vel, fc.step, m.physics(), fc.cg);
    if (b == N) {
      const Var mse = forecast_mse(end.h, t.constant(s.target), sigma_for(s, lc));
      r.mse = mse.scalar();
      seeds.push_back({mse, {1.0}});
    } else {
      seeds.push_back({end.h, adj_h});
      if (end.h_prev && !adj_prev.empty()) seeds.push_back({*end.h_prev, adj_prev});
    }
    const auto g = t.backward(seeds).flatten();
    for (std::size_t q = 0; q < g.size(); ++q) r.grad[q] += g[q];
    if (a > 0) {
      adj_h = t.adjoint_of(h);
      adj_prev = hp ? t.adjoint_of(*hp) : std::vector<double>{};
    }
  }
  return r;
}

SampleResult sample_gradient(const VelocityModel& m, const Sample& s, const ForecastConfig& fc, const LossConfig& lc,
                             ad::NormMode mode) {
  if (fc.checkpoint_every > 1 && fc.step.n_steps > fc.checkpoint_every)
    return sample_gradient_checkpointed(m, s, fc, lc, mode);
  return sample_gradient_full(m, s, fc, lc, mode);
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

Var total_loss(Tape& t, const VelocityModel& m, std::span<const Sample> batch, const ForecastConfig& fc,
               const LossConfig& lc, ad::NormMode mode, StatsLog* observed, LossBreakdown* parts) {
  if (batch.empty()) throw DataError("empty batch");
  if (t.params() != &m.params()) throw UsageError("total_loss: tape is not bound to the model's parameters");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Var mse_sum, div_sum;
  for (const Sample& s : batch) {
    const SampleTerms terms = sample_terms(t, m, s, fc, lc, mode, observed);
    mse_sum = mse_sum.valid() ? mse_sum + terms.mse : terms.mse;
    div_sum = div_sum.valid() ? div_sum + terms.div : terms.div;
  }
  Var total = inv_n * mse_sum;
  if (lc.divergence_weight != 0.0) total = total + (lc.divergence_weight * inv_n) * div_sum;
  Var l2;
  for (const auto& p : m.params().tensors()) {
    const Var sq = ad::sum_squares(t.param(p.name));
    l2 = l2.valid() ? l2 + sq : sq;
  }
  if (l2.valid() && lc.lambda_l2 != 0.0) total = total + lc.lambda_l2 * l2;
  if (parts) {
    parts->mse = mse_sum.scalar() * inv_n;
    parts->divergence = div_sum.scalar() * inv_n;
    parts->l2 = l2.valid() ? l2.scalar() : 0.0;
    parts->total = total.scalar();
  }
  return total;
}

BatchGradient batch_gradient(const VelocityModel& m, std::span<const Sample> batch, const ForecastConfig& fc,
                             const LossConfig& lc, int threads, ad::NormMode mode) {
  if (batch.empty()) throw DataError("empty batch");
  std::vector<SampleResult> res(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) { res[i] = sample_gradient(m, batch[i], fc, lc, mode); });

  BatchGradient out;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  out.grad.assign(m.params().total_size(), 0.0);
  double mse = 0.0, div = 0.0;
  for (auto& r : res) {
    mse += r.mse;
    div += r.div;
    for (std::size_t q = 0; q < out.grad.size(); ++q) out.grad[q] += r.grad[q];
    out.stats.insert(out.stats.end(), r.stats.begin(), r.stats.end());
  }
  const std::vector<double> theta = m.params().flatten();
  for (std::size_t q = 0; q < out.grad.size(); ++q) out.grad[q] = out.grad[q] * inv_n + 2.0 * lc.lambda_l2 * theta[q];
  out.loss.mse = mse * inv_n;
  out.loss.divergence = div * inv_n;
  out.loss.l2 = m.params().sum_squares();
  out.loss.total = out.loss.mse + lc.divergence_weight * out.loss.divergence + lc.lambda_l2 * out.loss.l2;
  return out;
}

LossBreakdown batch_loss(const VelocityModel& m, std::span<const Sample> batch, const ForecastConfig& fc,
                         const LossConfig& lc, int threads) {
  if (batch.empty()) throw DataError("empty batch");
  std::vector<std::pair<double, double>> res(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    const Sample& s = batch[i];
    const auto [U0, V0] = m.velocities(s.h0);
    const Field2D pred = integrate_day(s.h0, m.binder(), fc.step, m.physics(), fc.cg);
    res[i] = {forecast_mse(pred, s.target, sigma_for(s, lc)), divergence_penalty(U0, V0)};
  });
  LossBreakdown out;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& [a, b] : res) {
    out.mse += a;
    out.divergence += b;
  }
  out.mse *= inv_n;
  out.divergence *= inv_n;
  out.l2 = m.params().sum_squares();
  out.total = out.mse + lc.divergence_weight * out.divergence + lc.lambda_l2 * out.l2;
  return out;
}

// ---- optimizers -------------------------------------------------------------------------

Algorithm parse_algorithm(const std::string& s) {
  if (s == "lbfgs") return Algorithm::LBFGS;
  if (s == "adam") return Algorithm::Adam;
  if (s == "gd") return Algorithm::GradientDescent;
  throw ConfigError("unknown optimizer '" + s + "' (expected lbfgs, adam or gd)");
}

const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::LBFGS: return "lbfgs";
    case Algorithm::Adam: return "adam";
    case Algorithm::GradientDescent: return "gd";
  }
  return "?";
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("decay factor must lie in (0, 1]");
  if (decay_period < 1) throw ConfigError("decay period must be at least 1");
  if (max_epochs < 0) throw ConfigError("max epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (lbfgs_history < 1) throw ConfigError("lbfgs history must be at least 1");
  if (!(grad_tol >= 0.0)) throw ConfigError("gradient tolerance must be non-negative");
}

double OptimizerConfig::lr_at(int epoch) const {
  return learning_rate * std::pow(decay_factor, static_cast<double>(epoch / decay_period));
}

void FirstOrderOptimizer::step(std::vector<double>& x, std::span<const double> g, double lr) {
  if (g.size() != x.size()) throw DimensionError("optimizer: gradient length differs from parameters");
  if (cfg_.algorithm == Algorithm::GradientDescent) {
    for (std::size_t k = 0; k < x.size(); ++k) x[k] -= lr * g[k];
    return;
  }
  if (m_.empty()) {
    m_.assign(x.size(), 0.0);
    v_.assign(x.size(), 0.0);
  }
  ++t_;
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < x.size(); ++k) {
    m_[k] = b1 * m_[k] + (1.0 - b1) * g[k];
    v_[k] = b2 * v_[k] + (1.0 - b2) * g[k] * g[k];
    x[k] -= lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.adam_eps);
  }
}

LbfgsResult lbfgs_minimize(const Objective& fn, std::vector<double> x, const OptimizerConfig& cfg,
                           const std::function<void(int, double, std::span<const double>)>& on_iter) {
  const std::size_t n = x.size();
  auto dotp = [](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
  };
  std::vector<double> g(n);
  double f = fn(x, g);
  if (!std::isfinite(f)) throw NumericError("lbfgs: non-finite loss at the initial point");
  if (on_iter) on_iter(0, f, g);

  std::vector<std::vector<double>> S, Y;
  std::vector<double> rho;
  LbfgsResult res;
  for (int it = 1; it <= cfg.max_epochs; ++it) {
    if (norm2(g) < cfg.grad_tol) {
      res.converged = true;
      res.stop_reason = "gradient norm below tolerance";
      break;
    }
    // Two-loop recursion.
    std::vector<double> d(g);
    std::vector<double> alpha(S.size());
    for (std::size_t k = S.size(); k-- > 0;) {
      alpha[k] = rho[k] * dotp(S[k], d);
      for (std::size_t q = 0; q < n; ++q) d[q] -= alpha[k] * Y[k][q];
    }
    double gamma = 1.0;
    if (!S.empty()) gamma = dotp(S.back(), Y.back()) / dotp(Y.back(), Y.back());
    for (double& v : d) v *= gamma;
    for (std::size_t k = 0; k < S.size(); ++k) {
      const double beta = rho[k] * dotp(Y[k], d);
      for (std::size_t q = 0; q < n; ++q) d[q] += S[k][q] * (alpha[k] - beta);
    }
    for (double& v : d) v = -v;
    double gd = dotp(g, d);
    if (!(gd < 0.0)) {
      S.clear();
      Y.clear();
      rho.clear();
      for (std::size_t q = 0; q < n; ++q) d[q] = -g[q];
      gd = dotp(g, d);
    }
    double t = 1.0;
    if (S.empty()) t = std::min(1.0, cfg.learning_rate / std::max(norm2(g), 1e-300));

    std::vector<double> xn(n), gn(n);
    double fn_val = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (std::size_t q = 0; q < n; ++q) xn[q] = x[q] + t * d[q];
      try {
        fn_val = fn(xn, gn);
      } catch (const NumericError&) {
        fn_val = std::numeric_limits<double>::infinity();
      }
      if (std::isfinite(fn_val) && fn_val <= f + 1e-4 * t * gd) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      res.stop_reason = "line search found no decrease";
      break;
    }
    std::vector<double> s(n), y(n);
    for (std::size_t q = 0; q < n; ++q) {
      s[q] = xn[q] - x[q];
      y[q] = gn[q] - g[q];
    }
    const double sy = dotp(s, y);
    if (sy > 1e-12 * norm2(s) * norm2(y)) {
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > cfg.lbfgs_history) {
        S.erase(S.begin());
        Y.erase(Y.begin());
        rho.erase(rho.begin());
      }
    }
    const double f_old = f;
    x = xn;
    g = gn;
    f = fn_val;
    res.iterations = it;
    if (on_iter) on_iter(it, f, g);
    if (f == f_old) {
      res.stop_reason = "no further decrease";
      break;
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "iteration limit";
  res.x = std::move(x);
  res.f = f;
  return res;
}

// ---- drivers ------------------------------------------------------------------------------

std::string serialize(const TrainReport& r) {
  std::ostringstream os;
  char buf[512];
  os << "# variant " << r.variant << "\n";
  os << "# epoch total mse divergence l2 grad_norm lr\n";
  for (const auto& e : r.epochs) {
    std::snprintf(buf, sizeof buf, "epoch=%d total=%.17g mse=%.17g divergence=%.17g l2=%.17g grad_norm=%.17g lr=%.17g\n",
                  e.epoch, e.loss.total, e.loss.mse, e.loss.divergence, e.loss.l2, e.grad_norm, e.lr);
    os << buf;
  }
  os << "stop_reason=" << r.stop_reason << "\n";
  os << "final_params=";
  for (std::size_t k = 0; k < r.final_params.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%s%.17g", k ? "," : "", r.final_params[k]);
    os << buf;
  }
  os << "\n";
  return os.str();
}

namespace {

void check_finite_loss(const LossBreakdown& l, int epoch) {
  if (!std::isfinite(l.total))
    throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + " (mse " + std::to_string(l.mse) +
                       ", divergence " + std::to_string(l.divergence) + ")");
}

}  // namespace

TrainReport train_filter(VelocityModel& m, std::span<const Sample> data, const ForecastConfig& fc, const LossConfig& lc,
                         const OptimizerConfig& oc, int threads) {
  if (m.variant() != VelocityVariant::TrainableFilter) throw UsageError("train_filter needs a trainable-filter model");
  if (data.empty()) throw DataError("no training samples");
  fc.validate();
  lc.validate();
  oc.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport rep;
  rep.variant = to_string(m.variant());

  if (oc.algorithm == Algorithm::LBFGS) {
    // The accepted iterate is always the most recent evaluation.
    LossBreakdown last;
    const Objective obj = [&](std::span<const double> x, std::vector<double>& grad) {
      m.params().assign(x);
      BatchGradient bg = batch_gradient(m, data, fc, lc, threads);
      grad = bg.grad;
      last = bg.loss;
      return bg.loss.total;
    };
    const LbfgsResult res = lbfgs_minimize(obj, m.params().flatten(), oc, [&](int it, double, std::span<const double> g) {
      rep.epochs.push_back({it, last, norm2(g), 0.0});
    });
    m.params().assign(res.x);
    rep.stop_reason = res.stop_reason;
  } else {
    FirstOrderOptimizer opt(oc);
    std::vector<double> x = m.params().flatten();
    for (int epoch = 0; epoch <= oc.max_epochs; ++epoch) {
      BatchGradient bg = batch_gradient(m, data, fc, lc, threads);
      check_finite_loss(bg.loss, epoch);
      rep.epochs.push_back({epoch, bg.loss, norm2(bg.grad), oc.lr_at(epoch)});
      if (norm2(bg.grad) < oc.grad_tol) {
        rep.stop_reason = "gradient norm below tolerance";
        break;
      }
      if (epoch == oc.max_epochs) break;
      opt.step(x, bg.grad, oc.lr_at(epoch));
      m.params().assign(x);
    }
    if (rep.stop_reason.empty()) rep.stop_reason = "iteration limit";
  }
  rep.final_params = m.params().flatten();
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

TrainReport train_convnet(VelocityModel& m, std::span<const Sample> data, const ForecastConfig& fc,
                          const LossConfig& lc, const OptimizerConfig& oc, int threads) {
  if (m.variant() != VelocityVariant::Hybrid) throw UsageError("train_convnet needs a hybrid model");
  if (data.empty()) throw DataError("no training samples");
  fc.validate();
  lc.validate();
  oc.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport rep;
  rep.variant = to_string(m.variant());
  {
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (const Sample& s : data)
      for (double v : s.h0.values()) {
        sum += v;
        sq += v * v;
        n += 1.0;
      }
    const double mean = sum / n;
    const double sd = std::sqrt(std::max(sq / n - mean * mean, 0.0));
    m.net_state().input_mean = mean;
    m.net_state().input_std = sd > 0.0 ? sd : 1.0;
  }
  FirstOrderOptimizer opt(oc);
  std::mt19937_64 rng(oc.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> x = m.params().flatten();

  for (int epoch = 0; epoch < oc.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = oc.lr_at(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(oc.batch_size)) {
      std::vector<Sample> batch;
      for (std::size_t k = b0; k < std::min(order.size(), b0 + static_cast<std::size_t>(oc.batch_size)); ++k)
        batch.push_back(data[order[k]]);
      BatchGradient bg = batch_gradient(m, batch, fc, lc, threads, ad::NormMode::Train);
      check_finite_loss(bg.loss, epoch);
      rec.loss.total += bg.loss.total;
      rec.loss.mse += bg.loss.mse;
      rec.loss.divergence += bg.loss.divergence;
      rec.loss.l2 += bg.loss.l2;
      rec.grad_norm += norm2(bg.grad);
      ++batches;
      opt.step(x, bg.grad, lr);
      m.params().assign(x);
      m.net_state().update_running(bg.stats);
    }
    const double inv = 1.0 / static_cast<double>(batches);
    rec.loss.total *= inv;
    rec.loss.mse *= inv;
    rec.loss.divergence *= inv;
    rec.loss.l2 *= inv;
    rec.grad_norm *= inv;
    rep.epochs.push_back(rec);
  }
  rep.stop_reason = "epoch limit";
  rep.final_params = m.params().flatten();
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---- evaluation -----------------------------------------------------------------------------

std::vector<RmseRow> evaluate(std::span<const NamedModel> models, std::span<const Sample> data, const ForecastConfig& fc,
                              int threads) {
  std::vector<std::vector<RmseRow>> per(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const Sample& s = data[i];
    for (const NamedModel& nm : models) {
      const Field2D pred =
          nm.model ? integrate_day(s.h0, nm.model->binder(), fc.step, nm.model->physics(), fc.cg) : s.h0;
      per[i].push_back({s.id, nm.name, rmse(pred, s.target)});
    }
  });
  std::vector<RmseRow> rows;
  for (auto& p : per) rows.insert(rows.end(), p.begin(), p.end());
  return rows;
}

double median_rmse(std::span<const RmseRow> rows, const std::string& model) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.model == model) v.push_back(r.rmse);
  if (v.empty()) throw UsageError("no rows for model '" + model + "'");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string rmse_csv(std::span<const RmseRow> rows) {
  std::ostringstream os;
  os << "sample_id,model,rmse\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.rmse);
    os << r.sample_id << ',' << r.model << ',' << buf << '\n';
  }
  return os.str();
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace qgnet
