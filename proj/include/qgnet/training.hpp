#pragma once

// Loss assembly, optimizers, the filter and ConvNet training drivers, and evaluation
// against persistence.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qgnet/autodiff.hpp"
#include "qgnet/dynamics.hpp"
#include "qgnet/learnable.hpp"

namespace qgnet {

/// One (initial state, one-day target) pair.
struct Sample {
  std::string id;
  Field2D h0;
  Field2D target;
  double sigma = 1.0;  // standard deviation of the target
};

/// Population standard deviation of the target; throws DataError for a constant field.
double target_sigma(const Field2D& target);

struct LossConfig {
  double lambda_l2 = 1e-3;
  double divergence_weight = 1.0;
  bool scale_by_target_variance = true;

  void validate() const;
};

struct ForecastConfig {
  StepConfig step;
  CGConfig cg;
  /// Recompute-checkpoint interval for gradients; 1 keeps the whole trajectory on one tape.
  int checkpoint_every = 1;

  void validate() const;
};

/// mean(((target - pred) / sigma)^2)
ad::Var forecast_mse(const ad::Var& pred, const ad::Var& target, double sigma);
double forecast_mse(const Field2D& pred, const Field2D& target, double sigma);

/// Sum over interior cells of (grad_x(U) + grad_y(V))^2.
ad::Var divergence_penalty(const ad::Var& U, const ad::Var& V);
double divergence_penalty(const Field2D& U, const Field2D& V);

struct LossBreakdown {
  double total = 0.0;
  double mse = 0.0;         // mean over samples
  double divergence = 0.0;  // mean over samples
  double l2 = 0.0;          // sum of squared trainable parameters
};

/// Mean forecast MSE + divergence_weight * mean step-0 divergence + lambda_l2 * sum(theta^2),
/// recorded on `t` (whose ParamStore must be the model's).
ad::Var total_loss(ad::Tape& t, const VelocityModel& m, std::span<const Sample> batch, const ForecastConfig& fc,
                   const LossConfig& lc, ad::NormMode mode = ad::NormMode::Infer, StatsLog* observed = nullptr,
                   LossBreakdown* parts = nullptr);

struct BatchGradient {
  LossBreakdown loss;
  std::vector<double> grad;  // flat, aligned with the model's ParamStore
  StatsLog stats;            // batch-norm statistics in sample order (Train mode)
};

/// Loss and gradient over a batch: one tape per sample on `threads` workers, gradients
/// reduced in sample order (bit-identical for any thread count).
BatchGradient batch_gradient(const VelocityModel& m, std::span<const Sample> batch, const ForecastConfig& fc,
                             const LossConfig& lc, int threads, ad::NormMode mode = ad::NormMode::Infer);

/// Loss only, forward-only integration.
LossBreakdown batch_loss(const VelocityModel& m, std::span<const Sample> batch, const ForecastConfig& fc,
                         const LossConfig& lc, int threads);

// ---- optimizers -------------------------------------------------------------------------

enum class Algorithm { LBFGS, Adam, GradientDescent };
Algorithm parse_algorithm(const std::string& s);
const char* to_string(Algorithm a);

struct OptimizerConfig {
  Algorithm algorithm = Algorithm::LBFGS;
  double learning_rate = 1e-3;
  double decay_factor = 0.1;
  int decay_period = 100;  // epochs
  int max_epochs = 500;
  int batch_size = 4;
  std::uint64_t seed = 0;
  int lbfgs_history = 10;
  double grad_tol = 1e-8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  /// Learning rate in effect during `epoch` (0-based).
  double lr_at(int epoch) const;
};

/// First-order update rules on a flat parameter vector.
class FirstOrderOptimizer {
 public:
  explicit FirstOrderOptimizer(const OptimizerConfig& cfg) : cfg_(cfg) {}
  void step(std::vector<double>& params, std::span<const double> grad, double lr);

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

using Objective = std::function<double(std::span<const double> x, std::vector<double>& grad)>;

struct LbfgsResult {
  std::vector<double> x;
  double f = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string stop_reason;
};

/// Limited-memory BFGS with Armijo backtracking. The objective may throw NumericError
/// (treated as an infinite loss inside the line search). `on_iter` sees every accepted
/// iterate: (iteration, f, grad).
LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const OptimizerConfig& cfg,
                           const std::function<void(int, double, std::span<const double>)>& on_iter = {});

// ---- drivers ------------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct TrainReport {
  std::string variant;
  std::vector<EpochRecord> epochs;
  std::vector<double> final_params;
  std::string stop_reason;
  double wall_seconds = 0.0;  // not serialized
};

/// One line per epoch, %.17g numbers, no timing information.
std::string serialize(const TrainReport& r);

/// Experiment 1: full-batch L-BFGS (or a first-order method) on the 6 filter entries.
TrainReport train_filter(VelocityModel& m, std::span<const Sample> data, const ForecastConfig& fc,
                         const LossConfig& lc, const OptimizerConfig& oc, int threads = 1);

/// Experiment 2: mini-batch Adam with step decay on the ConvNet and its gate.
TrainReport train_convnet(VelocityModel& m, std::span<const Sample> data, const ForecastConfig& fc,
                          const LossConfig& lc, const OptimizerConfig& oc, int threads = 1);

// ---- evaluation -----------------------------------------------------------------------------

struct RmseRow {
  std::string sample_id;
  std::string model;
  double rmse = 0.0;
};

struct NamedModel {
  std::string name;
  const VelocityModel* model = nullptr;  // nullptr means persistence
};

/// Per-sample one-day forecast RMSE for every model, rows ordered by sample then model.
std::vector<RmseRow> evaluate(std::span<const NamedModel> models, std::span<const Sample> data,
                              const ForecastConfig& fc, int threads = 1);

double median_rmse(std::span<const RmseRow> rows, const std::string& model);
std::string rmse_csv(std::span<const RmseRow> rows);

/// Runs fn(k) for k in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace qgnet
