#pragma once

// Trainable velocity models: the 6-entry gradient filter and the gated residual ConvNet,
// behind one VelocityModel type.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "qgnet/autodiff.hpp"
#include "qgnet/dynamics.hpp"
#include "qgnet/params.hpp"

namespace qgnet {

enum class VelocityVariant { FixedQG, TrainableFilter, Hybrid };

const char* to_string(VelocityVariant v);
VelocityVariant parse_variant(const std::string& s);

/// Parameter names used in the ParamStore.
namespace pname {
inline const std::string filter = "filter";
inline const std::string conv1 = "net.conv1";
inline const std::string bn1_gamma = "net.bn1.gamma";
inline const std::string bn1_beta = "net.bn1.beta";
inline const std::string conv2 = "net.conv2";
inline const std::string bn2_gamma = "net.bn2.gamma";
inline const std::string bn2_beta = "net.bn2.beta";
inline const std::string out = "net.out";
inline const std::string gate = "net.gate";
}  // namespace pname

/// Non-trainable ConvNet state: batch-norm running statistics and input standardization.
struct ConvNetState {
  static constexpr int kHidden = 16;
  static constexpr double kSlope = 0.01;
  static constexpr double kEps = 1e-5;

  std::vector<double> bn1_mean = std::vector<double>(kHidden, 0.0);
  std::vector<double> bn1_var = std::vector<double>(kHidden, 1.0);
  std::vector<double> bn2_mean = std::vector<double>(kHidden, 0.0);
  std::vector<double> bn2_var = std::vector<double>(kHidden, 1.0);
  double input_mean = 0.0;
  double input_std = 1.0;
  double momentum = 0.1;

  /// Folds training-mode statistics (two layers per forward, in order) into the running ones.
  void update_running(const std::vector<ad::BatchStats>& observed);
};

/// Batch-norm statistics produced by one or more training-mode forwards, in call order.
using StatsLog = std::vector<ad::BatchStats>;

/// conv3x3(16) -> BN -> leaky -> conv3x3(16) -> BN -> leaky -> conv1x1(2) -> * gate
/// on the standardized SSH. Returns (dU, dV).
std::pair<ad::Var, ad::Var> convnet_forward(const ad::Var& h, ad::Tape& t, const ConvNetState& state,
                                            ad::NormMode mode, StatsLog* observed = nullptr);

class VelocityModel {
 public:
  static VelocityModel fixed_qg(const PhysicalParams& p);
  static VelocityModel trainable_filter(const PhysicalParams& p, std::vector<double> filter);
  /// Filter entries uniform in [-amplitude, amplitude].
  static VelocityModel random_filter(const PhysicalParams& p, std::uint64_t seed, double amplitude = 0.05);
  /// Fixed QG velocities plus a fresh ConvNet with gate exactly 0.
  static VelocityModel hybrid(const PhysicalParams& p, std::uint64_t seed);

  VelocityVariant variant() const { return variant_; }
  const PhysicalParams& physics() const { return physics_; }
  void set_physics(const PhysicalParams& p) { physics_ = p; }

  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  ConvNetState& net_state() { return net_; }
  const ConvNetState& net_state() const { return net_; }

  /// Number of trainable scalars.
  std::size_t parameter_count() const { return params_.total_size(); }

  /// Velocity function whose trainable tensors are the tape's params (weight sharing
  /// across every call on that tape). In Train mode the ConvNet uses per-call statistics
  /// and appends them to `observed`.
  VelocityFn bind(ad::Tape& t, ad::NormMode mode = ad::NormMode::Infer, StatsLog* observed = nullptr) const;
  /// Inference binder for forward-only integration.
  VelocityBinder binder() const;

  std::pair<Field2D, Field2D> velocities(const Field2D& h) const;

 private:
  VelocityModel(VelocityVariant v, const PhysicalParams& p) : variant_(v), physics_(p) {}

  VelocityVariant variant_;
  PhysicalParams physics_;
  ad::ParamStore params_;
  ConvNetState net_;
};

/// Versioned binary component file holding every tensor of the model.
void export_component(const VelocityModel& m, const std::filesystem::path& path);
VelocityModel import_component(const std::filesystem::path& path, const PhysicalParams& p);

}  // namespace qgnet
