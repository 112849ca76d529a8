#pragma once

// Reverse-mode differentiation over fields.
//
// A Tape owns every value produced while it is live. Operations run eagerly and register
// an adjoint rule; backward() walks the nodes once, newest first. Values that do not depend
// on any differentiable leaf carry no adjoint rule, so running the same code on a tape with
// only constants is a plain forward evaluation.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qgnet/grid.hpp"
#include "qgnet/upwind.hpp"

namespace qgnet::ad {

enum class Kind : std::uint8_t { Scalar, Field, Flat };

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::uint32_t id() const { return id_; }

  Kind kind() const;
  const GridSpec& grid() const;
  int channels() const;
  bool requires_grad() const;
  std::span<const double> value() const;

  double scalar() const;
  /// Copy of a single-channel field value.
  Field2D field() const;

 private:
  friend class Tape;
  Var(Tape* t, std::uint32_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;
};

/// Named trainable tensors with gradient accumulators, kept in insertion order.
class ParamStore {
 public:
  ParamTensor& add(const std::string& name, std::vector<std::size_t> shape, std::vector<double> values);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const;
  ParamTensor& at(const std::string& name) { return tensors_[index_of(name)]; }
  const ParamTensor& at(const std::string& name) const { return tensors_[index_of(name)]; }

  std::vector<ParamTensor>& tensors() { return tensors_; }
  const std::vector<ParamTensor>& tensors() const { return tensors_; }

  std::size_t total_size() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  std::vector<double> flat_grad() const;
  void zero_grad();
  double sum_squares() const;

 private:
  std::vector<ParamTensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Per-tensor gradients, aligned with a ParamStore's tensor order.
struct Gradients {
  std::vector<std::vector<double>> tensors;

  void add_to(ParamStore& store) const;
  void add(const Gradients& other);
  std::vector<double> flatten() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  explicit Tape(const ParamStore* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(const Field2D& f);
  Var constant(double v);
  Var constant_flat(std::vector<double> v);
  /// Multi-channel field, channel-major.
  Var constant_channels(const GridSpec& g, int channels, std::vector<double> v);
  /// Differentiable leaves; their adjoints are readable after backward().
  Var variable(const Field2D& f);
  Var variable(double v);
  Var variable_flat(std::vector<double> v);
  /// Leaf bound to a tensor of the tape's ParamStore; repeated calls return the same node.
  Var param(const std::string& name);
  const ParamStore* params() const { return params_; }

  /// Registers an eagerly computed value. Throws NumericError if it is not finite.
  Var record(const char* op, Kind kind, const GridSpec& grid, int channels, std::vector<double> value,
             std::initializer_list<Var> inputs, Backward backward);

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::uint32_t id) const { return nodes_[id].op; }

  /// Reverse sweep from a scalar loss; returns gradients of every bound parameter.
  /// A tape supports exactly one sweep; a second call throws UsageError.
  Gradients backward(const Var& loss);
  /// Reverse sweep seeded with explicit adjoints on any nodes.
  Gradients backward(const std::vector<std::pair<Var, std::vector<double>>>& seeds);
  /// Zeroes the store's accumulators, then fills them with d(loss)/d(param).
  void backward(const Var& loss, ParamStore& store);
  bool consumed() const { return consumed_; }

  /// Adjoint of a node after backward(); zeros when nothing flowed into it.
  std::vector<double> adjoint_of(const Var& v) const;

  // Used by adjoint rules during the sweep.
  std::span<const double> adjoint(std::uint32_t id) const { return adj_[id]; }
  /// Accumulator for an input's adjoint, or an empty span when the input needs none.
  std::span<double> grad_sink(const Var& input);

  void check_owner(const Var& v, const char* op) const;

 private:
  friend class Var;
  struct Node {
    const char* op = "";
    Kind kind = Kind::Scalar;
    GridSpec grid;
    int channels = 1;
    std::vector<double> value;
    bool requires_grad = false;
    int param_index = -1;
    Backward backward;
  };

  Var push(Node n);

  std::deque<Node> nodes_;
  std::vector<std::vector<double>> adj_;
  std::map<std::string, std::uint32_t> param_nodes_;
  const ParamStore* params_ = nullptr;
  bool consumed_ = false;
};

// ---- pointwise and reductions -------------------------------------------------------

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
/// Same-shape product, or scalar broadcast against a field / flat tensor.
Var operator*(const Var& a, const Var& b);
/// Scalar division only.
Var operator/(const Var& a, const Var& b);
Var operator*(double s, const Var& a);
/// a * x + b, elementwise.
Var affine(const Var& x, double a, double b);

Var sum(const Var& x);
Var mean(const Var& x);
Var dot(const Var& a, const Var& b);
Var sum_squares(const Var& x);

/// Interior cells from `inner`, outer ring from `outer`.
Var select_interior(const Var& inner, const Var& outer);
/// Zeroes the outer ring.
Var mask_interior(const Var& x);

// ---- stencils -----------------------------------------------------------------------

Var convolve(const Var& x, const StencilKernel& k, const BoundaryPolicy& bc = BoundaryPolicy::replicate());
/// Cross-correlation with differentiable weights (Flat, layout.size() entries).
Var correlate(const Var& x, const Var& weights, const KernelLayout& layout, double normalization,
              const BoundaryPolicy& bc = BoundaryPolicy::replicate());
/// out[k] = x[index[k]] for a Flat tensor.
Var gather(const Var& x, std::vector<std::size_t> index);
Var laplacian(const Var& x, const BoundaryPolicy& bc = BoundaryPolicy::replicate());
Var grad_x(const Var& x, const BoundaryPolicy& bc = BoundaryPolicy::replicate());
Var grad_y(const Var& x, const BoundaryPolicy& bc = BoundaryPolicy::replicate());
/// Upwind derivative of phi; the stencil choice is frozen at u's current value and no
/// adjoint flows into u.
Var upwind_deriv(const Var& phi, const Var& u, Axis axis);

// ---- network layers (multi-channel fields) -------------------------------------------

/// Multi-channel k x k convolution with replicate padding and no bias.
/// weights: Flat of out_channels * in_channels * k * k, row-major in that order.
Var conv2d(const Var& x, const Var& weights, int out_channels, int k);

enum class NormMode { Train, Infer };

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // unbiased
};

/// Per-channel normalization. Train mode normalizes by the input's own spatial statistics
/// and appends them to `observed` when given; Infer mode uses the supplied running stats.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, NormMode mode,
               std::span<const double> running_mean, std::span<const double> running_var, double eps,
               std::vector<BatchStats>* observed = nullptr);

Var leaky_relu(const Var& x, double slope);
/// Single channel of a multi-channel field.
Var channel(const Var& x, int c);

// ---- gradient checking ----------------------------------------------------------------

/// Builds a scalar loss on the given tape, reading parameters through Tape::param().
using LossProgram = std::function<Var(Tape&)>;

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

/// Compares tape gradients with central differences, step eps * max(1, |p|) per entry.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-10 * max|analytic|).
/// Passes iff every entry is below `threshold`.
GradCheckReport grad_check(const LossProgram& program, ParamStore& params, double eps = 1e-6,
                           double threshold = 1e-5);

}  // namespace qgnet::ad
