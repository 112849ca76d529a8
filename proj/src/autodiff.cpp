#include "qgnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace qgnet::ad {

// ---- Var ----------------------------------------------------------------------------

Tape& Var::tape() const {
  if (!tape_) throw UsageError("use of an unbound Var");
  return *tape_;
}
Kind Var::kind() const { return tape().nodes_[id_].kind; }
const GridSpec& Var::grid() const { return tape().nodes_[id_].grid; }
int Var::channels() const { return tape().nodes_[id_].channels; }
bool Var::requires_grad() const { return tape().nodes_[id_].requires_grad; }
std::span<const double> Var::value() const { return tape().nodes_[id_].value; }

double Var::scalar() const {
  if (kind() != Kind::Scalar) throw UsageError("Var is not a scalar");
  return value()[0];
}

Field2D Var::field() const {
  if (kind() != Kind::Field || channels() != 1) throw UsageError("Var is not a single-channel field");
  const auto v = value();
  return Field2D(grid(), std::vector<double>(v.begin(), v.end()));
}

// ---- ParamStore / Gradients ---------------------------------------------------------

ParamTensor& ParamStore::add(const std::string& name, std::vector<std::size_t> shape, std::vector<double> values) {
  if (contains(name)) throw UsageError("duplicate parameter '" + name + "'");
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  if (n != values.size()) throw DimensionError("parameter '" + name + "' shape does not match its values");
  index_[name] = tensors_.size();
  tensors_.push_back(ParamTensor{name, std::move(shape), std::move(values), std::vector<double>(n, 0.0)});
  return tensors_.back();
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto& t : tensors_) out.insert(out.end(), t.value.begin(), t.value.end());
  return out;
}

void ParamStore::assign(std::span<const double> flat) {
  if (flat.size() != total_size()) throw DimensionError("flat parameter vector has the wrong length");
  std::size_t k = 0;
  for (auto& t : tensors_)
    for (double& v : t.value) v = flat[k++];
}

std::vector<double> ParamStore::flat_grad() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto& t : tensors_) out.insert(out.end(), t.grad.begin(), t.grad.end());
  return out;
}

void ParamStore::zero_grad() {
  for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
}

double ParamStore::sum_squares() const {
  double s = 0.0;
  for (const auto& t : tensors_)
    for (double v : t.value) s += v * v;
  return s;
}

void Gradients::add_to(ParamStore& store) const {
  auto& ts = store.tensors();
  if (ts.size() != tensors.size()) throw DimensionError("gradient set does not match parameter store");
  for (std::size_t p = 0; p < ts.size(); ++p)
    for (std::size_t k = 0; k < ts[p].grad.size(); ++k) ts[p].grad[k] += tensors[p][k];
}

void Gradients::add(const Gradients& other) {
  if (tensors.empty()) {
    tensors = other.tensors;
    return;
  }
  if (other.tensors.size() != tensors.size()) throw DimensionError("gradient sets differ in layout");
  for (std::size_t p = 0; p < tensors.size(); ++p)
    for (std::size_t k = 0; k < tensors[p].size(); ++k) tensors[p][k] += other.tensors[p][k];
}

std::vector<double> Gradients::flatten() const {
  std::vector<double> out;
  for (const auto& t : tensors) out.insert(out.end(), t.begin(), t.end());
  return out;
}

// ---- Tape ---------------------------------------------------------------------------

Var Tape::push(Node n) {
  if (consumed_) throw UsageError("tape already differentiated; record a new one");
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(std::move(n));
  return Var(this, id);
}

Var Tape::constant(const Field2D& f) {
  return push(Node{"constant", Kind::Field, f.grid(), 1, f.storage(), false, -1, {}});
}
Var Tape::constant(double v) { return push(Node{"constant", Kind::Scalar, {}, 1, {v}, false, -1, {}}); }
Var Tape::constant_flat(std::vector<double> v) {
  return push(Node{"constant", Kind::Flat, {}, 1, std::move(v), false, -1, {}});
}
Var Tape::constant_channels(const GridSpec& g, int channels, std::vector<double> v) {
  if (channels < 1 || v.size() != static_cast<std::size_t>(channels) * g.size())
    throw DimensionError("constant_channels: value size does not match grid and channels");
  return push(Node{"constant", Kind::Field, g, channels, std::move(v), false, -1, {}});
}
Var Tape::variable(const Field2D& f) {
  return push(Node{"variable", Kind::Field, f.grid(), 1, f.storage(), true, -1, {}});
}
Var Tape::variable(double v) { return push(Node{"variable", Kind::Scalar, {}, 1, {v}, true, -1, {}}); }
Var Tape::variable_flat(std::vector<double> v) {
  return push(Node{"variable", Kind::Flat, {}, 1, std::move(v), true, -1, {}});
}

Var Tape::param(const std::string& name) {
  if (!params_) throw UsageError("tape has no parameter store bound");
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var(this, it->second);
  const std::size_t idx = params_->index_of(name);
  Var v = push(Node{"param", Kind::Flat, {}, 1, params_->tensors()[idx].value, true, static_cast<int>(idx), {}});
  param_nodes_[name] = v.id();
  return v;
}

void Tape::check_owner(const Var& v, const char* op) const {
  if (!v.valid() || &v.tape() != this) throw UsageError(std::string(op) + ": operand belongs to another tape");
}

Var Tape::record(const char* op, Kind kind, const GridSpec& grid, int channels, std::vector<double> value,
                 std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    check_owner(in, op);
    needs = needs || nodes_[in.id()].requires_grad;
  }
  for (double v : value) {
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite value produced by '" << op << "' at node " << nodes_.size();
      throw NumericError(os.str());
    }
  }
  return push(Node{op, kind, grid, channels, std::move(value), needs, -1, needs ? std::move(backward) : Backward{}});
}

std::span<double> Tape::grad_sink(const Var& input) {
  Node& n = nodes_[input.id()];
  if (!n.requires_grad) return {};
  auto& a = adj_[input.id()];
  if (a.empty()) a.assign(n.value.size(), 0.0);
  return a;
}

Gradients Tape::backward(const std::vector<std::pair<Var, std::vector<double>>>& seeds) {
  if (consumed_) throw UsageError("backward() already ran on this tape");
  consumed_ = true;
  adj_.assign(nodes_.size(), {});
  std::uint32_t top = 0;
  for (const auto& [v, seed] : seeds) {
    check_owner(v, "backward");
    if (seed.size() != nodes_[v.id()].value.size()) throw DimensionError("backward seed has the wrong size");
    auto& a = adj_[v.id()];
    if (a.empty()) a.assign(seed.size(), 0.0);
    for (std::size_t k = 0; k < seed.size(); ++k) a[k] += seed[k];
    top = std::max(top, v.id());
  }
  for (std::int64_t id = top; id >= 0; --id) {
    const auto u = static_cast<std::uint32_t>(id);
    Node& n = nodes_[u];
    if (adj_[u].empty() || !n.backward) continue;
    n.backward(*this, u);
    // Interior adjoints are no longer needed once propagated.
    std::vector<double>().swap(adj_[u]);
    n.backward = nullptr;
  }

  Gradients g;
  if (params_) {
    g.tensors.reserve(params_->tensors().size());
    for (const auto& t : params_->tensors()) g.tensors.emplace_back(t.value.size(), 0.0);
    for (const auto& [name, id] : param_nodes_) {
      const auto& a = adj_[id];
      if (a.empty()) continue;
      auto& dst = g.tensors[static_cast<std::size_t>(nodes_[id].param_index)];
      std::copy(a.begin(), a.end(), dst.begin());
    }
  }
  return g;
}

Gradients Tape::backward(const Var& loss) {
  check_owner(loss, "backward");
  if (loss.kind() != Kind::Scalar) throw UsageError("backward() needs a scalar loss");
  return backward(std::vector<std::pair<Var, std::vector<double>>>{{loss, {1.0}}});
}

void Tape::backward(const Var& loss, ParamStore& store) {
  if (&store != params_) throw UsageError("backward() into a store the tape is not bound to");
  Gradients g = backward(loss);
  store.zero_grad();
  g.add_to(store);
}

std::vector<double> Tape::adjoint_of(const Var& v) const {
  check_owner(v, "adjoint_of");
  if (v.id() < adj_.size() && !adj_[v.id()].empty()) return adj_[v.id()];
  return std::vector<double>(nodes_[v.id()].value.size(), 0.0);
}

// ---- primitives ---------------------------------------------------------------------

namespace {

bool same_shape(const Var& a, const Var& b) {
  if (a.kind() != b.kind() || a.value().size() != b.value().size()) return false;
  if (a.kind() == Kind::Field) return a.grid() == b.grid() && a.channels() == b.channels();
  return true;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!same_shape(a, b)) throw DimensionError(std::string(op) + ": operand shapes differ");
}

void require_field(const Var& x, const char* op, int channels = 1) {
  if (x.kind() != Kind::Field) throw DimensionError(std::string(op) + ": operand is not a field");
  if (channels > 0 && x.channels() != channels)
    throw DimensionError(std::string(op) + ": unexpected channel count");
}

Var record_like(const Var& like, const char* op, std::vector<double> v, std::initializer_list<Var> in,
                Tape::Backward bw) {
  return like.tape().record(op, like.kind(), like.grid(), like.channels(), std::move(v), in, std::move(bw));
}

Var record_scalar(Tape& t, const char* op, double v, std::initializer_list<Var> in, Tape::Backward bw) {
  return t.record(op, Kind::Scalar, {}, 1, {v}, in, std::move(bw));
}

void accumulate(std::span<double> sink, std::span<const double> g, double scale = 1.0) {
  for (std::size_t k = 0; k < sink.size(); ++k) sink[k] += scale * g[k];
}

}  // namespace

Var operator+(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  const auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] + bv[k];
  return record_like(a, "add", std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const auto g = t.adjoint(self);
    accumulate(t.grad_sink(a), g);
    accumulate(t.grad_sink(b), g);
  });
}

Var operator-(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  const auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] - bv[k];
  return record_like(a, "sub", std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const auto g = t.adjoint(self);
    accumulate(t.grad_sink(a), g);
    accumulate(t.grad_sink(b), g, -1.0);
  });
}

Var operator-(const Var& a) { return affine(a, -1.0, 0.0); }

Var operator*(const Var& a, const Var& b) {
  if (same_shape(a, b)) {
    const auto av = a.value(), bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[k] * bv[k];
    return record_like(a, "mul", std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
      const auto g = t.adjoint(self);
      const auto av = a.value(), bv = b.value();
      if (auto s = t.grad_sink(a); !s.empty())
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += g[k] * bv[k];
      if (auto s = t.grad_sink(b); !s.empty())
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += g[k] * av[k];
    });
  }
  // Scalar broadcast.
  const bool a_scalar = a.kind() == Kind::Scalar;
  if (!a_scalar && b.kind() != Kind::Scalar) throw DimensionError("mul: operand shapes differ");
  const Var& s = a_scalar ? a : b;
  const Var& x = a_scalar ? b : a;
  const double sv = s.scalar();
  const auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = sv * xv[k];
  return record_like(x, "scale", std::move(out), {s, x}, [s, x](Tape& t, std::uint32_t self) {
    const auto g = t.adjoint(self);
    const auto xv = x.value();
    if (auto sink = t.grad_sink(s); !sink.empty()) {
      double acc = 0.0;
      for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * xv[k];
      sink[0] += acc;
    }
    accumulate(t.grad_sink(x), g, s.scalar());
  });
}

Var operator/(const Var& a, const Var& b) {
  if (a.kind() != Kind::Scalar || b.kind() != Kind::Scalar) throw DimensionError("div: scalars only");
  const double bv = b.scalar();
  return record_scalar(a.tape(), "div", a.scalar() / bv, {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const double g = t.adjoint(self)[0];
    const double bv = b.scalar();
    if (auto s = t.grad_sink(a); !s.empty()) s[0] += g / bv;
    if (auto s = t.grad_sink(b); !s.empty()) s[0] -= g * a.scalar() / (bv * bv);
  });
}

Var operator*(double s, const Var& a) { return affine(a, s, 0.0); }

Var affine(const Var& x, double a, double b) {
  const auto xv = x.value();
  std::vector<double> out(xv.size());
  if (b == 0.0)
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = a * xv[k];
  else
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = a * xv[k] + b;
  return record_like(x, "affine", std::move(out), {x}, [x, a](Tape& t, std::uint32_t self) {
    accumulate(t.grad_sink(x), t.adjoint(self), a);
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value()) s += v;
  return record_scalar(x.tape(), "sum", s, {x}, [x](Tape& t, std::uint32_t self) {
    const double g = t.adjoint(self)[0];
    for (double& v : t.grad_sink(x)) v += g;
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value()) s += v;
  return record_scalar(x.tape(), "mean", s / n, {x}, [x, n](Tape& t, std::uint32_t self) {
    const double g = t.adjoint(self)[0] / n;
    for (double& v : t.grad_sink(x)) v += g;
  });
}

Var dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "dot");
  const auto av = a.value(), bv = b.value();
  double s = 0.0;
  for (std::size_t k = 0; k < av.size(); ++k) s += av[k] * bv[k];
  return record_scalar(a.tape(), "dot", s, {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const double g = t.adjoint(self)[0];
    const auto av = a.value(), bv = b.value();
    if (auto s = t.grad_sink(a); !s.empty())
      for (std::size_t k = 0; k < s.size(); ++k) s[k] += g * bv[k];
    if (auto s = t.grad_sink(b); !s.empty())
      for (std::size_t k = 0; k < s.size(); ++k) s[k] += g * av[k];
  });
}

Var sum_squares(const Var& x) {
  double s = 0.0;
  for (double v : x.value()) s += v * v;
  return record_scalar(x.tape(), "sum_squares", s, {x}, [x](Tape& t, std::uint32_t self) {
    const double g = t.adjoint(self)[0];
    const auto xv = x.value();
    auto sink = t.grad_sink(x);
    for (std::size_t k = 0; k < sink.size(); ++k) sink[k] += 2.0 * g * xv[k];
  });
}

Var select_interior(const Var& inner, const Var& outer) {
  require_field(inner, "select_interior");
  require_same_shape(inner, outer, "select_interior");
  const GridSpec g = inner.grid();
  const auto iv = inner.value(), ov = outer.value();
  std::vector<double> out(iv.size());
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      const std::size_t k = g.index(j, i);
      out[k] = g.is_boundary(j, i) ? ov[k] : iv[k];
    }
  return record_like(inner, "select_interior", std::move(out), {inner, outer},
                     [inner, outer, g](Tape& t, std::uint32_t self) {
                       const auto a = t.adjoint(self);
                       auto si = t.grad_sink(inner);
                       auto so = t.grad_sink(outer);
                       for (int j = 0; j < g.ny; ++j)
                         for (int i = 0; i < g.nx; ++i) {
                           const std::size_t k = g.index(j, i);
                           if (g.is_boundary(j, i)) {
                             if (!so.empty()) so[k] += a[k];
                           } else if (!si.empty()) {
                             si[k] += a[k];
                           }
                         }
                     });
}

Var mask_interior(const Var& x) {
  require_field(x, "mask_interior");
  const GridSpec g = x.grid();
  const auto xv = x.value();
  std::vector<double> out(xv.size(), 0.0);
  for (int j = 1; j < g.ny - 1; ++j)
    for (int i = 1; i < g.nx - 1; ++i) out[g.index(j, i)] = xv[g.index(j, i)];
  return record_like(x, "mask_interior", std::move(out), {x}, [x, g](Tape& t, std::uint32_t self) {
    const auto a = t.adjoint(self);
    auto s = t.grad_sink(x);
    for (int j = 1; j < g.ny - 1; ++j)
      for (int i = 1; i < g.nx - 1; ++i) s[g.index(j, i)] += a[g.index(j, i)];
  });
}

Var convolve(const Var& x, const StencilKernel& k, const BoundaryPolicy& bc) {
  require_field(x, "convolve");
  std::vector<double> out(x.value().size());
  convolve_values(x.value(), x.grid(), k, bc, out);
  return record_like(x, "convolve", std::move(out), {x}, [x, k, bc](Tape& t, std::uint32_t self) {
    auto s = t.grad_sink(x);
    if (!s.empty()) convolve_adjoint(t.adjoint(self), x.grid(), k, bc, s);
  });
}

Var correlate(const Var& x, const Var& weights, const KernelLayout& layout, double normalization,
              const BoundaryPolicy& bc) {
  require_field(x, "correlate");
  if (weights.kind() != Kind::Flat || weights.value().size() != layout.size())
    throw DimensionError("correlate: weight count does not match kernel layout");
  const GridSpec g = x.grid();
  check_kernel_fits(g, layout);
  const double inv = 1.0 / normalization;
  const auto xv = x.value();
  const auto wv = weights.value();
  std::vector<double> out(xv.size(), 0.0);
  for_each_tap(g, layout, bc, [&](std::size_t o, std::size_t t, std::ptrdiff_t in) {
    out[o] += wv[t] * (in < 0 ? bc.value : xv[static_cast<std::size_t>(in)]);
  });
  for (double& v : out) v *= inv;
  return record_like(x, "correlate", std::move(out), {x, weights},
                     [x, weights, layout, inv, bc, g](Tape& t, std::uint32_t self) {
                       const auto a = t.adjoint(self);
                       const auto xv = x.value();
                       const auto wv = weights.value();
                       auto sx = t.grad_sink(x);
                       auto sw = t.grad_sink(weights);
                       for_each_tap(g, layout, bc, [&](std::size_t o, std::size_t tap, std::ptrdiff_t in) {
                         const double ao = a[o] * inv;
                         if (!sw.empty()) sw[tap] += ao * (in < 0 ? bc.value : xv[static_cast<std::size_t>(in)]);
                         if (!sx.empty() && in >= 0) sx[static_cast<std::size_t>(in)] += ao * wv[tap];
                       });
                     });
}

Var gather(const Var& x, std::vector<std::size_t> index) {
  if (x.kind() != Kind::Flat) throw DimensionError("gather: operand is not a flat tensor");
  const auto xv = x.value();
  std::vector<double> out(index.size());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= xv.size()) throw DimensionError("gather: index out of range");
    out[k] = xv[index[k]];
  }
  return x.tape().record("gather", Kind::Flat, {}, 1, std::move(out), {x},
                         [x, index = std::move(index)](Tape& t, std::uint32_t self) {
                           const auto a = t.adjoint(self);
                           auto s = t.grad_sink(x);
                           for (std::size_t k = 0; k < index.size(); ++k) s[index[k]] += a[k];
                         });
}

Var laplacian(const Var& x, const BoundaryPolicy& bc) { return convolve(x, laplacian_kernel(x.grid()), bc); }
Var grad_x(const Var& x, const BoundaryPolicy& bc) { return convolve(x, grad_x_kernel(x.grid()), bc); }
Var grad_y(const Var& x, const BoundaryPolicy& bc) { return convolve(x, grad_y_kernel(x.grid()), bc); }

Var upwind_deriv(const Var& phi, const Var& u, Axis axis) {
  require_field(phi, "upwind_deriv");
  require_same_shape(phi, u, "upwind_deriv");
  std::vector<double> out(phi.value().size());
  upwind_deriv_values(phi.value(), u.value(), phi.grid(), axis, out);
  // u enters only through the (frozen) stencil choice, so it is not a differentiable input.
  return record_like(phi, axis == Axis::X ? "upwind_x" : "upwind_y", std::move(out), {phi},
                     [phi, u, axis](Tape& t, std::uint32_t self) {
                       auto s = t.grad_sink(phi);
                       if (!s.empty()) upwind_deriv_adjoint(t.adjoint(self), u.value(), phi.grid(), axis, s);
                     });
}

// ---- network layers -----------------------------------------------------------------

namespace {

struct Padded {
  int ny, nx, r;
  std::vector<double> v;
  std::size_t plane() const { return static_cast<std::size_t>(ny) * static_cast<std::size_t>(nx); }
};

Padded pad_replicate(std::span<const double> x, int channels, const GridSpec& g, int r) {
  Padded p{g.ny + 2 * r, g.nx + 2 * r, r, {}};
  p.v.resize(static_cast<std::size_t>(channels) * p.plane());
  for (int c = 0; c < channels; ++c) {
    const double* src = x.data() + static_cast<std::size_t>(c) * g.size();
    double* dst = p.v.data() + static_cast<std::size_t>(c) * p.plane();
    for (int j = 0; j < p.ny; ++j) {
      const int sj = std::clamp(j - r, 0, g.ny - 1);
      for (int i = 0; i < p.nx; ++i) {
        const int si = std::clamp(i - r, 0, g.nx - 1);
        dst[static_cast<std::size_t>(j) * static_cast<std::size_t>(p.nx) + static_cast<std::size_t>(i)] =
            src[g.index(sj, si)];
      }
    }
  }
  return p;
}

}  // namespace

Var conv2d(const Var& x, const Var& weights, int out_channels, int k) {
  require_field(x, "conv2d", 0);
  if (k % 2 == 0 || k < 1) throw UsageError("conv2d: kernel size must be odd");
  const int cin = x.channels();
  const std::size_t nw = static_cast<std::size_t>(out_channels) * static_cast<std::size_t>(cin) *
                         static_cast<std::size_t>(k) * static_cast<std::size_t>(k);
  if (weights.kind() != Kind::Flat || weights.value().size() != nw)
    throw DimensionError("conv2d: weight tensor has the wrong size");
  const GridSpec g = x.grid();
  check_kernel_fits(g, KernelLayout{k, k, k / 2, k / 2});
  const int r = k / 2;
  const Padded xp = pad_replicate(x.value(), cin, g, r);
  const auto wv = weights.value();
  const std::size_t plane = g.size();
  std::vector<double> out(static_cast<std::size_t>(out_channels) * plane, 0.0);

  for (int co = 0; co < out_channels; ++co) {
    double* dst0 = out.data() + static_cast<std::size_t>(co) * plane;
    for (int ci = 0; ci < cin; ++ci) {
      const double* src0 = xp.v.data() + static_cast<std::size_t>(ci) * xp.plane();
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
          const double w = wv[((static_cast<std::size_t>(co) * cin + ci) * k + a) * k + b];
          for (int j = 0; j < g.ny; ++j) {
            const double* src = src0 + static_cast<std::size_t>(j + a) * xp.nx + b;
            double* dst = dst0 + static_cast<std::size_t>(j) * g.nx;
            for (int i = 0; i < g.nx; ++i) dst[i] += w * src[i];
          }
        }
    }
  }

  return x.tape().record(
      "conv2d", Kind::Field, g, out_channels, std::move(out), {x, weights},
      [x, weights, out_channels, k, cin, g, r](Tape& t, std::uint32_t self) {
        const auto a = t.adjoint(self);
        const std::size_t plane = g.size();
        const Padded xp = pad_replicate(x.value(), cin, g, r);
        const auto wv = weights.value();
        auto sw = t.grad_sink(weights);
        auto sx = t.grad_sink(x);
        std::vector<double> dxp(sx.empty() ? 0 : xp.v.size(), 0.0);

        for (int co = 0; co < out_channels; ++co) {
          const double* g0 = a.data() + static_cast<std::size_t>(co) * plane;
          for (int ci = 0; ci < cin; ++ci) {
            const double* src0 = xp.v.data() + static_cast<std::size_t>(ci) * xp.plane();
            double* dsrc0 = sx.empty() ? nullptr : dxp.data() + static_cast<std::size_t>(ci) * xp.plane();
            for (int aa = 0; aa < k; ++aa)
              for (int b = 0; b < k; ++b) {
                const std::size_t widx = ((static_cast<std::size_t>(co) * cin + ci) * k + aa) * k + b;
                const double w = wv[widx];
                double acc = 0.0;
                for (int j = 0; j < g.ny; ++j) {
                  const std::size_t off = static_cast<std::size_t>(j + aa) * xp.nx + b;
                  const double* src = src0 + off;
                  const double* gr = g0 + static_cast<std::size_t>(j) * g.nx;
                  for (int i = 0; i < g.nx; ++i) acc += gr[i] * src[i];
                  if (dsrc0) {
                    double* ds = dsrc0 + off;
                    for (int i = 0; i < g.nx; ++i) ds[i] += w * gr[i];
                  }
                }
                if (!sw.empty()) sw[widx] += acc;
              }
          }
        }
        if (sx.empty()) return;
        // Fold the padding halo back onto the replicated edge cells.
        for (int c = 0; c < cin; ++c) {
          const double* src = dxp.data() + static_cast<std::size_t>(c) * xp.plane();
          double* dst = sx.data() + static_cast<std::size_t>(c) * plane;
          for (int j = 0; j < xp.ny; ++j) {
            const int sj = std::clamp(j - r, 0, g.ny - 1);
            for (int i = 0; i < xp.nx; ++i) {
              const int si = std::clamp(i - r, 0, g.nx - 1);
              dst[g.index(sj, si)] += src[static_cast<std::size_t>(j) * xp.nx + i];
            }
          }
        }
      });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, NormMode mode,
               std::span<const double> running_mean, std::span<const double> running_var, double eps,
               std::vector<BatchStats>* observed) {
  require_field(x, "batch_norm", 0);
  const int C = x.channels();
  const auto uc = static_cast<std::size_t>(C);
  if (gamma.value().size() != uc || beta.value().size() != uc)
    throw DimensionError("batch_norm: affine parameters do not match channel count");
  const std::size_t plane = x.grid().size();
  const auto xv = x.value();
  const auto gv = gamma.value(), bv = beta.value();
  std::vector<double> mu(uc), inv_std(uc);

  if (mode == NormMode::Train) {
    BatchStats st{std::vector<double>(uc), std::vector<double>(uc)};
    for (std::size_t c = 0; c < uc; ++c) {
      const double* p = xv.data() + c * plane;
      double s = 0.0;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
      const double m = s / static_cast<double>(plane);
      double ss = 0.0;
      for (std::size_t k = 0; k < plane; ++k) ss += (p[k] - m) * (p[k] - m);
      const double var = ss / static_cast<double>(plane);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      st.mean[c] = m;
      st.var[c] = ss / static_cast<double>(plane - 1);
    }
    if (observed) observed->push_back(std::move(st));
  } else {
    if (running_mean.size() != uc || running_var.size() != uc)
      throw DimensionError("batch_norm: running statistics do not match channel count");
    for (std::size_t c = 0; c < uc; ++c) {
      mu[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }

  std::vector<double> out(xv.size());
  for (std::size_t c = 0; c < uc; ++c)
    for (std::size_t k = 0; k < plane; ++k) {
      const double xh = (xv[c * plane + k] - mu[c]) * inv_std[c];
      out[c * plane + k] = gv[c] * xh + bv[c];
    }

  const bool train = mode == NormMode::Train;
  return x.tape().record(
      "batch_norm", Kind::Field, x.grid(), C, std::move(out), {x, gamma, beta},
      [x, gamma, beta, mu, inv_std, train, plane, uc](Tape& t, std::uint32_t self) {
        const auto a = t.adjoint(self);
        const auto xv = x.value();
        const auto gv = gamma.value();
        auto sx = t.grad_sink(x);
        auto sg = t.grad_sink(gamma);
        auto sb = t.grad_sink(beta);
        const double n = static_cast<double>(plane);
        for (std::size_t c = 0; c < uc; ++c) {
          const double* ac = a.data() + c * plane;
          const double* xc = xv.data() + c * plane;
          double sum_a = 0.0, sum_a_xh = 0.0;
          for (std::size_t k = 0; k < plane; ++k) {
            const double xh = (xc[k] - mu[c]) * inv_std[c];
            sum_a += ac[k];
            sum_a_xh += ac[k] * xh;
          }
          if (!sb.empty()) sb[c] += sum_a;
          if (!sg.empty()) sg[c] += sum_a_xh;
          if (sx.empty()) continue;
          double* dc = sx.data() + c * plane;
          if (train) {
            // dx = gamma * inv_std / n * (n * a - sum(a) - xh * sum(a * xh))
            const double scale = gv[c] * inv_std[c] / n;
            for (std::size_t k = 0; k < plane; ++k) {
              const double xh = (xc[k] - mu[c]) * inv_std[c];
              dc[k] += scale * (n * ac[k] - sum_a - xh * sum_a_xh);
            }
          } else {
            const double scale = gv[c] * inv_std[c];
            for (std::size_t k = 0; k < plane; ++k) dc[k] += scale * ac[k];
          }
        }
      });
}

Var leaky_relu(const Var& x, double slope) {
  const auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = xv[k] > 0.0 ? xv[k] : slope * xv[k];
  return record_like(x, "leaky_relu", std::move(out), {x}, [x, slope](Tape& t, std::uint32_t self) {
    const auto a = t.adjoint(self);
    const auto xv = x.value();
    auto s = t.grad_sink(x);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += xv[k] > 0.0 ? a[k] : slope * a[k];
  });
}

Var channel(const Var& x, int c) {
  require_field(x, "channel", 0);
  if (c < 0 || c >= x.channels()) throw DimensionError("channel: index out of range");
  const std::size_t plane = x.grid().size();
  const auto xv = x.value();
  const std::size_t off = static_cast<std::size_t>(c) * plane;
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(off),
                          xv.begin() + static_cast<std::ptrdiff_t>(off + plane));
  return x.tape().record("channel", Kind::Field, x.grid(), 1, std::move(out), {x},
                         [x, off, plane](Tape& t, std::uint32_t self) {
                           const auto a = t.adjoint(self);
                           auto s = t.grad_sink(x);
                           for (std::size_t k = 0; k < plane; ++k) s[off + k] += a[k];
                         });
}

// ---- gradient checking ----------------------------------------------------------------

GradCheckReport grad_check(const LossProgram& program, ParamStore& params, double eps, double threshold) {
  std::vector<double> analytic;
  {
    Tape t(&params);
    analytic = t.backward(program(t)).flatten();
  }
  auto eval = [&]() {
    Tape t(&params);
    return program(t).scalar();
  };

  double amax = 0.0;
  for (double a : analytic) amax = std::max(amax, std::abs(a));

  GradCheckReport rep;
  rep.threshold = threshold;
  std::size_t flat = 0;
  for (auto& tensor : params.tensors()) {
    for (std::size_t k = 0; k < tensor.value.size(); ++k, ++flat) {
      const double x0 = tensor.value[k];
      const double h = eps * std::max(1.0, std::abs(x0));
      tensor.value[k] = x0 + h;
      const double fp = eval();
      tensor.value[k] = x0 - h;
      const double fm = eval();
      tensor.value[k] = x0;
      GradCheckEntry e{tensor.name, k, analytic[flat], (fp - fm) / (2.0 * h), 0.0};
      const double den = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-10 * amax});
      e.rel_error = den > 0.0 ? std::abs(e.analytic - e.numeric) / den : 0.0;
      rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
      rep.entries.push_back(std::move(e));
    }
  }
  rep.passed = rep.max_rel_error < threshold;
  return rep;
}

}  // namespace qgnet::ad
