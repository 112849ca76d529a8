#include "qgnet/learnable.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "binio.hpp"

namespace qgnet {

using ad::Var;

const char* to_string(VelocityVariant v) {
  switch (v) {
    case VelocityVariant::FixedQG: return "fixed-qg";
    case VelocityVariant::TrainableFilter: return "filter";
    case VelocityVariant::Hybrid: return "hybrid";
  }
  return "?";
}

VelocityVariant parse_variant(const std::string& s) {
  if (s == "fixed-qg") return VelocityVariant::FixedQG;
  if (s == "filter") return VelocityVariant::TrainableFilter;
  if (s == "hybrid") return VelocityVariant::Hybrid;
  throw ConfigError("unknown velocity model '" + s + "' (expected fixed-qg, filter or hybrid)");
}

void ConvNetState::update_running(const std::vector<ad::BatchStats>& observed) {
  if (observed.empty()) return;
  if (observed.size() % 2 != 0) throw UsageError("batch-norm log must hold whole forwards (two layers each)");
  const std::size_t calls = observed.size() / 2;
  for (int layer = 0; layer < 2; ++layer) {
    std::vector<double> m(kHidden, 0.0), v(kHidden, 0.0);
    for (std::size_t c = 0; c < calls; ++c) {
      const auto& s = observed[2 * c + static_cast<std::size_t>(layer)];
      for (std::size_t k = 0; k < kHidden; ++k) {
        m[k] += s.mean[k];
        v[k] += s.var[k];
      }
    }
    auto& rm = layer == 0 ? bn1_mean : bn2_mean;
    auto& rv = layer == 0 ? bn1_var : bn2_var;
    for (std::size_t k = 0; k < kHidden; ++k) {
      rm[k] = (1.0 - momentum) * rm[k] + momentum * m[k] / static_cast<double>(calls);
      rv[k] = (1.0 - momentum) * rv[k] + momentum * v[k] / static_cast<double>(calls);
    }
  }
}

namespace {

using WeightFn = std::function<Var(const std::string&)>;

std::pair<Var, Var> convnet_impl(const Var& h, const WeightFn& w, const ConvNetState& s, ad::NormMode mode,
                                 StatsLog* observed) {
  constexpr int H = ConvNetState::kHidden;
  const Var x = ad::affine(h, 1.0 / s.input_std, -s.input_mean / s.input_std);
  Var a = ad::conv2d(x, w(pname::conv1), H, 3);
  a = ad::batch_norm(a, w(pname::bn1_gamma), w(pname::bn1_beta), mode, s.bn1_mean, s.bn1_var, ConvNetState::kEps,
                     observed);
  a = ad::leaky_relu(a, ConvNetState::kSlope);
  a = ad::conv2d(a, w(pname::conv2), H, 3);
  a = ad::batch_norm(a, w(pname::bn2_gamma), w(pname::bn2_beta), mode, s.bn2_mean, s.bn2_var, ConvNetState::kEps,
                     observed);
  a = ad::leaky_relu(a, ConvNetState::kSlope);
  const Var o = ad::sum(w(pname::gate)) * ad::conv2d(a, w(pname::out), 2, 1);
  return {ad::channel(o, 0), ad::channel(o, 1)};
}

}  // namespace

std::pair<Var, Var> convnet_forward(const Var& h, ad::Tape& t, const ConvNetState& s, ad::NormMode mode,
                                    StatsLog* observed) {
  return convnet_impl(h, [&t](const std::string& n) { return t.param(n); }, s, mode, observed);
}

VelocityModel VelocityModel::fixed_qg(const PhysicalParams& p) { return VelocityModel(VelocityVariant::FixedQG, p); }

VelocityModel VelocityModel::trainable_filter(const PhysicalParams& p, std::vector<double> filter) {
  if (filter.size() != kGradientFilterLayout.size()) throw DimensionError("gradient filter needs 6 entries");
  VelocityModel m(VelocityVariant::TrainableFilter, p);
  m.params_.add(pname::filter, {2, 3}, std::move(filter));
  return m;
}

VelocityModel VelocityModel::random_filter(const PhysicalParams& p, std::uint64_t seed, double amplitude) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  std::vector<double> f(kGradientFilterLayout.size());
  for (double& v : f) v = u(rng);
  return trainable_filter(p, std::move(f));
}

VelocityModel VelocityModel::hybrid(const PhysicalParams& p, std::uint64_t seed) {
  constexpr std::size_t H = ConvNetState::kHidden;
  VelocityModel m(VelocityVariant::Hybrid, p);
  std::mt19937_64 rng(seed);
  auto he = [&](std::size_t n, double fan_in) {
    std::normal_distribution<double> d(0.0, std::sqrt(2.0 / ((1.0 + ConvNetState::kSlope * ConvNetState::kSlope) * fan_in)));
    std::vector<double> w(n);
    for (double& v : w) v = d(rng);
    return w;
  };
  m.params_.add(pname::conv1, {H, 1, 3, 3}, he(H * 9, 9.0));
  m.params_.add(pname::bn1_gamma, {H}, std::vector<double>(H, 1.0));
  m.params_.add(pname::bn1_beta, {H}, std::vector<double>(H, 0.0));
  m.params_.add(pname::conv2, {H, H, 3, 3}, he(H * H * 9, 9.0 * H));
  m.params_.add(pname::bn2_gamma, {H}, std::vector<double>(H, 1.0));
  m.params_.add(pname::bn2_beta, {H}, std::vector<double>(H, 0.0));
  m.params_.add(pname::out, {2, H, 1, 1}, he(2 * H, static_cast<double>(H)));
  m.params_.add(pname::gate, {1}, {0.0});
  return m;
}

VelocityFn VelocityModel::bind(ad::Tape& t, ad::NormMode mode, StatsLog* observed) const {
  const PhysicalParams p = physics_;
  // Tapes bound to another store (or none) see the current values as constants.
  const ad::ParamStore* ps = &params_;
  ad::Tape* tp = &t;
  const WeightFn weight = [ps, tp](const std::string& n) {
    return tp->params() == ps ? tp->param(n) : tp->constant_flat(ps->at(n).value);
  };
  switch (variant_) {
    case VelocityVariant::FixedQG:
      return [p](const Var& h) { return geostrophic_velocities(h, p); };
    case VelocityVariant::TrainableFilter: {
      const Var f = weight(pname::filter);
      return [p, f](const Var& h) { return filter_velocities(h, f, p); };
    }
    case VelocityVariant::Hybrid: {
      const ConvNetState* s = &net_;
      return [p, s, weight, mode, observed](const Var& h) {
        const auto [Ug, Vg] = geostrophic_velocities(h, p);
        const auto [dU, dV] = convnet_impl(h, weight, *s, mode, observed);
        return std::pair{Ug + dU, Vg + dV};
      };
    }
  }
  throw UsageError("unknown velocity variant");
}

VelocityBinder VelocityModel::binder() const {
  return [this](ad::Tape& t) { return bind(t, ad::NormMode::Infer, nullptr); };
}

std::pair<Field2D, Field2D> VelocityModel::velocities(const Field2D& h) const {
  ad::Tape t(&params_);
  const auto [U, V] = bind(t)(t.constant(h));
  return {U.field(), V.field()};
}

// ---- component files ------------------------------------------------------------------

namespace {

constexpr char kComponentMagic[8] = {'Q', 'G', 'N', 'E', 'T', 'C', 'M', 'P'};
constexpr std::uint32_t kComponentVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;
};

}  // namespace

void export_component(const VelocityModel& m, const std::filesystem::path& path) {
  std::vector<NamedTensor> ts;
  ts.push_back({"meta.variant", {1}, {static_cast<double>(static_cast<int>(m.variant()))}});
  for (const auto& p : m.params().tensors())
    ts.push_back({p.name, std::vector<std::uint64_t>(p.shape.begin(), p.shape.end()), p.value});
  if (m.variant() == VelocityVariant::Hybrid) {
    const ConvNetState& s = m.net_state();
    const auto H = static_cast<std::uint64_t>(ConvNetState::kHidden);
    ts.push_back({"state.bn1.mean", {H}, s.bn1_mean});
    ts.push_back({"state.bn1.var", {H}, s.bn1_var});
    ts.push_back({"state.bn2.mean", {H}, s.bn2_mean});
    ts.push_back({"state.bn2.var", {H}, s.bn2_var});
    ts.push_back({"state.input", {3}, {s.input_mean, s.input_std, s.momentum}});
  }

  bin::Writer w;
  w.bytes(kComponentMagic, 8);
  w.u32(kComponentVersion);
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    w.f64s(t.values);
  }
  w.u32(bin::crc32(w.data().data(), w.size()));
  bin::write_file_atomic(path, w.data());
}

VelocityModel import_component(const std::filesystem::path& path, const PhysicalParams& p) {
  const auto buf = bin::read_file(path);
  const std::string what = "component " + path.string();
  if (buf.size() < 8 + 4 + 4 + 4) throw IoError(what + ": truncated file");
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
  if (stored != bin::crc32(buf.data(), buf.size() - 4)) throw IoError(what + ": checksum mismatch");

  const std::vector<std::uint8_t> body(buf.begin(), buf.end() - 4);
  bin::Reader r(body, what);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kComponentMagic, 8) != 0) throw IoError(what + ": not a component file");
  const std::uint32_t version = r.u32();
  if (version != kComponentVersion) throw IoError(what + ": unsupported version " + std::to_string(version));
  const std::uint32_t n = r.u32();
  std::vector<NamedTensor> ts;
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedTensor t;
    t.name = r.str();
    const std::uint32_t nd = r.u32();
    if (nd > 8) throw IoError(what + ": bad tensor rank");
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      t.shape.push_back(r.u64());
      count *= t.shape.back();
    }
    t.values = r.f64s(count);
    ts.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw IoError(what + ": trailing bytes");
  if (ts.empty() || ts[0].name != "meta.variant" || ts[0].values.size() != 1) throw IoError(what + ": missing variant");

  const int vi = static_cast<int>(ts[0].values[0]);
  if (vi < 0 || vi > 2) throw IoError(what + ": unknown variant");
  VelocityModel m = VelocityModel::fixed_qg(p);
  switch (static_cast<VelocityVariant>(vi)) {
    case VelocityVariant::FixedQG: break;
    case VelocityVariant::TrainableFilter: m = VelocityModel::trainable_filter(p, std::vector<double>(6, 0.0)); break;
    case VelocityVariant::Hybrid: m = VelocityModel::hybrid(p, 0); break;
  }
  std::size_t matched = 0;
  for (std::size_t k = 1; k < ts.size(); ++k) {
    const auto& t = ts[k];
    auto take = [&](std::vector<double>& dst) {
      if (dst.size() != t.values.size()) throw IoError(what + ": tensor '" + t.name + "' has the wrong size");
      dst = t.values;
    };
    ConvNetState& s = m.net_state();
    if (m.params().contains(t.name)) {
      take(m.params().at(t.name).value);
      ++matched;
    } else if (t.name == "state.bn1.mean") {
      take(s.bn1_mean);
    } else if (t.name == "state.bn1.var") {
      take(s.bn1_var);
    } else if (t.name == "state.bn2.mean") {
      take(s.bn2_mean);
    } else if (t.name == "state.bn2.var") {
      take(s.bn2_var);
    } else if (t.name == "state.input" && t.values.size() == 3) {
      s.input_mean = t.values[0];
      s.input_std = t.values[1];
      s.momentum = t.values[2];
    } else {
      throw IoError(what + ": unexpected tensor '" + t.name + "'");
    }
  }
  if (matched != m.params().tensors().size()) throw IoError(what + ": missing parameter tensors");
  return m;
}

}  // namespace qgnet
