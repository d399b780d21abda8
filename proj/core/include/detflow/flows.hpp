#pragma once

// Diffeomorphisms of S^{n-1} with exact log-density change, built in the
// cylinder chart (theta, z_2..z_{n-1}): circle transforms for theta, monotone
// rational-quadratic splines for the z coordinates, composed with coupling or
// autoregressive masking.  The chart measure factors are accounted for so
// that exp(-logdet) is the density change w.r.t. the surface measure.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "detflow/diffgraph.hpp"
#include "detflow/kernels.hpp"
#include "detflow/operators.hpp"
#include "detflow/rng.hpp"
#include "detflow/sphere.hpp"

namespace detflow {

enum class Masking { coupling, autoregressive };
enum class CircleKind { moebius, spline };

struct FlowSpec {
  int n = 0;
  int n_layers = 8;
  Masking masking = Masking::coupling;
  CircleKind circle = CircleKind::moebius;
  int n_centers = 12;
  int n_bins = 16;
  std::vector<int> hidden = {64, 64};

  void validate() const;
  nlohmann::json to_json() const;
  static FlowSpec from_json(const nlohmann::json& j);

  /// Coupling stack with Moebius circle transforms and 16-bin splines.
  static FlowSpec dense_default(int n);
  /// Autoregressive stack, splines for both the circle and interval parts.
  static FlowSpec cover_default();
};

struct CoordTransform {
  enum class Kind { circle_moebius, circle_spline, interval_spline };
  Kind kind;
  int z_index;  // -1 for theta
  int raw_off;
  int raw_count;
};

struct CondUnit {
  bool in_theta = false;
  std::vector<int> in_z;
  Conditioner net;
  std::vector<CoordTransform> transforms;
};

struct FlowLayer {
  std::vector<CondUnit> units;
};

/// Lifts chart coordinates back to the sphere; throws PoleError if some z is
/// numerically at +-1.
template <class S>
std::vector<S> chart_to_sphere(const S& theta, std::span<const S> z) {
  const int n = static_cast<int>(z.size()) + 2;
  std::vector<S> v;
  v.reserve(static_cast<std::size_t>(n));
  v.push_back(cos(theta));
  v.push_back(sin(theta));
  for (int k = 2; k < n; ++k) {
    const S& zk = z[static_cast<std::size_t>(k - 2)];
    S rem = 1.0 - zk * zk;
    if (scalar_value(rem) <= kPoleFloor) {
      throw PoleError("chart_to_sphere: coordinate at pole");
    }
    S sc = sqrt(rem);
    for (int i = 0; i < k; ++i) v[static_cast<std::size_t>(i)] = v[static_cast<std::size_t>(i)] * sc;
    v.push_back(zk);
  }
  return v;
}

/// log of the chart measure density for n >= 4 (zero otherwise, caller skips).
template <class S>
S chart_log_measure(std::span<const S> z, int n) {
  S acc = kern::constant_like(z[0], 0.0);
  for (int k = 3; k < n; ++k) {
    const S& zk = z[static_cast<std::size_t>(k - 2)];
    S rem = 1.0 - zk * zk;
    if (scalar_value(rem) <= kPoleFloor) {
      throw PoleError("chart_log_measure: coordinate at pole");
    }
    acc = acc + (0.5 * static_cast<double>(k - 2)) * log(rem);
  }
  return acc;
}

class SphericalFlow {
 public:
  SphericalFlow() = default;

  /// Wires the architecture and initializes parameters: hidden layers fan-in
  /// uniform, final conditioner layers zero, so the flow starts as the
  /// identity map.
  static SphericalFlow build(const FlowSpec& spec, std::uint64_t seed);

  /// Same wiring, adopting previously saved parameter values.
  static SphericalFlow from_params(const FlowSpec& spec, std::span<const double> values);

  int dim() const { return spec_.n; }
  const FlowSpec& spec() const { return spec_; }
  const ParamStore& params() const { return params_; }
  const std::vector<FlowLayer>& layers() const { return layers_; }
  std::size_t n_params() const { return params_.values.size(); }

  void set_param_values(std::span<const double> values);

  /// True while every conditioner output layer is exactly zero: the flow is
  /// the identity map and evaluation short-circuits, which keeps the VDE
  /// bitwise equal to the naive MC estimator at init.
  bool is_identity() const { return identity_; }

  struct Forward {
    SpherePoint s;
    double logdet;  // log|det J_f| w.r.t. surface measure at s0
  };
  Forward forward(const SpherePoint& s0) const;

  /// Inverts the flow and returns log q(s) = log U(s0) - logdet along the
  /// inverse path.
  double log_density(const SpherePoint& s) const;

  struct Sample {
    SpherePoint s;
    double log_q;
    double logdet;
  };
  /// s0 ~ uniform, pushed through the flow; bounded pole retries.
  Sample sample(RngStream& rng) const;

  /// Applies every layer to chart coordinates in place; returns the sum of
  /// per-coordinate log-derivatives (chart measure factors excluded).
  template <class Ctx>
  typename Ctx::S apply_layers(Ctx& ctx, typename Ctx::S& theta,
                               std::vector<typename Ctx::S>& z) const {
    using S = typename Ctx::S;
    S total = kern::constant_like(theta, 0.0);
    std::vector<S> inputs, raws;
    for (const FlowLayer& layer : layers_) {
      if (layer.units.empty()) continue;
      const S theta_in = theta;
      const std::vector<S> z_in = z;  // conditioners always read layer inputs
      for (const CondUnit& u : layer.units) {
        inputs.clear();
        if (u.in_theta) {
          inputs.push_back(sin(theta_in));
          inputs.push_back(cos(theta_in));
        }
        for (int zi : u.in_z) inputs.push_back(z_in[static_cast<std::size_t>(zi)]);
        u.net.forward(ctx, inputs, raws);
        for (const CoordTransform& tr : u.transforms) {
          std::span<const S> raw(raws.data() + tr.raw_off, static_cast<std::size_t>(tr.raw_count));
          S out{}, ld{};
          switch (tr.kind) {
            case CoordTransform::Kind::circle_moebius: {
              auto m = kern::moebius_from_raw(raw, spec_.n_centers);
              kern::moebius_forward(m, theta, out, ld);
              theta = out;
              break;
            }
            case CoordTransform::Kind::circle_spline: {
              auto sp = kern::spline_from_raw(raw, spec_.n_bins, true, 0.0, kern::kTwoPi);
              kern::spline_forward(sp, theta, out, ld);
              theta = out;
              break;
            }
            case CoordTransform::Kind::interval_spline: {
              auto sp = kern::spline_from_raw(raw, spec_.n_bins, false, -1.0, 1.0);
              kern::spline_forward(sp, z[static_cast<std::size_t>(tr.z_index)], out, ld);
              z[static_cast<std::size_t>(tr.z_index)] = out;
              break;
            }
          }
          total = total + ld;
        }
      }
    }
    return total;
  }

 private:
  void recompute_identity();

  FlowSpec spec_;
  std::vector<FlowLayer> layers_;
  ParamStore params_;
  bool identity_ = true;
};

/// The training integrand at a fixed base point (full arithmetic, never
/// short-circuited):  n log ||A f(s0)|| - log|det J_f(s0)|.  The plain and
/// recorded instantiations agree bit for bit.
template <class Ctx>
typename Ctx::S kl_integrand(Ctx& ctx, const SphericalFlow& flow, const OperatorHandle& op,
                             const CylinderCoords& c0) {
  using S = typename Ctx::S;
  const int n = flow.dim();
  S theta = ctx.constant(c0.theta);
  std::vector<S> z;
  z.reserve(c0.z.size());
  for (double zi : c0.z) z.push_back(ctx.constant(zi));
  S logdet = flow.apply_layers(ctx, theta, z);
  if (n > 3) {
    const double mf_in = log_cylinder_measure_factor(c0, n);
    S mf_out = chart_log_measure(std::span<const S>(z), n);
    logdet = (logdet + mf_out) - mf_in;
  }
  std::vector<S> v = chart_to_sphere(theta, std::span<const S>(z));
  std::vector<S> av;
  ctx.matvec(op, v, av);
  S r = ctx.norm(av);
  return static_cast<double>(n) * log(r) - logdet;
}

}  // namespace detflow
