#include "detflow/flows.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>

namespace detflow {

namespace {

std::string masking_name(Masking m) {
  return m == Masking::coupling ? "coupling" : "autoregressive";
}
std::string circle_name(CircleKind c) { return c == CircleKind::moebius ? "moebius" : "spline"; }

Masking masking_from(const std::string& s) {
  if (s == "coupling") return Masking::coupling;
  if (s == "autoregressive") return Masking::autoregressive;
  throw ConfigError("flow spec: unknown masking '" + s + "'");
}
CircleKind circle_from(const std::string& s) {
  if (s == "moebius") return CircleKind::moebius;
  if (s == "spline") return CircleKind::spline;
  throw ConfigError("flow spec: unknown circle transform '" + s + "'");
}

}  // namespace

void FlowSpec::validate() const {
  if (n < 2) throw ConfigError("flow spec: n must be >= 2");
  if (n_layers < 1) throw ConfigError("flow spec: n_layers must be >= 1");
  if (n_centers < 1) throw ConfigError("flow spec: n_centers must be >= 1");
  if (n_bins < 2) throw ConfigError("flow spec: n_bins must be >= 2");
  for (int h : hidden) {
    if (h < 1) throw ConfigError("flow spec: hidden widths must be >= 1");
  }
}

nlohmann::json FlowSpec::to_json() const {
  return nlohmann::json{{"n", n},
                        {"n_layers", n_layers},
                        {"masking", masking_name(masking)},
                        {"circle", circle_name(circle)},
                        {"n_centers", n_centers},
                        {"n_bins", n_bins},
                        {"conditioner", {{"hidden", hidden}}}};
}

FlowSpec FlowSpec::from_json(const nlohmann::json& j) {
  FlowSpec s;
  try {
    s.n = j.at("n").get<int>();
    s.n_layers = j.value("n_layers", s.n_layers);
    if (j.contains("masking")) s.masking = masking_from(j["masking"].get<std::string>());
    if (j.contains("circle")) s.circle = circle_from(j["circle"].get<std::string>());
    s.n_centers = j.value("n_centers", s.n_centers);
    s.n_bins = j.value("n_bins", s.n_bins);
    if (j.contains("conditioner") && j["conditioner"].contains("hidden")) {
      s.hidden = j["conditioner"]["hidden"].get<std::vector<int>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("flow spec JSON: ") + e.what());
  }
  s.validate();
  return s;
}

FlowSpec FlowSpec::dense_default(int n) {
  FlowSpec s;
  s.n = n;
  s.n_layers = 8;
  s.masking = Masking::coupling;
  s.circle = CircleKind::moebius;
  s.n_centers = 12;
  s.n_bins = 16;
  s.hidden = {64, 64};
  return s;
}

FlowSpec FlowSpec::cover_default() {
  FlowSpec s;
  s.n = 3;
  s.n_layers = 6;
  s.masking = Masking::autoregressive;
  s.circle = CircleKind::spline;
  s.n_centers = 12;
  s.n_bins = 32;
  s.hidden = {64, 64};
  return s;
}

// ---------------------------------------------------------------------------
// Wiring
// ---------------------------------------------------------------------------

SphericalFlow SphericalFlow::build(const FlowSpec& spec, std::uint64_t seed) {
  spec.validate();
  SphericalFlow f;
  f.spec_ = spec;

  const int n = spec.n;
  const int nz = n - 2;
  const int circle_raws = spec.circle == CircleKind::moebius
                              ? kern::moebius_raw_count(spec.n_centers)
                              : kern::spline_raw_count(spec.n_bins);
  const int spline_raws = kern::spline_raw_count(spec.n_bins);

  ParamLayout layout;
  for (int l = 0; l < spec.n_layers; ++l) {
    FlowLayer layer;
    const std::string lp = "L" + std::to_string(l);
    if (spec.masking == Masking::coupling) {
      // theta plus the front half of the z's condition the rest; roles swap
      // between layers and the front window rotates through the z indices.
      const int front_count = (nz + 1) / 2;
      std::vector<int> fronts, backs;
      for (int j = 0; j < nz; ++j) {
        const int shifted = ((j - l) % nz + nz) % nz;
        (shifted < front_count ? fronts : backs).push_back(j);
      }
      CondUnit u;
      int off = 0;
      if (l % 2 == 0) {
        // circle transform plus the front z's, conditioned on the back z's
        u.in_theta = false;
        u.in_z = backs;
        u.transforms.push_back({spec.circle == CircleKind::moebius
                                    ? CoordTransform::Kind::circle_moebius
                                    : CoordTransform::Kind::circle_spline,
                                -1, off, circle_raws});
        off += circle_raws;
        for (int j : fronts) {
          u.transforms.push_back(
              {CoordTransform::Kind::interval_spline, j, off, spline_raws});
          off += spline_raws;
        }
      } else {
        // roles swapped: theta and the front z's condition the back z's
        u.in_theta = true;
        u.in_z = fronts;
        for (int j : backs) {
          u.transforms.push_back(
              {CoordTransform::Kind::interval_spline, j, off, spline_raws});
          off += spline_raws;
        }
      }
      if (!u.transforms.empty()) {
        const int in_dim = (u.in_theta ? 2 : 0) + static_cast<int>(u.in_z.size());
        u.net = Conditioner::create(layout, lp + ".u0", in_dim, spec.hidden, off);
        layer.units.push_back(std::move(u));
      }
    } else {
      // Autoregressive in chart order: theta unconditioned, z_k conditioned
      // on theta and z_<k.
      {
        CondUnit u;
        u.transforms.push_back({spec.circle == CircleKind::moebius
                                    ? CoordTransform::Kind::circle_moebius
                                    : CoordTransform::Kind::circle_spline,
                                -1, 0, circle_raws});
        u.net = Conditioner::create(layout, lp + ".u0", 0, spec.hidden, circle_raws);
        layer.units.push_back(std::move(u));
      }
      for (int k = 0; k < nz; ++k) {
        CondUnit u;
        u.in_theta = true;
        for (int j = 0; j < k; ++j) u.in_z.push_back(j);
        u.transforms.push_back({CoordTransform::Kind::interval_spline, k, 0, spline_raws});
        u.net = Conditioner::create(layout, lp + ".u" + std::to_string(k + 1), 2 + k, spec.hidden,
                                    spline_raws);
        layer.units.push_back(std::move(u));
      }
    }
    f.layers_.push_back(std::move(layer));
  }

  f.params_ = ParamStore::zeros(std::make_shared<const ParamLayout>(std::move(layout)));
  for (std::size_t l = 0; l < f.layers_.size(); ++l) {
    for (std::size_t ui = 0; ui < f.layers_[l].units.size(); ++ui) {
      RngStream rs = RngStream::derive(seed, rng_tag::kInit, l, ui);
      f.layers_[l].units[ui].net.init_values(f.params_, rs);
    }
  }
  f.recompute_identity();
  return f;
}

SphericalFlow SphericalFlow::from_params(const FlowSpec& spec, std::span<const double> values) {
  SphericalFlow f = build(spec, 0);
  f.set_param_values(values);
  return f;
}

void SphericalFlow::set_param_values(std::span<const double> values) {
  if (values.size() != params_.values.size()) {
    throw ConfigError("set_param_values: expected " + std::to_string(params_.values.size()) +
                      " values, got " + std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), params_.values.begin());
  recompute_identity();
}

void SphericalFlow::recompute_identity() {
  identity_ = true;
  for (const FlowLayer& layer : layers_) {
    for (const CondUnit& u : layer.units) {
      if (!u.net.final_layer_is_zero(params_)) {
        identity_ = false;
        return;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

SphericalFlow::Forward SphericalFlow::forward(const SpherePoint& s0) const {
  if (s0.dim() != spec_.n) throw DimensionError("flow forward: dimension mismatch");
  if (identity_) return {s0, 0.0};

  const CylinderCoords c0 = to_cylinder(s0);
  EvalCtx ctx{&params_};
  double theta = c0.theta;
  std::vector<double> z = c0.z;
  double logdet = apply_layers(ctx, theta, z);
  if (spec_.n > 3) {
    logdet += chart_log_measure(std::span<const double>(z), spec_.n) -
              log_cylinder_measure_factor(c0, spec_.n);
  }
  SpherePoint s{chart_to_sphere(theta, std::span<const double>(z))};
  return {std::move(s), logdet};
}

double SphericalFlow::log_density(const SpherePoint& s) const {
  if (s.dim() != spec_.n) throw DimensionError("flow log_density: dimension mismatch");
  if (identity_) return log_uniform_density(spec_.n);

  const CylinderCoords c_out = to_cylinder(s);
  const double mf_out =
      spec_.n > 3 ? log_cylinder_measure_factor(c_out, spec_.n) : 0.0;

  EvalCtx ctx{&params_};
  double theta = c_out.theta;
  std::vector<double> z = c_out.z;
  double ld_sum = 0.0;
  std::vector<double> inputs, raws;

  for (auto layer_it = layers_.rbegin(); layer_it != layers_.rend(); ++layer_it) {
    // Units in forward order: coupling conditioners read coordinates the
    // layer leaves untouched; autoregressive units read already-recovered
    // predecessors.
    for (const CondUnit& u : layer_it->units) {
      inputs.clear();
      if (u.in_theta) {
        inputs.push_back(std::sin(theta));
        inputs.push_back(std::cos(theta));
      }
      for (int zi : u.in_z) inputs.push_back(z[static_cast<std::size_t>(zi)]);
      u.net.forward(ctx, inputs, raws);
      for (const CoordTransform& tr : u.transforms) {
        std::span<const double> raw(raws.data() + tr.raw_off,
                                    static_cast<std::size_t>(tr.raw_count));
        double ld = 0.0;
        switch (tr.kind) {
          case CoordTransform::Kind::circle_moebius: {
            auto m = kern::moebius_from_raw(raw, spec_.n_centers);
            const double th_in = kern::moebius_inverse(m, theta);
            double tmp;
            kern::moebius_forward(m, th_in, tmp, ld);
            theta = th_in;
            break;
          }
          case CoordTransform::Kind::circle_spline: {
            auto sp = kern::spline_from_raw(raw, spec_.n_bins, true, 0.0, kern::kTwoPi);
            theta = kern::spline_inverse(sp, theta, &ld);
            break;
          }
          case CoordTransform::Kind::interval_spline: {
            auto sp = kern::spline_from_raw(raw, spec_.n_bins, false, -1.0, 1.0);
            z[static_cast<std::size_t>(tr.z_index)] =
                kern::spline_inverse(sp, z[static_cast<std::size_t>(tr.z_index)], &ld);
            break;
          }
        }
        ld_sum += ld;
      }
    }
  }

  double mf_in = 0.0;
  if (spec_.n > 3) {
    CylinderCoords c0;
    c0.theta = theta;
    c0.z = z;
    mf_in = log_cylinder_measure_factor(c0, spec_.n);
  }
  const double logdet = ld_sum + mf_out - mf_in;
  return log_uniform_density(spec_.n) - logdet;
}

SphericalFlow::Sample SphericalFlow::sample(RngStream& rng) const {
  const double log_u = log_uniform_density(spec_.n);
  for (int attempt = 0; attempt < 16; ++attempt) {
    SpherePoint s0 = sample_uniform(spec_.n, rng);
    if (identity_) return {std::move(s0), log_u, 0.0};
    try {
      Forward f = forward(s0);
      return {std::move(f.s), log_u - f.logdet, f.logdet};
    } catch (const PoleError&) {
      continue;
    }
  }
  throw EstimatorError("flow sample: exceeded pole-retry budget");
}

}  // namespace detflow
