#include <doctest.h>

#include <cmath>
#include <numbers>

#include "detflow/estimators.hpp"
#include "detflow/flows.hpp"
#include "support/oracles.hpp"

using namespace detflow;
using kern::kTwoPi;

namespace {

// Moderate parameter scale: conditioner outputs stay O(1), as they do for
// trained flows on the fixtures.  Much larger scales drive the splines into
// near-degenerate bins where neither finite differences nor grid quadrature
// can resolve anything.
SphericalFlow randomized_flow(const FlowSpec& spec, std::uint64_t seed, double scale = 0.1) {
  SphericalFlow flow = SphericalFlow::build(spec, seed);
  RngStream rs(seed ^ 0xABCDEF);
  std::vector<double> vals(flow.n_params());
  for (double& v : vals) v = scale * rs.next_normal();
  flow.set_param_values(vals);
  return flow;
}

std::vector<double> moebius_raws(int nc, std::uint64_t seed, double scale = 0.8) {
  RngStream rs(seed);
  std::vector<double> raw(static_cast<std::size_t>(kern::moebius_raw_count(nc)));
  for (double& v : raw) v = scale * rs.next_normal();
  return raw;
}

std::vector<double> spline_raws(int nb, std::uint64_t seed, double scale = 1.0) {
  RngStream rs(seed);
  std::vector<double> raw(static_cast<std::size_t>(kern::spline_raw_count(nb)));
  for (double& v : raw) v = scale * rs.next_normal();
  return raw;
}

}  // namespace

// ---------------------------------------------------------------------------
// Moebius transform
// ---------------------------------------------------------------------------

TEST_CASE("moebius with zero centers is the identity") {
  const std::vector<double> raw(kern::moebius_raw_count(12), 0.0);
  const auto m = kern::moebius_from_raw(std::span<const double>(raw), 12);
  for (double theta : {0.0, 0.5, 2.0, 6.0}) {
    double out = -1.0, ld = -1.0;
    kern::moebius_forward(m, theta, out, ld);
    CHECK(out == theta);
    CHECK(ld == 0.0);
  }
}

TEST_CASE("moebius closed form for a single real center") {
  // one center at w = 0.5: derivative at theta=0 is (1-|w|^2)/|1-w|^2 = 3
  std::vector<double> raw(kern::moebius_raw_count(1), 0.0);
  // squash: |w| = 0.99 tanh(r); solve for raw radius giving w = 0.5
  const double r = std::atanh(0.5 / 0.99);
  raw[0] = r;
  raw[1] = 0.0;
  const auto m = kern::moebius_from_raw(std::span<const double>(raw), 1);
  CHECK(m.cx[0] == doctest::Approx(0.5).epsilon(1e-12));
  double out = -1.0, ld = -1.0;
  kern::moebius_forward(m, 0.0, out, ld);
  CHECK(out == doctest::Approx(0.0).epsilon(1e-12));  // anchored: 0 maps to 0
  CHECK(ld == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("moebius is a degree-1 circle map: derivative integrates to 2pi") {
  for (int rep = 0; rep < 5; ++rep) {
    const auto raw = moebius_raws(12, 100 + rep);
    const auto m = kern::moebius_from_raw(std::span<const double>(raw), 12);
    const int grid = 200000;
    double acc = 0.0;
    for (int i = 0; i < grid; ++i) {
      const double theta = (i + 0.5) * kTwoPi / grid;
      double out, ld;
      kern::moebius_forward(m, theta, out, ld);
      acc += std::exp(ld);
    }
    acc *= kTwoPi / grid;
    CHECK(std::fabs(acc - kTwoPi) <= 1e-6 * kTwoPi);
  }
}

TEST_CASE("moebius derivative matches finite differences") {
  const auto raw = moebius_raws(12, 7);
  const auto m = kern::moebius_from_raw(std::span<const double>(raw), 12);
  for (double theta : {0.3, 1.7, 3.9, 5.6}) {
    auto lift = [&](double t) {
      double out, ld;
      kern::moebius_forward(m, t, out, ld);
      return out;
    };
    double out, ld;
    kern::moebius_forward(m, theta, out, ld);
    const double fd = oracles::central_diff(lift, theta, 1e-6);
    CHECK(std::exp(ld) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("moebius inverse then forward is the identity") {
  for (int rep = 0; rep < 5; ++rep) {
    const auto raw = moebius_raws(12, 300 + rep);
    const auto m = kern::moebius_from_raw(std::span<const double>(raw), 12);
    RngStream rs(40 + rep);
    for (int i = 0; i < 100; ++i) {
      const double theta = rs.next_unit() * kTwoPi;
      double out, ld;
      kern::moebius_forward(m, theta, out, ld);
      const double back = kern::moebius_inverse(m, out);
      const double diff = std::fabs(back - theta);
      CHECK(std::min(diff, kTwoPi - diff) <= 1e-10);
    }
  }
}

// ---------------------------------------------------------------------------
// Rational-quadratic splines
// ---------------------------------------------------------------------------

TEST_CASE("spline with zero raws is the identity") {
  const std::vector<double> raw(kern::spline_raw_count(16), 0.0);
  const auto t = kern::spline_from_raw(std::span<const double>(raw), 16, false, -1.0, 1.0);
  for (double x : {-1.0, -0.73, -0.2, 0.0, 0.41, 0.99, 1.0}) {
    double y, ld;
    kern::spline_forward(t, x, y, ld);
    CHECK(y == doctest::Approx(x).epsilon(1e-12));
    CHECK(std::fabs(ld) <= 1e-12);
  }
}

TEST_CASE("spline forward/inverse roundtrip") {
  for (int rep = 0; rep < 10; ++rep) {
    const auto raw = spline_raws(16, 500 + rep);
    const auto t = kern::spline_from_raw(std::span<const double>(raw), 16, false, -1.0, 1.0);
    RngStream rs(60 + rep);
    for (int i = 0; i < 200; ++i) {
      const double x = 2.0 * rs.next_unit() - 1.0;
      double y, ld;
      kern::spline_forward(t, x, y, ld);
      CHECK(y >= -1.0);
      CHECK(y <= 1.0);
      double ld2;
      const double back = kern::spline_inverse(t, y, &ld2);
      CHECK(std::fabs(back - x) <= 1e-10);
      CHECK(std::fabs(ld2 - ld) <= 1e-8);
    }
  }
}

TEST_CASE("spline log-derivative matches finite differences") {
  const auto raw = spline_raws(16, 900);
  const auto t = kern::spline_from_raw(std::span<const double>(raw), 16, false, -1.0, 1.0);
  RngStream rs(61);
  for (int i = 0; i < 100; ++i) {
    const double x = 1.9 * rs.next_unit() - 0.95;
    auto f = [&](double v) {
      double y, ld;
      kern::spline_forward(t, v, y, ld);
      return y;
    };
    double y, ld;
    kern::spline_forward(t, x, y, ld);
    const double fd = oracles::central_diff(f, x, 1e-6);
    CHECK(std::exp(ld) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("spline endpoints are preserved and outside input errors") {
  const auto raw = spline_raws(8, 901);
  const auto t = kern::spline_from_raw(std::span<const double>(raw), 8, false, -1.0, 1.0);
  double y, ld;
  kern::spline_forward(t, -1.0, y, ld);
  CHECK(y == -1.0);
  kern::spline_forward(t, 1.0, y, ld);
  CHECK(y == 1.0);
  CHECK_THROWS_AS(kern::spline_forward(t, 1.5, y, ld), Error);
}

TEST_CASE("circular spline is a continuous degree-1 circle map") {
  for (int rep = 0; rep < 3; ++rep) {
    const auto raw = spline_raws(16, 700 + rep);
    const auto t = kern::spline_from_raw(std::span<const double>(raw), 16, true, 0.0, kTwoPi);

    // winding: derivative integrates to 2pi
    const int grid = 100000;
    double acc = 0.0;
    for (int i = 0; i < grid; ++i) {
      const double theta = (i + 0.5) * kTwoPi / grid;
      double out, ld;
      kern::spline_forward(t, theta, out, ld);
      acc += std::exp(ld);
    }
    acc *= kTwoPi / grid;
    CHECK(std::fabs(acc - kTwoPi) <= 1e-5 * kTwoPi);

    // continuity across the wrap (tied endpoint derivative)
    double y_lo, y_hi, ld_lo, ld_hi;
    kern::spline_forward(t, 1e-9, y_lo, ld_lo);
    kern::spline_forward(t, kTwoPi - 1e-9, y_hi, ld_hi);
    double gap = std::fabs(y_hi + 1e-9 * std::exp(ld_hi) - (y_lo - 1e-9 * std::exp(ld_lo)));
    gap = std::min(gap, std::fabs(gap - kTwoPi));
    CHECK(gap <= 1e-6);
    CHECK(std::fabs(ld_lo - ld_hi) <= 1e-6);

    // roundtrip
    RngStream rs(80 + rep);
    for (int i = 0; i < 100; ++i) {
      const double x = rs.next_unit() * kTwoPi;
      double y, ld;
      kern::spline_forward(t, x, y, ld);
      const double back = kern::spline_inverse(t, y);
      const double diff = std::fabs(back - x);
      CHECK(std::min(diff, kTwoPi - diff) <= 1e-10);
    }
  }
}

// ---------------------------------------------------------------------------
// Composed flows
// ---------------------------------------------------------------------------

TEST_CASE("flow forward/inverse log-density consistency") {
  for (int n : {3, 10, 16}) {
    FlowSpec spec = FlowSpec::dense_default(n);
    const SphericalFlow flow = randomized_flow(spec, 1000 + n);
    RngStream rs(2000 + n);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const SpherePoint s0 = sample_uniform(n, rs);
      const auto fwd = flow.forward(s0);
      const double lq_direct = log_uniform_density(n) - fwd.logdet;
      const double lq_inverse = flow.log_density(fwd.s);
      worst = std::max(worst, std::fabs(lq_direct - lq_inverse));
    }
    CHECK(worst <= 1e-9);
  }
  // autoregressive variant
  const SphericalFlow ar = randomized_flow(FlowSpec::cover_default(), 77);
  RngStream rs(3);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const SpherePoint s0 = sample_uniform(3, rs);
    const auto fwd = ar.forward(s0);
    worst = std::max(worst,
                     std::fabs(log_uniform_density(3) - fwd.logdet - ar.log_density(fwd.s)));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("flow pushforward density integrates to one (n=3 quadrature)") {
  // coupling x8 and autoregressive x6, a few random parameter settings each
  std::vector<SphericalFlow> flows;
  for (int rep = 0; rep < 5; ++rep) {
    flows.push_back(randomized_flow(FlowSpec::dense_default(3), 4000 + rep));
    flows.push_back(randomized_flow(FlowSpec::cover_default(), 5000 + rep));
  }
  for (const SphericalFlow& flow : flows) {
    const double total = quadrature_integral(
        3, [&](const SpherePoint& s) { return std::exp(flow.log_density(s)); }, 500);
    CHECK(std::fabs(total - 1.0) <= 1e-3);
  }
}

TEST_CASE("flow logdet matches the finite-difference chart Jacobian") {
  for (int n : {3, 4}) {
    const SphericalFlow flow = randomized_flow(FlowSpec::dense_default(n), 6000 + n);
    RngStream rs(6100 + n);
    for (int i = 0; i < 20; ++i) {
      const SpherePoint s0 = sample_uniform(n, rs);
      const CylinderCoords c0 = to_cylinder(s0);
      if (std::fabs(c0.theta) < 1e-3 || std::fabs(c0.theta - kTwoPi) < 1e-3) continue;

      // chart map (theta, z) -> (theta', z') as a plain vector function
      auto chart_map = [&](const std::vector<double>& x) {
        EvalCtx ctx{&flow.params()};
        double theta = x[0];
        std::vector<double> z(x.begin() + 1, x.end());
        flow.apply_layers(ctx, theta, z);
        std::vector<double> out{theta};
        out.insert(out.end(), z.begin(), z.end());
        return out;
      };
      std::vector<double> x{c0.theta};
      x.insert(x.end(), c0.z.begin(), c0.z.end());
      const std::vector<double> at = chart_map(x);
      if (std::fabs(at[0]) < 1e-3 || std::fabs(at[0] - kTwoPi) < 1e-3) continue;  // wrap kink

      const auto jac = oracles::central_jacobian(chart_map, x, 1e-6);
      const int m = n - 1;
      std::vector<double> jm(jac);
      double fd_logdet = 0.0;
      {
        // log|det| by LU on the small Jacobian
        double logabs = 0.0;
        int sign = 1;
        for (int col = 0; col < m; ++col) {
          int piv = col;
          for (int r = col + 1; r < m; ++r) {
            if (std::fabs(jm[static_cast<std::size_t>(r) * m + col]) >
                std::fabs(jm[static_cast<std::size_t>(piv) * m + col]))
              piv = r;
          }
          if (piv != col) {
            for (int cc = 0; cc < m; ++cc)
              std::swap(jm[static_cast<std::size_t>(piv) * m + cc],
                        jm[static_cast<std::size_t>(col) * m + cc]);
            sign = -sign;
          }
          const double d = jm[static_cast<std::size_t>(col) * m + col];
          logabs += std::log(std::fabs(d));
          for (int r = col + 1; r < m; ++r) {
            const double f = jm[static_cast<std::size_t>(r) * m + col] / d;
            for (int cc = col + 1; cc < m; ++cc)
              jm[static_cast<std::size_t>(r) * m + cc] -= f * jm[static_cast<std::size_t>(col) * m + cc];
          }
        }
        fd_logdet = logabs;
      }

      CylinderCoords c_out;
      c_out.theta = at[0];
      c_out.z.assign(at.begin() + 1, at.end());
      const double want = fd_logdet + log_cylinder_measure_factor(c_out, n) -
                          log_cylinder_measure_factor(c0, n);
      const auto fwd = flow.forward(s0);
      CHECK(std::fabs(fwd.logdet - want) <= 1e-4 * std::max(1.0, std::fabs(want)));
    }
  }
}

TEST_CASE("flow_sample agrees with log_density and is reproducible") {
  const SphericalFlow flow = randomized_flow(FlowSpec::dense_default(5), 7000);
  RngStream rs(71);
  for (int i = 0; i < 200; ++i) {
    const auto smp = flow.sample(rs);
    CHECK(std::fabs(smp.log_q - flow.log_density(smp.s)) <= 1e-9);
  }
  RngStream a(72), b(72);
  const auto s1 = flow.sample(a);
  const auto s2 = flow.sample(b);
  CHECK(s1.log_q == s2.log_q);
  for (std::size_t i = 0; i < s1.s.v.size(); ++i) CHECK(s1.s.v[i] == s2.s.v[i]);
}

TEST_CASE("identity flow samples uniformly: second moments are 1/n") {
  const int n = 6;
  const SphericalFlow flow = SphericalFlow::build(FlowSpec::dense_default(n), 1);
  REQUIRE(flow.is_identity());
  RngStream rs(9);
  const int N = 200000;
  std::vector<double> m2(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < N; ++i) {
    const auto smp = flow.sample(rs);
    CHECK(smp.log_q == log_uniform_density(n));
    for (int k = 0; k < n; ++k) m2[static_cast<std::size_t>(k)] += smp.s.v[static_cast<std::size_t>(k)] * smp.s.v[static_cast<std::size_t>(k)];
  }
  for (int k = 0; k < n; ++k) {
    CHECK(std::fabs(m2[static_cast<std::size_t>(k)] / N - 1.0 / n) <= 0.01);
  }
}

TEST_CASE("flow spec JSON round-trip") {
  const FlowSpec spec = FlowSpec::cover_default();
  const FlowSpec back = FlowSpec::from_json(spec.to_json());
  CHECK(back.n == spec.n);
  CHECK(back.n_layers == spec.n_layers);
  CHECK(back.masking == spec.masking);
  CHECK(back.circle == spec.circle);
  CHECK(back.n_bins == spec.n_bins);
  CHECK(back.hidden == spec.hidden);

  const auto j = nlohmann::json::parse(
      R"({"n":10,"n_layers":8,"masking":"coupling","circle":"moebius","n_centers":12,"n_bins":16,"conditioner":{"hidden":[64,64]}})");
  const FlowSpec s = FlowSpec::from_json(j);
  CHECK(s.n == 10);
  CHECK(s.n_centers == 12);
  CHECK_THROWS_AS(FlowSpec::from_json(nlohmann::json{{"n", 1}}), ConfigError);
}
