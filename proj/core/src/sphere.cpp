#include "detflow/sphere.hpp"

#include <cmath>
#include <numbers>
#include <span>

namespace detflow {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

double stable_norm(std::span<const double> x) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::fabs(v));
  if (m == 0.0) return 0.0;
  double acc = 0.0;
  for (double v : x) {
    const double t = v / m;
    acc += t * t;
  }
  return m * std::sqrt(acc);
}

SpherePoint make_sphere_point(std::vector<double> v) {
  if (v.size() < 2) throw DimensionError("SpherePoint: dimension must be >= 2");
  double r = stable_norm(v);
  if (!(r > 0.0) || !std::isfinite(r)) {
    throw DimensionError("SpherePoint: cannot normalize zero or non-finite vector");
  }
  // One pass lands within an ulp; iterate until the recomputed norm is 1.0
  // bit-for-bit (converges almost always; the loop is bounded regardless).
  for (int pass = 0; pass < 4 && r != 1.0; ++pass) {
    for (double& x : v) x /= r;
    r = stable_norm(v);
  }
  return SpherePoint{std::move(v)};
}

SpherePoint sample_uniform(int n, RngStream& rng) {
  if (n < 2) throw DimensionError("sample_uniform: n must be >= 2");
  std::vector<double> g(static_cast<std::size_t>(n));
  for (double& x : g) x = rng.next_normal();
  return make_sphere_point(std::move(g));
}

double log_uniform_density(int n) {
  if (n < 2) throw DimensionError("log_uniform_density: n must be >= 2");
  const double half_n = 0.5 * n;
  const double log_area =
      std::numbers::ln2 + half_n * std::log(std::numbers::pi) - std::lgamma(half_n);
  return -log_area;
}

CylinderCoords to_cylinder(const SpherePoint& p) {
  const int n = p.dim();
  if (n < 2) throw DimensionError("to_cylinder: dimension must be >= 2");
  std::vector<double> w(p.v);
  CylinderCoords c;
  c.z.resize(static_cast<std::size_t>(n - 2));
  for (int k = n - 1; k >= 2; --k) {
    const double zk = w[static_cast<std::size_t>(k)];
    const double rem = 1.0 - zk * zk;
    if (!(rem > kPoleFloor)) {
      throw PoleError("to_cylinder: point at chart pole (|z| ~ 1)");
    }
    const double scale = 1.0 / std::sqrt(rem);
    for (int i = 0; i < k; ++i) w[static_cast<std::size_t>(i)] *= scale;
    c.z[static_cast<std::size_t>(k - 2)] = zk;
  }
  double theta = std::atan2(w[1], w[0]);
  if (theta < 0.0) theta += kTwoPi;
  if (theta >= kTwoPi) theta = 0.0;
  c.theta = theta;
  return c;
}

SpherePoint from_cylinder(const CylinderCoords& c, int n) {
  if (n < 2) throw DimensionError("from_cylinder: dimension must be >= 2");
  if (static_cast<int>(c.z.size()) != n - 2) {
    throw DimensionError("from_cylinder: z length must be n-2");
  }
  std::vector<double> v(static_cast<std::size_t>(n));
  v[0] = std::cos(c.theta);
  v[1] = std::sin(c.theta);
  for (int k = 2; k < n; ++k) {
    const double zk = c.z[static_cast<std::size_t>(k - 2)];
    const double scale = std::sqrt(std::max(1.0 - zk * zk, 0.0));
    for (int i = 0; i < k; ++i) v[static_cast<std::size_t>(i)] *= scale;
    v[static_cast<std::size_t>(k)] = zk;
  }
  return SpherePoint{std::move(v)};
}

double log_cylinder_measure_factor(const CylinderCoords& c, int n) {
  if (n <= 3) return 0.0;
  double acc = 0.0;
  // k = 2 carries exponent 0; start at k = 3.
  for (int k = 3; k < n; ++k) {
    const double zk = c.z[static_cast<std::size_t>(k - 2)];
    const double rem = std::max(1.0 - zk * zk, kPoleFloor);
    acc += 0.5 * static_cast<double>(k - 2) * std::log(rem);
  }
  return acc;
}

double quadrature_integral(int n, const std::function<double(const SpherePoint&)>& integrand,
                           int resolution) {
  if (n != 2 && n != 3) throw DimensionError("quadrature: only n in {2,3} supported");
  if (resolution < 2) throw DimensionError("quadrature: resolution too small");
  const int res = resolution;
  if (n == 2) {
    const double dtheta = kTwoPi / res;
    SpherePoint p{std::vector<double>(2)};
    double acc = 0.0;
    for (int i = 0; i < res; ++i) {
      const double theta = (i + 0.5) * dtheta;
      p.v[0] = std::cos(theta);
      p.v[1] = std::sin(theta);
      acc += integrand(p);
    }
    return acc * dtheta;
  }
  // n == 3: d(sigma) = dtheta dz on [0,2pi) x [-1,1]  (Archimedes).
  const double dtheta = kTwoPi / res;
  const double dz = 2.0 / res;
  SpherePoint p{std::vector<double>(3)};
  double acc = 0.0;
  for (int j = 0; j < res; ++j) {
    const double z = -1.0 + (j + 0.5) * dz;
    const double s = std::sqrt(std::max(1.0 - z * z, 0.0));
    double row = 0.0;
    for (int i = 0; i < res; ++i) {
      const double theta = (i + 0.5) * dtheta;
      p.v[0] = s * std::cos(theta);
      p.v[1] = s * std::sin(theta);
      p.v[2] = z;
      row += integrand(p);
    }
    acc += row;
  }
  return acc * dtheta * dz;
}

double quadrature_expectation(int n, const std::function<double(const SpherePoint&)>& integrand,
                              int resolution) {
  return quadrature_integral(n, integrand, resolution) * std::exp(log_uniform_density(n));
}

}  // namespace detflow
