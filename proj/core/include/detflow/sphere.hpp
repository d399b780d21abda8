#pragma once

#include <functional>
#include <span>
#include <vector>

#include "detflow/errors.hpp"
#include "detflow/rng.hpp"

namespace detflow {

/// Unit vector in R^n.
struct SpherePoint {
  std::vector<double> v;
  int dim() const { return static_cast<int>(v.size()); }
};

/// Chart coordinates (theta, z_2 .. z_{n-1}) for S^{n-1}: theta in [0, 2pi),
/// each z_k in (-1, 1).  z[i] stores z_{i+2}.  Empty z for n = 2.
struct CylinderCoords {
  double theta = 0.0;
  std::vector<double> z;
};

/// Normalizes v onto the unit sphere (repeated until the recomputed norm is
/// exactly 1, which keeps isotropic estimator cases exact).
SpherePoint make_sphere_point(std::vector<double> v);

/// Uniform draw on S^{n-1}: n independent standard normals, normalized.
SpherePoint sample_uniform(int n, RngStream& rng);

/// -log(surface area of S^{n-1}) = -log(2 pi^{n/2} / Gamma(n/2)).
double log_uniform_density(int n);

/// Stable two-pass Euclidean norm.
double stable_norm(std::span<const double> x);

/// Peels z_{n-1} .. z_2 off the unit vector, then theta = atan2 of the
/// remaining 2-vector.  Throws PoleError at chart-degenerate points.
CylinderCoords to_cylinder(const SpherePoint& p);

/// Inverse chart: start from (cos theta, sin theta), append each z_k with the
/// sqrt(1 - z_k^2) contraction.
SpherePoint from_cylinder(const CylinderCoords& c, int n);

/// log of the chart measure density: sum_{k=2}^{n-1} ((k-2)/2) log(1 - z_k^2).
/// Zero for n = 2 and n = 3.
double log_cylinder_measure_factor(const CylinderCoords& c, int n);

/// Brute-force expectation of `integrand` under the uniform law, n in {2, 3}.
/// Midpoint product grid with `resolution` points per axis.
double quadrature_expectation(int n, const std::function<double(const SpherePoint&)>& integrand,
                              int resolution);

/// Brute-force surface integral (not normalized by the area), n in {2, 3}.
double quadrature_integral(int n, const std::function<double(const SpherePoint&)>& integrand,
                           int resolution);

// 1 - z^2 below this counts as a chart pole; such points are rejected and the
// caller resamples.
inline constexpr double kPoleFloor = 1e-12;

}  // namespace detflow
