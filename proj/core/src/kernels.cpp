#include "detflow/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace detflow::kern {

namespace {

// Anchored lift without rotation: G(theta) = theta + sum_j w_j psi_j(theta),
// monotone with G(0) = 0, G(2pi) = 2pi.
double lift_eval(const Moebius<double>& m, double theta, double* deriv = nullptr) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  double acc_psi = 0.0;
  double acc_d = 0.0;
  const int nc = static_cast<int>(m.cx.size());
  for (int j = 0; j < nc; ++j) {
    const double wx = m.cx[static_cast<std::size_t>(j)];
    const double wy = m.cy[static_cast<std::size_t>(j)];
    const double dot = wx * c + wy * s;
    const double mod2 = wx * wx + wy * wy;
    const double re = 1.0 - dot;
    const double im = wy * c - wx * s;
    const double psi = 2.0 * std::atan2(wy, 1.0 - wx) - 2.0 * std::atan2(im, re);
    const double h = (1.0 - mod2) / ((1.0 - 2.0 * dot) + mod2);
    acc_psi += m.w[static_cast<std::size_t>(j)] * psi;
    acc_d += m.w[static_cast<std::size_t>(j)] * h;
  }
  if (deriv != nullptr) *deriv = acc_d;
  return theta + acc_psi;
}

}  // namespace

double moebius_inverse(const Moebius<double>& m, double theta_out) {
  double t = theta_out - scalar_value(m.rot);
  t -= kTwoPi * std::floor(t / kTwoPi);
  if (t >= kTwoPi) t = 0.0;

  // Bisection on the monotone lift localizes the root; Newton then polishes
  // it (plain Newton alone can cycle on these maps).
  double lo = 0.0, hi = kTwoPi;
  for (int it = 0; it < 30; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (lift_eval(m, mid) < t) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 4; ++it) {
    double d = 1.0;
    const double f = lift_eval(m, x, &d) - t;
    if (f == 0.0) break;
    const double next = x - f / d;
    if (!(next >= lo && next <= hi)) break;
    x = next;
  }
  if (x >= kTwoPi) x -= kTwoPi;
  if (x < 0.0) x = 0.0;
  return x;
}

double spline_inverse(const RqSpline<double>& t, double y_in, double* log_deriv) {
  double y = y_in;
  if (t.circular) {
    y -= t.rot;
    y -= kTwoPi * std::floor(y / kTwoPi);
    if (y >= kTwoPi) y = 0.0;
  }
  if (y < t.lo - 1e-12 || y > t.hi + 1e-12) {
    throw Error("rq_spline inverse: input outside transform interval");
  }
  y = std::clamp(y, t.lo, t.hi);

  int k = 0;
  while (k < t.nb - 1 && t.yk[static_cast<std::size_t>(k + 1)] <= y) ++k;

  const double x0 = t.xk[static_cast<std::size_t>(k)];
  const double y0 = t.yk[static_cast<std::size_t>(k)];
  const double d0 = t.d[static_cast<std::size_t>(k)];
  const double d1 = t.d[static_cast<std::size_t>(k) + 1];
  const double w = t.xk[static_cast<std::size_t>(k) + 1] - x0;
  const double h = t.yk[static_cast<std::size_t>(k) + 1] - y0;
  const double sl = h / w;
  const double delta = y - y0;
  const double ds = (d1 + d0) - 2.0 * sl;

  // Quadratic in xi, numerically stable root.
  const double qa = h * (sl - d0) + delta * ds;
  const double qb = h * d0 - delta * ds;
  const double qc = -sl * delta;
  const double disc = std::max(qb * qb - 4.0 * qa * qc, 0.0);
  const double xi = (2.0 * qc) / (-qb - std::sqrt(disc));
  const double xic = std::clamp(xi, 0.0, 1.0);
  const double x = x0 + xic * w;

  if (log_deriv != nullptr) {
    const double om = 1.0 - xic;
    const double xiom = xic * om;
    const double den = sl + ds * xiom;
    const double dnum = d1 * xic * xic + 2.0 * sl * xiom + d0 * om * om;
    *log_deriv = 2.0 * std::log(sl) + std::log(dnum) - 2.0 * std::log(den);
  }
  return x;
}

}  // namespace detflow::kern
