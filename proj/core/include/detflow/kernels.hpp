#pragma once

// Circle and interval diffeomorphism kernels, generic over the scalar type:
// plain double for evaluation, Var for recorded (differentiable) passes.
// Both instantiations execute the same floating-point operations in the same
// order, so the two paths agree bit for bit.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "detflow/diffgraph.hpp"
#include "detflow/errors.hpp"
#include "detflow/sphere.hpp"

namespace detflow::kern {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Raw outputs of exactly 0 at init must map to the exact identity; this shift
// makes softplus(0 + shift) = 1 up to rounding.
inline const double kSoftplusShift = std::log(std::numbers::e - 1.0);

inline constexpr double kMinBinFrac = 1e-4;
inline constexpr double kCenterCap = 0.99;  // Moebius centers stay inside |w| <= 0.99

inline double constant_like(double, double c) { return c; }
inline Var constant_like(Var ref, double c) { return ref.tape->constant(c); }

/// Wrap into [0, 2pi); a no-op (bit-exact) when already inside.
template <class S>
S wrap_two_pi(S x) {
  const double v = scalar_value(x);
  if (v >= 0.0 && v < kTwoPi) return x;
  const double k = std::floor(v / kTwoPi);
  S y = x - k * kTwoPi;
  if (scalar_value(y) >= kTwoPi) y = y - kTwoPi;
  if (scalar_value(y) < 0.0) y = y + kTwoPi;
  return y;
}

/// Softmax with a minimum fraction floor; fractions sum to 1.
template <class S>
void softmax_fracs(std::span<const S> logits, double min_frac, std::vector<S>& out) {
  const int n = static_cast<int>(logits.size());
  double mx = scalar_value(logits[0]);
  for (int i = 1; i < n; ++i) mx = std::max(mx, scalar_value(logits[i]));
  out.clear();
  out.reserve(static_cast<std::size_t>(n));
  S denom = exp(logits[0] - mx);
  out.push_back(denom);
  for (int i = 1; i < n; ++i) {
    S e = exp(logits[i] - mx);
    out.push_back(e);
    denom = denom + e;
  }
  const double scale = 1.0 - n * min_frac;
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = min_frac + scale * (out[i] / denom);
}

// ---------------------------------------------------------------------------
// Moebius circle transform
// ---------------------------------------------------------------------------

template <class S>
struct Moebius {
  std::vector<S> cx, cy;  // centers, inside the open unit disk
  std::vector<S> w;       // convex weights
  S rot;                  // additive rotation
};

inline constexpr int moebius_raw_count(int n_centers) { return 3 * n_centers + 1; }

/// raw = [u_x, u_y] x nc | weight logits x nc | rotation.  Centers are the
/// radial squash u * 0.99*tanh(|u|)/|u|, so any raw value is valid and raw 0
/// gives the identity map.
template <class S>
Moebius<S> moebius_from_raw(std::span<const S> raw, int nc) {
  Moebius<S> m;
  m.cx.reserve(static_cast<std::size_t>(nc));
  m.cy.reserve(static_cast<std::size_t>(nc));
  for (int j = 0; j < nc; ++j) {
    S ux = raw[static_cast<std::size_t>(2 * j)];
    S uy = raw[static_cast<std::size_t>(2 * j) + 1];
    S r2 = ux * ux + uy * uy;
    S f = [&]() -> S {
      if (scalar_value(r2) < 1e-16) {
        return kCenterCap * (1.0 - r2 / 3.0);  // tanh(r)/r series; smooth at 0
      }
      S r = sqrt(r2);
      return kCenterCap * (tanh(r) / r);
    }();
    m.cx.push_back(ux * f);
    m.cy.push_back(uy * f);
  }
  softmax_fracs(raw.subspan(static_cast<std::size_t>(2 * nc), static_cast<std::size_t>(nc)), 0.0,
                m.w);
  m.rot = raw[static_cast<std::size_t>(3 * nc)];
  return m;
}

// Each center's circle map, written against its anchored monotone lift
// h(theta) = theta + psi(theta) with psi(0) = 0, so the convex combination
// stays a degree-1 circle diffeomorphism.  For zeta = e^{i theta}:
//   h(theta) = theta - 2 arg(1 - conj(w) zeta) + 2 arg(1 - conj(w))
//   h'(theta) = (1 - |w|^2) / |zeta - w|^2
template <class S>
void moebius_forward(const Moebius<S>& m, const S& theta, S& theta_out, S& log_deriv) {
  const int nc = static_cast<int>(m.cx.size());
  S c = cos(theta);
  S s = sin(theta);
  S acc_psi = constant_like(theta, 0.0);
  S acc_dm1 = constant_like(theta, 0.0);  // sum of w_j (h'_j - 1)
  for (int j = 0; j < nc; ++j) {
    const S& wx = m.cx[static_cast<std::size_t>(j)];
    const S& wy = m.cy[static_cast<std::size_t>(j)];
    S dot = wx * c + wy * s;
    S mod2 = wx * wx + wy * wy;
    S re = 1.0 - dot;        // Re(1 - conj(w) zeta) > 0 since |w| < 1
    S im = wy * c - wx * s;  // Im(1 - conj(w) zeta)
    S psi = 2.0 * atan2(wy, 1.0 - wx) - 2.0 * atan2(im, re);
    S denom = (1.0 - 2.0 * dot) + mod2;  // |zeta - w|^2 via |zeta| = 1
    S hm1 = (2.0 * dot - 2.0 * mod2) / denom;
    acc_psi = acc_psi + m.w[static_cast<std::size_t>(j)] * psi;
    acc_dm1 = acc_dm1 + m.w[static_cast<std::size_t>(j)] * hm1;
  }
  theta_out = wrap_two_pi(theta + m.rot + acc_psi);
  log_deriv = log1p(acc_dm1);
}

/// Inverse circle map via bisection plus Newton polish (double path only).
double moebius_inverse(const Moebius<double>& m, double theta_out);

// ---------------------------------------------------------------------------
// Monotone rational-quadratic spline
// ---------------------------------------------------------------------------

template <class S>
struct RqSpline {
  int nb = 0;
  bool circular = false;
  double lo = 0.0, hi = 0.0;
  std::vector<S> xk, yk;  // nb+1 knots each; endpoints pinned to lo/hi
  std::vector<S> d;       // nb+1 positive knot derivatives
  S rot;                  // circular variant only
};

inline constexpr int spline_raw_count(int nb) { return 3 * nb + 1; }

/// raw = widths x nb | heights x nb | derivatives (nb+1 interval, nb circular)
/// | rotation (circular only).  Derivatives are softplus-shifted so raw 0 is
/// the identity; the circular variant ties d[nb] = d[0].
template <class S>
RqSpline<S> spline_from_raw(std::span<const S> raw, int nb, bool circular, double lo, double hi) {
  RqSpline<S> t;
  t.nb = nb;
  t.circular = circular;
  t.lo = lo;
  t.hi = hi;
  const double span_len = hi - lo;

  std::vector<S> fr;
  softmax_fracs(raw.subspan(0, static_cast<std::size_t>(nb)), kMinBinFrac, fr);
  t.xk.reserve(static_cast<std::size_t>(nb) + 1);
  t.xk.push_back(constant_like(raw[0], lo));
  for (int i = 0; i < nb - 1; ++i) t.xk.push_back(t.xk.back() + fr[static_cast<std::size_t>(i)] * span_len);
  t.xk.push_back(constant_like(raw[0], hi));

  softmax_fracs(raw.subspan(static_cast<std::size_t>(nb), static_cast<std::size_t>(nb)),
                kMinBinFrac, fr);
  t.yk.reserve(static_cast<std::size_t>(nb) + 1);
  t.yk.push_back(constant_like(raw[0], lo));
  for (int i = 0; i < nb - 1; ++i) t.yk.push_back(t.yk.back() + fr[static_cast<std::size_t>(i)] * span_len);
  t.yk.push_back(constant_like(raw[0], hi));

  const int nd = circular ? nb : nb + 1;
  t.d.reserve(static_cast<std::size_t>(nb) + 1);
  for (int i = 0; i < nd; ++i) {
    t.d.push_back(softplus(raw[static_cast<std::size_t>(2 * nb + i)] + kSoftplusShift));
  }
  if (circular) {
    t.d.push_back(t.d[0]);  // periodic derivative continuity
    t.rot = raw[static_cast<std::size_t>(3 * nb)];
  } else {
    t.rot = constant_like(raw[0], 0.0);
  }
  return t;
}

template <class S>
int spline_find_bin(const RqSpline<S>& t, double xv) {
  int k = 0;
  while (k < t.nb - 1 && scalar_value(t.xk[static_cast<std::size_t>(k + 1)]) <= xv) ++k;
  return k;
}

template <class S>
void spline_forward(const RqSpline<S>& t, const S& x_in, S& y_out, S& log_deriv) {
  const S& x = x_in;
  const double xv = scalar_value(x);
  if (xv < t.lo - 1e-12 || xv > t.hi + 1e-12) {
    throw Error("rq_spline: input outside transform interval");
  }
  const int k = spline_find_bin(t, xv);
  const S& x0 = t.xk[static_cast<std::size_t>(k)];
  const S& y0 = t.yk[static_cast<std::size_t>(k)];
  const S& d0 = t.d[static_cast<std::size_t>(k)];
  const S& d1 = t.d[static_cast<std::size_t>(k) + 1];
  S w = t.xk[static_cast<std::size_t>(k) + 1] - x0;
  S h = t.yk[static_cast<std::size_t>(k) + 1] - y0;
  S sl = h / w;
  S xi = (x - x0) / w;
  S om = 1.0 - xi;
  S xiom = xi * om;
  S a = (d1 + d0) - 2.0 * sl;
  S den = sl + a * xiom;
  S num = h * (sl * (xi * xi) + d0 * xiom);
  S y = y0 + num / den;
  S dnum = d1 * (xi * xi) + 2.0 * sl * xiom + d0 * (om * om);
  log_deriv = 2.0 * log(sl) + log(dnum) - 2.0 * log(den);
  if (t.circular) y = wrap_two_pi(y + t.rot);
  y_out = y;
}

/// Analytic inverse (double path); also returns the forward log-derivative at
/// the recovered point when `log_deriv` is non-null.
double spline_inverse(const RqSpline<double>& t, double y_in, double* log_deriv = nullptr);

}  // namespace detflow::kern
