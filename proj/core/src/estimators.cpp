#include "detflow/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "detflow/parallel.hpp"
#include "detflow/rng.hpp"
#include "detflow/sphere.hpp"

namespace detflow {

namespace {

constexpr std::size_t kBlock = 4096;

// x^n by binary exponentiation.  Scales exactly under power-of-two inputs,
// which the scaling identity det(cA) = c^n det(A) relies on.
double ipow(double x, unsigned n) {
  double r = 1.0;
  double b = x;
  while (n != 0) {
    if (n & 1u) r *= b;
    b *= b;
    n >>= 1;
  }
  return r;
}

// Per-sample integrand  exp(logdet) * ||As||^{-n}  with overflow guards.
// logdet = 0 reproduces the plain MC term bit for bit.
double integrand_term(std::span<const double> av, int n, double logdet, std::size_t sample_idx) {
  const double r = stable_norm(av);
  if (!(r > 0.0) || !std::isfinite(r)) {
    throw EstimatorError("sample " + std::to_string(sample_idx) +
                         ": ||A s|| is zero or non-finite (singular operator?)");
  }
  if (std::fabs(logdet) > 600.0) {
    throw EstimatorError("sample " + std::to_string(sample_idx) +
                         ": degenerate flow log-density (|logdet| > 600)");
  }
  const double kappa = logdet - static_cast<double>(n) * std::log(r);
  if (kappa > 690.0) {
    throw EstimatorError("sample " + std::to_string(sample_idx) +
                         ": ||A s||^{-n} overflows (near-singular operator)");
  }
  return std::exp(logdet) / ipow(r, static_cast<unsigned>(n));
}

struct Sums {
  double sum = 0.0;
  double sum2 = 0.0;
};

EstimateReport assemble_report(std::size_t n_samples, std::uint64_t seed, const Sums& s,
                               double truth_log) {
  EstimateReport rep;
  rep.n_samples = n_samples;
  rep.seed = seed;
  const double nd = static_cast<double>(n_samples);
  rep.inv_det_estimate = s.sum / nd;
  rep.det_estimate = 1.0 / rep.inv_det_estimate;
  rep.log_det_estimate = -std::log(rep.inv_det_estimate);
  rep.weight_mean = rep.inv_det_estimate;
  rep.weight_variance =
      n_samples >= 2 ? std::max(0.0, (s.sum2 - nd * rep.inv_det_estimate * rep.inv_det_estimate) /
                                         (nd - 1.0))
                     : 0.0;
  rep.ess = s.sum2 > 0.0 ? s.sum * s.sum / s.sum2 : 0.0;
  const double truth = std::exp(truth_log);
  rep.rel_abs_diff = relative_abs_diff(rep.det_estimate, truth);
  return rep;
}

template <class BlockBody>
Sums reduce_blocks(std::size_t n_samples, unsigned workers, const BlockBody& body) {
  const std::size_t nb = (n_samples + kBlock - 1) / kBlock;
  std::vector<Sums> parts(nb);
  parallel_blocks(nb, workers, [&](std::size_t b) {
    const std::size_t lo = b * kBlock;
    const std::size_t hi = std::min(n_samples, lo + kBlock);
    parts[b] = body(lo, hi);
  });
  Sums total;
  for (const Sums& p : parts) {
    total.sum += p.sum;
    total.sum2 += p.sum2;
  }
  return total;
}

}  // namespace

double oracle_log_abs_det(const OperatorHandle& op) {
  const LogAbsDet d = exact_logabsdet(materialize(op));
  if (d.sign == 0) {
    throw SingularOperatorError("operator is singular; estimation refuses to run");
  }
  return d.logabs;
}

double oracle_abs_det(const OperatorHandle& op) { return std::exp(oracle_log_abs_det(op)); }

EstimateReport mc_estimate(const OperatorHandle& op, std::size_t n_samples, std::uint64_t seed,
                           unsigned workers) {
  if (n_samples < 1) throw EstimatorError("mc_estimate: need at least one sample");
  const int n = op.dim();
  const double truth_log = oracle_log_abs_det(op);
  const Sums s = reduce_blocks(n_samples, workers, [&](std::size_t lo, std::size_t hi) {
    Sums acc;
    std::vector<double> av(static_cast<std::size_t>(n));
    for (std::size_t i = lo; i < hi; ++i) {
      RngStream rs = RngStream::derive(seed, rng_tag::kEstimate, i);
      const SpherePoint sp = sample_uniform(n, rs);
      op.matvec(sp.v, av);
      const double t = integrand_term(av, n, 0.0, i);
      acc.sum += t;
      acc.sum2 += t * t;
    }
    return acc;
  });
  return assemble_report(n_samples, seed, s, truth_log);
}

EstimateReport vde_estimate(const OperatorHandle& op, const SphericalFlow& flow,
                            std::size_t n_samples, std::uint64_t seed, unsigned workers) {
  if (n_samples < 1) throw EstimatorError("vde_estimate: need at least one sample");
  const int n = op.dim();
  if (flow.dim() != n) {
    throw DimensionError("vde_estimate: flow dimension " + std::to_string(flow.dim()) +
                         " != operator dimension " + std::to_string(n));
  }
  const double truth_log = oracle_log_abs_det(op);
  const Sums s = reduce_blocks(n_samples, workers, [&](std::size_t lo, std::size_t hi) {
    Sums acc;
    std::vector<double> av(static_cast<std::size_t>(n));
    for (std::size_t i = lo; i < hi; ++i) {
      RngStream rs = RngStream::derive(seed, rng_tag::kEstimate, i);
      const SphericalFlow::Sample smp = flow.sample(rs);
      op.matvec(smp.s.v, av);
      const double t = integrand_term(av, n, smp.logdet, i);
      if (!std::isfinite(t)) {
        throw EstimatorError("sample " + std::to_string(i) + ": non-finite importance weight");
      }
      acc.sum += t;
      acc.sum2 += t * t;
    }
    return acc;
  });
  return assemble_report(n_samples, seed, s, truth_log);
}

KlBoundStats kl_bound_stats(const OperatorHandle& op, const SphericalFlow& flow,
                            std::size_t n_samples, std::uint64_t seed, unsigned workers) {
  if (n_samples < 1) throw EstimatorError("kl_bound: need at least one sample");
  const int n = op.dim();
  if (flow.dim() != n) throw DimensionError("kl_bound: flow/operator dimension mismatch");
  oracle_log_abs_det(op);  // singularity gate
  const Sums s = reduce_blocks(n_samples, workers, [&](std::size_t lo, std::size_t hi) {
    Sums acc;
    std::vector<double> av(static_cast<std::size_t>(n));
    for (std::size_t i = lo; i < hi; ++i) {
      RngStream rs = RngStream::derive(seed, rng_tag::kEstimate, i);
      const SphericalFlow::Sample smp = flow.sample(rs);
      op.matvec(smp.s.v, av);
      const double r = stable_norm(av);
      if (!(r > 0.0) || !std::isfinite(r)) {
        throw EstimatorError("kl_bound sample " + std::to_string(i) + ": ||A s|| degenerate");
      }
      const double term = static_cast<double>(n) * std::log(r) - smp.logdet;
      if (!std::isfinite(term)) {
        throw EstimatorError("kl_bound sample " + std::to_string(i) + ": non-finite term");
      }
      acc.sum += term;
      acc.sum2 += term * term;
    }
    return acc;
  });
  KlBoundStats out;
  out.n_samples = n_samples;
  const double nd = static_cast<double>(n_samples);
  out.value = s.sum / nd;
  out.sample_variance =
      n_samples >= 2 ? std::max(0.0, (s.sum2 - nd * out.value * out.value) / (nd - 1.0)) : 0.0;
  out.std_error = std::sqrt(out.sample_variance / nd);
  return out;
}

double kl_bound_estimate(const OperatorHandle& op, const SphericalFlow& flow,
                         std::size_t n_samples, std::uint64_t seed, unsigned workers) {
  return kl_bound_stats(op, flow, n_samples, seed, workers).value;
}

double relative_abs_diff(double estimate, double truth) {
  if (truth == 0.0) throw EstimatorError("relative_abs_diff: truth is zero");
  return std::fabs(estimate - truth) / std::fabs(truth);
}

std::pair<double, double> repeated_trial_stats(const std::function<double(std::size_t)>& runner,
                                               std::size_t trials) {
  if (trials < 2) throw EstimatorError("repeated_trial_stats: need at least 2 trials");
  std::vector<double> xs(trials);
  for (std::size_t t = 0; t < trials; ++t) xs[t] = runner(t);
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(trials);
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(trials - 1))};
}

std::string fmt_double(double v) {
  if (v == 0.0) v = 0.0;  // fold -0
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json EstimateReport::to_json() const {
  nlohmann::json j{{"n_samples", n_samples},
                   {"seed", seed},
                   {"inv_det_estimate", inv_det_estimate},
                   {"det_estimate", det_estimate},
                   {"log_det_estimate", log_det_estimate},
                   {"weight_mean", weight_mean},
                   {"weight_variance", weight_variance},
                   {"ess", ess}};
  if (rel_abs_diff.has_value()) j["rel_abs_diff"] = *rel_abs_diff;
  return j;
}

}  // namespace detflow
