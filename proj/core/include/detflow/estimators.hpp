#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "detflow/flows.hpp"
#include "detflow/operators.hpp"

namespace detflow {

struct EstimateReport {
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
  double inv_det_estimate = 0.0;  // mean of the per-sample integrand (Eq. 1 quantity)
  double det_estimate = 0.0;      // 1 / inv_det_estimate
  double log_det_estimate = 0.0;  // -log inv_det_estimate
  double weight_mean = 0.0;       // per-sample integrand statistics
  double weight_variance = 0.0;
  double ess = 0.0;               // (sum w)^2 / sum w^2
  std::optional<double> rel_abs_diff;  // vs the LU oracle, when available

  nlohmann::json to_json() const;
};

/// |A| and log|A| from the LU oracle on the materialized operator; throws
/// SingularOperatorError when the sign is zero.
double oracle_log_abs_det(const OperatorHandle& op);
double oracle_abs_det(const OperatorHandle& op);

/// Naive spherical Monte Carlo estimator: mean of ||A s||^{-n} over uniform s.
EstimateReport mc_estimate(const OperatorHandle& op, std::size_t n_samples, std::uint64_t seed,
                           unsigned workers = 1);

/// Importance-weighted estimator with the flow as proposal:
/// mean of exp(log U - log q) ||A s||^{-n} over s ~ q.
EstimateReport vde_estimate(const OperatorHandle& op, const SphericalFlow& flow,
                            std::size_t n_samples, std::uint64_t seed, unsigned workers = 1);

struct KlBoundStats {
  double value = 0.0;
  double sample_variance = 0.0;
  double std_error = 0.0;
  std::size_t n_samples = 0;
};

/// Monte Carlo mean of  -log|det J_f(s0)| + n log||A f(s0)||  over uniform s0;
/// an upper bound on log|A| in expectation, tight at the optimal proposal.
KlBoundStats kl_bound_stats(const OperatorHandle& op, const SphericalFlow& flow,
                            std::size_t n_samples, std::uint64_t seed, unsigned workers = 1);
double kl_bound_estimate(const OperatorHandle& op, const SphericalFlow& flow,
                         std::size_t n_samples, std::uint64_t seed, unsigned workers = 1);

/// |estimate - truth| / |truth|; truth must be nonzero.
double relative_abs_diff(double estimate, double truth);

/// Sample mean and standard deviation (n-1 denominator) of runner(0..trials-1).
std::pair<double, double> repeated_trial_stats(const std::function<double(std::size_t)>& runner,
                                               std::size_t trials);

/// Shortest round-trip double formatting for CSV cells.
std::string fmt_double(double v);

}  // namespace detflow
