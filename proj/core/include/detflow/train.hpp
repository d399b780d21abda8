#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "detflow/estimators.hpp"
#include "detflow/flows.hpp"
#include "detflow/operators.hpp"

namespace detflow {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::string name = "run";
  std::string operator_source;  // fixture name, identityN, conv16, or JSON path
  FlowSpec flow;
  std::size_t iterations = 2000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  AdamParams adam;
  double grad_clip = 100.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 200;          // 0 disables periodic eval
  std::size_t eval_kl_samples = 2048;
  std::size_t eval_vde_samples = 1000;
  std::size_t checkpoint_every = 500;    // snapshot cadence (and file cadence)
  unsigned workers = 0;                  // 0 = auto
  std::filesystem::path out_dir;         // empty = no files written

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TraceRow {
  std::size_t iter = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  double elapsed_ms = 0.0;
  bool has_eval = false;
  double eval_kl_bound = 0.0;
  double eval_vde_rel_diff = 0.0;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  void write_csv(std::ostream& os) const;
};

enum class TrainOutcome { completed, aborted_non_finite, aborted_divergence };

std::string_view outcome_name(TrainOutcome o);

struct TrainResult {
  SphericalFlow flow;  // final parameters (or last good checkpoint on abort)
  TrainTrace trace;
  TrainOutcome outcome = TrainOutcome::completed;
  std::size_t iterations_run = 0;
  std::size_t checkpoint_iter = 0;
};

/// Minimizes  E_{s0 ~ U}[ -log|det J_f(s0)| + n log||A f(s0)|| ]  with Adam
/// over the flow parameters.  Deterministic for a fixed config, independent
/// of the worker count.
TrainResult train(const TrainConfig& cfg, const OperatorHandle& op);

/// Batch mean of the training integrand at fixed base points, plain
/// evaluation.  Matches the recorded value bit for bit (same reduction).
double objective_batch(const OperatorHandle& op, const SphericalFlow& flow,
                       std::span<const SpherePoint> batch);

// ---------------------------------------------------------------------------
// Checkpoints: {"format","step","seed","flow","layout","values"}
// ---------------------------------------------------------------------------

struct Checkpoint {
  FlowSpec spec;
  std::vector<double> values;
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

void write_checkpoint(const std::filesystem::path& path, const SphericalFlow& flow,
                      std::size_t step, std::uint64_t seed);
Checkpoint read_checkpoint(const std::filesystem::path& path);
SphericalFlow flow_from_checkpoint(const Checkpoint& ck);

}  // namespace detflow
