#include "detflow/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

#include "detflow/parallel.hpp"
#include "detflow/rng.hpp"

namespace detflow {

namespace {

constexpr std::size_t kTrainBlock = 64;
constexpr int kPoleRetries = 16;
constexpr double kDivergenceMargin = 10.0;   // nats above the initial objective
constexpr int kDivergencePatience = 100;     // consecutive iterations

std::size_t block_count(std::size_t batch) { return (batch + kTrainBlock - 1) / kTrainBlock; }

}  // namespace

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"name", name},
                        {"operator", operator_source},
                        {"flow", flow.to_json()},
                        {"iterations", iterations},
                        {"batch_size", batch_size},
                        {"learning_rate", learning_rate},
                        {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
                        {"grad_clip", grad_clip},
                        {"seed", seed},
                        {"eval_every", eval_every},
                        {"eval_kl_samples", eval_kl_samples},
                        {"eval_vde_samples", eval_vde_samples},
                        {"checkpoint_every", checkpoint_every},
                        {"workers", workers}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.name = j.value("name", c.name);
    c.operator_source = j.at("operator").get<std::string>();
    c.flow = FlowSpec::from_json(j.at("flow"));
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("adam")) {
      const auto& a = j["adam"];
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_kl_samples = j.value("eval_kl_samples", c.eval_kl_samples);
    c.eval_vde_samples = j.value("eval_vde_samples", c.eval_vde_samples);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.workers = j.value("workers", c.workers);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config JSON: ") + e.what());
  }
  if (c.iterations < 1 || c.batch_size < 1 || !(c.learning_rate > 0.0)) {
    throw ConfigError("train config: iterations/batch_size must be >= 1, learning rate > 0");
  }
  return c;
}

void TrainTrace::write_csv(std::ostream& os) const {
  os << "iter,objective,grad_norm,elapsed_ms,eval_kl_bound,eval_vde_rel_diff\n";
  for (const TraceRow& r : rows) {
    os << r.iter << ',' << fmt_double(r.objective) << ',' << fmt_double(r.grad_norm) << ','
       << fmt_double(r.elapsed_ms) << ',';
    if (r.has_eval) {
      os << fmt_double(r.eval_kl_bound) << ',' << fmt_double(r.eval_vde_rel_diff);
    } else {
      os << ',';
    }
    os << '\n';
  }
}

std::string_view outcome_name(TrainOutcome o) {
  switch (o) {
    case TrainOutcome::completed: return "completed";
    case TrainOutcome::aborted_non_finite: return "aborted_non_finite";
    case TrainOutcome::aborted_divergence: return "aborted_divergence";
  }
  return "?";
}

double objective_batch(const OperatorHandle& op, const SphericalFlow& flow,
                       std::span<const SpherePoint> batch) {
  if (batch.empty()) throw EstimatorError("objective_batch: empty batch");
  const std::size_t nb = block_count(batch.size());
  std::vector<double> parts(nb, 0.0);
  EvalCtx ctx{&flow.params()};
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * kTrainBlock;
    const std::size_t hi = std::min(batch.size(), lo + kTrainBlock);
    double local = 0.0;
    for (std::size_t j = lo; j < hi; ++j) {
      const CylinderCoords c0 = to_cylinder(batch[j]);
      local += kl_integrand(ctx, flow, op, c0);
    }
    parts[b] = local;
  }
  double sum = 0.0;
  for (double p : parts) sum += p;
  return sum / static_cast<double>(batch.size());
}

TrainResult train(const TrainConfig& cfg, const OperatorHandle& op) {
  if (cfg.iterations < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0)) {
    throw ConfigError("train: iterations/batch_size must be >= 1, learning rate > 0");
  }
  const int n = op.dim();
  if (cfg.flow.n != n) {
    throw ConfigError("train: flow dimension " + std::to_string(cfg.flow.n) +
                      " does not match operator dimension " + std::to_string(n));
  }
  oracle_log_abs_det(op);  // refuses singular operators

  TrainResult res;
  res.flow = SphericalFlow::build(cfg.flow, cfg.seed);
  SphericalFlow& flow = res.flow;

  const std::size_t P = flow.n_params();
  std::vector<double> adam_m(P, 0.0), adam_v(P, 0.0);
  std::vector<double> params(flow.params().values);
  std::vector<double> ckpt_values = params;
  std::size_t ckpt_iter = 0;

  const std::size_t nb = block_count(cfg.batch_size);
  std::vector<GradStore> parts;
  parts.reserve(nb);
  for (std::size_t b = 0; b < nb; ++b) parts.emplace_back(P);
  std::vector<double> obj_parts(nb, 0.0);
  GradStore total(P);

  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  double initial_obj = 0.0;
  int divergence_run = 0;
  double beta1_t = 1.0, beta2_t = 1.0;

  const auto t0 = std::chrono::steady_clock::now();
  const auto write_files = [&](std::size_t step) {
    if (cfg.out_dir.empty()) return;
    std::filesystem::create_directories(cfg.out_dir);
    write_checkpoint(cfg.out_dir / "checkpoint.json", flow, step, cfg.seed);
    std::ofstream tr(cfg.out_dir / "trace.csv");
    res.trace.write_csv(tr);
  };

  res.outcome = TrainOutcome::completed;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (auto& p : parts) p.reset();
    std::fill(obj_parts.begin(), obj_parts.end(), 0.0);

    bool non_finite = false;
    try {
      parallel_blocks(nb, cfg.workers, [&](std::size_t b) {
        Tape tape(flow.params(), &parts[b]);
        GradCtx ctx{&tape};
        double local = 0.0;
        const std::size_t lo = b * kTrainBlock;
        const std::size_t hi = std::min(cfg.batch_size, lo + kTrainBlock);
        for (std::size_t j = lo; j < hi; ++j) {
          RngStream rs = RngStream::derive(cfg.seed, rng_tag::kTrainBatch, it, j);
          bool done = false;
          for (int attempt = 0; attempt < kPoleRetries && !done; ++attempt) {
            const SpherePoint s0 = sample_uniform(n, rs);
            try {
              const CylinderCoords c0 = to_cylinder(s0);
              const Var root = kl_integrand(ctx, flow, op, c0);
              local += tape.value(root);
              tape.backward(root, inv_batch);
              done = true;
            } catch (const PoleError&) {
              // resample this element
            }
            tape.rewind();
          }
          if (!done) {
            throw EstimatorError("train: pole-retry budget exceeded at iteration " +
                                 std::to_string(it));
          }
        }
        obj_parts[b] = local;
      });
    } catch (const DiffError&) {
      non_finite = true;
    } catch (const EstimatorError&) {
      non_finite = true;  // pole-retry exhaustion: the flow degenerated
    }

    double obj = 0.0;
    for (double p : obj_parts) obj += p;
    obj *= inv_batch;

    if (non_finite || !std::isfinite(obj)) {
      res.outcome = TrainOutcome::aborted_non_finite;
      break;
    }

    total.reset();
    for (const GradStore& p : parts) {
      for (std::size_t i = 0; i < P; ++i) total.grads[i] += p.grads[i];
    }

    double gn2 = 0.0;
    for (double g : total.grads) gn2 += g * g;
    const double grad_norm = std::sqrt(gn2);
    if (!std::isfinite(grad_norm)) {
      res.outcome = TrainOutcome::aborted_non_finite;
      break;
    }
    const double clip_scale = grad_norm > cfg.grad_clip ? cfg.grad_clip / grad_norm : 1.0;

    // Adam with bias correction.
    beta1_t *= cfg.adam.beta1;
    beta2_t *= cfg.adam.beta2;
    const double corr1 = 1.0 - beta1_t;
    const double corr2 = 1.0 - beta2_t;
    for (std::size_t i = 0; i < P; ++i) {
      const double g = total.grads[i] * clip_scale;
      adam_m[i] = cfg.adam.beta1 * adam_m[i] + (1.0 - cfg.adam.beta1) * g;
      adam_v[i] = cfg.adam.beta2 * adam_v[i] + (1.0 - cfg.adam.beta2) * g * g;
      const double mhat = adam_m[i] / corr1;
      const double vhat = adam_v[i] / corr2;
      params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam.eps);
    }
    flow.set_param_values(params);

    TraceRow row;
    row.iter = it;
    row.objective = obj;
    row.grad_norm = grad_norm;
    row.elapsed_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();

    if (it == 0) initial_obj = obj;
    if (obj > initial_obj + kDivergenceMargin) {
      ++divergence_run;
    } else {
      divergence_run = 0;
    }

    const bool last = it + 1 == cfg.iterations;
    if (cfg.eval_every != 0 && ((it + 1) % cfg.eval_every == 0 || last)) {
      const std::uint64_t ek = RngStream::derive(cfg.seed, rng_tag::kTrainEval, it).next_u64();
      try {
        row.has_eval = true;
        row.eval_kl_bound = kl_bound_estimate(op, flow, cfg.eval_kl_samples, ek, cfg.workers);
        const EstimateReport ev =
            vde_estimate(op, flow, cfg.eval_vde_samples, ek ^ 0x5555555555555555ULL, cfg.workers);
        row.eval_vde_rel_diff = ev.rel_abs_diff.value_or(0.0);
      } catch (const Error&) {
        res.trace.rows.push_back(row);
        res.iterations_run = it + 1;
        res.outcome = TrainOutcome::aborted_non_finite;
        break;
      }
    }
    res.trace.rows.push_back(row);
    res.iterations_run = it + 1;

    if (divergence_run >= kDivergencePatience) {
      res.outcome = TrainOutcome::aborted_divergence;
      break;
    }

    if (cfg.checkpoint_every != 0 && ((it + 1) % cfg.checkpoint_every == 0 || last)) {
      ckpt_values = params;
      ckpt_iter = it + 1;
      write_files(it + 1);
    }
  }

  if (res.outcome != TrainOutcome::completed) {
    flow.set_param_values(ckpt_values);  // roll back to the last good checkpoint
    write_files(ckpt_iter);
  }
  res.checkpoint_iter = ckpt_iter;
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void write_checkpoint(const std::filesystem::path& path, const SphericalFlow& flow,
                      std::size_t step, std::uint64_t seed) {
  nlohmann::json layout = nlohmann::json::array();
  for (const ParamSegment& s : flow.params().layout->segments()) {
    layout.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  }
  nlohmann::json j{{"format", "detflow-checkpoint-v1"},
                   {"step", step},
                   {"seed", seed},
                   {"flow", flow.spec().to_json()},
                   {"layout", layout},
                   {"values", flow.params().values}};
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint: " + path.string());
  out << j.dump() << '\n';
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint parse error in " + path.string() + ": " + e.what());
  }
  Checkpoint ck;
  try {
    if (j.at("format").get<std::string>() != "detflow-checkpoint-v1") {
      throw ConfigError("checkpoint " + path.string() + ": unknown format");
    }
    ck.spec = FlowSpec::from_json(j.at("flow"));
    ck.step = j.at("step").get<std::size_t>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.values = j.at("values").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + ": " + e.what());
  }
  return ck;
}

SphericalFlow flow_from_checkpoint(const Checkpoint& ck) {
  return SphericalFlow::from_params(ck.spec, ck.values);
}

}  // namespace detflow
