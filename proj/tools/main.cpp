// detflow: spherical Monte Carlo and variational determinant estimation.
//
// Subcommands:
//   estimate   run the MC and/or VDE estimators over a sample grid
//   train      fit a spherical flow proposal to an operator
//   table      reproduce the benchmark table protocols (table1 / table2)
//
// Exit codes: 0 success, 2 missing artifact (e.g. checkpoint), 3 invalid or
// singular operator, 4 training divergence.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "detflow/estimators.hpp"
#include "detflow/flows.hpp"
#include "detflow/operators.hpp"
#include "detflow/parallel.hpp"
#include "detflow/train.hpp"

namespace fs = std::filesystem;
using namespace detflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitMissingArtifact = 2;
constexpr int kExitInvalidOperator = 3;
constexpr int kExitDivergence = 4;

struct CliError {
  int code;
  std::string message;
};

std::uint64_t master_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("DETFLOW_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return flag_seed;
}

std::vector<std::size_t> parse_samples(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string tok = text.substr(pos, comma - pos);
    const double v = std::stod(tok);
    if (!(v >= 1.0)) throw CliError{kExitInvalidOperator, "bad sample count '" + tok + "'"};
    out.push_back(static_cast<std::size_t>(v));
    pos = comma + 1;
  }
  if (out.empty()) throw CliError{kExitInvalidOperator, "empty sample grid"};
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i] <= out[i - 1]) throw CliError{kExitInvalidOperator, "sample grid must ascend"};
  }
  return out;
}

OperatorHandle open_operator(const std::string& source) {
  try {
    return resolve_operator_source(source);
  } catch (const Error& e) {
    throw CliError{kExitInvalidOperator, e.what()};
  }
}

FlowSpec default_flow_for(const std::string& source, int n) {
  if (source == "cover3x3") return FlowSpec::cover_default();
  return FlowSpec::dense_default(n);
}

void apply_profile(TrainConfig& cfg, const std::string& profile) {
  if (profile == "desk") {
    cfg.iterations = 2000;
    cfg.batch_size = 256;
    cfg.eval_every = 200;
    cfg.checkpoint_every = 500;
  } else if (profile == "paper-dense") {
    cfg.iterations = 10000;
    cfg.batch_size = 1024;
    cfg.eval_every = 500;
    cfg.checkpoint_every = 1000;
  } else if (profile == "paper-conv") {
    cfg.iterations = 40000;
    cfg.batch_size = 1024;
    cfg.eval_every = 1000;
    cfg.checkpoint_every = 2000;
  } else {
    throw CliError{kExitInvalidOperator, "unknown profile '" + profile +
                                             "' (expected desk, paper-dense, or paper-conv)"};
  }
}

SphericalFlow load_flow_checkpoint(const fs::path& path, int want_dim) {
  if (!fs::exists(path)) {
    throw CliError{kExitMissingArtifact, "checkpoint not found: " + path.string()};
  }
  const Checkpoint ck = read_checkpoint(path);
  SphericalFlow flow = flow_from_checkpoint(ck);
  if (flow.dim() != want_dim) {
    throw CliError{kExitInvalidOperator,
                   "checkpoint dimension " + std::to_string(flow.dim()) +
                       " does not match operator dimension " + std::to_string(want_dim)};
  }
  return flow;
}

std::string csv_header() {
  return "fixture,method,N,seed,det_estimate,log_det_estimate,rel_abs_diff,ess";
}

void append_csv_row(std::ostream& os, const std::string& fixture, const std::string& method,
                    const EstimateReport& r) {
  os << fixture << ',' << method << ',' << r.n_samples << ',' << r.seed << ','
     << fmt_double(r.det_estimate) << ',' << fmt_double(r.log_det_estimate) << ','
     << (r.rel_abs_diff ? fmt_double(*r.rel_abs_diff) : std::string()) << ',' << fmt_double(r.ess)
     << '\n';
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

struct EstimateArgs {
  std::string fixture;
  std::string operator_file;
  std::string method = "mc";
  std::string samples = "1e2,1e3,1e4,1e5";
  std::string checkpoint;
  std::string out = "results.csv";
  std::uint64_t seed = 7;
  std::size_t trials = 1;
  unsigned workers = 0;
};

int run_estimate(const EstimateArgs& args) {
  const std::string source = args.fixture.empty() ? args.operator_file : args.fixture;
  if (source.empty()) throw CliError{kExitInvalidOperator, "need --fixture or --operator"};
  const OperatorHandle op = open_operator(source);
  const std::uint64_t seed = master_seed(args.seed);
  const std::vector<std::size_t> grid = parse_samples(args.samples);
  const unsigned workers = args.workers == 0 ? default_workers() : args.workers;

  const bool want_mc = args.method == "mc" || args.method == "both";
  const bool want_vde = args.method == "vde" || args.method == "both";
  if (!want_mc && !want_vde) {
    throw CliError{kExitInvalidOperator, "unknown method '" + args.method + "'"};
  }

  std::optional<SphericalFlow> flow;
  if (want_vde) {
    if (args.checkpoint.empty()) {
      throw CliError{kExitMissingArtifact, "--method vde requires --checkpoint"};
    }
    flow = load_flow_checkpoint(args.checkpoint, op.dim());
  }

  std::ofstream csv(args.out);
  if (!csv) throw CliError{kExitInvalidOperator, "cannot write " + args.out};
  csv << csv_header() << '\n';

  const double truth = oracle_abs_det(op);
  std::cout << "operator " << source << ": oracle |det| = " << truth
            << ", log|det| = " << std::log(truth) << "\n\n";
  std::cout << "method          N      det_estimate    rel_abs_diff    ess\n";

  for (const std::size_t N : grid) {
    for (int m = 0; m < 2; ++m) {
      const bool is_vde = m == 1;
      if ((is_vde && !want_vde) || (!is_vde && !want_mc)) continue;
      for (std::size_t t = 0; t < args.trials; ++t) {
        const std::uint64_t s = RngStream::derive(seed, 0xCE11, N, t).next_u64();
        const EstimateReport rep =
            is_vde ? vde_estimate(op, *flow, N, s, workers) : mc_estimate(op, N, s, workers);
        append_csv_row(csv, source, is_vde ? "vde" : "mc", rep);
        if (t == 0) {
          std::printf("%-6s %10zu   %14.6g  %12.4g  %10.1f\n", is_vde ? "vde" : "mc", N,
                      rep.det_estimate, rep.rel_abs_diff.value_or(0.0), rep.ess);
        }
      }
    }
  }
  std::cout << "\nwrote " << args.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string fixture;
  std::string operator_file;
  std::string spec_file;
  std::string flow_file;
  std::string profile = "desk";
  std::string out = "out";
  std::uint64_t seed = 1;
  unsigned workers = 0;
  std::size_t iterations = 0;  // 0 = keep profile value
  std::size_t batch = 0;
  double lr = 0.0;
};

int run_train(const TrainArgs& args) {
  TrainConfig cfg;
  bool flow_from_spec = false;
  if (!args.spec_file.empty()) {
    std::ifstream in(args.spec_file);
    if (!in) throw CliError{kExitMissingArtifact, "cannot open spec " + args.spec_file};
    nlohmann::json j;
    in >> j;
    cfg = TrainConfig::from_json(j);
    flow_from_spec = true;
  } else {
    const std::string source = args.fixture.empty() ? args.operator_file : args.fixture;
    if (source.empty()) {
      throw CliError{kExitInvalidOperator, "need --fixture, --operator or --spec"};
    }
    cfg.operator_source = source;
    apply_profile(cfg, args.profile);
  }
  const OperatorHandle op = open_operator(cfg.operator_source);

  if (!args.flow_file.empty()) {
    std::ifstream in(args.flow_file);
    if (!in) throw CliError{kExitMissingArtifact, "cannot open flow spec " + args.flow_file};
    nlohmann::json j;
    in >> j;
    cfg.flow = FlowSpec::from_json(j);
  } else if (!flow_from_spec) {
    cfg.flow = default_flow_for(cfg.operator_source, op.dim());
  }
  if (args.iterations != 0) cfg.iterations = args.iterations;
  if (args.batch != 0) cfg.batch_size = args.batch;
  if (args.lr > 0.0) cfg.learning_rate = args.lr;
  cfg.seed = master_seed(args.seed);
  cfg.workers = args.workers;
  cfg.out_dir = args.out;

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  try {
    res = train(cfg, op);
  } catch (const SingularOperatorError& e) {
    throw CliError{kExitInvalidOperator, e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream tr(cfg.out_dir / "trace.csv");
    res.trace.write_csv(tr);
    write_checkpoint(cfg.out_dir / "checkpoint.json", res.flow, res.iterations_run, cfg.seed);
    std::ofstream cfgout(cfg.out_dir / "config.json");
    cfgout << cfg.to_json().dump(2) << '\n';
    std::ofstream sum(cfg.out_dir / "summary.txt");
    sum << "operator: " << cfg.operator_source << '\n'
        << "outcome: " << outcome_name(res.outcome) << '\n'
        << "iterations: " << res.iterations_run << '\n'
        << "final objective: " << (res.trace.rows.empty() ? 0.0 : res.trace.rows.back().objective)
        << '\n'
        << "oracle log|det|: " << oracle_log_abs_det(op) << '\n'
        << "wall seconds: " << secs << '\n';
  }
  std::cout << "outcome: " << outcome_name(res.outcome) << " after " << res.iterations_run
            << " iterations (" << secs << " s); artifacts in " << cfg.out_dir.string() << "\n";
  if (res.outcome != TrainOutcome::completed) return kExitDivergence;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// table
// ---------------------------------------------------------------------------

struct TableArgs {
  std::string which;
  std::string profile = "desk";
  std::string out = "out";
  std::uint64_t seed = 1;
  std::size_t trials = 1;
  bool train_first = false;
  unsigned workers = 0;
};

SphericalFlow ensure_trained(const TableArgs& args, const std::string& fixture,
                             const OperatorHandle& op) {
  const fs::path ck_path = fs::path(args.out) / ("ck_" + fixture + ".json");
  if (!fs::exists(ck_path)) {
    if (!args.train_first) {
      throw CliError{kExitMissingArtifact,
                     "checkpoint " + ck_path.string() + " missing (pass --train-first)"};
    }
    TrainConfig cfg;
    cfg.operator_source = fixture;
    apply_profile(cfg, args.profile);
    cfg.flow = default_flow_for(fixture, op.dim());
    cfg.seed = master_seed(args.seed);
    cfg.workers = args.workers;
    std::cout << "training " << fixture << " (" << args.profile << ", " << cfg.iterations
              << " iters, batch " << cfg.batch_size << ") ...\n";
    TrainResult res = train(cfg, op);
    if (res.outcome != TrainOutcome::completed) {
      throw CliError{kExitDivergence,
                     "training " + fixture + " aborted: " + std::string(outcome_name(res.outcome))};
    }
    fs::create_directories(args.out);
    write_checkpoint(ck_path, res.flow, res.iterations_run, cfg.seed);
    return res.flow;
  }
  return load_flow_checkpoint(ck_path, op.dim());
}

int run_table1(const TableArgs& args) {
  const std::vector<std::string> fixtures{"A1", "A2", "A3", "A4", "A5"};
  const std::vector<std::size_t> grid{100, 1000, 10000, 100000};
  const std::uint64_t seed = master_seed(args.seed);
  const unsigned workers = args.workers == 0 ? default_workers() : args.workers;

  fs::create_directories(args.out);
  std::ofstream csv(fs::path(args.out) / "results.csv");
  csv << csv_header() << '\n';

  std::vector<std::vector<double>> vde_cells(grid.size()), mc_cells(grid.size());
  for (const std::string& fx : fixtures) {
    const OperatorHandle op = open_operator(fx);
    const SphericalFlow flow = ensure_trained(args, fx, op);
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
      const std::size_t N = grid[gi];
      for (int m = 0; m < 2; ++m) {
        const bool is_vde = m == 1;
        const auto one_trial = [&](std::size_t t) {
          const std::uint64_t s =
              RngStream::derive(seed, is_vde ? 0x7AB1E1 : 0x7AB1E0, N, t).next_u64();
          const EstimateReport rep =
              is_vde ? vde_estimate(op, flow, N, s, workers) : mc_estimate(op, N, s, workers);
          append_csv_row(csv, fx, is_vde ? "vde" : "mc", rep);
          return rep.rel_abs_diff.value_or(0.0);
        };
        const double cell =
            args.trials >= 2 ? repeated_trial_stats(one_trial, args.trials).first : one_trial(0);
        (is_vde ? vde_cells : mc_cells)[gi].push_back(cell);
      }
    }
  }

  const auto row_stats = [](const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return std::pair<double, double>(mean, std::sqrt(ss / static_cast<double>(xs.size() - 1)));
  };

  std::ostringstream table;
  table << "rel. abs. diff of det (mean +- std over " << fixtures.size() << " matrices)\n";
  table << "samples:  ";
  for (std::size_t N : grid) table << std::setw(18) << N;
  table << "\nVDE det.: ";
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    const auto [m, s] = row_stats(vde_cells[gi]);
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(1) << 100.0 * m << " +- " << 100.0 * s << "%";
    table << std::setw(18) << cell.str();
  }
  table << "\nMC det.:  ";
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    const auto [m, s] = row_stats(mc_cells[gi]);
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(1) << 100.0 * m << " +- " << 100.0 * s << "%";
    table << std::setw(18) << cell.str();
  }
  table << '\n';

  std::cout << table.str();
  std::ofstream sum(fs::path(args.out) / "summary.txt");
  sum << table.str();
  std::cout << "wrote " << (fs::path(args.out) / "results.csv").string() << "\n";
  return kExitOk;
}

int run_table2(const TableArgs& args) {
  const std::string fx = "conv16";
  const std::vector<std::size_t> grid{100, 1000, 10000, 100000};
  const std::uint64_t seed = master_seed(args.seed);
  const unsigned workers = args.workers == 0 ? default_workers() : args.workers;

  const OperatorHandle op = open_operator(fx);
  const SphericalFlow flow = ensure_trained(args, fx, op);
  const double truth = oracle_abs_det(op);
  const double truth_log = std::log(truth);

  fs::create_directories(args.out);
  std::ofstream csv(fs::path(args.out) / "results.csv");
  csv << csv_header() << '\n';

  std::vector<EstimateReport> vde_reps, mc_reps;
  for (const std::size_t N : grid) {
    const std::uint64_t sv = RngStream::derive(seed, 0x7AB1E3, N).next_u64();
    const std::uint64_t sm = RngStream::derive(seed, 0x7AB1E2, N).next_u64();
    vde_reps.push_back(vde_estimate(op, flow, N, sv, workers));
    mc_reps.push_back(mc_estimate(op, N, sm, workers));
    append_csv_row(csv, fx, "vde", vde_reps.back());
    append_csv_row(csv, fx, "mc", mc_reps.back());
  }

  // the KL-bound reading of the log-determinant, reported alongside the
  // importance-weighted one
  const double kl_log_det =
      kl_bound_estimate(op, flow, 20000, RngStream::derive(seed, 0x7AB1E4).next_u64(), workers);

  std::ostringstream table;
  table << std::fixed << std::setprecision(2);
  table << "samples:        ";
  for (std::size_t N : grid) table << std::setw(12) << N;
  table << std::setw(18) << "true (log) det";
  table << "\nVDE det.:       ";
  for (const auto& r : vde_reps) table << std::setw(12) << r.det_estimate;
  table << std::setw(14) << truth;
  table << "\nMC det.:        ";
  for (const auto& r : mc_reps) table << std::setw(12) << r.det_estimate;
  table << "\nVDE log det.:   ";
  for (const auto& r : vde_reps) table << std::setw(12) << r.log_det_estimate;
  table << std::setw(14) << truth_log;
  table << "\nMC log det.:    ";
  for (const auto& r : mc_reps) table << std::setw(12) << r.log_det_estimate;
  table << "\nVDE rel diff:   ";
  for (const auto& r : vde_reps) table << std::setw(11) << 100.0 * r.rel_abs_diff.value_or(0.0) << "%";
  table << "\nMC rel diff:    ";
  for (const auto& r : mc_reps) table << std::setw(11) << 100.0 * r.rel_abs_diff.value_or(0.0) << "%";
  table << "\nKL-bound log det: " << kl_log_det << " (upper bound; tight when trained)\n";

  std::cout << table.str();
  std::ofstream sum(fs::path(args.out) / "summary.txt");
  sum << table.str();

  // figure data: estimates and relative differences vs N, intended log-log
  {
    std::ofstream fa(fs::path(args.out) / "fig2a.csv");
    fa << "# determinant estimates vs sample count; both axes log-scale\n";
    fa << "N,vde_det,mc_det,true_det\n";
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
      fa << grid[gi] << ',' << fmt_double(vde_reps[gi].det_estimate) << ','
         << fmt_double(mc_reps[gi].det_estimate) << ',' << fmt_double(truth) << '\n';
    }
    std::ofstream fb(fs::path(args.out) / "fig2b.csv");
    fb << "# relative abs. difference vs sample count; both axes log-scale\n";
    fb << "N,vde_rel_diff,mc_rel_diff\n";
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
      fb << grid[gi] << ',' << fmt_double(vde_reps[gi].rel_abs_diff.value_or(0.0)) << ','
         << fmt_double(mc_reps[gi].rel_abs_diff.value_or(0.0)) << '\n';
    }
  }
  std::cout << "wrote " << (fs::path(args.out) / "results.csv").string()
            << ", fig2a.csv, fig2b.csv\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"determinant estimation with spherical flows"};
  app.require_subcommand(1);

  EstimateArgs est;
  CLI::App* cmd_est = app.add_subcommand("estimate", "run estimators over a sample grid");
  cmd_est->add_option("--fixture", est.fixture,
                      "embedded fixture (A1..A5, cover3x3, conv16, identityN)");
  cmd_est->add_option("--operator", est.operator_file, "operator JSON file");
  cmd_est->add_option("--method", est.method, "mc | vde | both");
  cmd_est->add_option("--samples", est.samples, "sample grid, e.g. 1e3 or 1e2,1e3,1e4");
  cmd_est->add_option("--checkpoint", est.checkpoint, "flow checkpoint (for vde)");
  cmd_est->add_option("--seed", est.seed, "master seed (DETFLOW_SEED overrides)");
  cmd_est->add_option("--trials", est.trials, "independent trials per cell");
  cmd_est->add_option("--out", est.out, "output CSV path");
  cmd_est->add_option("--workers", est.workers, "worker threads (0 = auto)");

  TrainArgs tr;
  CLI::App* cmd_tr = app.add_subcommand("train", "train a flow proposal");
  cmd_tr->add_option("--fixture", tr.fixture, "embedded fixture name");
  cmd_tr->add_option("--operator", tr.operator_file, "operator JSON file");
  cmd_tr->add_option("--spec", tr.spec_file, "experiment spec JSON (overrides most flags)");
  cmd_tr->add_option("--flow", tr.flow_file, "flow architecture JSON");
  cmd_tr->add_option("--profile", tr.profile, "desk | paper-dense | paper-conv");
  cmd_tr->add_option("--iterations", tr.iterations, "override profile iteration count");
  cmd_tr->add_option("--batch", tr.batch, "override profile batch size");
  cmd_tr->add_option("--lr", tr.lr, "override learning rate");
  cmd_tr->add_option("--seed", tr.seed, "master seed (DETFLOW_SEED overrides)");
  cmd_tr->add_option("--out", tr.out, "output directory");
  cmd_tr->add_option("--workers", tr.workers, "worker threads (0 = auto)");

  TableArgs tb;
  CLI::App* cmd_tb = app.add_subcommand("table", "reproduce a benchmark table");
  cmd_tb->add_option("which", tb.which, "table1 | table2")->required();
  cmd_tb->add_option("--profile", tb.profile, "training profile for --train-first");
  cmd_tb->add_option("--trials", tb.trials, "estimator trials per cell");
  cmd_tb->add_option("--seed", tb.seed, "master seed (DETFLOW_SEED overrides)");
  cmd_tb->add_option("--out", tb.out, "output directory (checkpoints + CSVs)");
  cmd_tb->add_option("--workers", tb.workers, "worker threads (0 = auto)");
  cmd_tb->add_flag("--train-first", tb.train_first, "train missing checkpoints");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_est->parsed()) return run_estimate(est);
    if (cmd_tr->parsed()) return run_train(tr);
    if (cmd_tb->parsed()) {
      if (tb.which == "table1") return run_table1(tb);
      if (tb.which == "table2") return run_table2(tb);
      throw CliError{kExitInvalidOperator, "unknown table '" + tb.which + "'"};
    }
  } catch (const CliError& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const SingularOperatorError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalidOperator;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalidOperator;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
