#include <benchmark/benchmark.h>

#include "detflow/estimators.hpp"
#include "detflow/flows.hpp"
#include "detflow/operators.hpp"
#include "detflow/train.hpp"

using namespace detflow;

namespace {

SphericalFlow perturbed_flow(const FlowSpec& spec, std::uint64_t seed) {
  SphericalFlow flow = SphericalFlow::build(spec, seed);
  RngStream rs(seed + 1);
  std::vector<double> vals(flow.n_params());
  for (double& v : vals) v = 0.1 * rs.next_normal();
  flow.set_param_values(vals);
  return flow;
}

void BM_DenseMatvec(benchmark::State& state) {
  const OperatorHandle op = load_fixture("A1");
  RngStream rs(1);
  const SpherePoint s = sample_uniform(10, rs);
  std::vector<double> y(10);
  for (auto _ : state) {
    op.matvec(s.v, y);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_DenseMatvec);

void BM_ConvMatvec(benchmark::State& state) {
  const OperatorHandle op = load_fixture("conv_filter");
  RngStream rs(1);
  const SpherePoint s = sample_uniform(16, rs);
  std::vector<double> y(16);
  for (auto _ : state) {
    op.matvec(s.v, y);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_ConvMatvec);

void BM_FlowForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const SphericalFlow flow = perturbed_flow(FlowSpec::dense_default(n), 7);
  RngStream rs(2);
  const SpherePoint s0 = sample_uniform(n, rs);
  for (auto _ : state) {
    auto f = flow.forward(s0);
    benchmark::DoNotOptimize(f.logdet);
  }
}
BENCHMARK(BM_FlowForward)->Arg(3)->Arg(10)->Arg(16);

void BM_FlowLogDensity(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const SphericalFlow flow = perturbed_flow(FlowSpec::dense_default(n), 7);
  RngStream rs(2);
  const auto smp = flow.sample(rs);
  for (auto _ : state) {
    benchmark::DoNotOptimize(flow.log_density(smp.s));
  }
}
BENCHMARK(BM_FlowLogDensity)->Arg(3)->Arg(10);

void BM_McEstimate(benchmark::State& state) {
  const OperatorHandle op = load_fixture("A1");
  for (auto _ : state) {
    const EstimateReport r = mc_estimate(op, 10000, 3, 1);
    benchmark::DoNotOptimize(r.det_estimate);
  }
}
BENCHMARK(BM_McEstimate)->Unit(benchmark::kMillisecond);

void BM_TrainIteration(benchmark::State& state) {
  const OperatorHandle op = load_fixture("A1");
  TrainConfig cfg;
  cfg.operator_source = "A1";
  cfg.flow = FlowSpec::dense_default(10);
  cfg.batch_size = 256;
  cfg.eval_every = 0;
  cfg.checkpoint_every = 0;
  cfg.workers = 1;
  for (auto _ : state) {
    cfg.iterations = 1;
    const TrainResult r = train(cfg, op);
    benchmark::DoNotOptimize(r.trace.rows.back().objective);
  }
}
BENCHMARK(BM_TrainIteration)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
