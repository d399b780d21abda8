#include <doctest.h>

#include <cmath>
#include <numbers>

#include "detflow/diffgraph.hpp"
#include "detflow/flows.hpp"
#include "detflow/train.hpp"
#include "support/oracles.hpp"

using namespace detflow;

namespace {

// A store with k free scalar parameters, for primitive-level checks.
ParamStore scalar_params(std::initializer_list<double> vals) {
  ParamLayout layout;
  layout.add("p", static_cast<int>(vals.size()), 1);
  ParamStore ps = ParamStore::zeros(std::make_shared<const ParamLayout>(std::move(layout)));
  std::size_t i = 0;
  for (double v : vals) ps.values[i++] = v;
  return ps;
}

double fd_grad(const std::function<Var(Tape&)>& obj, ParamStore ps, std::size_t i,
               double h = 1e-5) {
  auto eval = [&](double x) {
    ParamStore q = ps;
    q.values[i] = x;
    GradStore g(q.size());
    Tape t(q, &g);
    return t.value(obj(t));
  };
  return oracles::central_diff(eval, ps.values[i], h);
}

void check_grads_match_fd(const std::function<Var(Tape&)>& obj, const ParamStore& ps,
                          double rel_tol = 1e-6) {
  const ValueAndGrad vg = value_and_grad(obj, ps);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double fd = fd_grad(obj, ps, i);
    const double scale = std::max({1.0, std::fabs(fd), std::fabs(vg.grads.grads[i])});
    CHECK(std::fabs(vg.grads.grads[i] - fd) <= rel_tol * scale);
  }
}

}  // namespace

TEST_CASE("square objective has exact value and gradient") {
  const ParamStore ps = scalar_params({3.0});
  const ValueAndGrad vg = value_and_grad([](Tape& t) { Var p = t.param(0); return p * p; }, ps);
  CHECK(vg.value == 9.0);
  CHECK(vg.grads.grads[0] == 6.0);
}

TEST_CASE("every scalar primitive matches central finite differences") {
  const ParamStore ps = scalar_params({0.7, -0.4, 1.3});
  auto p = [](Tape& t, std::size_t i) { return t.param(i); };

  check_grads_match_fd([&](Tape& t) { return p(t, 0) + p(t, 1) * p(t, 2); }, ps);
  check_grads_match_fd([&](Tape& t) { return p(t, 0) - p(t, 1) / p(t, 2); }, ps);
  check_grads_match_fd([&](Tape& t) { return -p(t, 0) * (p(t, 1) + 2.0); }, ps);
  check_grads_match_fd([&](Tape& t) { return sin(p(t, 0)) * cos(p(t, 1)); }, ps);
  check_grads_match_fd([&](Tape& t) { return tanh(p(t, 0) * 2.0) + exp(p(t, 1)); }, ps);
  check_grads_match_fd([&](Tape& t) { return log(p(t, 2)) + log1p(p(t, 0)); }, ps);
  check_grads_match_fd([&](Tape& t) { return sqrt(p(t, 2)) + softplus(p(t, 1)); }, ps);
  check_grads_match_fd([&](Tape& t) { return pow_c(p(t, 2), 2.5); }, ps);
  check_grads_match_fd([&](Tape& t) { return atan2(p(t, 1), p(t, 2)); }, ps);
  check_grads_match_fd([&](Tape& t) { return atan2(p(t, 0), p(t, 1)); }, ps);
}

TEST_CASE("norm and matvec nodes match finite differences") {
  const ParamStore ps = scalar_params({0.8, -1.1, 0.5});
  const OperatorHandle op = load_fixture("cover3x3");
  check_grads_match_fd(
      [&](Tape& t) {
        std::vector<Var> x{t.param(0), t.param(1), t.param(2)};
        std::vector<Var> y;
        GradCtx ctx{&t};
        ctx.matvec(op, x, y);
        return ctx.norm(y);
      },
      ps);
  // log || diag(p) s || for a fixed direction s
  const double s[3] = {0.36, -0.8, 0.48};
  check_grads_match_fd(
      [&](Tape& t) {
        std::vector<Var> y{t.param(0) * s[0], t.param(1) * s[1], t.param(2) * s[2]};
        GradCtx ctx{&t};
        return log(ctx.norm(y));
      },
      ps);
}

TEST_CASE("affine node gradient matches finite differences") {
  // two free layers: a 2x3 weight (+2 bias) applied to fixed inputs
  ParamLayout layout;
  layout.add("w", 2, 3);
  layout.add("b", 2, 1);
  ParamStore ps = ParamStore::zeros(std::make_shared<const ParamLayout>(std::move(layout)));
  RngStream rs(5);
  for (double& v : ps.values) v = rs.next_normal();

  auto obj = [](Tape& t) {
    std::vector<Var> x{t.constant(0.3), t.constant(-0.9), t.constant(1.7)};
    std::vector<Var> y;
    t.affine(0, 6, 3, 2, x, y);
    return tanh(y[0]) * y[1];
  };
  check_grads_match_fd(obj, ps);
}

TEST_CASE("gradient of a sum is the sum of gradients") {
  const ParamStore ps = scalar_params({0.9, 0.2});
  auto f1 = [](Tape& t) { return sin(t.param(0)) * t.param(1); };
  auto f2 = [](Tape& t) { return exp(t.param(1)) - t.param(0); };
  const ValueAndGrad a = value_and_grad(f1, ps);
  const ValueAndGrad b = value_and_grad(f2, ps);
  const ValueAndGrad s = value_and_grad([&](Tape& t) { return f1(t) + f2(t); }, ps);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK(std::fabs(s.grads.grads[i] - (a.grads.grads[i] + b.grads.grads[i])) <= 1e-12);
  }
}

TEST_CASE("non-finite intermediates raise DiffError naming the primitive") {
  const ParamStore ps = scalar_params({-2.0});
  CHECK_THROWS_AS(value_and_grad([](Tape& t) { return log(t.param(0)); }, ps), DiffError);
  try {
    value_and_grad([](Tape& t) { return log(t.param(0)); }, ps);
  } catch (const DiffError& e) {
    CHECK(e.primitive() == "log");
  }
  CHECK_THROWS_AS(value_and_grad([](Tape& t) { return t.param(0) / t.constant(0.0); }, ps),
                  DiffError);
}

TEST_CASE("conditioner basics") {
  ParamLayout layout;
  const Conditioner cond = Conditioner::create(layout, "c", 2, std::vector<int>{8, 8}, 3);
  ParamStore ps = ParamStore::zeros(std::make_shared<const ParamLayout>(std::move(layout)));
  RngStream rs(11);
  cond.init_values(ps, rs);
  CHECK(cond.final_layer_is_zero(ps));

  // zero final layer: output equals the final bias (here zero)
  EvalCtx ctx{&ps};
  std::vector<double> out;
  const std::vector<double> x{0.4, -0.7};
  cond.forward(ctx, x, out);
  REQUIRE(out.size() == 3);
  for (double v : out) CHECK(v == 0.0);

  // bump the final bias: output follows it exactly
  const ParamSegment* b_last = ps.layout->find("c.l2.b");
  REQUIRE(b_last != nullptr);
  ps.values[b_last->offset + 1] = 0.25;
  cond.forward(ctx, x, out);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.25);
  CHECK(!cond.final_layer_is_zero(ps));

  // deterministic init
  ParamStore ps2 = ParamStore::zeros(ps.layout);
  RngStream rs2(11);
  cond.init_values(ps2, rs2);
  const ParamSegment* w0 = ps.layout->find("c.l0.w");
  for (std::size_t i = 0; i < w0->size(); ++i) {
    CHECK(ps2.values[w0->offset + i] != 0.0);  // hidden layer is random
  }
  ParamStore ps3 = ParamStore::zeros(ps.layout);
  RngStream rs3(12);
  cond.init_values(ps3, rs3);
  bool any_diff = false;
  for (std::size_t i = 0; i < w0->size(); ++i) {
    if (ps2.values[w0->offset + i] != ps3.values[w0->offset + i]) any_diff = true;
  }
  CHECK(any_diff);

  // recorded forward matches the plain forward bit for bit
  GradStore g(ps.size());
  Tape tape(ps, &g);
  GradCtx gctx{&tape};
  std::vector<Var> xv{tape.constant(x[0]), tape.constant(x[1])};
  std::vector<Var> outv;
  cond.forward(gctx, xv, outv);
  cond.forward(ctx, x, out);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(tape.value(outv[i]) == out[i]);
}

TEST_CASE("conditioner weight perturbation moves output along the gradient") {
  ParamLayout layout;
  const Conditioner cond = Conditioner::create(layout, "c", 2, std::vector<int>{8}, 1);
  ParamStore ps = ParamStore::zeros(std::make_shared<const ParamLayout>(std::move(layout)));
  RngStream rs(3);
  for (double& v : ps.values) v = 0.3 * rs.next_normal();  // make all layers active

  const std::vector<double> x{0.9, -0.2};
  auto obj = [&](Tape& t) {
    GradCtx ctx{&t};
    std::vector<Var> xv{t.constant(x[0]), t.constant(x[1])};
    std::vector<Var> out;
    cond.forward(ctx, xv, out);
    return out[0];
  };
  const ValueAndGrad vg = value_and_grad(obj, ps);
  const double eps = 1e-6;
  for (std::size_t i : {std::size_t{0}, std::size_t{5}, ps.size() - 1}) {
    ParamStore q = ps;
    q.values[i] += eps;
    GradStore g(q.size());
    Tape t(q, &g);
    const double moved = t.value(obj(t));
    const double predicted = vg.value + eps * vg.grads.grads[i];
    CHECK(std::fabs(moved - predicted) <= 1e-9);  // O(eps^2) residual
  }
}

TEST_CASE("flow at init is the identity map") {
  for (const FlowSpec spec :
       {FlowSpec::dense_default(10), FlowSpec::dense_default(3), FlowSpec::cover_default()}) {
    const SphericalFlow flow = SphericalFlow::build(spec, 99);
    CHECK(flow.is_identity());
    RngStream rs(5);
    const SpherePoint s0 = sample_uniform(spec.n, rs);
    const auto fwd = flow.forward(s0);
    CHECK(fwd.logdet == 0.0);
    for (int i = 0; i < spec.n; ++i) CHECK(fwd.s.v[static_cast<std::size_t>(i)] == s0.v[static_cast<std::size_t>(i)]);

    // full-arithmetic path is the identity to rounding
    EvalCtx ctx{&flow.params()};
    const CylinderCoords c0 = to_cylinder(s0);
    double theta = c0.theta;
    std::vector<double> z = c0.z;
    const double ld = flow.apply_layers(ctx, theta, z);
    CHECK(std::fabs(theta - c0.theta) <= 1e-9);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::fabs(z[i] - c0.z[i]) <= 1e-9);
    CHECK(std::fabs(ld) <= 1e-9);
  }
}

TEST_CASE("same seed same params, different seed different params") {
  const FlowSpec spec = FlowSpec::dense_default(4);
  const SphericalFlow a = SphericalFlow::build(spec, 7);
  const SphericalFlow b = SphericalFlow::build(spec, 7);
  const SphericalFlow c = SphericalFlow::build(spec, 8);
  REQUIRE(a.n_params() == b.n_params());
  bool all_eq = true, any_diff = false;
  for (std::size_t i = 0; i < a.n_params(); ++i) {
    all_eq = all_eq && a.params().values[i] == b.params().values[i];
    any_diff = any_diff || a.params().values[i] != c.params().values[i];
  }
  CHECK(all_eq);
  CHECK(any_diff);
}

TEST_CASE("full objective gradient matches finite differences (n=3, one coupling layer)") {
  FlowSpec spec = FlowSpec::dense_default(3);
  spec.n_layers = 1;
  spec.n_bins = 8;
  spec.n_centers = 4;
  spec.hidden = {16};
  SphericalFlow flow = SphericalFlow::build(spec, 21);
  // activate every layer, including the conditioner outputs
  {
    RngStream rs(77);
    std::vector<double> vals(flow.n_params());
    for (double& v : vals) v = 0.4 * rs.next_normal();
    flow.set_param_values(vals);
  }
  const OperatorHandle op = load_fixture("cover3x3");
  RngStream rs(31);
  const SpherePoint s0 = sample_uniform(3, rs);
  const CylinderCoords c0 = to_cylinder(s0);

  GradStore grads(flow.n_params());
  Tape tape(flow.params(), &grads);
  GradCtx gctx{&tape};
  const Var root = kl_integrand(gctx, flow, op, c0);
  const double value = tape.value(root);
  tape.backward(root);

  // plain evaluation agrees bit for bit
  EvalCtx ectx{&flow.params()};
  CHECK(kl_integrand(ectx, flow, op, c0) == value);

  auto eval_at = [&](std::size_t i, double x) {
    SphericalFlow f2 = flow;
    std::vector<double> vals(flow.params().values);
    vals[i] = x;
    f2.set_param_values(vals);
    EvalCtx ctx{&f2.params()};
    return kl_integrand(ctx, f2, op, c0);
  };
  for (std::size_t i = 0; i < flow.n_params(); ++i) {
    const double x = flow.params().values[i];
    const double fd = oracles::central_diff([&](double v) { return eval_at(i, v); }, x);
    const double scale = std::max({1.0, std::fabs(fd), std::fabs(grads.grads[i])});
    CHECK(std::fabs(grads.grads[i] - fd) <= 1e-4 * scale);
  }
}

TEST_CASE("zero-initialized flow objective equals the plain n E[log||A s0||]") {
  const OperatorHandle op = load_fixture("A1");
  const SphericalFlow flow = SphericalFlow::build(FlowSpec::dense_default(10), 3);
  RngStream rs(13);
  std::vector<SpherePoint> batch;
  for (int i = 0; i < 64; ++i) batch.push_back(sample_uniform(10, rs));
  const double obj = objective_batch(op, flow, batch);

  double want = 0.0;
  std::vector<double> av(10);
  for (const SpherePoint& s : batch) {
    op.matvec(s.v, av);
    want += 10.0 * std::log(stable_norm(av));
  }
  want /= static_cast<double>(batch.size());
  CHECK(std::fabs(obj - want) <= 1e-12 * std::max(1.0, std::fabs(want)));
}
