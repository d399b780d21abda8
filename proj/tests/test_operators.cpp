#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "detflow/operators.hpp"
#include "detflow/rng.hpp"
#include "support/oracles.hpp"

using namespace detflow;

namespace {

DenseOperator random_dense(int n, std::uint64_t seed) {
  RngStream rs(seed);
  std::vector<double> a(static_cast<std::size_t>(n) * n);
  for (double& v : a) v = rs.next_normal();
  return DenseOperator(n, std::move(a));
}

std::vector<double> random_vec(int n, std::uint64_t seed) {
  RngStream rs(seed);
  std::vector<double> x(static_cast<std::size_t>(n));
  for (double& v : x) v = rs.next_normal();
  return x;
}

}  // namespace

TEST_CASE("matvec identity and diagonal") {
  const OperatorHandle id(DenseOperator::identity(3));
  const std::vector<double> x{1.0, 2.0, 3.0};
  const auto y = id.matvec(x);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 2.0);
  CHECK(y[2] == 3.0);

  const double d[] = {2.0, 3.0};
  const OperatorHandle diag(DenseOperator::diagonal(d));
  const std::vector<double> ones{1.0, 1.0};
  const auto z = diag.matvec(ones);
  CHECK(z[0] == 2.0);
  CHECK(z[1] == 3.0);
}

TEST_CASE("matvec rejects bad input") {
  const OperatorHandle id(DenseOperator::identity(3));
  std::vector<double> wrong{1.0, 2.0};
  CHECK_THROWS_AS((void)id.matvec(wrong), DimensionError);
  std::vector<double> nan{1.0, std::nan(""), 0.0};
  CHECK_THROWS_AS((void)id.matvec(nan), DimensionError);
  CHECK_THROWS_AS(DenseOperator(2, {1.0, 2.0, 3.0}), DimensionError);
}

TEST_CASE("conv one-hot column matches sliding-window oracle") {
  const OperatorHandle conv = load_fixture("conv_filter");
  const ConvOperator* c = conv.as_conv();
  REQUIRE(c != nullptr);
  CHECK(c->filter()[4] == doctest::Approx(1.393));  // center tap

  // one-hot at pixel (1,1)
  std::vector<double> img(16, 0.0);
  img[1 * 4 + 1] = 1.0;
  const auto got = conv.matvec(img);
  const auto want = oracles::correlate2d(std::span<const double, 9>(c->filter()), img, 4);
  for (int i = 0; i < 16; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));

  // random images too
  for (int rep = 0; rep < 10; ++rep) {
    const auto x = random_vec(16, 100 + rep);
    const auto a = conv.matvec(x);
    const auto b = oracles::correlate2d(std::span<const double, 9>(c->filter()), x, 4);
    for (int i = 0; i < 16; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("matvec linearity") {
  for (int rep = 0; rep < 20; ++rep) {
    const DenseOperator a = random_dense(6, 7 + rep);
    const OperatorHandle op(a);
    RngStream rs(55 + rep);
    const double alpha = rs.next_normal();
    const double beta = rs.next_normal();
    const auto x = random_vec(6, 200 + rep);
    const auto y = random_vec(6, 300 + rep);
    std::vector<double> mix(6);
    for (int i = 0; i < 6; ++i) mix[i] = alpha * x[i] + beta * y[i];
    const auto lhs = op.matvec(mix);
    const auto ax = op.matvec(x);
    const auto ay = op.matvec(y);
    for (int i = 0; i < 6; ++i) {
      const double rhs = alpha * ax[i] + beta * ay[i];
      CHECK(std::fabs(lhs[i] - rhs) <= 1e-10 * (1.0 + std::fabs(rhs)));
    }
  }
}

TEST_CASE("materialize agrees with matvec") {
  const OperatorHandle conv = load_fixture("conv_filter");
  const DenseOperator w = materialize(conv);
  REQUIRE(w.dim() == 16);
  for (int rep = 0; rep < 100; ++rep) {
    const auto x = random_vec(16, 400 + rep);
    const auto direct = conv.matvec(x);
    std::vector<double> via(16);
    w.matvec(x, via);
    for (int i = 0; i < 16; ++i) CHECK(std::fabs(direct[i] - via[i]) <= 1e-12);
  }
  // dense materializes to itself
  const DenseOperator d = random_dense(5, 9);
  const DenseOperator m = materialize(OperatorHandle(d));
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) CHECK(m.at(i, j) == d.at(i, j));
  }
}

TEST_CASE("conv transpose is the adjoint") {
  const OperatorHandle conv = load_fixture("conv_filter");
  for (int rep = 0; rep < 20; ++rep) {
    const auto x = random_vec(16, 500 + rep);
    const auto y = random_vec(16, 600 + rep);
    std::vector<double> ax(16), aty(16);
    conv.matvec(x, ax);
    conv.matvec_transpose(y, aty);
    double lhs = 0.0, rhs = 0.0;
    for (int i = 0; i < 16; ++i) {
      lhs += ax[i] * y[i];
      rhs += x[i] * aty[i];
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("exact_logabsdet matches cofactor expansion") {
  for (int n = 2; n <= 4; ++n) {
    for (int rep = 0; rep < 30; ++rep) {
      const DenseOperator a = random_dense(n, 1000 * n + rep);
      const LogAbsDet lad = exact_logabsdet(a);
      const double det = oracles::cofactor_det(
          std::vector<double>(a.entries().begin(), a.entries().end()), n);
      REQUIRE(det != 0.0);
      const double want_log = std::log(std::fabs(det));
      const int want_sign = det > 0.0 ? 1 : -1;
      CHECK(lad.sign == want_sign);
      CHECK(std::fabs(lad.logabs - want_log) <= 1e-10 * (1.0 + std::fabs(want_log)));
    }
  }
}

TEST_CASE("exact_logabsdet identity and singular") {
  const LogAbsDet id = exact_logabsdet(DenseOperator::identity(10));
  CHECK(id.sign == 1);
  CHECK(id.logabs == 0.0);

  std::vector<double> sing{1.0, 2.0, 2.0, 4.0};  // rank 1
  const LogAbsDet s = exact_logabsdet(DenseOperator(2, std::move(sing)));
  CHECK(s.sign == 0);
  CHECK(std::isinf(s.logabs));
}

TEST_CASE("logabsdet of product adds") {
  for (int rep = 0; rep < 10; ++rep) {
    const DenseOperator a = random_dense(6, 2000 + rep);
    const DenseOperator b = random_dense(6, 3000 + rep);
    std::vector<double> prod(36, 0.0);
    for (int i = 0; i < 6; ++i) {
      for (int k = 0; k < 6; ++k) {
        for (int j = 0; j < 6; ++j) {
          prod[static_cast<std::size_t>(i) * 6 + j] += a.at(i, k) * b.at(k, j);
        }
      }
    }
    const double lhs = exact_logabsdet(DenseOperator(6, std::move(prod))).logabs;
    const double rhs = exact_logabsdet(a).logabs + exact_logabsdet(b).logabs;
    CHECK(std::fabs(lhs - rhs) <= 1e-8 * (1.0 + std::fabs(rhs)));
  }
}

TEST_CASE("fixture determinants match published values within appendix rounding") {
  const double expected[] = {520.36, 748.68, 945.02, 3000.5, 252.29};
  const char* names[] = {"A1", "A2", "A3", "A4", "A5"};
  for (int i = 0; i < 5; ++i) {
    const OperatorHandle op = load_fixture(names[i]);
    const LogAbsDet lad = exact_logabsdet(materialize(op));
    const double det = std::exp(lad.logabs);
    CHECK(std::fabs(det - expected[i]) / expected[i] <= 0.05);
  }
}

TEST_CASE("cover3x3 fixture entries") {
  const OperatorHandle op = load_fixture("cover3x3");
  const DenseOperator* d = op.as_dense();
  REQUIRE(d != nullptr);
  CHECK(d->at(0, 0) == -0.7056);
  CHECK(d->at(0, 1) == 0.6741);
  CHECK(d->at(0, 2) == -0.5454);
}

TEST_CASE("conv16 |det| is orientation-invariant and near the published value") {
  const OperatorHandle handle = load_fixture("conv_filter");
  const ConvOperator* base = handle.as_conv();
  REQUIRE(base != nullptr);
  const ConvOperator corr(base->filter(), 4, Orientation::correlation);
  const ConvOperator conv(base->filter(), 4, Orientation::convolution);
  const double l1 = exact_logabsdet(materialize(OperatorHandle(corr))).logabs;
  const double l2 = exact_logabsdet(materialize(OperatorHandle(conv))).logabs;
  CHECK(std::fabs(l1 - l2) <= 1e-10);
  CHECK(std::fabs(std::exp(l1) - 7.71) / 7.71 <= 0.02);

  // flipping the filter 180 degrees also preserves |det|
  const double l3 = exact_logabsdet(materialize(OperatorHandle(corr.flipped()))).logabs;
  CHECK(std::fabs(l1 - l3) <= 1e-10);
}

TEST_CASE("unknown fixture name errors") {
  CHECK_THROWS_AS(load_fixture("A9"), ConfigError);
}

TEST_CASE("operator JSON round-trip") {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "detflow_test_ops";
  std::filesystem::create_directories(dir);

  {
    std::ofstream f(dir / "dense.json");
    f << R"({"type":"dense","entries":[[2.0,0.0],[0.0,3.0]]})";
  }
  const OperatorHandle d = load_operator_json(dir / "dense.json");
  CHECK(d.dim() == 2);
  const std::vector<double> ones{1.0, 1.0};
  CHECK(d.matvec(ones)[1] == 3.0);

  {
    std::ofstream f(dir / "conv.json");
    f << R"({"type":"conv","filter":[[0,0,0],[0,1,0],[0,0,0]],"image_side":3})";
  }
  const OperatorHandle c = load_operator_json(dir / "conv.json");
  CHECK(c.dim() == 9);
  const LogAbsDet lad = exact_logabsdet(materialize(c));
  CHECK(lad.sign == 1);
  CHECK(lad.logabs == doctest::Approx(0.0));

  {
    std::ofstream f(dir / "bad.json");
    f << R"({"type":"dense","entries":[[1.0,2.0]]})";
  }
  CHECK_THROWS_AS(load_operator_json(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_operator_json(dir / "missing.json"), ConfigError);
}

TEST_CASE("resolve_operator_source shortcuts") {
  CHECK(resolve_operator_source("identity10").dim() == 10);
  CHECK(resolve_operator_source("conv16").dim() == 16);
  CHECK(resolve_operator_source("A3").dim() == 10);
  CHECK_THROWS_AS(resolve_operator_source("nope"), ConfigError);
}
