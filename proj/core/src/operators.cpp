#include "detflow/operators.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <utility>

#include <json.hpp>

namespace detflow {

namespace {

void check_input_vector(std::span<const double> x, int n, const char* who) {
  if (static_cast<int>(x.size()) != n) {
    throw DimensionError(std::string(who) + ": expected vector of length " + std::to_string(n) +
                         ", got " + std::to_string(x.size()));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw DimensionError(std::string(who) + ": non-finite input entry");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// DenseOperator
// ---------------------------------------------------------------------------

DenseOperator::DenseOperator(int n, std::vector<double> entries) : n_(n), a_(std::move(entries)) {
  if (n <= 0) throw DimensionError("DenseOperator: dimension must be positive");
  if (a_.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(n)) {
    throw DimensionError("DenseOperator: entry count does not match n*n (non-square input?)");
  }
  for (double v : a_) {
    if (!std::isfinite(v)) throw DimensionError("DenseOperator: non-finite entry");
  }
}

DenseOperator DenseOperator::identity(int n) {
  std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i) * n + i] = 1.0;
  return DenseOperator(n, std::move(a));
}

DenseOperator DenseOperator::diagonal(std::span<const double> d) {
  const int n = static_cast<int>(d.size());
  std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i) * n + i] = d[i];
  return DenseOperator(n, std::move(a));
}

void DenseOperator::matvec(std::span<const double> x, std::span<double> y) const {
  check_input_vector(x, n_, "DenseOperator::matvec");
  for (int i = 0; i < n_; ++i) {
    const double* row = a_.data() + static_cast<std::size_t>(i) * n_;
    double acc = 0.0;
    for (int j = 0; j < n_; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

void DenseOperator::matvec_transpose(std::span<const double> x, std::span<double> y) const {
  check_input_vector(x, n_, "DenseOperator::matvec_transpose");
  for (int j = 0; j < n_; ++j) y[j] = 0.0;
  for (int i = 0; i < n_; ++i) {
    const double* row = a_.data() + static_cast<std::size_t>(i) * n_;
    const double xi = x[i];
    for (int j = 0; j < n_; ++j) y[j] += row[j] * xi;
  }
}

DenseOperator DenseOperator::scaled(double c) const {
  std::vector<double> a(a_);
  for (double& v : a) v *= c;
  return DenseOperator(n_, std::move(a));
}

// ---------------------------------------------------------------------------
// ConvOperator
// ---------------------------------------------------------------------------

ConvOperator::ConvOperator(std::array<double, 9> filter, int image_side, Orientation orientation)
    : k_(filter), side_(image_side), orient_(orientation) {
  if (image_side <= 0) throw DimensionError("ConvOperator: image_side must be positive");
  for (double v : k_) {
    if (!std::isfinite(v)) throw DimensionError("ConvOperator: non-finite filter entry");
  }
}

ConvOperator ConvOperator::flipped() const {
  std::array<double, 9> f{};
  for (int i = 0; i < 9; ++i) f[i] = k_[8 - i];
  return ConvOperator(f, side_, orient_);
}

void ConvOperator::matvec(std::span<const double> x, std::span<double> y) const {
  check_input_vector(x, dim(), "ConvOperator::matvec");
  const int s = side_;
  auto tap = [&](int di, int dj) {
    return orient_ == Orientation::correlation ? k_[static_cast<std::size_t>(di + 1) * 3 + (dj + 1)]
                                               : k_[static_cast<std::size_t>(1 - di) * 3 + (1 - dj)];
  };
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      double acc = 0.0;
      for (int di = -1; di <= 1; ++di) {
        const int ii = i + di;
        if (ii < 0 || ii >= s) continue;
        for (int dj = -1; dj <= 1; ++dj) {
          const int jj = j + dj;
          if (jj < 0 || jj >= s) continue;
          acc += tap(di, dj) * x[static_cast<std::size_t>(ii) * s + jj];
        }
      }
      y[static_cast<std::size_t>(i) * s + j] = acc;
    }
  }
}

void ConvOperator::matvec_transpose(std::span<const double> x, std::span<double> y) const {
  // The transpose of a zero-padded correlation is the zero-padded convolution
  // with the same filter (and vice versa).
  const Orientation t = orient_ == Orientation::correlation ? Orientation::convolution
                                                            : Orientation::correlation;
  ConvOperator(k_, side_, t).matvec(x, y);
}

// ---------------------------------------------------------------------------
// OperatorHandle
// ---------------------------------------------------------------------------

OperatorHandle::OperatorHandle(DenseOperator op) : op_(std::move(op)) {}
OperatorHandle::OperatorHandle(ConvOperator op) : op_(std::move(op)) {}

int OperatorHandle::dim() const {
  return std::visit([](const auto& o) { return o.dim(); }, op_);
}

void OperatorHandle::matvec(std::span<const double> x, std::span<double> y) const {
  std::visit([&](const auto& o) { o.matvec(x, y); }, op_);
}

void OperatorHandle::matvec_transpose(std::span<const double> x, std::span<double> y) const {
  std::visit([&](const auto& o) { o.matvec_transpose(x, y); }, op_);
}

std::vector<double> OperatorHandle::matvec(std::span<const double> x) const {
  std::vector<double> y(static_cast<std::size_t>(dim()));
  matvec(x, y);
  return y;
}

DenseOperator materialize(const OperatorHandle& op) {
  if (const DenseOperator* d = op.as_dense()) return *d;
  const int n = op.dim();
  std::vector<double> a(static_cast<std::size_t>(n) * n);
  std::vector<double> e(static_cast<std::size_t>(n), 0.0);
  std::vector<double> col(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    e[j] = 1.0;
    op.matvec(e, col);
    for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i) * n + j] = col[i];
    e[j] = 0.0;
  }
  return DenseOperator(n, std::move(a));
}

LogAbsDet exact_logabsdet(const DenseOperator& op) {
  const int n = op.dim();
  std::vector<double> lu(op.entries().begin(), op.entries().end());
  auto at = [&](int i, int j) -> double& { return lu[static_cast<std::size_t>(i) * n + j]; };

  int sign = 1;
  double logabs = 0.0;
  for (int col = 0; col < n; ++col) {
    int piv = col;
    double best = std::fabs(at(col, col));
    for (int r = col + 1; r < n; ++r) {
      const double v = std::fabs(at(r, col));
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (best == 0.0) {
      return {0, -std::numeric_limits<double>::infinity()};
    }
    if (piv != col) {
      for (int j = 0; j < n; ++j) std::swap(at(piv, j), at(col, j));
      sign = -sign;
    }
    const double d = at(col, col);
    if (d < 0.0) sign = -sign;
    logabs += std::log(std::fabs(d));
    for (int r = col + 1; r < n; ++r) {
      const double f = at(r, col) / d;
      if (f == 0.0) continue;
      for (int j = col + 1; j < n; ++j) at(r, j) -= f * at(col, j);
    }
  }
  return {sign, logabs};
}

// ---------------------------------------------------------------------------
// JSON loading
// ---------------------------------------------------------------------------

namespace {

DenseOperator dense_from_json(const nlohmann::json& j) {
  const auto& rows = j.at("entries");
  const int n = static_cast<int>(rows.size());
  std::vector<double> a;
  a.reserve(static_cast<std::size_t>(n) * n);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != n) {
      throw ConfigError("operator JSON: 'entries' is not square");
    }
    for (const auto& v : row) a.push_back(v.get<double>());
  }
  return DenseOperator(n, std::move(a));
}

ConvOperator conv_from_json(const nlohmann::json& j) {
  const auto& rows = j.at("filter");
  if (rows.size() != 3) throw ConfigError("operator JSON: 'filter' must be 3x3");
  std::array<double, 9> k{};
  for (int i = 0; i < 3; ++i) {
    if (rows[i].size() != 3) throw ConfigError("operator JSON: 'filter' must be 3x3");
    for (int c = 0; c < 3; ++c) k[static_cast<std::size_t>(i) * 3 + c] = rows[i][c].get<double>();
  }
  const int side = j.at("image_side").get<int>();
  Orientation orient = Orientation::correlation;
  if (j.contains("orientation")) {
    const std::string o = j["orientation"].get<std::string>();
    if (o == "correlation") {
      orient = Orientation::correlation;
    } else if (o == "convolution") {
      orient = Orientation::convolution;
    } else {
      throw ConfigError("operator JSON: unknown orientation '" + o + "'");
    }
  }
  return ConvOperator(k, side, orient);
}

}  // namespace

OperatorHandle load_operator_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open operator file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("operator JSON parse error in " + path.string() + ": " + e.what());
  }
  try {
    const std::string type = j.at("type").get<std::string>();
    if (type == "dense") return dense_from_json(j);
    if (type == "conv") return conv_from_json(j);
    throw ConfigError("operator JSON: unknown type '" + type + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("operator JSON in " + path.string() + ": " + e.what());
  }
}

OperatorHandle resolve_operator_source(const std::string& source) {
  if (source.rfind("identity", 0) == 0 && source.size() > 8) {
    const int n = std::atoi(source.c_str() + 8);
    if (n >= 2) return DenseOperator::identity(n);
  }
  if (source == "conv16") return load_fixture("conv_filter");
  for (std::string_view name : fixture_names()) {
    if (source == name) return load_fixture(name);
  }
  if (std::filesystem::exists(source)) return load_operator_json(source);
  throw ConfigError("unknown operator source '" + source +
                    "' (not a fixture name, identityN, conv16, or readable JSON file)");
}

}  // namespace detflow
