#pragma once

#include <array>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "detflow/errors.hpp"

namespace detflow {

/// Square real matrix, row-major.
class DenseOperator {
 public:
  DenseOperator(int n, std::vector<double> entries);

  static DenseOperator identity(int n);
  static DenseOperator diagonal(std::span<const double> d);

  int dim() const { return n_; }
  double at(int i, int j) const { return a_[static_cast<std::size_t>(i) * n_ + j]; }
  double& at(int i, int j) { return a_[static_cast<std::size_t>(i) * n_ + j]; }
  std::span<const double> entries() const { return a_; }

  void matvec(std::span<const double> x, std::span<double> y) const;
  void matvec_transpose(std::span<const double> x, std::span<double> y) const;

  DenseOperator scaled(double c) const;

 private:
  int n_;
  std::vector<double> a_;
};

enum class Orientation { correlation, convolution };

/// 3x3 filter applied to a side x side image with zero padding and stride 1;
/// a square (side^2 x side^2) linear map.  `correlation` stamps the filter as
/// printed, `convolution` flips it 180 degrees; |det| is the same either way.
class ConvOperator {
 public:
  ConvOperator(std::array<double, 9> filter, int image_side,
               Orientation orientation = Orientation::correlation);

  int dim() const { return side_ * side_; }
  int image_side() const { return side_; }
  Orientation orientation() const { return orient_; }
  const std::array<double, 9>& filter() const { return k_; }

  ConvOperator flipped() const;

  void matvec(std::span<const double> x, std::span<double> y) const;
  void matvec_transpose(std::span<const double> x, std::span<double> y) const;

 private:
  std::array<double, 9> k_;
  int side_;
  Orientation orient_;
};

/// The one access estimators get to a linear operator: its dimension and
/// matrix-vector products.  Dense materialization backs the exact oracle.
class OperatorHandle {
 public:
  /* implicit */ OperatorHandle(DenseOperator op);
  /* implicit */ OperatorHandle(ConvOperator op);

  int dim() const;
  void matvec(std::span<const double> x, std::span<double> y) const;
  void matvec_transpose(std::span<const double> x, std::span<double> y) const;
  std::vector<double> matvec(std::span<const double> x) const;

  bool is_dense() const { return std::holds_alternative<DenseOperator>(op_); }
  const DenseOperator* as_dense() const { return std::get_if<DenseOperator>(&op_); }
  const ConvOperator* as_conv() const { return std::get_if<ConvOperator>(&op_); }

 private:
  std::variant<DenseOperator, ConvOperator> op_;
};

/// Column j of the result equals matvec(e_j).
DenseOperator materialize(const OperatorHandle& op);

struct LogAbsDet {
  int sign;        // -1, 0, +1; 0 means singular
  double logabs;   // -inf when singular
};

/// LU with partial pivoting; logabs = sum log|u_ii|, sign tracks row swaps
/// and diagonal signs.
LogAbsDet exact_logabsdet(const DenseOperator& op);

// ---------------------------------------------------------------------------
// Fixtures and file loading
// ---------------------------------------------------------------------------

/// Embedded fixtures: "A1".."A5" (10x10), "cover3x3", "conv_filter"
/// (the 3x3 filter as a 16x16 conv map on a 4x4 image).
OperatorHandle load_fixture(std::string_view name);

/// All embedded fixture names, in a stable order.
std::span<const std::string_view> fixture_names();

/// Operator from a JSON file:
///   {"type":"dense","entries":[[...],[...]]}
///   {"type":"conv","filter":[[..3x3..]],"image_side":N}
OperatorHandle load_operator_json(const std::filesystem::path& path);

/// Fixture name, "identityN", "conv16", or a path to a JSON operator file.
OperatorHandle resolve_operator_source(const std::string& source);

}  // namespace detflow
