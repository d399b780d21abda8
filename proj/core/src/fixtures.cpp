// Embedded test matrices: five 10x10 unit-Gaussian draws, a 3x3 example
// matrix, and the 3x3 convolution filter (used as a 16x16 map on 4x4 images).

#include <array>
#include <vector>

#include "detflow/operators.hpp"

namespace detflow {

namespace {

// clang-format off
constexpr double kA1[100] = {
  -1.08, -0.60,  0.06,  0.71, -0.81,  0.57,  0.69,  0.51, -0.94,  0.18,
  -0.55,  1.50,  1.39, -0.18, -0.56, -0.05,  0.98,  1.82,  1.48,  0.01,
  -0.26, -2.07, -1.12, -0.27, -1.03,  0.97, -1.84, -0.50, -0.47, -1.17,
   1.01, -1.25,  1.71,  1.24, -0.79, -0.17, -1.05,  0.44,  0.02,  0.04,
   1.24, -0.31, -0.18, -0.74, -0.43,  0.29, -0.67,  1.43, -1.01, -0.17,
  -0.49, -1.17,  0.43,  1.40,  1.28,  1.80, -0.45,  1.67, -0.93, -1.72,
   0.78,  1.19,  0.02, -0.06,  0.72, -1.24, -1.19, -0.71,  1.73,  0.81,
   0.53,  1.56, -1.09,  0.33, -0.29, -0.47,  1.02,  1.67, -0.17,  0.26,
   1.16, -0.18,  0.86,  0.94,  0.26, -1.64, -0.38, -0.31, -0.79,  1.31,
   0.54,  1.39, -0.21, -0.12,  0.14,  0.80,  0.78,  0.85, -1.30, -0.41,
};

constexpr double kA2[100] = {
  -1.92, -0.19,  0.34,  0.41, -0.58, -2.08,  0.29, -0.46, -1.37, -0.45,
  -0.56,  0.71,  0.06,  0.17,  1.44, -1.81, -1.19,  1.02, -2.84,  2.28,
   1.64,  0.14, -1.86,  0.23,  0.85,  1.33, -0.88, -0.73, -0.53,  2.09,
  -0.11, -0.43,  0.68, -1.45,  0.08,  0.81,  0.53,  0.41,  0.41, -0.27,
  -0.05,  0.05,  0.70, -1.09,  1.77, -0.79, -0.35,  1.71,  0.85,  0.80,
   1.24, -0.22,  0.41, -1.02, -0.64, -0.21, -1.25,  0.71,  0.60, -0.75,
   0.71, -0.91, -0.11,  0.18,  1.13, -0.48,  1.85, -0.03,  0.29, -1.25,
   0.52, -1.06,  0.48, -2.26,  1.52, -0.63,  1.26, -1.42, -0.02, -1.66,
  -1.01, -1.23,  0.42, -0.37,  1.00, -0.04, -0.32,  0.52, -1.91, -1.78,
   0.89, -0.10, -0.39, -0.52,  0.21, -0.99,  0.48,  0.22,  0.77, -0.19,
};

constexpr double kA3[100] = {
  -0.15, -1.65, -0.95,  0.26,  1.35, -0.10,  0.37,  0.45,  0.23, -1.12,
   0.61, -1.81, -0.68,  0.58,  0.94,  2.36, -0.49,  0.04,  0.86,  0.52,
   1.91, -1.44, -0.51,  0.96, -2.56, -0.01, -1.13,  0.19, -2.50,  0.68,
   0.93, -1.30, -0.65, -1.90, -0.09,  0.24,  0.69,  1.28, -0.57, -0.39,
   0.55, -1.34, -1.37, -1.29, -0.28, -0.67,  0.77, -0.25,  0.85, -2.89,
  -0.86,  1.95, -1.33,  0.68,  0.27,  0.25,  0.29, -1.29,  2.05,  0.11,
   0.82,  0.52, -0.71, -0.59, -1.57, -1.05,  0.46, -0.61,  0.63,  2.02,
   0.76,  0.01, -0.06, -0.43,  1.12,  1.05, -1.35, -0.04, -0.62, -0.35,
  -2.13, -0.80,  1.12,  1.77, -0.79, -0.10,  1.17, -1.06, -0.37,  0.01,
  -0.86,  1.44, -0.55,  1.19,  2.52,  0.81, -0.36, -0.61,  1.24, -0.06,
};

constexpr double kA4[100] = {
  -0.31, -0.68, -0.22, -0.28,  1.64, -0.41, -0.66, -0.59,  1.57,  0.38,
  -0.15,  0.60,  1.08,  1.29, -0.12,  1.89, -1.85, -0.11,  1.50,  0.72,
   0.88, -1.71,  0.69, -1.75, -0.06,  0.90,  0.08, -0.11, -0.21,  1.75,
   0.31, -1.40, -1.79,  0.17,  0.57, -0.86,  1.64, -1.55,  0.91, -2.06,
   1.10, -1.19,  0.47, -0.84,  0.37,  0.25,  0.03, -0.23,  1.32,  0.36,
   0.43, -0.02, -0.04,  1.19,  0.20, -1.13,  1.36,  1.23, -0.01,  2.08,
  -0.80,  0.48, -1.57,  0.60, -0.19, -0.18, -0.88, -1.53, -0.66, -0.83,
   1.32, -1.09,  0.71,  1.04,  1.02, -0.09,  1.51, -0.51, -0.73, -0.82,
   0.21, -2.07,  0.61,  0.29,  1.41, -1.93, -2.06,  0.23, -0.09,  0.24,
  -1.36,  0.30,  0.15,  1.33, -1.10, -0.72,  0.37,  0.09, -0.56,  2.81,
};

constexpr double kA5[100] = {
   0.36, -0.95,  0.12,  0.85, -0.40, -0.10,  0.58, -0.48,  0.79,  0.12,
   0.11, -0.02, -0.66, -0.98, -0.28, -1.61, -0.82,  1.13,  1.18,  0.33,
  -0.70,  0.65, -1.50, -0.33, -0.18, -0.60, -0.84, -0.43, -0.42,  1.12,
  -2.33, -0.49,  0.61,  0.88, -0.85, -0.68,  0.38,  0.53,  0.34,  1.59,
   0.43,  1.61, -0.14,  1.15, -1.25,  2.28, -0.32, -0.36, -2.10,  0.98,
  -0.68, -0.54, -0.88,  1.55,  0.70, -1.34,  0.15, -0.27, -0.86,  1.35,
  -0.83, -0.52, -0.83, -1.98,  1.79, -0.86,  0.05,  1.29,  0.10,  1.17,
  -1.34, -0.66,  0.12, -0.95, -0.46,  2.15, -0.67, -0.77,  1.87,  1.40,
   0.54, -0.51,  0.16,  1.38,  1.49,  0.61,  0.22,  0.64, -0.27, -0.47,
   0.62, -0.24, -0.11,  0.27, -0.48,  0.75,  0.59,  0.41, -0.81,  0.07,
};

constexpr double kCover3x3[9] = {
  -0.7056,  0.6741, -0.5454,
   0.9107,  1.0682,  0.1424,
  -1.2754, -0.1769,  1.0084,
};

constexpr std::array<double, 9> kConvFilter = {
  -0.107, -0.689, -0.027,
   0.226,  1.393, -0.544,
  -0.280, -0.467,  0.024,
};
// clang-format on

constexpr std::string_view kNames[] = {"A1", "A2", "A3", "A4", "A5", "cover3x3", "conv_filter"};

DenseOperator dense_from(const double* data, int n) {
  return DenseOperator(n, std::vector<double>(data, data + static_cast<std::size_t>(n) * n));
}

}  // namespace

std::span<const std::string_view> fixture_names() { return kNames; }

OperatorHandle load_fixture(std::string_view name) {
  if (name == "A1") return dense_from(kA1, 10);
  if (name == "A2") return dense_from(kA2, 10);
  if (name == "A3") return dense_from(kA3, 10);
  if (name == "A4") return dense_from(kA4, 10);
  if (name == "A5") return dense_from(kA5, 10);
  if (name == "cover3x3") return dense_from(kCover3x3, 3);
  if (name == "conv_filter") return ConvOperator(kConvFilter, 4, Orientation::correlation);
  throw ConfigError("unknown fixture '" + std::string(name) + "'");
}

}  // namespace detflow
