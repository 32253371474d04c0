#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "dyntomo/common.hpp"

namespace testutil {

inline double rel_err(double got, double want) {
  const double denom = std::max(std::abs(want), 1e-300);
  return std::abs(got - want) / denom;
}

// Fresh directory under the system temp root; unique per call.
inline std::filesystem::path temp_dir() {
  static std::mt19937_64 gen(std::random_device{}());
  auto base = std::filesystem::temp_directory_path();
  std::filesystem::path dir;
  do {
    dir = base / ("dyntomo_test_" + std::to_string(gen()));
  } while (std::filesystem::exists(dir));
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename T>
dyntomo::Mat<T> random_matrix(int rows, int cols, dyntomo::Rng& rng,
                              double lo = 0.0, double hi = 1.0) {
  dyntomo::Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m(i) = static_cast<T>(rng.uniform(lo, hi));
  return m;
}

}  // namespace testutil
