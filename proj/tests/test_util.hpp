#ifndef SPECREG_TEST_UTIL_HPP
#define SPECREG_TEST_UTIL_HPP

#include "specreg/types.hpp"

#include <cstdint>
#include <random>

namespace specreg::test {

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Matrix a(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) a(i, j) = normal(rng);
  return a;
}

inline Vector random_vector(Index n, std::uint64_t seed) { return random_matrix(n, 1, seed).col(0); }

/// Orthonormal columns from the QR factor of a Gaussian matrix.
inline Matrix random_orthonormal(Index rows, Index cols, std::uint64_t seed) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(rows, cols, seed));
  return qr.householderQ() * Matrix::Identity(rows, cols);
}

}  // namespace specreg::test

#endif  // SPECREG_TEST_UTIL_HPP
