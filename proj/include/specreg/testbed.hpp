#ifndef SPECREG_TESTBED_HPP
#define SPECREG_TESTBED_HPP

#include "specreg/operator.hpp"
#include "specreg/spectral_preconditioner.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace specreg {

/// Profile of two Gaussian bumps sampled on n points of [0, 1].
Vector two_bump_profile(Index n);

struct DiagonalProblemOptions {
  double scale = 1.0;  // sigma_1
  /// Right singular vectors from the orthonormal cosine basis (smooth modes)
  /// instead of a random orthogonal matrix.
  bool smooth_right_basis = true;
};

/// Linear model A = U diag(sigma) V^T with sigma_j = c exp(-a j), floored at
/// 1e-14 sigma_1, and seeded orthonormal bases.
struct DiagonalProblem {
  Matrix left;   // U, N x M
  Matrix right;  // V, M x M
  Vector singular_values;
  Vector truth;
  std::uint64_t seed = 0;
  std::shared_ptr<const DenseLinearMap> map;

  Index domain_dim() const { return right.rows(); }
  Index range_dim() const { return left.rows(); }
  const Matrix& dense() const { return map->matrix(); }
  std::shared_ptr<LinearModel> model() const { return std::make_shared<LinearModel>(map); }
};

DiagonalProblem make_diagonal_problem(Index m, Index n, double decay_a, std::uint64_t seed,
                                      const DiagonalProblemOptions& options = {});
/// Same construction with explicitly prescribed singular values.
DiagonalProblem make_diagonal_problem(const Vector& singular_values, Index n, std::uint64_t seed,
                                      const DiagonalProblemOptions& options = {});

/// Circular convolution with a periodic Gaussian kernel of unit mass on n
/// grid points. The symbol is real and even, so every mode j != 0, n/2 shares
/// its eigenvalue with mode n - j.
struct ConvolutionProblem {
  Index n = 0;
  double kernel_width = 0.0;
  Vector kernel;
  Vector truth;
  std::shared_ptr<const DenseLinearMap> map;

  const Matrix& dense() const { return map->matrix(); }
  std::shared_ptr<LinearModel> model() const { return std::make_shared<LinearModel>(map); }
  /// Eigenvalues of the circulant from its discrete Fourier symbol, mode order.
  Vector symbol() const;
};

ConvolutionProblem make_convolution_problem(Index n, double kernel_width, std::uint64_t seed);

/// F(x) = K s(x) with s(t) = t + c3 t^3 applied pointwise.
class NonlinearComposite final : public ForwardModel {
 public:
  NonlinearComposite(std::shared_ptr<const LinearMap> base, double c3);
  double c3() const { return c3_; }
  const LinearMap& base() const { return *base_; }

 protected:
  Vector evaluate_impl(const Vector& x) const override;
  std::shared_ptr<const LinearMap> linearize_impl(const Vector& x) const override;

 private:
  std::shared_ptr<const LinearMap> base_;
  double c3_;
};

struct NonlinearProblem {
  std::shared_ptr<NonlinearComposite> model;
  Vector truth;
};

NonlinearProblem make_nonlinear_composite(std::shared_ptr<const LinearMap> base, double c3,
                                          Vector truth);

/// L independent N(0, sigma^2 I) vectors of length n, reproducible per seed.
std::vector<Vector> generate_noise(double sigma, Index n, std::size_t count, std::uint64_t seed);

/// sigma giving ||eps|| / ||y|| close to `relative_level` for white noise.
double sigma_for_relative_level(const Vector& y, double relative_level);

/// Direct dense computations that the matrix-free code is checked against.
class DenseOracle {
 public:
  static constexpr Index kMaxDim = 300;

  explicit DenseOracle(Matrix a);
  /// Assembles the Jacobian of `model` at x densely.
  static DenseOracle from_model(const ForwardModel& model, const Vector& x);

  const Matrix& matrix() const { return a_; }

  /// (A^T A + gamma I)^{-1} (A^T y + gamma b) by QR of the stacked matrix.
  Vector tikhonov_solution(double gamma, const Vector& y, const Vector& b) const;
  /// Same solution by Cholesky of the normal matrix.
  Vector tikhonov_solution_normal(double gamma, const Vector& y, const Vector& b) const;

  /// Eigenvalues (descending) and eigenvectors of A^T A.
  Vector gram_eigenvalues() const;
  Matrix gram_eigenvectors() const;
  /// Squared singular values by SVD, descending.
  Vector squared_singular_values() const;

  /// Eigenvalues (ascending) of M^{-1} G^T G by a symmetric solver on the
  /// similar matrix M^{-1/2} G^T G M^{-1/2}.
  Vector preconditioned_spectrum(const SpectralPreconditioner& precond) const;
  /// Same spectrum from a general (nonsymmetric) eigensolver on M^{-1} G^T G.
  Vector preconditioned_spectrum_general(const SpectralPreconditioner& precond) const;
  double preconditioned_condition_number(const SpectralPreconditioner& precond) const;

  /// R = (A^T A + gamma I)^{-1} A^T.
  Matrix propagation_matrix(double gamma) const;
  /// sqrt(trace(R^T Cov R)).
  double trace_phi(double gamma, const Matrix& covariance) const;
  double trace_phi_white(double gamma, double sigma) const;

 private:
  Matrix a_;
};

}  // namespace specreg

#endif  // SPECREG_TESTBED_HPP
