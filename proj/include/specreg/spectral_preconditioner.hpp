#ifndef SPECREG_SPECTRAL_PRECONDITIONER_HPP
#define SPECREG_SPECTRAL_PRECONDITIONER_HPP

#include "specreg/krylov.hpp"

#include <iosfwd>
#include <optional>
#include <vector>

namespace specreg {

/// Eigenpair (lambda, u) of A^T A.
struct EigenPair {
  double lambda = 0.0;
  Vector vector;
};

/// M = gamma I + sum_j lambda_j u_j u_j^T with orthonormal u_j and lambda_j > 0.
///
/// Immutable; every product costs O(|J| M). The optional left vectors
/// w_j = A u_j / ||A u_j|| feed the propagated-noise estimators.
class SpectralPreconditioner final : public PreconditionerAction {
 public:
  SpectralPreconditioner(double gamma, Index dim);
  /// `vectors` holds u_j as columns. Pairs with lambda below 1e-14 max(lambda)
  /// are discarded.
  SpectralPreconditioner(double gamma, const Vector& lambdas, const Matrix& vectors,
                         std::optional<Matrix> left_vectors = std::nullopt);

  double gamma() const { return gamma_; }
  Index dim() const { return vectors_.rows(); }
  Index size() const { return lambdas_.size(); }
  const Vector& lambdas() const { return lambdas_; }
  const Matrix& vectors() const { return vectors_; }
  const std::optional<Matrix>& left_vectors() const { return left_vectors_; }
  std::vector<EigenPair> pairs() const;

  /// Same pairs with gamma replaced; left vectors are kept.
  SpectralPreconditioner with_gamma(double gamma) const;
  /// Computes w_j = A u_j / ||A u_j|| with one Jacobian apply per pair.
  SpectralPreconditioner with_left_vectors(const JacobianHandle& jac) const;

  Vector apply_forward(const Vector& x) const;
  Vector apply_inverse(const Vector& x) const override;
  Vector apply_inv_sqrt(const Vector& x) const;
  Vector apply_sqrt(const Vector& x) const;
  bool is_scaled_identity() const override { return lambdas_.size() == 0; }

  /// Dense M (tests and oracles only).
  Matrix dense() const;

 private:
  // x -> scale_0 x + sum_j (f(lambda_j) - scale_0) <x, u_j> u_j
  template <class Fn>
  Vector spectral_map(const Vector& x, double scale_0, Fn&& f) const;

  double gamma_;
  Vector lambdas_;
  Matrix vectors_;
  std::optional<Matrix> left_vectors_;
};

/// Two-sided transformed system B = G M^{-1/2}; B^T B = M^{-1/2} G^T G M^{-1/2}.
/// The stop-test floor is 1, the bottom of that spectrum for exact pairs.
class TwoSidedSystem final : public StackedOperator {
 public:
  TwoSidedSystem(const TikhonovSystem& sys, const SpectralPreconditioner& precond);

  Index domain_dim() const override { return sys_.domain_dim(); }
  Index range_dim() const override { return sys_.range_dim(); }
  Vector apply(const Vector& v) const override;
  Vector apply_adjoint(const Vector& d) const override;
  double spectral_floor() const override { return 1.0; }

 private:
  const TikhonovSystem& sys_;
  const SpectralPreconditioner& precond_;
};

/// Thrown when a Ritz value lies in the cluster at 1 and cannot be mapped.
class ClusterRitzValue : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// (gamma (mu - 1), u): eigenpair of A^T A behind an eigenvalue mu != 1 of the
/// preconditioned operator.
EigenPair ritz_to_eigenpair(double mu, double gamma, const Vector& u);

/// Union of the pair sets followed by a Householder re-QR. Newcomers whose
/// part outside the span of their predecessors is below dependence_tolerance
/// times their norm are dropped along with their lambda. Left vectors are
/// not carried over.
SpectralPreconditioner merge_pairs(const SpectralPreconditioner& existing,
                                   const std::vector<EigenPair>& new_pairs, double new_gamma,
                                   double dependence_tolerance = 1e-4);

struct SpectrumReport {
  Vector eigenvalues;  // ascending, of M^{-1} G^T G
  Vector expected;     // ascending, from the exact spectrum of A^T A
  double max_deviation = 0.0;
  bool matches = false;
};

/// Dense check of sigma(M^{-1} G^T G) = {1 + lambda_j / gamma : j not in J} u {1}
/// for pairs that are exact eigenpairs of A^T A. Intended for M <= 200.
SpectrumReport preconditioned_spectrum_check(const SpectralPreconditioner& precond, const Matrix& a,
                                             double tolerance = 1e-9);
SpectrumReport preconditioned_spectrum_check(const SpectralPreconditioner& precond,
                                             const JacobianHandle& jac, double tolerance = 1e-9);

/// Text snapshot: a header line, "M J", gamma, the lambdas, then the vectors
/// column-major, one value per line in round-trip precision.
void save_preconditioner(std::ostream& out, const SpectralPreconditioner& precond);
SpectralPreconditioner load_preconditioner(std::istream& in);

}  // namespace specreg

#endif  // SPECREG_SPECTRAL_PRECONDITIONER_HPP
