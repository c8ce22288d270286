#ifndef SPECREG_KRYLOV_HPP
#define SPECREG_KRYLOV_HPP

#include "specreg/operator.hpp"

#include <limits>
#include <optional>
#include <ostream>
#include <vector>

namespace specreg {

/// Action of M^{-1} for a symmetric positive definite preconditioner M.
class PreconditionerAction {
 public:
  virtual ~PreconditionerAction() = default;
  virtual Vector apply_inverse(const Vector& x) const = 0;
  /// True when M = c I. Orthogonality in the M inner product is then plain
  /// Euclidean orthogonality.
  virtual bool is_scaled_identity() const { return false; }
};

class IdentityPreconditioner final : public PreconditionerAction {
 public:
  Vector apply_inverse(const Vector& x) const override { return x; }
  bool is_scaled_identity() const override { return true; }
};

struct CgConfig {
  double epsilon = 1.0 / 3.0;
  int max_iterations = 200;
  bool reorthogonalize = false;
  bool collect_lanczos = false;
  /// Per-iteration CSV (l, residual, alpha, beta), debugging only.
  std::ostream* trace_csv = nullptr;

  void validate() const;
};

/// Coefficients and Lanczos basis produced by one CG run.
///
/// `betas` holds beta_1..beta_l (one per iteration); the tridiagonal matrix
/// T_l uses the first l-1 of them and beta_l enters the Ritz residual bound.
struct CgTrace {
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<Vector> z_basis;
  /// ||r^l|| for l = 0..iterations.
  std::vector<double> gradient_norms;
  /// ||G h^l - g|| for l = 0..iterations.
  std::vector<double> residual_norms;
  int iterations = 0;

  double final_beta_over_alpha() const;
};

struct CgResult {
  Vector solution;
  CgTrace trace;
  bool converged = false;
};

/// CG breakdown; carries the iterate and the trace gathered so far.
class BreakdownError : public NumericalError {
 public:
  BreakdownError(const std::string& what, CgResult partial)
      : NumericalError(what), partial_(std::move(partial)) {}
  const CgResult& partial() const { return partial_; }

 private:
  CgResult partial_;
};

/// Preconditioned CG for B^T B h = B^T g, where B is `op` and M^{-1} is `precond`.
///
/// Stops as soon as ||B^T(g - B h^l)|| <= epsilon * c * ||h^l|| with c =
/// op.spectral_floor(). Since h^0 = 0, at least one iteration runs whenever
/// B^T g != 0. Reaching max_iterations is reported through `converged`.
CgResult pcg_solve(const StackedOperator& op, const Vector& g, const PreconditionerAction& precond,
                   const CgConfig& cfg);

inline CgResult pcg_solve(const TikhonovSystem& sys, const PreconditionerAction& precond,
                          const CgConfig& cfg) {
  return pcg_solve(sys, sys.stacked_rhs(), precond, cfg);
}

struct RitzPair {
  double theta = 0.0;
  Vector vector;
  double residual_bound = 0.0;
};

/// Tridiagonal T_l of the CG-Lanczos relation.
struct Tridiagonal {
  Vector diag;
  Vector offdiag;
};

Tridiagonal tridiagonal_from_trace(const CgTrace& trace);

/// Ritz pairs of the preconditioned normal operator, sorted by descending theta.
std::vector<RitzPair> ritz_from_trace(const CgTrace& trace);

/// Keeps pairs with theta >= separation_threshold and
/// residual_bound <= residual_tolerance * theta, preserving order.
std::vector<RitzPair> select_ritz(const std::vector<RitzPair>& pairs, double separation_threshold,
                                  double residual_tolerance = std::numeric_limits<double>::infinity());

/// Orthonormal basis grown one vector at a time from stored Householder
/// reflectors (complete reorthogonalization).
class HouseholderBasis {
 public:
  explicit HouseholderBasis(Index dim);

  Index dim() const { return dim_; }
  Index size() const { return static_cast<Index>(reflectors_.size()); }

  /// v minus its orthogonal projection onto the current span.
  Vector project_out(const Vector& v) const;

  /// Extends the basis by the part of v orthogonal to the current span and
  /// returns the new unit vector, or nothing if that part is shorter than
  /// drop_tolerance * ||v||.
  std::optional<Vector> append(const Vector& v, double drop_tolerance = 1e-12);

  /// The k-th orthonormal basis vector.
  Vector basis_vector(Index k) const;

 private:
  // Applies H_k ... H_1 (forward) or H_1 ... H_k (backward) to v.
  void apply_forward(Vector& v, Index count) const;
  void apply_backward(Vector& v, Index count) const;

  Index dim_;
  std::vector<Vector> reflectors_;
};

/// Orthonormal vectors spanning the same subspace, via Householder QR.
/// Vectors whose component outside the span of their predecessors is below
/// drop_tolerance times their norm are dropped. `kept`, when given, receives
/// the input index behind each output vector.
std::vector<Vector> reorthogonalize_basis(const std::vector<Vector>& vectors,
                                          double drop_tolerance = 1e-12,
                                          std::vector<std::size_t>* kept = nullptr);

struct CglsResult {
  Vector solution;
  int iterations = 0;
  double residual_norm = 0.0;
};

/// CG on A^T A h = A^T b without a Tikhonov term, stopped once
/// ||b - A h|| <= rho * ||b||. Regularization by early truncation.
CglsResult cgls_truncated(const JacobianHandle& jac, const Vector& b, double rho,
                          int max_iterations);

}  // namespace specreg

#endif  // SPECREG_KRYLOV_HPP
