#ifndef SPECREG_OPERATOR_HPP
#define SPECREG_OPERATOR_HPP

#include "specreg/types.hpp"

#include <atomic>
#include <cstdint>
#include <memory>
#include <vector>

namespace specreg {

/// Tally of model units. One unit is one evaluation of F, one Jacobian
/// application or one adjoint application.
class CostCounter {
 public:
  void add_evaluation() { evaluations_.fetch_add(1, std::memory_order_relaxed); }
  void add_apply() { applies_.fetch_add(1, std::memory_order_relaxed); }
  void add_adjoint() { adjoints_.fetch_add(1, std::memory_order_relaxed); }

  std::uint64_t evaluations() const { return evaluations_.load(std::memory_order_relaxed); }
  std::uint64_t applies() const { return applies_.load(std::memory_order_relaxed); }
  std::uint64_t adjoints() const { return adjoints_.load(std::memory_order_relaxed); }
  std::uint64_t total() const { return evaluations() + applies() + adjoints(); }

 private:
  std::atomic<std::uint64_t> evaluations_{0};
  std::atomic<std::uint64_t> applies_{0};
  std::atomic<std::uint64_t> adjoints_{0};
};

/// Immutable linear map R^cols -> R^rows accessed only through products.
class LinearMap {
 public:
  virtual ~LinearMap() = default;
  virtual Index rows() const = 0;
  virtual Index cols() const = 0;
  virtual Vector apply(const Vector& v) const = 0;
  virtual Vector apply_adjoint(const Vector& w) const = 0;
};

class DenseLinearMap final : public LinearMap {
 public:
  explicit DenseLinearMap(Matrix matrix) : matrix_(std::move(matrix)) {}
  Index rows() const override { return matrix_.rows(); }
  Index cols() const override { return matrix_.cols(); }
  Vector apply(const Vector& v) const override { return matrix_ * v; }
  Vector apply_adjoint(const Vector& w) const override { return matrix_.transpose() * w; }
  const Matrix& matrix() const { return matrix_; }

 private:
  Matrix matrix_;
};

/// Frozen linearization A_m = F'(x_m). Copies share the same snapshot, so a
/// handle outlives the iterate it was taken at. Every product is counted.
class JacobianHandle {
 public:
  JacobianHandle(std::shared_ptr<const LinearMap> map, std::uint64_t linearization_id,
                 std::shared_ptr<CostCounter> counter);

  Index rows() const { return map_->rows(); }
  Index cols() const { return map_->cols(); }

  Vector apply(const Vector& v) const;
  Vector apply_adjoint(const Vector& w) const;

  std::uint64_t linearization_id() const { return id_; }
  const CostCounter& cost() const { return *counter_; }
  const LinearMap& map() const { return *map_; }

 private:
  std::shared_ptr<const LinearMap> map_;
  std::uint64_t id_;
  std::shared_ptr<CostCounter> counter_;
};

/// Matrix-free nonlinear forward map F: R^M -> R^N.
class ForwardModel {
 public:
  ForwardModel(Index domain_dim, Index range_dim);
  virtual ~ForwardModel() = default;

  Index domain_dim() const { return domain_dim_; }
  Index range_dim() const { return range_dim_; }

  Vector evaluate(const Vector& x) const;
  /// Snapshot of the Jacobian at x. Taking the snapshot costs nothing; its
  /// products are charged to this model's counter.
  JacobianHandle linearize(const Vector& x) const;

  const CostCounter& cost() const { return *counter_; }

 protected:
  virtual Vector evaluate_impl(const Vector& x) const = 0;
  virtual std::shared_ptr<const LinearMap> linearize_impl(const Vector& x) const = 0;

 private:
  Index domain_dim_;
  Index range_dim_;
  std::shared_ptr<CostCounter> counter_;
  mutable std::atomic<std::uint64_t> next_id_{0};
};

/// F(x) = A x for a fixed linear map A.
class LinearModel final : public ForwardModel {
 public:
  explicit LinearModel(std::shared_ptr<const LinearMap> map);
  explicit LinearModel(Matrix matrix);
  const LinearMap& map() const { return *map_; }

 protected:
  Vector evaluate_impl(const Vector& x) const override { return map_->apply(x); }
  std::shared_ptr<const LinearMap> linearize_impl(const Vector&) const override { return map_; }

 private:
  std::shared_ptr<const LinearMap> map_;
};

/// Linear operator B: R^M -> R^(N+M) accessed through products, together with
/// a lower bound c on the spectrum of B^T B used by the CG stop test.
class StackedOperator {
 public:
  virtual ~StackedOperator() = default;
  virtual Index domain_dim() const = 0;
  virtual Index range_dim() const = 0;
  virtual Vector apply(const Vector& v) const = 0;
  virtual Vector apply_adjoint(const Vector& d) const = 0;
  virtual double spectral_floor() const = 0;
};

/// Regularized Newton system G = [A_m; sqrt(gamma) I], g = [y - F(x_k); sqrt(gamma) b_k].
/// Neither G nor g's operator part is ever materialized.
class TikhonovSystem final : public StackedOperator {
 public:
  TikhonovSystem(JacobianHandle jac, double gamma, Vector rhs_data, Vector rhs_prior);

  Index domain_dim() const override { return jac_.cols(); }
  Index range_dim() const override { return jac_.rows() + jac_.cols(); }
  Vector apply(const Vector& v) const override;
  Vector apply_adjoint(const Vector& d) const override;
  double spectral_floor() const override { return gamma_; }

  /// The stacked right-hand side g.
  Vector stacked_rhs() const;

  const JacobianHandle& jacobian() const { return jac_; }
  double gamma() const { return gamma_; }
  const Vector& rhs_data() const { return rhs_data_; }
  const Vector& rhs_prior() const { return rhs_prior_; }

 private:
  JacobianHandle jac_;
  double gamma_;
  Vector rhs_data_;
  Vector rhs_prior_;
};

Vector stacked_apply(const TikhonovSystem& sys, const Vector& v);
Vector stacked_adjoint_apply(const TikhonovSystem& sys, const Vector& d);

enum class RhsKind { LevenbergMarquardt, IRGNM };

struct TikhonovRhs {
  Vector data;   // y_obs - F(x_k)
  Vector prior;  // b_k
};

/// b_k = 0 for Levenberg-Marquardt, b_k = x0 - x_k for IRGNM.
TikhonovRhs build_rhs(RhsKind kind, const Vector& x0, const Vector& xk, const Vector& residual);

/// Dense copy of a Jacobian, assembled column by column (costs cols() applies).
Matrix assemble_dense(const JacobianHandle& jac);

struct AdjointTestReport {
  int pairs = 0;
  /// max over pairs of |<Av,w> - <v,A^T w>| / (||Av|| ||w|| + ||v|| ||A^T w||)
  double worst_relative_gap = 0.0;
  bool passed = false;
};

/// Compares <Av, w> with <v, A^T w> for `pairs` seeded Gaussian pairs.
AdjointTestReport adjoint_test(const JacobianHandle& jac, int pairs, std::uint64_t seed,
                               double tolerance = 1e-10);

struct FiniteDifferenceReport {
  std::vector<double> steps;   // t
  std::vector<double> errors;  // ||(F(x+tv) - F(x))/t - A_x v||
  /// Least-squares slope of log(error) against log(t).
  double observed_order = 0.0;
  bool passed = false;
};

/// Directional finite-difference check of the Jacobian at x along v.
FiniteDifferenceReport finite_difference_test(const ForwardModel& model, const Vector& x,
                                              const Vector& v,
                                              const std::vector<double>& steps = {1e-3, 1e-4, 1e-5},
                                              double min_order = 0.9);

}  // namespace specreg

#endif  // SPECREG_OPERATOR_HPP
