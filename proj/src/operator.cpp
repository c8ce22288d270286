#include "specreg/operator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace specreg {

JacobianHandle::JacobianHandle(std::shared_ptr<const LinearMap> map, std::uint64_t linearization_id,
                               std::shared_ptr<CostCounter> counter)
    : map_(std::move(map)), id_(linearization_id), counter_(std::move(counter)) {
  require(map_ != nullptr, "JacobianHandle: null linear map");
  require(counter_ != nullptr, "JacobianHandle: null cost counter");
}

Vector JacobianHandle::apply(const Vector& v) const {
  require_dim(v.size(), cols(), "JacobianHandle::apply");
  counter_->add_apply();
  Vector out = map_->apply(v);
  require_finite(out, "JacobianHandle::apply");
  return out;
}

Vector JacobianHandle::apply_adjoint(const Vector& w) const {
  require_dim(w.size(), rows(), "JacobianHandle::apply_adjoint");
  counter_->add_adjoint();
  Vector out = map_->apply_adjoint(w);
  require_finite(out, "JacobianHandle::apply_adjoint");
  return out;
}

ForwardModel::ForwardModel(Index domain_dim, Index range_dim)
    : domain_dim_(domain_dim), range_dim_(range_dim), counter_(std::make_shared<CostCounter>()) {
  require(domain_dim > 0 && range_dim > 0, "ForwardModel: dimensions must be positive");
}

Vector ForwardModel::evaluate(const Vector& x) const {
  require_dim(x.size(), domain_dim_, "ForwardModel::evaluate");
  require_finite(x, "ForwardModel::evaluate input");
  counter_->add_evaluation();
  Vector y = evaluate_impl(x);
  require_dim(y.size(), range_dim_, "ForwardModel::evaluate output");
  require_finite(y, "ForwardModel::evaluate output");
  return y;
}

JacobianHandle ForwardModel::linearize(const Vector& x) const {
  require_dim(x.size(), domain_dim_, "ForwardModel::linearize");
  require_finite(x, "ForwardModel::linearize input");
  auto map = linearize_impl(x);
  require(map->rows() == range_dim_ && map->cols() == domain_dim_,
          "ForwardModel::linearize: Jacobian has wrong shape");
  return JacobianHandle(std::move(map), next_id_.fetch_add(1), counter_);
}

LinearModel::LinearModel(std::shared_ptr<const LinearMap> map)
    : ForwardModel(map->cols(), map->rows()), map_(std::move(map)) {}

LinearModel::LinearModel(Matrix matrix)
    : LinearModel(std::make_shared<DenseLinearMap>(std::move(matrix))) {}

TikhonovSystem::TikhonovSystem(JacobianHandle jac, double gamma, Vector rhs_data, Vector rhs_prior)
    : jac_(std::move(jac)), gamma_(gamma), rhs_data_(std::move(rhs_data)),
      rhs_prior_(std::move(rhs_prior)) {
  require(gamma_ > 0.0 && std::isfinite(gamma_), "TikhonovSystem: gamma must be positive");
  require_dim(rhs_data_.size(), jac_.rows(), "TikhonovSystem rhs_data");
  require_dim(rhs_prior_.size(), jac_.cols(), "TikhonovSystem rhs_prior");
  require_finite(rhs_data_, "TikhonovSystem rhs_data");
  require_finite(rhs_prior_, "TikhonovSystem rhs_prior");
}

Vector TikhonovSystem::apply(const Vector& v) const {
  require_dim(v.size(), domain_dim(), "stacked_apply");
  const Index n = jac_.rows();
  Vector out(range_dim());
  out.head(n) = jac_.apply(v);
  out.tail(v.size()) = std::sqrt(gamma_) * v;
  return out;
}

Vector TikhonovSystem::apply_adjoint(const Vector& d) const {
  require_dim(d.size(), range_dim(), "stacked_adjoint_apply");
  const Index n = jac_.rows();
  Vector out = jac_.apply_adjoint(d.head(n));
  out += std::sqrt(gamma_) * d.tail(domain_dim());
  return out;
}

Vector TikhonovSystem::stacked_rhs() const {
  Vector g(range_dim());
  g.head(jac_.rows()) = rhs_data_;
  g.tail(jac_.cols()) = std::sqrt(gamma_) * rhs_prior_;
  return g;
}

Vector stacked_apply(const TikhonovSystem& sys, const Vector& v) { return sys.apply(v); }

Vector stacked_adjoint_apply(const TikhonovSystem& sys, const Vector& d) {
  return sys.apply_adjoint(d);
}

TikhonovRhs build_rhs(RhsKind kind, const Vector& x0, const Vector& xk, const Vector& residual) {
  require_dim(xk.size(), x0.size(), "build_rhs x_k");
  TikhonovRhs rhs;
  rhs.data = residual;
  if (kind == RhsKind::IRGNM) {
    rhs.prior = x0 - xk;
  } else {
    rhs.prior = Vector::Zero(x0.size());
  }
  return rhs;
}

Matrix assemble_dense(const JacobianHandle& jac) {
  Matrix a(jac.rows(), jac.cols());
  Vector e = Vector::Zero(jac.cols());
  for (Index j = 0; j < jac.cols(); ++j) {
    e[j] = 1.0;
    a.col(j) = jac.apply(e);
    e[j] = 0.0;
  }
  return a;
}

AdjointTestReport adjoint_test(const JacobianHandle& jac, int pairs, std::uint64_t seed,
                               double tolerance) {
  require(pairs > 0, "adjoint_test: need at least one pair");
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  AdjointTestReport report;
  report.pairs = pairs;
  for (int i = 0; i < pairs; ++i) {
    Vector v(jac.cols());
    Vector w(jac.rows());
    for (Index j = 0; j < v.size(); ++j) v[j] = normal(gen);
    for (Index j = 0; j < w.size(); ++j) w[j] = normal(gen);
    const Vector av = jac.apply(v);
    const Vector atw = jac.apply_adjoint(w);
    const double scale = av.norm() * w.norm() + v.norm() * atw.norm();
    const double gap = std::abs(av.dot(w) - v.dot(atw));
    report.worst_relative_gap = std::max(report.worst_relative_gap, scale > 0.0 ? gap / scale : gap);
  }
  report.passed = report.worst_relative_gap <= tolerance;
  return report;
}

FiniteDifferenceReport finite_difference_test(const ForwardModel& model, const Vector& x,
                                              const Vector& v, const std::vector<double>& steps,
                                              double min_order) {
  require(steps.size() >= 2, "finite_difference_test: need at least two step sizes");
  require_dim(x.size(), model.domain_dim(), "finite_difference_test x");
  require_dim(v.size(), model.domain_dim(), "finite_difference_test v");
  const Vector fx = model.evaluate(x);
  const Vector av = model.linearize(x).apply(v);

  FiniteDifferenceReport report;
  report.steps = steps;
  for (double t : steps) {
    require(t > 0.0, "finite_difference_test: step sizes must be positive");
    const Vector fd = (model.evaluate(x + t * v) - fx) / t;
    report.errors.push_back((fd - av).norm());
  }
  // A model that is linear along v leaves only rounding error.
  const double worst = *std::max_element(report.errors.begin(), report.errors.end());
  if (worst <= 1e-8 * std::max(av.norm(), 1.0)) {
    report.observed_order = std::numeric_limits<double>::infinity();
    report.passed = true;
    return report;
  }
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double n = static_cast<double>(steps.size());
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const double lx = std::log(steps[i]);
    const double ly = std::log(std::max(report.errors[i], std::numeric_limits<double>::min()));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  report.observed_order = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  report.passed = report.observed_order >= min_order;
  return report;
}

}  // namespace specreg
