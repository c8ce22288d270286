#include "specreg/krylov.hpp"

#include <algorithm>
#include <cmath>

namespace specreg {

namespace {

constexpr double kAlphaCeiling = 1e16;

// Reorthogonalizes new CG residuals against the stored Lanczos directions.
class Reorthogonalizer {
 public:
  Reorthogonalizer(Index dim, bool euclidean) : euclidean_(euclidean), basis_(dim) {}

  // z_tilde = M-normalized direction, r_hat = M z_tilde.
  void add(const Vector& z_tilde, const Vector& r_hat) {
    if (euclidean_) {
      basis_.append(z_tilde, 0.0);
    } else {
      z_dirs_.push_back(z_tilde);
      r_dirs_.push_back(r_hat);
    }
  }

  void apply(Vector& r) const {
    if (euclidean_) {
      r = basis_.project_out(r);
      return;
    }
    // Two passes of classical Gram-Schmidt in the M^{-1} inner product.
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < z_dirs_.size(); ++j) r -= z_dirs_[j].dot(r) * r_dirs_[j];
    }
  }

 private:
  bool euclidean_;
  HouseholderBasis basis_;
  std::vector<Vector> z_dirs_;
  std::vector<Vector> r_dirs_;
};

}  // namespace

void CgConfig::validate() const {
  require(epsilon > 0.0 && epsilon < 1.0, "CgConfig: epsilon must lie in (0, 1)");
  require(max_iterations > 0, "CgConfig: max_iterations must be positive");
}

double CgTrace::final_beta_over_alpha() const {
  if (alphas.empty()) return 0.0;
  return std::sqrt(betas.back()) / alphas.back();
}

CgResult pcg_solve(const StackedOperator& op, const Vector& g, const PreconditionerAction& precond,
                   const CgConfig& cfg) {
  cfg.validate();
  require_dim(g.size(), op.range_dim(), "pcg_solve rhs");
  require_finite(g, "pcg_solve rhs");

  const Index m = op.domain_dim();
  const double floor = op.spectral_floor();
  const bool need_basis = cfg.reorthogonalize || cfg.collect_lanczos;
  std::optional<Reorthogonalizer> reorth;
  if (cfg.reorthogonalize) reorth.emplace(m, precond.is_scaled_identity());

  CgResult result;
  CgTrace& trace = result.trace;
  Vector h = Vector::Zero(m);
  Vector d = g;
  Vector r = op.apply_adjoint(d);
  Vector z = precond.apply_inverse(r);
  double rz = r.dot(z);
  Vector p = z;

  trace.gradient_norms.push_back(r.norm());
  trace.residual_norms.push_back(d.norm());
  if (cfg.trace_csv != nullptr) *cfg.trace_csv << "l,residual,alpha,beta\n";

  auto fail = [&](const std::string& why) -> BreakdownError {
    result.solution = h;
    return BreakdownError("pcg_solve breakdown at iteration " +
                              std::to_string(trace.iterations + 1) + ": " + why,
                          result);
  };

  int l = 0;
  while (trace.gradient_norms.back() > cfg.epsilon * floor * h.norm()) {
    if (l == cfg.max_iterations) break;
    if (need_basis) {
      if (!(rz > 0.0) || !std::isfinite(rz)) throw fail("preconditioned residual norm not positive");
      const double scale = std::sqrt(rz);
      Vector z_tilde = z / scale;
      if (reorth) reorth->add(z_tilde, r / scale);
      if (cfg.collect_lanczos) trace.z_basis.push_back(std::move(z_tilde));
    }
    ++l;
    const Vector q = op.apply(p);
    const double qq = q.squaredNorm();
    if (!(qq > 0.0) || !std::isfinite(qq)) throw fail("||q|| vanished or is not finite");
    const double alpha = rz / qq;
    if (!(alpha > 0.0 && alpha < kAlphaCeiling)) throw fail("alpha outside (0, 1e16)");

    h += alpha * p;
    d -= alpha * q;
    r = op.apply_adjoint(d);
    if (reorth) reorth->apply(r);
    z = precond.apply_inverse(r);
    const double rz_next = r.dot(z);
    const double beta = rz_next / rz;
    if (!std::isfinite(beta) || beta < 0.0) throw fail("beta not finite or negative");
    p = z + beta * p;
    rz = rz_next;

    trace.alphas.push_back(alpha);
    trace.betas.push_back(beta);
    trace.gradient_norms.push_back(r.norm());
    trace.residual_norms.push_back(d.norm());
    trace.iterations = l;
    if (cfg.trace_csv != nullptr) {
      *cfg.trace_csv << l << ',' << trace.gradient_norms.back() << ',' << alpha << ',' << beta
                     << '\n';
    }
    if (!h.allFinite()) throw fail("iterate became non-finite");
  }

  result.converged = trace.gradient_norms.back() <= cfg.epsilon * floor * h.norm();
  result.solution = std::move(h);
  return result;
}

Tridiagonal tridiagonal_from_trace(const CgTrace& trace) {
  const auto l = static_cast<Index>(trace.alphas.size());
  require(l >= 1, "tridiagonal_from_trace: empty trace");
  Tridiagonal t;
  t.diag.resize(l);
  t.offdiag.resize(l - 1);
  t.diag[0] = 1.0 / trace.alphas[0];
  for (Index j = 1; j < l; ++j) {
    const double a_prev = trace.alphas[j - 1];
    const double b_prev = trace.betas[j - 1];
    t.diag[j] = 1.0 / trace.alphas[j] + b_prev / a_prev;
    t.offdiag[j - 1] = -std::sqrt(b_prev) / a_prev;
  }
  return t;
}

std::vector<RitzPair> ritz_from_trace(const CgTrace& trace) {
  require(trace.iterations >= 1 && !trace.alphas.empty(), "ritz_from_trace: empty trace");
  require(trace.z_basis.size() == trace.alphas.size(),
          "ritz_from_trace: trace was collected without Lanczos vectors");
  const Tridiagonal t = tridiagonal_from_trace(trace);
  const Index l = t.diag.size();

  Vector thetas;
  Matrix w;
  if (l == 1) {
    thetas = t.diag;
    w = Matrix::Identity(1, 1);
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix> eig;
    eig.computeFromTridiagonal(t.diag, t.offdiag, Eigen::ComputeEigenvectors);
    if (eig.info() != Eigen::Success) throw NumericalError("ritz_from_trace: eigensolver failed");
    thetas = eig.eigenvalues();
    w = eig.eigenvectors();
  }

  if (thetas.minCoeff() <= 0.0) {
    throw NumericalError(
        "ritz_from_trace: tridiagonal matrix is not positive definite (orthogonality lost)");
  }

  const double bound_scale = trace.final_beta_over_alpha();
  std::vector<RitzPair> pairs;
  pairs.reserve(static_cast<std::size_t>(l));
  for (Index i = l - 1; i >= 0; --i) {
    RitzPair pair;
    pair.theta = thetas[i];
    pair.vector = Vector::Zero(trace.z_basis.front().size());
    for (Index j = 0; j < l; ++j) pair.vector += w(j, i) * trace.z_basis[static_cast<std::size_t>(j)];
    pair.residual_bound = bound_scale * std::abs(w(l - 1, i));
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

std::vector<RitzPair> select_ritz(const std::vector<RitzPair>& pairs, double separation_threshold,
                                  double residual_tolerance) {
  require(separation_threshold > 0.0 && residual_tolerance > 0.0,
          "select_ritz: thresholds must be positive");
  std::vector<RitzPair> kept;
  for (const auto& pair : pairs) {
    if (pair.theta >= separation_threshold && pair.residual_bound <= residual_tolerance * pair.theta) {
      kept.push_back(pair);
    }
  }
  return kept;
}

HouseholderBasis::HouseholderBasis(Index dim) : dim_(dim) {
  require(dim > 0, "HouseholderBasis: dimension must be positive");
}

void HouseholderBasis::apply_forward(Vector& v, Index count) const {
  for (Index k = 0; k < count; ++k) {
    const Vector& u = reflectors_[static_cast<std::size_t>(k)];
    const double c = 2.0 * u.tail(dim_ - k).dot(v.tail(dim_ - k));
    v.tail(dim_ - k) -= c * u.tail(dim_ - k);
  }
}

void HouseholderBasis::apply_backward(Vector& v, Index count) const {
  for (Index k = count - 1; k >= 0; --k) {
    const Vector& u = reflectors_[static_cast<std::size_t>(k)];
    const double c = 2.0 * u.tail(dim_ - k).dot(v.tail(dim_ - k));
    v.tail(dim_ - k) -= c * u.tail(dim_ - k);
  }
}

Vector HouseholderBasis::project_out(const Vector& v) const {
  require_dim(v.size(), dim_, "HouseholderBasis::project_out");
  Vector w = v;
  apply_forward(w, size());
  w.head(size()).setZero();
  apply_backward(w, size());
  return w;
}

std::optional<Vector> HouseholderBasis::append(const Vector& v, double drop_tolerance) {
  require_dim(v.size(), dim_, "HouseholderBasis::append");
  const Index k = size();
  if (k == dim_) return std::nullopt;
  Vector w = v;
  apply_forward(w, k);
  const double tail_norm = w.tail(dim_ - k).norm();
  if (tail_norm == 0.0 || tail_norm < drop_tolerance * v.norm()) return std::nullopt;

  Vector u = Vector::Zero(dim_);
  u.tail(dim_ - k) = w.tail(dim_ - k);
  const double sign = u[k] >= 0.0 ? 1.0 : -1.0;
  u[k] += sign * tail_norm;
  u /= u.norm();
  reflectors_.push_back(std::move(u));
  return basis_vector(k);
}

Vector HouseholderBasis::basis_vector(Index k) const {
  require(k >= 0 && k < size(), "HouseholderBasis::basis_vector: index out of range");
  Vector e = Vector::Zero(dim_);
  e[k] = 1.0;
  apply_backward(e, k + 1);
  return e;
}

std::vector<Vector> reorthogonalize_basis(const std::vector<Vector>& vectors, double drop_tolerance,
                                          std::vector<std::size_t>* kept) {
  require(!vectors.empty(), "reorthogonalize_basis: no vectors");
  const Index dim = vectors.front().size();
  bool any_nonzero = false;
  for (const auto& v : vectors) {
    require_dim(v.size(), dim, "reorthogonalize_basis");
    any_nonzero = any_nonzero || v.norm() > 0.0;
  }
  require(any_nonzero, "reorthogonalize_basis: all vectors are zero");

  HouseholderBasis basis(dim);
  std::vector<Vector> out;
  if (kept != nullptr) kept->clear();
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (auto q = basis.append(vectors[i], drop_tolerance)) {
      // Householder may flip the sign; keep the orientation of the input.
      if (q->dot(vectors[i]) < 0.0) *q = -*q;
      out.push_back(std::move(*q));
      if (kept != nullptr) kept->push_back(i);
    }
  }
  return out;
}

CglsResult cgls_truncated(const JacobianHandle& jac, const Vector& b, double rho,
                          int max_iterations) {
  require(rho > 0.0 && rho < 1.0, "cgls_truncated: rho must lie in (0, 1)");
  require(max_iterations > 0, "cgls_truncated: max_iterations must be positive");
  require_dim(b.size(), jac.rows(), "cgls_truncated rhs");

  CglsResult result;
  result.solution = Vector::Zero(jac.cols());
  Vector residual = b;
  const double target = rho * b.norm();
  result.residual_norm = b.norm();
  if (result.residual_norm <= target || result.residual_norm == 0.0) return result;

  Vector s = jac.apply_adjoint(residual);
  Vector p = s;
  double gamma = s.squaredNorm();
  while (result.iterations < max_iterations && gamma > 0.0) {
    const Vector q = jac.apply(p);
    const double qq = q.squaredNorm();
    if (!(qq > 0.0)) break;
    const double alpha = gamma / qq;
    result.solution += alpha * p;
    residual -= alpha * q;
    ++result.iterations;
    result.residual_norm = residual.norm();
    if (result.residual_norm <= target) break;
    s = jac.apply_adjoint(residual);
    const double gamma_next = s.squaredNorm();
    p = s + (gamma_next / gamma) * p;
    gamma = gamma_next;
  }
  return result;
}

}  // namespace specreg
