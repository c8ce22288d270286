#include "specreg/spectral_preconditioner.hpp"

#include "specreg/format.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace specreg {

namespace {

constexpr double kLambdaFloor = 1e-14;
constexpr double kOrthonormalityTol = 1e-10;
constexpr const char* kSnapshotMagic = "specreg-spectral-preconditioner";

}  // namespace

SpectralPreconditioner::SpectralPreconditioner(double gamma, Index dim)
    : gamma_(gamma), lambdas_(0), vectors_(dim, 0) {
  require(gamma > 0.0 && std::isfinite(gamma), "SpectralPreconditioner: gamma must be positive");
  require(dim > 0, "SpectralPreconditioner: dimension must be positive");
}

SpectralPreconditioner::SpectralPreconditioner(double gamma, const Vector& lambdas,
                                               const Matrix& vectors,
                                               std::optional<Matrix> left_vectors)
    : gamma_(gamma) {
  require(gamma > 0.0 && std::isfinite(gamma), "SpectralPreconditioner: gamma must be positive");
  require(vectors.rows() > 0, "SpectralPreconditioner: dimension must be positive");
  require_dim(vectors.cols(), lambdas.size(), "SpectralPreconditioner eigenvector count");
  require(lambdas.allFinite() && vectors.allFinite(), "SpectralPreconditioner: non-finite input");
  if (left_vectors) {
    require_dim(left_vectors->cols(), lambdas.size(), "SpectralPreconditioner left vector count");
  }
  for (Index j = 0; j < lambdas.size(); ++j) {
    require(lambdas[j] > 0.0, "SpectralPreconditioner: eigenvalues must be positive");
  }

  const double lambda_max = lambdas.size() > 0 ? lambdas.maxCoeff() : 0.0;
  std::vector<Index> keep;
  for (Index j = 0; j < lambdas.size(); ++j) {
    if (lambdas[j] >= kLambdaFloor * lambda_max) keep.push_back(j);
  }
  const auto count = static_cast<Index>(keep.size());
  lambdas_.resize(count);
  vectors_.resize(vectors.rows(), count);
  if (left_vectors) left_vectors_ = Matrix(left_vectors->rows(), count);
  for (Index c = 0; c < count; ++c) {
    lambdas_[c] = lambdas[keep[c]];
    vectors_.col(c) = vectors.col(keep[c]);
    if (left_vectors) left_vectors_->col(c) = left_vectors->col(keep[c]);
  }

  if (count > 0) {
    const Matrix gram = vectors_.transpose() * vectors_;
    const double dev = (gram - Matrix::Identity(count, count)).cwiseAbs().maxCoeff();
    require(dev <= kOrthonormalityTol, "SpectralPreconditioner: eigenvectors are not orthonormal");
  }
  if (left_vectors_) {
    for (Index c = 0; c < count; ++c) {
      require(std::abs(left_vectors_->col(c).norm() - 1.0) <= kOrthonormalityTol,
              "SpectralPreconditioner: left vectors must have unit norm");
    }
  }
}

std::vector<EigenPair> SpectralPreconditioner::pairs() const {
  std::vector<EigenPair> out;
  for (Index j = 0; j < size(); ++j) out.push_back({lambdas_[j], vectors_.col(j)});
  return out;
}

SpectralPreconditioner SpectralPreconditioner::with_gamma(double gamma) const {
  SpectralPreconditioner copy = *this;
  require(gamma > 0.0 && std::isfinite(gamma), "SpectralPreconditioner: gamma must be positive");
  copy.gamma_ = gamma;
  return copy;
}

SpectralPreconditioner SpectralPreconditioner::with_left_vectors(const JacobianHandle& jac) const {
  require_dim(jac.cols(), dim(), "with_left_vectors Jacobian domain");
  Matrix left(jac.rows(), size());
  for (Index j = 0; j < size(); ++j) {
    Vector au = jac.apply(vectors_.col(j));
    const double norm = au.norm();
    if (!(norm > 0.0)) throw NumericalError("with_left_vectors: A u_j vanished");
    left.col(j) = au / norm;
  }
  SpectralPreconditioner copy = *this;
  copy.left_vectors_ = std::move(left);
  return copy;
}

template <class Fn>
Vector SpectralPreconditioner::spectral_map(const Vector& x, double scale_0, Fn&& f) const {
  require_dim(x.size(), dim(), "SpectralPreconditioner apply");
  Vector out = scale_0 * x;
  if (size() == 0) return out;
  const Vector coeffs = vectors_.transpose() * x;
  Vector weights(size());
  for (Index j = 0; j < size(); ++j) weights[j] = (f(lambdas_[j]) - scale_0) * coeffs[j];
  out.noalias() += vectors_ * weights;
  return out;
}

Vector SpectralPreconditioner::apply_forward(const Vector& x) const {
  return spectral_map(x, gamma_, [&](double lambda) { return gamma_ + lambda; });
}

Vector SpectralPreconditioner::apply_inverse(const Vector& x) const {
  return spectral_map(x, 1.0 / gamma_, [&](double lambda) { return 1.0 / (gamma_ + lambda); });
}

Vector SpectralPreconditioner::apply_inv_sqrt(const Vector& x) const {
  return spectral_map(x, 1.0 / std::sqrt(gamma_),
                      [&](double lambda) { return 1.0 / std::sqrt(gamma_ + lambda); });
}

Vector SpectralPreconditioner::apply_sqrt(const Vector& x) const {
  return spectral_map(x, std::sqrt(gamma_),
                      [&](double lambda) { return std::sqrt(gamma_ + lambda); });
}

Matrix SpectralPreconditioner::dense() const {
  Matrix m = gamma_ * Matrix::Identity(dim(), dim());
  m.noalias() += vectors_ * lambdas_.asDiagonal() * vectors_.transpose();
  return m;
}

TwoSidedSystem::TwoSidedSystem(const TikhonovSystem& sys, const SpectralPreconditioner& precond)
    : sys_(sys), precond_(precond) {
  require_dim(precond.dim(), sys.domain_dim(), "TwoSidedSystem preconditioner");
}

Vector TwoSidedSystem::apply(const Vector& v) const {
  return sys_.apply(precond_.apply_inv_sqrt(v));
}

Vector TwoSidedSystem::apply_adjoint(const Vector& d) const {
  return precond_.apply_inv_sqrt(sys_.apply_adjoint(d));
}

EigenPair ritz_to_eigenpair(double mu, double gamma, const Vector& u) {
  require(gamma > 0.0, "ritz_to_eigenpair: gamma must be positive");
  if (!(mu > 1.0)) {
    throw ClusterRitzValue("ritz_to_eigenpair: Ritz value " + format_double(mu) +
                           " belongs to the cluster at 1");
  }
  return {gamma * (mu - 1.0), u};
}

SpectralPreconditioner merge_pairs(const SpectralPreconditioner& existing,
                                   const std::vector<EigenPair>& new_pairs, double new_gamma,
                                   double dependence_tolerance) {
  std::vector<Vector> vectors;
  std::vector<double> lambdas;
  for (Index j = 0; j < existing.size(); ++j) {
    vectors.push_back(existing.vectors().col(j));
    lambdas.push_back(existing.lambdas()[j]);
  }
  for (const auto& pair : new_pairs) {
    require(pair.lambda > 0.0, "merge_pairs: eigenvalues must be positive");
    require_dim(pair.vector.size(), existing.dim(), "merge_pairs eigenvector");
    vectors.push_back(pair.vector);
    lambdas.push_back(pair.lambda);
  }
  if (vectors.empty()) return SpectralPreconditioner(new_gamma, existing.dim());

  // Existing vectors are orthonormal already; only newcomers get the looser test.
  HouseholderBasis basis(existing.dim());
  std::vector<Vector> kept_vectors;
  std::vector<double> kept_lambdas;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const bool newcomer = static_cast<Index>(i) >= existing.size();
    const double tol = newcomer ? dependence_tolerance : 1e-12;
    if (auto q = basis.append(vectors[i], tol)) {
      if (q->dot(vectors[i]) < 0.0) *q = -*q;
      kept_vectors.push_back(std::move(*q));
      kept_lambdas.push_back(lambdas[i]);
    }
  }

  const auto count = static_cast<Index>(kept_vectors.size());
  Matrix u(existing.dim(), count);
  Vector lam(count);
  for (Index c = 0; c < count; ++c) {
    u.col(c) = kept_vectors[static_cast<std::size_t>(c)];
    lam[c] = kept_lambdas[static_cast<std::size_t>(c)];
  }
  return SpectralPreconditioner(new_gamma, lam, u);
}

SpectrumReport preconditioned_spectrum_check(const SpectralPreconditioner& precond, const Matrix& a,
                                             double tolerance) {
  const Index m = a.cols();
  require_dim(precond.dim(), m, "preconditioned_spectrum_check");
  require(m <= 2000, "preconditioned_spectrum_check: dense assembly too large");
  const double gamma = precond.gamma();

  const Matrix gram = a.transpose() * a;
  Eigen::SelfAdjointEigenSolver<Matrix> gram_eig(gram);

  // M^{-1/2} (A^T A + gamma I) M^{-1/2} is similar to M^{-1} G^T G.
  Matrix inv_sqrt(m, m);
  for (Index j = 0; j < m; ++j) inv_sqrt.col(j) = precond.apply_inv_sqrt(Vector::Unit(m, j));
  const Matrix sym = inv_sqrt * (gram + gamma * Matrix::Identity(m, m)) * inv_sqrt;
  Eigen::SelfAdjointEigenSolver<Matrix> pre_eig(0.5 * (sym + sym.transpose()),
                                                Eigen::EigenvaluesOnly);

  std::vector<bool> in_set(static_cast<std::size_t>(m), false);
  for (Index j = 0; j < precond.size(); ++j) {
    const Vector overlaps = (gram_eig.eigenvectors().transpose() * precond.vectors().col(j)).cwiseAbs();
    Index best = -1;
    for (Index i = 0; i < m; ++i) {
      if (in_set[static_cast<std::size_t>(i)]) continue;
      if (best < 0 || overlaps[i] > overlaps[best]) best = i;
    }
    if (best >= 0) in_set[static_cast<std::size_t>(best)] = true;
  }

  SpectrumReport report;
  report.expected.resize(m);
  for (Index i = 0; i < m; ++i) {
    report.expected[i] =
        in_set[static_cast<std::size_t>(i)] ? 1.0 : 1.0 + gram_eig.eigenvalues()[i] / gamma;
  }
  std::sort(report.expected.begin(), report.expected.end());
  report.eigenvalues = pre_eig.eigenvalues();
  for (Index i = 0; i < m; ++i) {
    const double scale = std::max(1.0, std::abs(report.expected[i]));
    report.max_deviation =
        std::max(report.max_deviation, std::abs(report.eigenvalues[i] - report.expected[i]) / scale);
  }
  report.matches = report.max_deviation <= tolerance;
  return report;
}

SpectrumReport preconditioned_spectrum_check(const SpectralPreconditioner& precond,
                                             const JacobianHandle& jac, double tolerance) {
  return preconditioned_spectrum_check(precond, assemble_dense(jac), tolerance);
}

void save_preconditioner(std::ostream& out, const SpectralPreconditioner& precond) {
  out << kSnapshotMagic << " 1\n";
  out << precond.dim() << ' ' << precond.size() << '\n';
  out << format_double(precond.gamma()) << '\n';
  for (Index j = 0; j < precond.size(); ++j) out << format_double(precond.lambdas()[j]) << '\n';
  for (Index j = 0; j < precond.size(); ++j) {
    for (Index i = 0; i < precond.dim(); ++i) out << format_double(precond.vectors()(i, j)) << '\n';
  }
}

SpectralPreconditioner load_preconditioner(std::istream& in) {
  std::string magic;
  int version = 0;
  Index dim = 0;
  Index count = 0;
  double gamma = 0.0;
  if (!(in >> magic >> version) || magic != kSnapshotMagic || version != 1) {
    throw ContractViolation("load_preconditioner: not a preconditioner snapshot");
  }
  if (!(in >> dim >> count >> gamma) || dim <= 0 || count < 0) {
    throw ContractViolation("load_preconditioner: malformed header");
  }
  Vector lambdas(count);
  Matrix vectors(dim, count);
  for (Index j = 0; j < count; ++j) {
    if (!(in >> lambdas[j])) throw ContractViolation("load_preconditioner: truncated eigenvalues");
  }
  for (Index j = 0; j < count; ++j) {
    for (Index i = 0; i < dim; ++i) {
      if (!(in >> vectors(i, j))) throw ContractViolation("load_preconditioner: truncated vectors");
    }
  }
  if (count == 0) return SpectralPreconditioner(gamma, dim);
  return SpectralPreconditioner(gamma, lambdas, vectors);
}

}  // namespace specreg
