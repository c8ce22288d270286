#include "specreg/testbed.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace specreg {

namespace {

Matrix random_orthonormal(Index rows, Index cols, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) g(i, j) = normal(gen);
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
  // Fix the sign ambiguity of QR so the factor is a function of the seed only.
  const Matrix r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  for (Index j = 0; j < cols; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

Matrix cosine_basis(Index m) {
  Matrix v(m, m);
  const double pi = std::numbers::pi;
  for (Index j = 0; j < m; ++j) {
    const double c = j == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
    for (Index i = 0; i < m; ++i) v(i, j) = c * std::cos(pi * (i + 0.5) * j / m);
  }
  return v;
}

// Jacobian K diag(s'(x)) of the composite model.
class CompositeJacobian final : public LinearMap {
 public:
  CompositeJacobian(std::shared_ptr<const LinearMap> base, Vector derivative)
      : base_(std::move(base)), derivative_(std::move(derivative)) {}
  Index rows() const override { return base_->rows(); }
  Index cols() const override { return base_->cols(); }
  Vector apply(const Vector& v) const override {
    return base_->apply(derivative_.cwiseProduct(v));
  }
  Vector apply_adjoint(const Vector& w) const override {
    return derivative_.cwiseProduct(base_->apply_adjoint(w));
  }

 private:
  std::shared_ptr<const LinearMap> base_;
  Vector derivative_;
};

}  // namespace

Vector two_bump_profile(Index n) {
  require(n > 1, "two_bump_profile: need at least two points");
  Vector x(n);
  for (Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n - 1);
    x[i] = std::exp(-0.5 * std::pow((t - 0.3) / 0.08, 2)) +
           0.6 * std::exp(-0.5 * std::pow((t - 0.68) / 0.12, 2));
  }
  return x;
}

DiagonalProblem make_diagonal_problem(Index m, Index n, double decay_a, std::uint64_t seed,
                                      const DiagonalProblemOptions& options) {
  require(m > 0, "make_diagonal_problem: M must be positive");
  require(decay_a > 0.0, "make_diagonal_problem: decay rate must be positive");
  require(options.scale > 0.0, "make_diagonal_problem: scale must be positive");
  Vector sigma(m);
  for (Index j = 0; j < m; ++j) {
    sigma[j] = std::max(options.scale * std::exp(-decay_a * static_cast<double>(j)),
                        1e-14 * options.scale);
  }
  return make_diagonal_problem(sigma, n, seed, options);
}

DiagonalProblem make_diagonal_problem(const Vector& singular_values, Index n, std::uint64_t seed,
                                      const DiagonalProblemOptions& options) {
  const Index m = singular_values.size();
  require(m > 0 && m <= n, "make_diagonal_problem: need 0 < M <= N");
  require(singular_values.minCoeff() > 0.0, "make_diagonal_problem: singular values must be positive");

  DiagonalProblem p;
  p.seed = seed;
  p.singular_values = singular_values;
  std::mt19937_64 gen(seed);
  p.left = random_orthonormal(n, m, gen);
  if (options.smooth_right_basis) {
    p.right = cosine_basis(m);
  } else {
    std::mt19937_64 gen_right(seed ^ 0x9e3779b97f4a7c15ULL);
    p.right = random_orthonormal(m, m, gen_right);
  }
  p.truth = two_bump_profile(m);
  p.map = std::make_shared<DenseLinearMap>(p.left * singular_values.asDiagonal() *
                                           p.right.transpose());
  return p;
}

Vector ConvolutionProblem::symbol() const {
  Vector s(n);
  const double pi = std::numbers::pi;
  for (Index j = 0; j < n; ++j) {
    double sum = 0.0;
    for (Index i = 0; i < n; ++i) sum += kernel[i] * std::cos(2.0 * pi * i * j / n);
    s[j] = sum;
  }
  return s;
}

ConvolutionProblem make_convolution_problem(Index n, double kernel_width, std::uint64_t seed) {
  require(n >= 8, "make_convolution_problem: n must be at least 8");
  require(kernel_width > 0.0, "make_convolution_problem: kernel width must be positive");
  ConvolutionProblem p;
  p.n = n;
  p.kernel_width = kernel_width;
  p.kernel.resize(n);
  for (Index i = 0; i < n; ++i) {
    const double dist = static_cast<double>(std::min(i, n - i)) / static_cast<double>(n);
    p.kernel[i] = std::exp(-0.5 * std::pow(dist / kernel_width, 2));
  }
  p.kernel /= p.kernel.sum();

  Matrix a(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) a(i, j) = p.kernel[((i - j) % n + n) % n];
  }
  p.map = std::make_shared<DenseLinearMap>(std::move(a));

  // The seed shifts the truth cyclically.
  std::mt19937_64 gen(seed);
  const Index shift = static_cast<Index>(gen() % static_cast<std::uint64_t>(n));
  const Vector base = two_bump_profile(n);
  p.truth.resize(n);
  for (Index i = 0; i < n; ++i) p.truth[i] = base[(i + shift) % n];
  return p;
}

NonlinearComposite::NonlinearComposite(std::shared_ptr<const LinearMap> base, double c3)
    : ForwardModel(base->cols(), base->rows()), base_(std::move(base)), c3_(c3) {
  require(c3 >= 0.0, "NonlinearComposite: c3 must be nonnegative");
}

Vector NonlinearComposite::evaluate_impl(const Vector& x) const {
  const Vector s = x + c3_ * x.cwiseProduct(x).cwiseProduct(x);
  return base_->apply(s);
}

std::shared_ptr<const LinearMap> NonlinearComposite::linearize_impl(const Vector& x) const {
  Vector derivative = Vector::Ones(x.size()) + 3.0 * c3_ * x.cwiseProduct(x);
  return std::make_shared<CompositeJacobian>(base_, std::move(derivative));
}

NonlinearProblem make_nonlinear_composite(std::shared_ptr<const LinearMap> base, double c3,
                                          Vector truth) {
  require_dim(truth.size(), base->cols(), "make_nonlinear_composite truth");
  NonlinearProblem p;
  p.model = std::make_shared<NonlinearComposite>(std::move(base), c3);
  p.truth = std::move(truth);
  return p;
}

std::vector<Vector> generate_noise(double sigma, Index n, std::size_t count, std::uint64_t seed) {
  require(sigma >= 0.0, "generate_noise: sigma must be nonnegative");
  require(count >= 1, "generate_noise: at least one sample is required");
  std::vector<Vector> out(count, Vector::Zero(n));
  if (sigma == 0.0) return out;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& v : out) {
    for (Index i = 0; i < n; ++i) v[i] = normal(gen);
  }
  return out;
}

double sigma_for_relative_level(const Vector& y, double relative_level) {
  require(relative_level >= 0.0, "sigma_for_relative_level: level must be nonnegative");
  return relative_level * y.norm() / std::sqrt(static_cast<double>(y.size()));
}

DenseOracle::DenseOracle(Matrix a) : a_(std::move(a)) {
  if (a_.cols() > kMaxDim) {
    throw ContractViolation("DenseOracle: M = " + std::to_string(a_.cols()) +
                            " exceeds the dense limit of 300");
  }
}

DenseOracle DenseOracle::from_model(const ForwardModel& model, const Vector& x) {
  if (model.domain_dim() > kMaxDim) {
    throw ContractViolation("DenseOracle: model too large for dense assembly");
  }
  return DenseOracle(assemble_dense(model.linearize(x)));
}

Vector DenseOracle::tikhonov_solution(double gamma, const Vector& y, const Vector& b) const {
  require(gamma > 0.0, "tikhonov_solution: gamma must be positive");
  const Index n = a_.rows();
  const Index m = a_.cols();
  Matrix stacked(n + m, m);
  stacked.topRows(n) = a_;
  stacked.bottomRows(m) = std::sqrt(gamma) * Matrix::Identity(m, m);
  Vector rhs(n + m);
  rhs.head(n) = y;
  rhs.tail(m) = std::sqrt(gamma) * b;
  return stacked.colPivHouseholderQr().solve(rhs);
}

Vector DenseOracle::tikhonov_solution_normal(double gamma, const Vector& y, const Vector& b) const {
  const Matrix normal = a_.transpose() * a_ + gamma * Matrix::Identity(a_.cols(), a_.cols());
  return normal.llt().solve(a_.transpose() * y + gamma * b);
}

Vector DenseOracle::gram_eigenvalues() const {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a_.transpose() * a_, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().reverse();
}

Matrix DenseOracle::gram_eigenvectors() const {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a_.transpose() * a_);
  return eig.eigenvectors().rowwise().reverse();
}

Vector DenseOracle::squared_singular_values() const {
  Eigen::JacobiSVD<Matrix> svd(a_);
  return svd.singularValues().array().square();
}

Vector DenseOracle::preconditioned_spectrum(const SpectralPreconditioner& precond) const {
  const Index m = a_.cols();
  Matrix inv_sqrt(m, m);
  for (Index j = 0; j < m; ++j) inv_sqrt.col(j) = precond.apply_inv_sqrt(Vector::Unit(m, j));
  const Matrix normal = a_.transpose() * a_ + precond.gamma() * Matrix::Identity(m, m);
  const Matrix sym = inv_sqrt * normal * inv_sqrt;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (sym + sym.transpose()), Eigen::EigenvaluesOnly);
  return eig.eigenvalues();
}

Vector DenseOracle::preconditioned_spectrum_general(const SpectralPreconditioner& precond) const {
  const Index m = a_.cols();
  Matrix inv(m, m);
  for (Index j = 0; j < m; ++j) inv.col(j) = precond.apply_inverse(Vector::Unit(m, j));
  const Matrix normal = a_.transpose() * a_ + precond.gamma() * Matrix::Identity(m, m);
  Eigen::EigenSolver<Matrix> eig(inv * normal, false);
  Vector values = eig.eigenvalues().real();
  std::sort(values.begin(), values.end());
  return values;
}

double DenseOracle::preconditioned_condition_number(const SpectralPreconditioner& precond) const {
  const Vector spectrum = preconditioned_spectrum(precond);
  return spectrum.maxCoeff() / spectrum.minCoeff();
}

Matrix DenseOracle::propagation_matrix(double gamma) const {
  require(gamma > 0.0, "propagation_matrix: gamma must be positive");
  const Matrix normal = a_.transpose() * a_ + gamma * Matrix::Identity(a_.cols(), a_.cols());
  return normal.llt().solve(a_.transpose());
}

double DenseOracle::trace_phi(double gamma, const Matrix& covariance) const {
  require(covariance.rows() == a_.rows() && covariance.cols() == a_.rows(),
          "trace_phi: covariance has wrong shape");
  const Matrix r = propagation_matrix(gamma);
  return std::sqrt((r * covariance * r.transpose()).trace());
}

double DenseOracle::trace_phi_white(double gamma, double sigma) const {
  return sigma * propagation_matrix(gamma).norm();
}

}  // namespace specreg
