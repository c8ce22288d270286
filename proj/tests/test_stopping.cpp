#include "doctest.h"
#include "test_util.hpp"

#include "specreg/stopping.hpp"
#include "specreg/testbed.hpp"

#include <cmath>
#include <limits>

using namespace specreg;
using specreg::test::random_vector;

namespace {

// Smallest k whose balancing condition holds, straight from the definition.
std::size_t lepskii_brute_force(const std::vector<Vector>& x, const std::vector<double>& phi,
                                double rho, std::size_t k_max) {
  for (std::size_t k = 0; k <= k_max; ++k) {
    bool ok = true;
    for (std::size_t m = k + 1; m <= k_max; ++m) ok = ok && (x[k] - x[m]).norm() <= rho * phi[m];
    if (ok) return k;
  }
  return k_max;
}

std::vector<Vector> scalars(std::initializer_list<double> values) {
  std::vector<Vector> out;
  for (double v : values) out.push_back(Vector::Constant(1, v));
  return out;
}

struct CompleteSet {
  DiagonalProblem diag = make_diagonal_problem(40, 60, 0.15, 2);
  DenseOracle oracle{diag.dense()};
  std::shared_ptr<LinearModel> model = diag.model();

  SpectralPreconditioner preconditioner(double gamma) const {
    return SpectralPreconditioner(gamma, oracle.gram_eigenvalues(), oracle.gram_eigenvectors())
        .with_left_vectors(model->linearize(Vector::Zero(40)));
  }
  std::span<const double> lambdas() const {
    lambdas_ = oracle.gram_eigenvalues();
    return {lambdas_.data(), static_cast<std::size_t>(lambdas_.size())};
  }
  mutable Vector lambdas_;
};

}  // namespace

TEST_CASE("discrepancy_stop picks the first residual below tau delta") {
  const std::vector<double> res = {5, 3, 1, 0.5};
  CHECK(discrepancy_stop(res, 2.0, 1.0) == std::optional<std::size_t>(2));
  CHECK_FALSE(discrepancy_stop(res, 2.0, 0.1).has_value());
  CHECK(discrepancy_stop(res, 2.0, 3.0) == std::optional<std::size_t>(0));
  CHECK_THROWS_AS(discrepancy_stop({}, 2.0, 1.0), ContractViolation);
  CHECK_THROWS_AS(discrepancy_stop(res, 1.0, 1.0), ContractViolation);
}

TEST_CASE("discrepancy with zero noise needs a zero residual") {
  const std::vector<double> res = {1e-3, 1e-8, 1e-12};
  CHECK_FALSE(discrepancy_stop(res, 2.0, 0.0).has_value());
}

TEST_CASE("phi_deterministic is delta / (2 gamma)") {
  CHECK(phi_deterministic(0.5, 0.1) == doctest::Approx(0.1));
  CHECK(phi_deterministic(0.5, 0.0) == 0.0);
  CHECK(phi_deterministic(0.25, 0.1) == doctest::Approx(2.0 * phi_deterministic(0.5, 0.1)));
}

TEST_CASE("phi_white_noise examples") {
  const std::vector<double> one = {1.0};
  CHECK(phi_white_noise(1.0, one, 1.0).value == doctest::Approx(0.5));
  CHECK(phi_white_noise(0.0, one, 1.0).value == 0.0);
  const auto empty = phi_white_noise(1.0, {}, 1.0);
  CHECK(empty.value == 0.0);
  CHECK(empty.uninformative);
}

TEST_CASE("white-noise estimate with a complete eigenset equals the trace formula") {
  const CompleteSet set;
  const double sigma = 0.03;
  for (double gamma : {1e-1, 1e-3, 1e-6}) {
    const double estimate = phi_white_noise(sigma, set.lambdas(), gamma).value;
    const double exact = set.oracle.trace_phi_white(gamma, sigma);
    CHECK(std::abs(estimate - exact) <= 1e-10 * exact);
  }
}

TEST_CASE("R_app with a complete eigenset equals the exact propagation operator") {
  const CompleteSet set;
  const double gamma = 1e-3;
  const auto p = set.preconditioner(gamma);
  const Matrix r = set.oracle.propagation_matrix(gamma);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Vector eps = random_vector(60, seed);
    const Vector exact = r * eps;
    CHECK((apply_R_app(p, eps) - exact).norm() <= 1e-9 * exact.norm());
  }
}

TEST_CASE("R_app edge cases") {
  const CompleteSet set;
  const SpectralPreconditioner empty =
      SpectralPreconditioner(1.0, Vector(0), Matrix(40, 0), Matrix(60, 0));
  CHECK(apply_R_app(empty, random_vector(60, 1)).norm() == 0.0);

  Vector lambda(1);
  lambda << 2.0;
  const Vector u = Vector::Unit(40, 0);
  const Vector w = Vector::Unit(60, 0);
  const SpectralPreconditioner single(1.0, lambda, Matrix(u), Matrix(w));
  CHECK(apply_R_app(single, Vector::Unit(60, 1)).norm() == 0.0);

  const SpectralPreconditioner no_left(1.0, lambda, Matrix(u));
  CHECK_THROWS_AS(apply_R_app(no_left, Vector::Unit(60, 1)), ContractViolation);
}

TEST_CASE("R_app costs no model units") {
  const CompleteSet set;
  const auto p = set.preconditioner(1e-2);
  const auto before = set.model->cost().total();
  apply_R_app(p, random_vector(60, 3));
  phi_sampled(p, std::vector<Vector>{random_vector(60, 4)}, 1e-2);
  CHECK(set.model->cost().total() == before);
}

TEST_CASE("phi_sampled examples") {
  const CompleteSet set;
  const auto p = set.preconditioner(1e-2);
  CHECK(phi_sampled(p, std::vector<Vector>(3, Vector::Zero(60)), 1e-2) == 0.0);
  const Vector eps = random_vector(60, 7);
  CHECK(phi_sampled(p, std::vector<Vector>{eps}, 1e-2) ==
        doctest::Approx(apply_R_app(p.with_gamma(1e-2), eps).norm()).epsilon(1e-14));
  CHECK_THROWS_AS(phi_sampled(p, {}, 1e-2), ContractViolation);
}

TEST_CASE("sampled estimate with 500 white-noise samples is within 15% of the closed form") {
  const CompleteSet set;
  const double sigma = 0.05;
  const double gamma = 1e-3;
  const auto samples = generate_noise(sigma, 60, 500, 17);
  const double sampled = phi_sampled(set.preconditioner(gamma), samples, gamma);
  const double white = phi_white_noise(sigma, set.lambdas(), gamma).value;
  CHECK(std::abs(sampled - white) <= 0.15 * white);
}

TEST_CASE("deterministic and white-noise estimators are nondecreasing along the schedule") {
  const CompleteSet set;
  double prev_det = 0.0;
  double prev_white = 0.0;
  for (int k = 0; k <= 40; ++k) {
    const double gamma = std::pow(1.5, -k);
    const double det = phi_deterministic(gamma, 0.1);
    const double white = phi_white_noise(0.01, set.lambdas(), gamma).value;
    CHECK(det >= prev_det);
    CHECK(white >= prev_white);
    prev_det = det;
    prev_white = white;
  }
}

TEST_CASE("deterministic bound dominates the white-noise trace value") {
  const CompleteSet set;
  const double sigma = 0.02;
  const double delta = sigma * std::sqrt(60.0);
  for (double gamma : {1.0, 1e-2, 1e-4, 1e-8}) {
    CHECK(set.oracle.trace_phi_white(gamma, sigma) <= phi_deterministic(gamma, delta));
  }
}

TEST_CASE("estimate_phi dispatches on the noise model") {
  const CompleteSet set;
  const auto p = set.preconditioner(1e-2);
  CHECK(estimate_phi(DeterministicNoise{0.1}, nullptr, 0.5).value == doctest::Approx(0.1));
  CHECK(estimate_phi(WhiteNoise{0.01}, nullptr, 0.5).uninformative);
  CHECK(estimate_phi(WhiteNoise{0.01}, &p, 1e-2).value ==
        doctest::Approx(phi_white_noise(0.01, set.lambdas(), 1e-2).value));
  const SampledNoise sampled{generate_noise(0.01, 60, 4, 1)};
  CHECK(estimate_phi(sampled, &p, 1e-2).value ==
        doctest::Approx(phi_sampled(p, sampled.samples, 1e-2)));
  CHECK_THROWS_AS(validate(NoiseSpec{WhiteNoise{-1.0}}), ContractViolation);
  CHECK_THROWS_AS(validate(NoiseSpec{SampledNoise{}}), ContractViolation);
}

TEST_CASE("k_max from a bound on the deterministic estimate") {
  const auto phi = [](std::size_t k) { return phi_deterministic(std::pow(2.0, -double(k)), 0.01); };
  CHECK(k_max_from_bound(phi, 0.1, 100) == 4);
  CHECK_THROWS_AS(k_max_from_bound(phi, 0.001, 100), ContractViolation);
  CHECK(k_max_from_bound(phi, 1e300, 37) == 37);
}

TEST_CASE("Lepskii on the hand-built sequence matches brute force") {
  const auto x = scalars({0.0, 1.0, 1.05, 3.0});
  const std::vector<double> phi = {0.01, 0.1, 0.5, 1.0};
  const std::size_t expected = lepskii_brute_force(x, phi, 4.1, 3);
  CHECK(expected == 1);
  CHECK(lepskii_select(x, phi, 4.1, 3) == expected);
}

TEST_CASE("Lepskii edge cases") {
  const auto same = scalars({2.0, 2.0, 2.0, 2.0});
  const std::vector<double> phi = {0.1, 0.1, 0.1, 0.1};
  CHECK(lepskii_select(same, phi, 4.1, 3) == 0);
  const auto spread = scalars({0.0, 10.0, -5.0, 7.0});
  const std::vector<double> huge = {1e9, 1e9, 1e9, 1e9};
  CHECK(lepskii_select(spread, huge, 4.1, 3) == 0);
  const std::vector<double> tiny = {1e-9, 1e-9, 1e-9, 1e-9};
  CHECK(lepskii_select(spread, tiny, 4.1, 3) == 3);
  CHECK_THROWS_AS(lepskii_select(spread, tiny, 4.0, 3), ContractViolation);
  CHECK_THROWS_AS(lepskii_select(spread, tiny, 4.1, 4), ContractViolation);
}

TEST_CASE("Lepskii matches brute force on random sequences and ignores iterates past k_max") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::vector<Vector> x;
    std::vector<double> phi;
    for (int k = 0; k < 12; ++k) {
      x.push_back(random_vector(3, seed * 100 + k));
      phi.push_back(0.05 * std::pow(1.4, k));
    }
    const std::size_t k_max = 8;
    const std::size_t chosen = lepskii_select(x, phi, 4.1, k_max);
    CHECK(chosen == lepskii_brute_force(x, phi, 4.1, k_max));
    std::vector<Vector> shorter(x.begin(), x.begin() + k_max + 1);
    std::vector<double> shorter_phi(phi.begin(), phi.begin() + k_max + 1);
    CHECK(lepskii_select(shorter, shorter_phi, 4.1, k_max) == chosen);
  }
}

TEST_CASE("oracle-optimal index is the minimum-error iterate up to k_max") {
  const auto x = scalars({0.0, 0.8, 1.1, 0.95, 1.0});
  CHECK(oracle_optimal_index(x, Vector::Constant(1, 1.0), 3) == 3);
  CHECK(oracle_optimal_index(x, Vector::Constant(1, 1.0), 2) == 2);
}

TEST_CASE("stopping drivers") {
  RunHistory history;
  RunRecord rec;
  rec.k = 0;
  rec.residual_norm = 5.0;
  rec.cumulative_cost = 10;
  rec.phi = 0.5;
  history.records.push_back(rec);
  CHECK_FALSE(StoppingDriver::never().should_stop(history));
  CHECK(StoppingDriver::fixed(0).should_stop(history));
  CHECK_FALSE(StoppingDriver::fixed(1).should_stop(history));
  CHECK(StoppingDriver::discrepancy(2.0, 3.0).should_stop(history));
  CHECK_FALSE(StoppingDriver::discrepancy(2.0, 2.0).should_stop(history));
  CHECK(StoppingDriver::phi_bound(0.4).should_stop(history));
  CHECK_FALSE(StoppingDriver::phi_bound(0.5).should_stop(history));
  CHECK(StoppingDriver::cost_budget(10).should_stop(history));
  CHECK_FALSE(StoppingDriver::cost_budget(11).should_stop(history));
  CHECK((StoppingDriver::never() || StoppingDriver::fixed(0)).should_stop(history));
  CHECK_FALSE((StoppingDriver::never() || StoppingDriver::fixed(3)).should_stop(history));
}
