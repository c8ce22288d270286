#ifndef SPECREG_STOPPING_HPP
#define SPECREG_STOPPING_HPP

#include "specreg/run_history.hpp"
#include "specreg/spectral_preconditioner.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace specreg {

struct DeterministicNoise {
  double delta = 0.0;  // bound on ||eps||
};
struct WhiteNoise {
  double sigma = 0.0;  // per-component standard deviation
};
struct SampledNoise {
  std::vector<Vector> samples;  // independent copies of the noise vector
};
using NoiseSpec = std::variant<DeterministicNoise, WhiteNoise, SampledNoise>;

void validate(const NoiseSpec& spec);

enum class PhiMethod { Deterministic, WhiteNoise, Sampled };

struct PhiEstimate {
  double value = 0.0;
  /// Set when the estimate rests on an empty eigenpair set.
  bool uninformative = false;
};

struct PhiSeries {
  std::vector<double> values;
  PhiMethod method = PhiMethod::WhiteNoise;
  std::size_t k_max = 0;
};

/// First K with residual_norms[K] <= tau * delta, or nothing.
std::optional<std::size_t> discrepancy_stop(std::span<const double> residual_norms, double tau,
                                            double delta);

/// delta / (2 gamma_k).
double phi_deterministic(double gamma_k, double delta);

/// sigma (sum_j lambda_j / (gamma_k + lambda_j)^2)^{1/2}.
PhiEstimate phi_white_noise(double sigma, std::span<const double> lambdas, double gamma_k);

/// R^app eps = sum_j sqrt(lambda_j)/(gamma + lambda_j) <w_j, eps> u_j with
/// gamma = precond.gamma(). No forward-model calls.
Vector apply_R_app(const SpectralPreconditioner& precond, const Vector& eps);

/// Root mean square of ||R^app eps_l|| over the samples, with R^app taken at gamma_k.
double phi_sampled(const SpectralPreconditioner& precond, std::span<const Vector> samples,
                   double gamma_k);

/// Phi(k) for the given noise model. `precond` carries the eigenpairs in use
/// at step k and may be absent (baseline methods, before the first build).
PhiEstimate estimate_phi(const NoiseSpec& noise, const SpectralPreconditioner* precond,
                         double gamma_k);

/// Largest k <= hard_cap with phi(k) <= bound; phi is assumed nondecreasing.
std::size_t k_max_from_bound(const std::function<double(std::size_t)>& phi, double bound,
                             std::size_t hard_cap);

/// K_bal = min{k <= k_max : ||x_k - x_m|| <= rho Phi(m) for m = k+1..k_max}.
std::size_t lepskii_select(std::span<const Vector> iterates, std::span<const double> phi,
                           double rho, std::size_t k_max);

/// Index of the iterate closest to the truth (needs the truth, test use).
std::size_t oracle_optimal_index(std::span<const Vector> iterates, const Vector& truth,
                                 std::size_t k_max);

/// Decides after each completed record whether the outer loop ends.
class StoppingDriver {
 public:
  using Predicate = std::function<bool(const RunHistory&)>;

  StoppingDriver() = default;
  explicit StoppingDriver(Predicate predicate) : predicate_(std::move(predicate)) {}

  bool should_stop(const RunHistory& history) const {
    return predicate_ && predicate_(history);
  }

  static StoppingDriver never();
  /// Stops once record K exists.
  static StoppingDriver fixed(int k);
  static StoppingDriver discrepancy(double tau, double delta);
  /// Stops at the first record whose Phi exceeds the bound.
  static StoppingDriver phi_bound(double bound);
  static StoppingDriver cost_budget(std::uint64_t units);

  friend StoppingDriver operator||(StoppingDriver a, StoppingDriver b);

 private:
  Predicate predicate_;
};

}  // namespace specreg

#endif  // SPECREG_STOPPING_HPP
