#include "specreg/stopping.hpp"

#include <cmath>
#include <limits>

namespace specreg {

std::string_view to_string(StepEvent event) {
  switch (event) {
    case StepEvent::Recompute: return "recompute";
    case StepEvent::Update: return "update";
    case StepEvent::Plain: return "plain";
    case StepEvent::Baseline: return "baseline";
  }
  return "unknown";
}

std::string_view to_string(TerminalReason reason) {
  switch (reason) {
    case TerminalReason::StopRule: return "stop-rule";
    case TerminalReason::MaxNewton: return "max-newton";
    case TerminalReason::Breakdown: return "breakdown";
  }
  return "unknown";
}

std::vector<double> RunHistory::residual_norms() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.residual_norm);
  return out;
}

std::vector<Vector> RunHistory::iterates() const {
  std::vector<Vector> out;
  for (const auto& r : records) out.push_back(r.x);
  return out;
}

std::vector<double> RunHistory::phi_values() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.phi.value_or(0.0));
  return out;
}

std::vector<double> RunHistory::errors(const Vector& truth) const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back((r.x - truth).norm());
  return out;
}

void validate(const NoiseSpec& spec) {
  std::visit(
      [](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, DeterministicNoise>) {
          require(n.delta >= 0.0, "NoiseSpec: delta must be nonnegative");
        } else if constexpr (std::is_same_v<T, WhiteNoise>) {
          require(n.sigma >= 0.0, "NoiseSpec: sigma must be nonnegative");
        } else {
          require(!n.samples.empty(), "NoiseSpec: at least one noise sample is required");
        }
      },
      spec);
}

std::optional<std::size_t> discrepancy_stop(std::span<const double> residual_norms, double tau,
                                            double delta) {
  require(!residual_norms.empty(), "discrepancy_stop: empty residual sequence");
  require(tau > 1.0, "discrepancy_stop: tau must exceed 1");
  require(delta >= 0.0, "discrepancy_stop: delta must be nonnegative");
  for (std::size_t k = 0; k < residual_norms.size(); ++k) {
    if (residual_norms[k] <= tau * delta) return k;
  }
  return std::nullopt;
}

double phi_deterministic(double gamma_k, double delta) {
  require(gamma_k > 0.0, "phi_deterministic: gamma must be positive");
  return delta / (2.0 * gamma_k);
}

PhiEstimate phi_white_noise(double sigma, std::span<const double> lambdas, double gamma_k) {
  require(sigma >= 0.0, "phi_white_noise: sigma must be nonnegative");
  require(gamma_k > 0.0, "phi_white_noise: gamma must be positive");
  PhiEstimate est;
  if (lambdas.empty()) {
    est.uninformative = true;
    return est;
  }
  double sum = 0.0;
  for (double lambda : lambdas) {
    require(lambda >= 0.0, "phi_white_noise: eigenvalues must be nonnegative");
    sum += lambda / ((gamma_k + lambda) * (gamma_k + lambda));
  }
  est.value = sigma * std::sqrt(sum);
  return est;
}

Vector apply_R_app(const SpectralPreconditioner& precond, const Vector& eps) {
  const auto& left = precond.left_vectors();
  if (!left) throw ContractViolation("apply_R_app: preconditioner carries no left vectors");
  require_dim(eps.size(), left->rows(), "apply_R_app");
  const double gamma = precond.gamma();
  Vector coeffs = left->transpose() * eps;
  for (Index j = 0; j < precond.size(); ++j) {
    const double lambda = precond.lambdas()[j];
    coeffs[j] *= std::sqrt(lambda) / (gamma + lambda);
  }
  return precond.vectors() * coeffs;
}

double phi_sampled(const SpectralPreconditioner& precond, std::span<const Vector> samples,
                   double gamma_k) {
  require(!samples.empty(), "phi_sampled: at least one sample is required");
  const SpectralPreconditioner at_gamma = precond.with_gamma(gamma_k);
  double sum = 0.0;
  for (const auto& eps : samples) sum += apply_R_app(at_gamma, eps).squaredNorm();
  return std::sqrt(sum / static_cast<double>(samples.size()));
}

PhiEstimate estimate_phi(const NoiseSpec& noise, const SpectralPreconditioner* precond,
                         double gamma_k) {
  if (const auto* det = std::get_if<DeterministicNoise>(&noise)) {
    return {phi_deterministic(gamma_k, det->delta), false};
  }
  if (const auto* white = std::get_if<WhiteNoise>(&noise)) {
    if (precond == nullptr) return {0.0, true};
    const Vector& lambdas = precond->lambdas();
    return phi_white_noise(white->sigma,
                           std::span<const double>(lambdas.data(), static_cast<std::size_t>(lambdas.size())),
                           gamma_k);
  }
  const auto& sampled = std::get<SampledNoise>(noise);
  if (precond == nullptr || precond->size() == 0) return {0.0, true};
  return {phi_sampled(*precond, sampled.samples, gamma_k), false};
}

std::size_t k_max_from_bound(const std::function<double(std::size_t)>& phi, double bound,
                             std::size_t hard_cap) {
  require(bound > 0.0, "k_max_from_bound: bound must be positive");
  if (phi(0) > bound) throw ContractViolation("k_max_from_bound: Phi(0) already exceeds the bound");
  std::size_t k = 0;
  while (k < hard_cap && phi(k + 1) <= bound) ++k;
  return k;
}

std::size_t lepskii_select(std::span<const Vector> iterates, std::span<const double> phi,
                           double rho, std::size_t k_max) {
  require(rho > 4.0, "lepskii_select: rho must exceed 4");
  require(iterates.size() > k_max && phi.size() > k_max,
          "lepskii_select: iterates and Phi must cover 0..k_max");
  for (std::size_t k = 0; k < k_max; ++k) {
    bool balanced = true;
    for (std::size_t m = k + 1; m <= k_max && balanced; ++m) {
      balanced = (iterates[k] - iterates[m]).norm() <= rho * phi[m];
    }
    if (balanced) return k;
  }
  return k_max;
}

std::size_t oracle_optimal_index(std::span<const Vector> iterates, const Vector& truth,
                                 std::size_t k_max) {
  require(iterates.size() > k_max, "oracle_optimal_index: iterates must cover 0..k_max");
  std::size_t best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k <= k_max; ++k) {
    const double err = (iterates[k] - truth).norm();
    if (err < best_err) {
      best_err = err;
      best = k;
    }
  }
  return best;
}

StoppingDriver StoppingDriver::never() { return StoppingDriver(); }

StoppingDriver StoppingDriver::fixed(int k) {
  require(k >= 0, "StoppingDriver::fixed: index must be nonnegative");
  return StoppingDriver([k](const RunHistory& h) { return h.back().k >= k; });
}

StoppingDriver StoppingDriver::discrepancy(double tau, double delta) {
  require(tau > 1.0, "StoppingDriver::discrepancy: tau must exceed 1");
  return StoppingDriver(
      [tau, delta](const RunHistory& h) { return h.back().residual_norm <= tau * delta; });
}

StoppingDriver StoppingDriver::phi_bound(double bound) {
  require(bound > 0.0, "StoppingDriver::phi_bound: bound must be positive");
  return StoppingDriver([bound](const RunHistory& h) { return h.back().phi.value_or(0.0) > bound; });
}

StoppingDriver StoppingDriver::cost_budget(std::uint64_t units) {
  return StoppingDriver([units](const RunHistory& h) { return h.back().cumulative_cost >= units; });
}

StoppingDriver operator||(StoppingDriver a, StoppingDriver b) {
  return StoppingDriver([a = std::move(a), b = std::move(b)](const RunHistory& h) {
    return a.should_stop(h) || b.should_stop(h);
  });
}

}  // namespace specreg
