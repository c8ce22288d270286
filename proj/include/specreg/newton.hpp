#ifndef SPECREG_NEWTON_HPP
#define SPECREG_NEWTON_HPP

#include "specreg/operator.hpp"
#include "specreg/run_history.hpp"
#include "specreg/stopping.hpp"

#include <optional>

namespace specreg {

enum class InitialPhase { None, NewtonCG };

struct NewtonConfig {
  /// gamma_0; when unset, an estimate of ||A_0^T A_0|| at x0 is used.
  std::optional<double> gamma0;
  double gamma_factor = 1.5;
  RhsKind rhs_kind = RhsKind::IRGNM;

  /// false: fresh Jacobian and unpreconditioned CG at every step.
  bool preconditioned = true;
  bool enable_updates = true;

  double eps_standard = 1.0 / 3.0;
  double eps_accurate = 1e-9;
  int update_age_min = 4;
  int update_inner_min = 5;
  int recompute_inner_min = 8;
  double ritz_separation = 1.1;
  /// Ritz pairs with residual bound above this fraction of theta are not used.
  double ritz_residual_tol = 1e-2;

  int max_newton = 30;
  int max_inner = 200;

  InitialPhase initial_phase = InitialPhase::None;
  double initial_rho = 0.7;
  double initial_switch_ratio = 0.1;
  int initial_max_steps = 10;

  /// Noise model used to record Phi(k) on every step.
  std::optional<NoiseSpec> phi_noise;

  void validate() const;
};

double schedule_gamma(double gamma0, double gamma_factor, int k);
/// cfg.gamma0 must be set.
double schedule_gamma(const NewtonConfig& cfg, int k);

/// Recompute iff sqrt(k+1) >= sqrt(m+1) + 1 and the previous step took more
/// than recompute_inner_min inner iterations. k = 0 always recomputes.
bool should_recompute(int k, int m, int prev_inner_iterations, const NewtonConfig& cfg);

/// Update iff the last (re)build is at least update_age_min steps old and the
/// previous step took more than update_inner_min inner iterations.
bool must_update(int k, int last_build_step, int prev_inner_iterations, const NewtonConfig& cfg);

/// Power-iteration estimate of ||A^T A||.
double estimate_gram_norm(const JacobianHandle& jac, int iterations = 10);

/// Semi-frozen IRGNM / Levenberg-Marquardt with spectral preconditioners that
/// are recomputed on a square-root schedule and updated in between.
RunHistory irgnm_run(const ForwardModel& model, const Vector& y_obs, const Vector& x0,
                     const NewtonConfig& cfg, const StoppingDriver& stop);

/// x_{k+1} = x_k - mu A_k^T (F(x_k) - y_obs). Aborts once the residual grows
/// tenfold over the initial one.
RunHistory landweber_run(const ForwardModel& model, const Vector& y_obs, const Vector& x0,
                         double mu, const StoppingDriver& stop, int max_steps);

/// Newton steps from CG on A_k^T A_k h = A_k^T (y_obs - F(x_k)) truncated once
/// the linearized residual drops below inner_rho ||y_obs - F(x_k)||.
RunHistory newton_cg_run(const ForwardModel& model, const Vector& y_obs, const Vector& x0,
                         double inner_rho, const StoppingDriver& stop, int max_newton,
                         int max_inner = 200);

}  // namespace specreg

#endif  // SPECREG_NEWTON_HPP
