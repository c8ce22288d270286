#include "specreg/newton.hpp"

#include "specreg/krylov.hpp"
#include "specreg/spectral_preconditioner.hpp"

#include <chrono>
#include <cmath>

namespace specreg {

namespace {

bool needs_left_vectors(const NewtonConfig& cfg) {
  return cfg.phi_noise && std::holds_alternative<SampledNoise>(*cfg.phi_noise);
}

CgConfig accurate_cg(const NewtonConfig& cfg) {
  CgConfig cg;
  cg.epsilon = cfg.eps_accurate;
  cg.max_iterations = cfg.max_inner;
  cg.reorthogonalize = true;
  cg.collect_lanczos = true;
  return cg;
}

CgConfig standard_cg(const NewtonConfig& cfg) {
  CgConfig cg;
  cg.epsilon = cfg.eps_standard;
  cg.max_iterations = cfg.max_inner;
  return cg;
}

// Selected Ritz pairs of the (transformed) normal operator mapped to
// eigenpairs of A^T A, with the vectors reorthogonalized.
std::vector<EigenPair> harvest_pairs(const CgTrace& trace, double theta_scale, double gamma,
                                     const NewtonConfig& cfg) {
  if (trace.iterations == 0) return {};
  std::vector<RitzPair> ritz = ritz_from_trace(trace);
  // theta_scale maps theta to mu, the eigenvalue of M^{-1} G^T G.
  std::vector<RitzPair> scaled = ritz;
  for (auto& p : scaled) {
    p.theta /= theta_scale;
    p.residual_bound /= theta_scale;
  }
  const std::vector<RitzPair> chosen =
      select_ritz(scaled, cfg.ritz_separation, cfg.ritz_residual_tol);
  if (chosen.empty()) return {};

  std::vector<Vector> vectors;
  for (const auto& p : chosen) vectors.push_back(p.vector);
  std::vector<std::size_t> kept;
  const std::vector<Vector> ortho = reorthogonalize_basis(vectors, 1e-8, &kept);
  std::vector<EigenPair> pairs;
  for (std::size_t i = 0; i < ortho.size(); ++i) {
    EigenPair pair = ritz_to_eigenpair(chosen[kept[i]].theta, gamma, ortho[i]);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

SpectralPreconditioner from_pairs(const std::vector<EigenPair>& pairs, double gamma, Index dim) {
  if (pairs.empty()) return SpectralPreconditioner(gamma, dim);
  Vector lambdas(static_cast<Index>(pairs.size()));
  Matrix vectors(dim, static_cast<Index>(pairs.size()));
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    lambdas[static_cast<Index>(j)] = pairs[j].lambda;
    vectors.col(static_cast<Index>(j)) = pairs[j].vector;
  }
  return SpectralPreconditioner(gamma, lambdas, vectors);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

void NewtonConfig::validate() const {
  if (gamma0) require(*gamma0 > 0.0, "NewtonConfig: gamma0 must be positive");
  require(gamma_factor > 1.0, "NewtonConfig: gamma_factor must exceed 1");
  require(eps_accurate > 0.0 && eps_accurate <= eps_standard && eps_standard < 1.0,
          "NewtonConfig: need 0 < eps_accurate <= eps_standard < 1");
  require(ritz_separation > 1.0, "NewtonConfig: ritz_separation must exceed 1");
  require(ritz_residual_tol > 0.0, "NewtonConfig: ritz_residual_tol must be positive");
  require(max_newton > 0 && max_inner > 0, "NewtonConfig: iteration caps must be positive");
  require(update_age_min >= 0, "NewtonConfig: update_age_min must be nonnegative");
  require(initial_rho > 0.0 && initial_rho < 1.0, "NewtonConfig: initial_rho must lie in (0, 1)");
  require(initial_max_steps > 0, "NewtonConfig: initial_max_steps must be positive");
  if (phi_noise) specreg::validate(*phi_noise);
}

double schedule_gamma(double gamma0, double gamma_factor, int k) {
  require(k >= 0, "schedule_gamma: k must be nonnegative");
  return gamma0 * std::pow(gamma_factor, -static_cast<double>(k));
}

double schedule_gamma(const NewtonConfig& cfg, int k) {
  require(cfg.gamma0.has_value(), "schedule_gamma: gamma0 is not set");
  return schedule_gamma(*cfg.gamma0, cfg.gamma_factor, k);
}

bool should_recompute(int k, int m, int prev_inner_iterations, const NewtonConfig& cfg) {
  require(k >= m && m >= 0, "should_recompute: need k >= m >= 0");
  if (k == 0) return true;
  const bool scheduled = std::sqrt(k + 1.0) >= std::sqrt(m + 1.0) + 1.0 - 1e-12;
  return scheduled && prev_inner_iterations > cfg.recompute_inner_min;
}

bool must_update(int k, int last_build_step, int prev_inner_iterations, const NewtonConfig& cfg) {
  require(k >= last_build_step, "must_update: need k >= last_build_step");
  return k - last_build_step >= cfg.update_age_min &&
         prev_inner_iterations > cfg.update_inner_min;
}

double estimate_gram_norm(const JacobianHandle& jac, int iterations) {
  require(iterations > 0, "estimate_gram_norm: iterations must be positive");
  Vector v = Vector::Ones(jac.cols()) / std::sqrt(static_cast<double>(jac.cols()));
  double estimate = 0.0;
  for (int i = 0; i < iterations; ++i) {
    Vector w = jac.apply_adjoint(jac.apply(v));
    estimate = w.norm();
    if (!(estimate > 0.0)) throw NumericalError("estimate_gram_norm: A^T A v vanished");
    v = w / estimate;
  }
  return estimate;
}

RunHistory irgnm_run(const ForwardModel& model, const Vector& y_obs, const Vector& x0,
                     const NewtonConfig& cfg_in, const StoppingDriver& stop) {
  cfg_in.validate();
  require_dim(y_obs.size(), model.range_dim(), "irgnm_run y_obs");
  require_dim(x0.size(), model.domain_dim(), "irgnm_run x0");

  const auto clock_start = std::chrono::steady_clock::now();
  const std::uint64_t cost_start = model.cost().total();
  NewtonConfig cfg = cfg_in;
  if (!cfg.gamma0) cfg.gamma0 = estimate_gram_norm(model.linearize(x0));

  const Index dim = model.domain_dim();
  RunHistory history;
  Vector x = x0;
  bool initial_phase = cfg.initial_phase == InitialPhase::NewtonCG;
  bool force_recompute = true;
  int m = 0;
  int last_build = 0;
  // Inner iterations of the latest ordinary step; build steps run at the
  // accurate tolerance and say nothing about preconditioner quality.
  int prev_inner = 0;
  std::optional<JacobianHandle> frozen;
  std::optional<SpectralPreconditioner> precond;

  for (int k = 0; k < cfg.max_newton; ++k) {
    const double gamma_k = schedule_gamma(cfg, k);
    const Vector residual = y_obs - model.evaluate(x);

    RunRecord rec;
    rec.k = k;
    rec.gamma_k = gamma_k;
    rec.x = x;
    rec.residual_norm = residual.norm();

    Vector h;
    try {
      if (initial_phase) {
        const JacobianHandle jac = model.linearize(x);
        const CglsResult inner = cgls_truncated(jac, residual, cfg.initial_rho, cfg.max_inner);
        h = inner.solution;
        m = k;
        rec.inner_iterations = inner.iterations;
        rec.event = StepEvent::Baseline;
        rec.linearization_id = jac.linearization_id();
        const double xn = x.norm();
        if ((xn > 0.0 && h.norm() < cfg.initial_switch_ratio * xn) || k + 1 >= cfg.initial_max_steps) {
          initial_phase = false;
        }
      } else if (!cfg.preconditioned) {
        const JacobianHandle jac = model.linearize(x);
        const TikhonovRhs rhs = build_rhs(cfg.rhs_kind, x0, x, residual);
        const TikhonovSystem sys(jac, gamma_k, rhs.data, rhs.prior);
        const CgResult res = pcg_solve(sys, IdentityPreconditioner{}, standard_cg(cfg));
        h = res.solution;
        m = k;
        rec.inner_iterations = res.trace.iterations;
        rec.event = StepEvent::Plain;
        rec.linearization_id = jac.linearization_id();
      } else if (force_recompute || should_recompute(k, m, prev_inner, cfg)) {
        force_recompute = false;
        m = k;
        frozen = model.linearize(x);
        const TikhonovRhs rhs = build_rhs(cfg.rhs_kind, x0, x, residual);
        const TikhonovSystem sys(*frozen, gamma_k, rhs.data, rhs.prior);
        const CgResult res = pcg_solve(sys, IdentityPreconditioner{}, accurate_cg(cfg));
        h = res.solution;
        // Unpreconditioned: mu = theta / gamma_k.
        const auto pairs = harvest_pairs(res.trace, gamma_k, gamma_k, cfg);
        precond = from_pairs(pairs, gamma_k, dim);
        if (needs_left_vectors(cfg)) precond = precond->with_left_vectors(*frozen);
        last_build = k;
        rec.inner_iterations = res.trace.iterations;
        rec.event = StepEvent::Recompute;
      } else {
        const TikhonovRhs rhs = build_rhs(cfg.rhs_kind, x0, x, residual);
        const TikhonovSystem sys(*frozen, gamma_k, rhs.data, rhs.prior);
        const SpectralPreconditioner current = precond->with_gamma(gamma_k);
        if (cfg.enable_updates && must_update(k, last_build, prev_inner, cfg)) {
          const TwoSidedSystem transformed(sys, current);
          const CgResult res =
              pcg_solve(transformed, sys.stacked_rhs(), IdentityPreconditioner{}, accurate_cg(cfg));
          h = current.apply_inv_sqrt(res.solution);
          const auto fresh = harvest_pairs(res.trace, 1.0, gamma_k, cfg);
          precond = merge_pairs(current, fresh, gamma_k);
          if (needs_left_vectors(cfg)) precond = precond->with_left_vectors(*frozen);
          last_build = k;
          rec.inner_iterations = res.trace.iterations;
          rec.event = StepEvent::Update;
        } else {
          const CgResult res = pcg_solve(sys, current, standard_cg(cfg));
          h = res.solution;
          rec.inner_iterations = res.trace.iterations;
          rec.event = StepEvent::Plain;
        }
      }
    } catch (const BreakdownError& e) {
      rec.m = m;
      rec.inner_iterations = e.partial().trace.iterations;
      rec.cumulative_cost = model.cost().total() - cost_start;
      rec.elapsed_s = seconds_since(clock_start);
      history.records.push_back(std::move(rec));
      history.terminal_reason = TerminalReason::Breakdown;
      history.message = e.what();
      return history;
    }

    rec.m = m;
    if (frozen && !initial_phase && cfg.preconditioned && rec.event != StepEvent::Baseline) {
      rec.linearization_id = frozen->linearization_id();
    }
    if (precond) rec.preconditioner_size = static_cast<int>(precond->size());
    if (cfg.phi_noise) {
      const SpectralPreconditioner* p = nullptr;
      std::optional<SpectralPreconditioner> at_gamma;
      if (precond) {
        at_gamma = precond->with_gamma(gamma_k);
        p = &*at_gamma;
      }
      rec.phi = estimate_phi(*cfg.phi_noise, p, gamma_k).value;
    }
    rec.step_norm = h.norm();
    rec.cumulative_cost = model.cost().total() - cost_start;
    rec.elapsed_s = seconds_since(clock_start);
    if (rec.event == StepEvent::Plain || rec.event == StepEvent::Baseline) {
      prev_inner = rec.inner_iterations;
    }
    history.records.push_back(std::move(rec));

    if (stop.should_stop(history)) {
      history.terminal_reason = TerminalReason::StopRule;
      return history;
    }
    x += h;
    if (!x.allFinite()) {
      history.terminal_reason = TerminalReason::Breakdown;
      history.message = "iterate became non-finite";
      return history;
    }
  }
  history.terminal_reason = TerminalReason::MaxNewton;
  return history;
}

RunHistory landweber_run(const ForwardModel& model, const Vector& y_obs, const Vector& x0,
                         double mu, const StoppingDriver& stop, int max_steps) {
  require(mu >= 0.0, "landweber_run: step size must be nonnegative");
  require(max_steps > 0, "landweber_run: max_steps must be positive");
  require_dim(y_obs.size(), model.range_dim(), "landweber_run y_obs");
  require_dim(x0.size(), model.domain_dim(), "landweber_run x0");

  const auto clock_start = std::chrono::steady_clock::now();
  const std::uint64_t cost_start = model.cost().total();
  RunHistory history;
  Vector x = x0;
  double initial_residual = 0.0;
  for (int k = 0; k < max_steps; ++k) {
    const Vector misfit = model.evaluate(x) - y_obs;
    RunRecord rec;
    rec.k = k;
    rec.m = k;
    rec.x = x;
    rec.residual_norm = misfit.norm();
    rec.event = StepEvent::Baseline;
    if (k == 0) initial_residual = rec.residual_norm;
    if (rec.residual_norm > 10.0 * initial_residual && k > 0) {
      rec.cumulative_cost = model.cost().total() - cost_start;
      rec.elapsed_s = seconds_since(clock_start);
      history.records.push_back(std::move(rec));
      history.terminal_reason = TerminalReason::Breakdown;
      history.message = "Landweber diverged: residual grew tenfold";
      return history;
    }
    const JacobianHandle jac = model.linearize(x);
    rec.linearization_id = jac.linearization_id();
    const Vector h = -mu * jac.apply_adjoint(misfit);
    rec.step_norm = h.norm();
    rec.cumulative_cost = model.cost().total() - cost_start;
    rec.elapsed_s = seconds_since(clock_start);
    history.records.push_back(std::move(rec));
    if (stop.should_stop(history)) {
      history.terminal_reason = TerminalReason::StopRule;
      return history;
    }
    x += h;
  }
  history.terminal_reason = TerminalReason::MaxNewton;
  return history;
}

RunHistory newton_cg_run(const ForwardModel& model, const Vector& y_obs, const Vector& x0,
                         double inner_rho, const StoppingDriver& stop, int max_newton,
                         int max_inner) {
  require(inner_rho > 0.0 && inner_rho < 1.0, "newton_cg_run: inner_rho must lie in (0, 1)");
  require(max_newton > 0, "newton_cg_run: max_newton must be positive");
  require_dim(y_obs.size(), model.range_dim(), "newton_cg_run y_obs");
  require_dim(x0.size(), model.domain_dim(), "newton_cg_run x0");

  const auto clock_start = std::chrono::steady_clock::now();
  const std::uint64_t cost_start = model.cost().total();
  RunHistory history;
  Vector x = x0;
  for (int k = 0; k < max_newton; ++k) {
    const Vector residual = y_obs - model.evaluate(x);
    RunRecord rec;
    rec.k = k;
    rec.m = k;
    rec.x = x;
    rec.residual_norm = residual.norm();
    rec.event = StepEvent::Baseline;
    const JacobianHandle jac = model.linearize(x);
    rec.linearization_id = jac.linearization_id();
    const CglsResult inner = cgls_truncated(jac, residual, inner_rho, max_inner);
    rec.inner_iterations = inner.iterations;
    rec.step_norm = inner.solution.norm();
    rec.cumulative_cost = model.cost().total() - cost_start;
    rec.elapsed_s = seconds_since(clock_start);
    history.records.push_back(std::move(rec));
    if (stop.should_stop(history)) {
      history.terminal_reason = TerminalReason::StopRule;
      return history;
    }
    x += inner.solution;
  }
  history.terminal_reason = TerminalReason::MaxNewton;
  return history;
}

}  // namespace specreg
