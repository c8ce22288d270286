// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "specreg/experiment.hpp"
#include "specreg/krylov.hpp"
#include "specreg/newton.hpp"
#include "specreg/spectral_preconditioner.hpp"
#include "specreg/stopping.hpp"
#include "specreg/testbed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace specreg;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c);
  return buf;
}

Matrix gaussian_matrix(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Matrix a(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) a(i, j) = normal(rng);
  return a;
}

Vector gaussian_vector(Index n, std::uint64_t seed) { return gaussian_matrix(n, 1, seed).col(0); }

Matrix normal_matrix(const Matrix& a, double gamma) {
  return a.transpose() * a + gamma * Matrix::Identity(a.cols(), a.cols());
}

TikhonovSystem linear_system(const std::shared_ptr<LinearModel>& model, double gamma,
                             const Vector& y, const Vector& b) {
  return TikhonovSystem(model->linearize(Vector::Zero(model->domain_dim())), gamma, y, b);
}

// ------------------------------------------------------------------ 1

Verdict criterion_1() {
  Verdict v;
  double worst_inverse = 0.0;
  double worst_spectrum = 0.0;
  double worst_backmap = 0.0;
  for (int inst = 0; inst < 25; ++inst) {
    const Index m = 20 + 40 * inst / 24;  // 20..60
    const Index n = m + 10;
    const Matrix a = gaussian_matrix(n, m, 1000 + inst);
    const DenseOracle oracle(a);
    const Vector lambdas = oracle.gram_eigenvalues();
    const double gamma = lambdas[0] * std::pow(10.0, -1.0 - inst % 3);
    const Index count = 1 + inst % 8;
    const SpectralPreconditioner p(gamma, lambdas.head(count), oracle.gram_eigenvectors().leftCols(count));

    // (a) closed-form inverse against the dense inverse
    const Matrix dense_inverse = p.dense().inverse();
    for (int t = 0; t < 5; ++t) {
      const Vector x = gaussian_vector(m, 50000 + 10 * inst + t);
      const Vector exact = dense_inverse * x;
      worst_inverse = std::max(worst_inverse, (p.apply_inverse(x) - exact).norm() / exact.norm());
    }

    // (b, c) spectrum of the preconditioned operator
    const SpectrumReport report = preconditioned_spectrum_check(p, a);
    const double scale = report.expected.maxCoeff();
    worst_spectrum = std::max(worst_spectrum, report.max_deviation / scale);

    // (d) back-mapping of every separated eigenvalue
    for (Index i = 0; i < report.eigenvalues.size(); ++i) {
      const double mu = report.eigenvalues[i];
      if (mu <= 1.0 + 1e-6) continue;
      const double lambda = ritz_to_eigenpair(mu, gamma, Vector::Zero(m)).lambda;
      const double gap = (lambdas.array() - lambda).abs().minCoeff() / lambdas[0];
      worst_backmap = std::max(worst_backmap, gap);
    }
  }
  v.require(worst_inverse <= 1e-10, "apply_inverse deviates from the dense inverse");
  v.require(worst_spectrum <= 1e-9, "preconditioned spectrum deviates from the prediction");
  v.require(worst_backmap <= 1e-9, "back-mapped eigenvalues deviate");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("25 instances, inverse %.1e, spectrum %.1e, back-map %.1e", worst_inverse,
                 worst_spectrum, worst_backmap);
  return v;
}

// ------------------------------------------------------------------ 2

Verdict criterion_2() {
  Verdict v;
  double worst = 0.0;
  int pairs = 0;
  for (int inst = 0; inst < 5; ++inst) {
    const Matrix a = gaussian_matrix(20 + 5 * inst, 10 + 2 * inst, 2000 + inst);
    auto model = std::make_shared<LinearModel>(a);
    const double gamma = 1e-3;
    const Matrix gram = normal_matrix(a, gamma);
    const auto sys = linear_system(model, gamma, gaussian_vector(a.rows(), 2100 + inst),
                                   Vector::Zero(a.cols()));
    for (int l : {3, 5, 10}) {
      CgConfig cfg;
      cfg.epsilon = 1e-15;
      cfg.max_iterations = l;
      cfg.reorthogonalize = true;
      cfg.collect_lanczos = true;
      const CgResult res = pcg_solve(sys, IdentityPreconditioner{}, cfg);
      v.require(res.trace.iterations == l, "CG stopped before l iterations");
      for (const RitzPair& pair : ritz_from_trace(res.trace)) {
        const double actual = (gram * pair.vector - pair.theta * pair.vector).norm();
        worst = std::max(worst, std::abs(actual - pair.residual_bound));
        ++pairs;
      }
    }
  }
  v.require(worst <= 1e-8, "residual identity violated");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("%g Ritz pairs at l in {3,5,10}, worst gap %.1e", pairs, worst);
  return v;
}

// ------------------------------------------------------------------ 3

Verdict criterion_3() {
  Verdict v;
  double worst_ratio = 0.0;
  for (int inst = 0; inst < 10; ++inst) {
    const Matrix a = gaussian_matrix(40, 25, 3000 + inst);
    auto model = std::make_shared<LinearModel>(a);
    const Vector y = gaussian_vector(40, 3100 + inst);
    const Vector b = gaussian_vector(25, 3200 + inst);
    const double gamma = std::pow(10.0, -1.0 - inst % 4);
    const Vector exact = DenseOracle(a).tikhonov_solution(gamma, y, b);
    for (double eps : {1.0 / 3.0, 1e-9}) {
      CgConfig cfg;
      cfg.epsilon = eps;
      cfg.max_iterations = 200;
      const CgResult res = pcg_solve(linear_system(model, gamma, y, b), IdentityPreconditioner{}, cfg);
      v.require(res.converged, "CG did not converge");
      const double rel = (res.solution - exact).norm() / exact.norm();
      worst_ratio = std::max(worst_ratio, rel / (eps / (1.0 - eps)));
    }
  }
  v.require(worst_ratio <= 1.0, "error exceeds eps/(1-eps)");

  int worst_iterations = 0;
  double worst_reduction = 0.0;
  for (int inst = 0; inst < 10; ++inst) {
    const Matrix a = gaussian_matrix(40, 25, 3300 + inst);
    auto model = std::make_shared<LinearModel>(a);
    const DenseOracle oracle(a);
    const double gamma = 1e-2;
    const SpectralPreconditioner full(gamma, oracle.gram_eigenvalues(), oracle.gram_eigenvectors());
    // default epsilon: at 1e-9 the threshold eps*gamma*||h|| sits below the
    // roundoff of one M^{-1} product with 1/gamma = 100
    const CgResult res = pcg_solve(
        linear_system(model, gamma, gaussian_vector(40, 3400 + inst), Vector::Zero(25)), full,
        CgConfig{});
    worst_iterations = std::max(worst_iterations, res.trace.iterations);
    v.require(res.trace.iterations == 1, "full-spectrum preconditioner needed more than 1 iteration");
    const auto& g = res.trace.gradient_norms;
    worst_reduction = std::max(worst_reduction, g[1] / g[0]);
  }
  v.require(worst_reduction <= 1e-10, "one full-spectrum step left more than roundoff");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("10 systems, worst error / bound %.3f; full preconditioner iterations %g, ",
                 worst_ratio, worst_iterations) +
             fmt("gradient reduction %.1e", worst_reduction);
  return v;
}

// ------------------------------------------------------------------ 4

struct DefaultTestbed {
  ProblemInstance inst = build_problem(ProblemSpec{});
  Vector x0 = Vector::Zero(inst.model->domain_dim());
};

Verdict criterion_4() {
  Verdict v;
  const DefaultTestbed bed;
  NewtonConfig cfg;
  cfg.max_newton = 25;
  const RunHistory updated = irgnm_run(*bed.inst.model, bed.inst.y_exact, bed.x0, cfg, StoppingDriver::never());
  cfg.enable_updates = false;
  const RunHistory frozen = irgnm_run(*bed.inst.model, bed.inst.y_exact, bed.x0, cfg, StoppingDriver::never());
  v.require(updated.size() == 25 && frozen.size() == 25, "run ended early");

  // (a) every interior rebuild step b: inner(b+1) < inner(b-1)
  int builds = 0;
  for (std::size_t b = 1; b + 1 < updated.size(); ++b) {
    const auto& rec = updated.records[b];
    if (rec.event != StepEvent::Recompute && rec.event != StepEvent::Update) continue;
    ++builds;
    const int before = updated.records[b - 1].inner_iterations;
    const int after = updated.records[b + 1].inner_iterations;
    v.require(after < before, "step " + std::to_string(b + 1) + " after a rebuild used " +
                                  std::to_string(after) + " inner iterations, step " +
                                  std::to_string(b - 1) + " used " + std::to_string(before));
  }
  v.require(builds > 0, "no rebuild steps inside the run");

  // (b) total inner iterations
  int total_updated = 0;
  int total_frozen = 0;
  for (const auto& r : updated.records) total_updated += r.inner_iterations;
  for (const auto& r : frozen.records) total_frozen += r.inner_iterations;
  const double ratio = static_cast<double>(total_updated) / total_frozen;
  v.require(ratio <= 0.8, "updates saved too little");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("rebuilds %g; inner iterations %g with updates vs %g frozen", builds,
                 total_updated, total_frozen) +
             fmt(" (ratio %.3f)", ratio);
  return v;
}

// ------------------------------------------------------------------ 5

// Ritz pairs of a finished CG run mapped to eigenpairs of A^T A. `floor` is the
// cluster value (gamma for unpreconditioned runs, 1 for two-sided runs).
std::vector<EigenPair> harvest(const CgTrace& trace, double floor, double gamma) {
  std::vector<EigenPair> out;
  for (const RitzPair& r : ritz_from_trace(trace)) {
    const double mu = r.theta / floor;
    if (mu < 1.1 || r.residual_bound > 1e-2 * r.theta) continue;
    out.push_back(ritz_to_eigenpair(mu, gamma, r.vector.normalized()));
  }
  return out;
}

Verdict criterion_5() {
  Verdict v;
  const Index n = 64;
  const ConvolutionProblem conv = make_convolution_problem(n, 0.05, 1);
  const NonlinearProblem problem = make_nonlinear_composite(conv.map, 0.2, conv.truth);
  const ForwardModel& model = *problem.model;
  const Vector y = model.evaluate(problem.truth);
  const Vector x0 = Vector::Zero(n);

  const DenseOracle oracle(conv.dense());  // A_0 = K at x0 = 0
  const Vector lambdas = oracle.gram_eigenvalues();
  const Matrix vectors = oracle.gram_eigenvectors();
  const double gamma0 = 1e-3 * lambdas[0];
  const double gamma1 = gamma0 / 1.5;

  // Step 0: recompute pass, unpreconditioned CG with Lanczos data.
  const JacobianHandle jac = model.linearize(x0);
  // working tolerance; once every resolvable mode has converged, further
  // iterations pick up the second eigenspace direction from roundoff
  CgConfig accurate;
  accurate.reorthogonalize = true;
  accurate.collect_lanczos = true;
  const TikhonovRhs rhs0 = build_rhs(RhsKind::IRGNM, x0, x0, y - model.evaluate(x0));
  const TikhonovSystem sys0(jac, gamma0, rhs0.data, rhs0.prior);
  const CgResult pass0 = pcg_solve(sys0, IdentityPreconditioner{}, accurate);

  // Dense eigenspaces of the double eigenvalues that the pass could resolve.
  int doubles = 0;
  double worst_rank_ratio = 0.0;
  int worst_count = 0;
  Matrix z(n, static_cast<Index>(pass0.trace.z_basis.size()));
  for (Index j = 0; j < z.cols(); ++j) z.col(j) = pass0.trace.z_basis[static_cast<std::size_t>(j)];
  const auto pairs0 = harvest(pass0.trace, gamma0, gamma0);
  for (Index i = 0; i + 1 < lambdas.size(); ++i) {
    if (lambdas[i] < 0.1 * gamma0) break;
    if (std::abs(lambdas[i] - lambdas[i + 1]) > 1e-10 * lambdas[0]) continue;
    ++doubles;
    const Matrix space = vectors.middleCols(i, 2);
    // projection of the whole Krylov basis onto the eigenspace has rank one
    Eigen::JacobiSVD<Matrix> svd(space.transpose() * z);
    const Vector s = svd.singularValues();
    worst_rank_ratio = std::max(worst_rank_ratio, s[1] / s[0]);
    int count = 0;
    for (const EigenPair& p : pairs0) {
      if (std::abs(p.lambda - lambdas[i]) <= 1e-6 * lambdas[0]) ++count;
    }
    worst_count = std::max(worst_count, count);
    ++i;
  }
  v.require(doubles > 0, "no double eigenvalue above the cluster");
  v.require(worst_count <= 1, "a single pass captured two vectors of a double eigenvalue");
  v.require(worst_rank_ratio <= 1e-6, "Krylov basis spans more than one direction of an eigenspace");

  // Step 1: update pass with the frozen Jacobian, two-sided CG.
  const SpectralPreconditioner before = merge_pairs(SpectralPreconditioner(gamma0, n), pairs0, gamma0);
  const Vector x1 = pass0.solution;
  const TikhonovRhs rhs1 = build_rhs(RhsKind::IRGNM, x0, x1, y - model.evaluate(x1));
  const TikhonovSystem sys1(jac, gamma1, rhs1.data, rhs1.prior);
  const SpectralPreconditioner current = before.with_gamma(gamma1);
  const TwoSidedSystem transformed(sys1, current);
  const CgResult pass1 = pcg_solve(transformed, sys1.stacked_rhs(), IdentityPreconditioner{}, accurate);
  const auto pairs1 = harvest(pass1.trace, 1.0, gamma1);
  const SpectralPreconditioner after = merge_pairs(current, pairs1, gamma1);

  const double cond_before = oracle.preconditioned_condition_number(current);
  const double cond_after = oracle.preconditioned_condition_number(after);
  v.require(cond_after < cond_before, "condition number did not decrease after the update");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("%g double eigenvalues, at most %g vector each, rank ratio %.1e", doubles,
                 worst_count, worst_rank_ratio) +
             fmt("; pairs %g -> %g, condition %.4g", static_cast<double>(before.size()),
                 static_cast<double>(after.size()), cond_before) +
             fmt(" -> %.4g", cond_after);
  return v;
}

// ------------------------------------------------------------------ 6

Verdict criterion_6() {
  Verdict v;
  const DiagonalProblem diag = make_diagonal_problem(100, 200, 0.25, 1);
  const DenseOracle oracle(diag.dense());
  const auto model = diag.model();
  // exact eigenpairs of A^T A from the construction: (sigma_j^2, v_j), w_j = u_j
  const Vector lambdas = diag.singular_values.array().square();
  const std::span<const double> lambda_span(lambdas.data(), static_cast<std::size_t>(lambdas.size()));
  const double sigma = sigma_for_relative_level(diag.dense() * diag.truth, 0.02);
  const SpectralPreconditioner complete =
      SpectralPreconditioner(1.0, lambdas, diag.right)
          .with_left_vectors(model->linearize(Vector::Zero(100)));
  const auto samples = generate_noise(sigma, 200, 500, 6);

  double worst_exact = 0.0;
  double worst_mc = 0.0;
  for (double gamma : {1e-1, 1e-3, 1e-5, 1e-8}) {
    const double white = phi_white_noise(sigma, lambda_span, gamma).value;
    const double trace = oracle.trace_phi_white(gamma, sigma);
    worst_exact = std::max(worst_exact, std::abs(white - trace) / trace);
    const double sampled = phi_sampled(complete, samples, gamma);
    worst_mc = std::max(worst_mc, std::abs(sampled - white) / white);
  }
  v.require(worst_exact <= 1e-10, "white-noise estimate differs from the trace formula");
  v.require(worst_mc <= 0.15, "sampled estimate off by more than 15%");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("relative gap to trace formula %.1e; L=500 Monte-Carlo gap %.1f%%", worst_exact,
                 100.0 * worst_mc);
  return v;
}

// ------------------------------------------------------------------ 7

Verdict criterion_7() {
  Verdict v;
  const ExperimentConfig config = load_config(fs::path(SPECREG_CONFIG_DIR) / "stopping_study.ini");
  v.require(config.noise.samples == 15 && config.noise.level == 0.02, "config is not the 15 x 2% study");
  const int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  const StudyResult result = run_stopping_study(config, config.noise.samples, jobs);
  std::map<std::string, RuleSummary> by_rule;
  for (const auto& s : result.summary) by_rule[s.rule] = s;
  const RuleSummary& d = by_rule.at("discrepancy");
  const RuleSummary& l = by_rule.at("lepskii");
  const RuleSummary& o = by_rule.at("optimal");
  v.require(d.reached == d.samples && l.reached == l.samples && o.reached == o.samples,
            "a rule was not reached on every sample");
  v.require(d.mean_stop_index < l.mean_stop_index, "mean index: discrepancy >= Lepskii");
  v.require(l.mean_stop_index <= o.mean_stop_index, "mean index: Lepskii > optimal");
  v.require(o.mean_error <= l.mean_error, "mean error: optimal > Lepskii");
  v.require(l.mean_error < d.mean_error, "mean error: Lepskii >= discrepancy");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("mean index discrepancy %.2f, Lepskii %.2f, optimal %.2f", d.mean_stop_index,
                 l.mean_stop_index, o.mean_stop_index) +
             fmt("; mean error %.4f, %.4f, %.4f", d.mean_error, l.mean_error, o.mean_error);
  return v;
}

// ------------------------------------------------------------------ 8

struct Curve {
  std::vector<double> cost;
  std::vector<double> error;

  // Error of the latest iterate available within the budget.
  double at(double budget) const {
    double e = error.front();
    for (std::size_t i = 0; i < cost.size() && cost[i] <= budget; ++i) e = error[i];
    return e;
  }
  std::optional<double> first_cost_reaching(double target) const {
    for (std::size_t i = 0; i < cost.size(); ++i)
      if (error[i] <= target) return cost[i];
    return std::nullopt;
  }
};

Verdict criterion_8() {
  Verdict v;
  const ExperimentConfig config = load_config(fs::path(SPECREG_CONFIG_DIR) / "work_precision.ini");
  const auto rows = run_work_precision(expand_work_precision(config));
  std::map<std::string, Curve> curves;
  for (const auto& r : rows) {
    curves[r.method].cost.push_back(static_cast<double>(r.cumulative_cost));
    curves[r.method].error.push_back(r.l2_error);
  }
  for (const char* name : {"landweber", "newton-cg", "irgnm-plain", "irgnm-prec"}) {
    v.require(curves.count(name) == 1, std::string("missing method ") + name);
  }
  if (!v.pass) return v;

  const double budget = static_cast<double>(config.solver.budget);
  double worst_margin = std::numeric_limits<double>::infinity();
  double worst_at = 0.0;
  for (double b = std::ceil(0.1 * budget); b <= budget; b += 1.0) {
    const double landweber = curves["landweber"].at(b);
    for (const char* name : {"newton-cg", "irgnm-plain", "irgnm-prec"}) {
      const double margin = landweber / curves[name].at(b);
      if (margin < worst_margin) {
        worst_margin = margin;
        worst_at = b;
      }
    }
  }
  v.require(worst_margin > 1.0, "Landweber not dominated at budget " + std::to_string(int(worst_at)));

  const Curve& ncg = curves["newton-cg"];
  const double plateau = ncg.error.back();
  const auto ncg_cost = ncg.first_cost_reaching(plateau);
  const auto prec_cost = curves["irgnm-prec"].first_cost_reaching(plateau);
  v.require(prec_cost.has_value(), "preconditioned IRGNM never reached the Newton-CG plateau");
  const double ratio = prec_cost ? *prec_cost / *ncg_cost : INFINITY;
  v.require(ratio <= 2.0 / 3.0, "preconditioned IRGNM needed more than 2/3 of the Newton-CG units");
  v.detail = (v.pass ? "" : v.detail + "; ") +
             fmt("Landweber error >= %.3fx every Newton-type method beyond %g units", worst_margin,
                 std::ceil(0.1 * budget)) +
             fmt("; Newton-CG plateau %.4g reached at %g units", plateau, *ncg_cost) +
             fmt(", irgnm-prec at %g (ratio %.3f)", prec_cost.value_or(NAN), ratio);
  return v;
}

// ------------------------------------------------------------------ 9

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

Verdict criterion_9() {
  Verdict v;
  const fs::path root = fs::temp_directory_path() / "specreg_acceptance_determinism";
  fs::remove_all(root);
  int compared = 0;
  for (const char* name : {"solve.ini", "stopping_study.ini"}) {
    const ExperimentConfig config = load_config(fs::path(SPECREG_CONFIG_DIR) / name);
    const fs::path a = root / (std::string(name) + ".a");
    const fs::path b = root / (std::string(name) + ".b");
    run_single(config, a);
    run_single(config, b);
    for (const char* file : {"history.csv", "summary.json"}) {
      const std::string first = read_file(a / file);
      v.require(!first.empty(), std::string("empty ") + file);
      v.require(first == read_file(b / file), std::string(file) + " differs between reruns");
      ++compared;
    }
  }
  fs::remove_all(root);
  v.detail = (v.pass ? "" : v.detail + "; ") + fmt("%g output files byte-identical on rerun", compared);
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "preconditioner identities", 5.0, criterion_1},
      {2, "Ritz residual identity", 5.0, criterion_2},
      {3, "CG contract", 10.0, criterion_3},
      {4, "preconditioner payoff", 120.0, criterion_4},
      {5, "multiplicity handling", 60.0, criterion_5},
      {6, "Phi estimators", 30.0, criterion_6},
      {7, "stopping-rule study", 600.0, criterion_7},
      {8, "work-precision ordering", 600.0, criterion_8},
      {9, "determinism", 600.0, criterion_9},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Verdict verdict;
    try {
      verdict = c.run();
    } catch (const std::exception& e) {
      verdict.pass = false;
      verdict.detail = std::string("exception: ") + e.what();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (seconds > c.limit_s) {
      verdict.pass = false;
      verdict.detail += fmt("; runtime %.1f s over the %.0f s limit", seconds, c.limit_s);
    }
    if (!verdict.pass) ++failures;
    std::printf("%s criterion %d (%s): %s [%.2f s]\n", verdict.pass ? "PASS" : "FAIL", c.id, c.name,
                verdict.detail.c_str(), seconds);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
