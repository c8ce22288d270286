#ifndef SPECREG_EXPERIMENT_HPP
#define SPECREG_EXPERIMENT_HPP

#include "specreg/newton.hpp"
#include "specreg/run_history.hpp"
#include "specreg/stopping.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace specreg {

inline constexpr std::string_view kVersion = "1.0.0";
/// Bumped whenever a CSV column is added, removed or reordered.
inline constexpr int kCsvSchemaVersion = 1;

/// Invalid experiment configuration. `field` is "section.key" (or the section
/// alone); `line` is set when the error comes from the parser.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message, std::optional<int> line = {});
  const std::string& field() const { return field_; }
  std::optional<int> line() const { return line_; }

 private:
  std::string field_;
  std::optional<int> line_;
};

enum class ProblemKind { Diagonal, Convolution };
enum class Method { IrgnmPrec, IrgnmPlain, NewtonCg, Landweber };
enum class NoiseKind { None, White };
enum class PhiKind { White, Sampled, Deterministic };
enum class StopRule { Discrepancy, Lepskii, Fixed, OracleOptimal, None };

std::string_view to_string(ProblemKind kind);
std::string_view to_string(Method method);
std::string_view to_string(NoiseKind kind);
std::string_view to_string(PhiKind kind);
std::string_view to_string(StopRule rule);

struct ProblemSpec {
  ProblemKind kind = ProblemKind::Diagonal;
  int m = 100;  // diagonal: domain size; convolution: grid size
  int n = 200;  // diagonal only
  double decay_a = 0.25;
  double kernel_width = 0.05;
  /// Cubic coefficient of the pointwise nonlinearity; 0 gives the linear model.
  double c3 = 0.2;
  std::uint64_t seed = 1;
  bool smooth_basis = true;

  bool operator==(const ProblemSpec&) const = default;
};

struct SolverSpec {
  Method method = Method::IrgnmPrec;
  /// Newton options; phi_noise is filled in from the noise section.
  NewtonConfig newton;
  double inner_rho = 0.7;               // newton-cg
  std::optional<double> landweber_mu;   // default 1 / ||A_0^T A_0||
  int landweber_max_steps = 20000;
  std::uint64_t budget = 0;             // model units, 0 = unlimited
};

struct NoiseConfig {
  NoiseKind kind = NoiseKind::None;
  double level = 0.02;  // ||eps|| / ||y|| in expectation
  int samples = 15;     // stopping-study replicas
  std::uint64_t seed = 7;
  PhiKind phi = PhiKind::White;
  int phi_samples = 20;  // sampled Phi estimator

  bool operator==(const NoiseConfig&) const = default;
};

struct StoppingSpec {
  StopRule rule = StopRule::Discrepancy;
  double tau = 2.0;
  double rho = 4.1;
  std::optional<double> bound_R;  // upper bound on Phi defining K_max
  int fixed_k = 0;

  bool operator==(const StoppingSpec&) const = default;
};

struct ExperimentConfig {
  ProblemSpec problem;
  SolverSpec solver;
  NoiseConfig noise;
  StoppingSpec stopping;
  std::vector<Method> compare_methods = {Method::Landweber, Method::NewtonCg, Method::IrgnmPlain,
                                         Method::IrgnmPrec};
  std::string output_dir = "out";

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

bool operator==(const SolverSpec& a, const SolverSpec& b);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

/// Sectioned key = value text ([problem], [solver], [noise], [stopping],
/// [work_precision], [output]). Missing keys keep their defaults; unknown keys
/// are rejected.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config_string(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, in a fixed order, doubles in round-trip precision.
std::string serialize_config(const ExperimentConfig& config);

struct ProblemInstance {
  std::shared_ptr<ForwardModel> model;
  Vector truth;
  Vector y_exact;
};

ProblemInstance build_problem(const ProblemSpec& spec);

/// Per-component noise standard deviation for the configured relative level
/// (0 when noise is off).
double noise_sigma(const NoiseConfig& noise, const Vector& y_exact);

/// Runs the configured method from x0 = 0. `phi_noise` is only used by the
/// IRGNM variants.
RunHistory run_method(const SolverSpec& solver, const ForwardModel& model, const Vector& y_obs,
                      const std::optional<NoiseSpec>& phi_noise, const StoppingDriver& stop);

struct StopOutcome {
  std::optional<std::size_t> index;  // empty: rule not reached / not applicable
  std::optional<double> error;
};

struct SingleRunResult {
  RunHistory history;
  Vector truth;
  double sigma = 0.0;
  std::optional<std::size_t> k_max;
  std::map<std::string, StopOutcome> stops;  // keyed by rule name
  std::size_t selected_index = 0;
  bool selected_reached = false;
  double selected_error = 0.0;
};

/// One inversion with noise sample 0. Writes history.csv and summary.json to
/// `out_dir` when given.
SingleRunResult run_single(const ExperimentConfig& config,
                           const std::optional<std::filesystem::path>& out_dir = {});

void write_history_csv(std::ostream& out, const RunHistory& history, const Vector& truth);
std::string summary_json(const ExperimentConfig& config, const SingleRunResult& result);

struct WorkPrecisionRow {
  std::string method;
  std::size_t step = 0;
  std::uint64_t cumulative_cost = 0;  // units spent when x_step became available
  double wall_time_s = 0.0;
  double l2_error = 0.0;
};

/// Runs every config (they must share problem and noise) until its budget.
std::vector<WorkPrecisionRow> run_work_precision(const std::vector<ExperimentConfig>& configs);
/// One config per entry of config.compare_methods.
std::vector<ExperimentConfig> expand_work_precision(const ExperimentConfig& config);
void write_work_precision_csv(std::ostream& out, const std::vector<WorkPrecisionRow>& rows);

struct StudyRow {
  int sample_id = 0;
  std::string rule;
  std::optional<std::size_t> stop_index;  // empty: not reached
  std::optional<double> error_at_stop;
};

struct RuleSummary {
  std::string rule;
  int samples = 0;
  int reached = 0;
  double mean_stop_index = 0.0;
  double std_stop_index = 0.0;
  double mean_error = 0.0;
  double std_error = 0.0;
};

struct StudyResult {
  std::vector<StudyRow> rows;          // sorted by sample id, then rule
  std::vector<RuleSummary> summary;    // discrepancy, lepskii, optimal
};

/// Runs `num_samples` noisy replicas (up to `jobs` at a time) to K_max and
/// applies the discrepancy principle, Lepskii's rule and the oracle-optimal
/// index to each.
StudyResult run_stopping_study(const ExperimentConfig& config, int num_samples, int jobs = 1);
void write_study_csv(std::ostream& out, const StudyResult& result);
void write_study_summary_csv(std::ostream& out, const StudyResult& result);

/// Adjoint, finite-difference, cost-counter and dense spectral checks on the
/// configured problem. Prints one line per check; true when all pass.
bool run_checks(const ProblemSpec& spec, std::ostream& log);

}  // namespace specreg

#endif  // SPECREG_EXPERIMENT_HPP
