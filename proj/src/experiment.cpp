#include "specreg/experiment.hpp"

#include "specreg/format.hpp"
#include "specreg/testbed.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

namespace specreg {

ConfigError::ConfigError(std::string field, const std::string& message, std::optional<int> line)
    : std::runtime_error(field + ": " + message +
                         (line ? " (line " + std::to_string(*line) + ")" : std::string())),
      field_(std::move(field)),
      line_(line) {}

std::string_view to_string(ProblemKind kind) {
  return kind == ProblemKind::Diagonal ? "diagonal" : "convolution";
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::IrgnmPrec: return "irgnm-prec";
    case Method::IrgnmPlain: return "irgnm-plain";
    case Method::NewtonCg: return "newton-cg";
    case Method::Landweber: return "landweber";
  }
  return "unknown";
}

std::string_view to_string(NoiseKind kind) { return kind == NoiseKind::None ? "none" : "white"; }

std::string_view to_string(PhiKind kind) {
  switch (kind) {
    case PhiKind::White: return "white";
    case PhiKind::Sampled: return "sampled";
    case PhiKind::Deterministic: return "deterministic";
  }
  return "unknown";
}

std::string_view to_string(StopRule rule) {
  switch (rule) {
    case StopRule::Discrepancy: return "discrepancy";
    case StopRule::Lepskii: return "lepskii";
    case StopRule::Fixed: return "fixed";
    case StopRule::OracleOptimal: return "oracle-optimal";
    case StopRule::None: return "none";
  }
  return "unknown";
}

namespace {

// ---------------------------------------------------------------- values

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

double parse_double(const std::string& field, const std::string& text) {
  double value = 0.0;
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end || !std::isfinite(value)) {
    throw ConfigError(field, "expected a finite number, got '" + text + "'");
  }
  return value;
}

std::optional<double> parse_optional_double(const std::string& field, const std::string& text) {
  if (text == "auto" || text == "none") return std::nullopt;
  return parse_double(field, text);
}

std::string format_optional(const std::optional<double>& value, const char* empty) {
  return value ? format_double(*value) : std::string(empty);
}

long long parse_integer(const std::string& field, const std::string& text) {
  long long value = 0;
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError(field, "expected an integer, got '" + text + "'");
  }
  return value;
}

int parse_int(const std::string& field, const std::string& text) {
  const long long v = parse_integer(field, text);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ConfigError(field, "integer out of range: '" + text + "'");
  }
  return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& field, const std::string& text) {
  std::uint64_t value = 0;
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError(field, "expected a nonnegative integer, got '" + text + "'");
  }
  return value;
}

bool parse_bool(const std::string& field, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError(field, "expected true or false, got '" + text + "'");
}

std::string format_bool(bool b) { return b ? "true" : "false"; }

template <class Enum, std::size_t N>
Enum parse_enum(const std::string& field, const std::string& text, const Enum (&options)[N]) {
  std::string allowed;
  for (Enum e : options) {
    if (text == to_string(e)) return e;
    if (!allowed.empty()) allowed += ", ";
    allowed += to_string(e);
  }
  throw ConfigError(field, "unknown value '" + text + "' (expected one of: " + allowed + ")");
}

constexpr Method kMethods[] = {Method::IrgnmPrec, Method::IrgnmPlain, Method::NewtonCg,
                               Method::Landweber};
constexpr ProblemKind kProblemKinds[] = {ProblemKind::Diagonal, ProblemKind::Convolution};
constexpr NoiseKind kNoiseKinds[] = {NoiseKind::None, NoiseKind::White};
constexpr PhiKind kPhiKinds[] = {PhiKind::White, PhiKind::Sampled, PhiKind::Deterministic};
constexpr StopRule kStopRules[] = {StopRule::Discrepancy, StopRule::Lepskii, StopRule::Fixed,
                                   StopRule::OracleOptimal, StopRule::None};

std::string_view rhs_name(RhsKind kind) {
  return kind == RhsKind::IRGNM ? "irgnm" : "levenberg-marquardt";
}

std::string_view phase_name(InitialPhase phase) {
  return phase == InitialPhase::None ? "none" : "newton-cg";
}

// ---------------------------------------------------------------- registry

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string& field, const std::string&)> set;
};

#define SPECREG_DOUBLE(sec, name, member)                                                   \
  Field {                                                                                   \
    sec, name, [](const ExperimentConfig& c) { return format_double(c.member); },           \
        [](ExperimentConfig& c, const std::string& f, const std::string& v) {               \
          c.member = parse_double(f, v);                                                    \
        }                                                                                   \
  }
#define SPECREG_INT(sec, name, member)                                                      \
  Field {                                                                                   \
    sec, name, [](const ExperimentConfig& c) { return std::to_string(c.member); },          \
        [](ExperimentConfig& c, const std::string& f, const std::string& v) {               \
          c.member = parse_int(f, v);                                                       \
        }                                                                                   \
  }
#define SPECREG_U64(sec, name, member)                                                      \
  Field {                                                                                   \
    sec, name, [](const ExperimentConfig& c) { return std::to_string(c.member); },          \
        [](ExperimentConfig& c, const std::string& f, const std::string& v) {               \
          c.member = parse_u64(f, v);                                                       \
        }                                                                                   \
  }

const std::vector<Field>& registry() {
  static const std::vector<Field> fields = {
      {"problem", "kind", [](const ExperimentConfig& c) { return std::string(to_string(c.problem.kind)); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.problem.kind = parse_enum(f, v, kProblemKinds);
       }},
      SPECREG_INT("problem", "m", problem.m),
      SPECREG_INT("problem", "n", problem.n),
      SPECREG_DOUBLE("problem", "decay_a", problem.decay_a),
      SPECREG_DOUBLE("problem", "kernel_width", problem.kernel_width),
      SPECREG_DOUBLE("problem", "c3", problem.c3),
      SPECREG_U64("problem", "seed", problem.seed),
      {"problem", "smooth_basis", [](const ExperimentConfig& c) { return format_bool(c.problem.smooth_basis); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.problem.smooth_basis = parse_bool(f, v);
       }},

      {"solver", "method", [](const ExperimentConfig& c) { return std::string(to_string(c.solver.method)); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.solver.method = parse_enum(f, v, kMethods);
       }},
      {"solver", "gamma0", [](const ExperimentConfig& c) { return format_optional(c.solver.newton.gamma0, "auto"); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.solver.newton.gamma0 = parse_optional_double(f, v);
       }},
      SPECREG_DOUBLE("solver", "gamma_factor", solver.newton.gamma_factor),
      {"solver", "rhs", [](const ExperimentConfig& c) { return std::string(rhs_name(c.solver.newton.rhs_kind)); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         if (v == "irgnm") {
           c.solver.newton.rhs_kind = RhsKind::IRGNM;
         } else if (v == "levenberg-marquardt") {
           c.solver.newton.rhs_kind = RhsKind::LevenbergMarquardt;
         } else {
           throw ConfigError(f, "unknown value '" + v + "' (expected irgnm or levenberg-marquardt)");
         }
       }},
      {"solver", "preconditioned", [](const ExperimentConfig& c) { return format_bool(c.solver.newton.preconditioned); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.solver.newton.preconditioned = parse_bool(f, v);
       }},
      SPECREG_DOUBLE("solver", "eps_standard", solver.newton.eps_standard),
      SPECREG_DOUBLE("solver", "eps_accurate", solver.newton.eps_accurate),
      SPECREG_INT("solver", "update_age_min", solver.newton.update_age_min),
      SPECREG_INT("solver", "update_inner_min", solver.newton.update_inner_min),
      SPECREG_INT("solver", "recompute_inner_min", solver.newton.recompute_inner_min),
      SPECREG_DOUBLE("solver", "ritz_separation", solver.newton.ritz_separation),
      SPECREG_DOUBLE("solver", "ritz_residual_tol", solver.newton.ritz_residual_tol),
      SPECREG_INT("solver", "max_newton", solver.newton.max_newton),
      SPECREG_INT("solver", "max_inner", solver.newton.max_inner),
      {"solver", "initial_phase", [](const ExperimentConfig& c) { return std::string(phase_name(c.solver.newton.initial_phase)); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         if (v == "none") {
           c.solver.newton.initial_phase = InitialPhase::None;
         } else if (v == "newton-cg") {
           c.solver.newton.initial_phase = InitialPhase::NewtonCG;
         } else {
           throw ConfigError(f, "unknown value '" + v + "' (expected none or newton-cg)");
         }
       }},
      SPECREG_DOUBLE("solver", "initial_rho", solver.newton.initial_rho),
      SPECREG_DOUBLE("solver", "initial_switch_ratio", solver.newton.initial_switch_ratio),
      SPECREG_INT("solver", "initial_max_steps", solver.newton.initial_max_steps),
      SPECREG_DOUBLE("solver", "inner_rho", solver.inner_rho),
      {"solver", "landweber_mu", [](const ExperimentConfig& c) { return format_optional(c.solver.landweber_mu, "auto"); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.solver.landweber_mu = parse_optional_double(f, v);
       }},
      SPECREG_INT("solver", "landweber_max_steps", solver.landweber_max_steps),
      SPECREG_U64("solver", "budget", solver.budget),

      {"noise", "kind", [](const ExperimentConfig& c) { return std::string(to_string(c.noise.kind)); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.noise.kind = parse_enum(f, v, kNoiseKinds);
       }},
      SPECREG_DOUBLE("noise", "level", noise.level),
      SPECREG_INT("noise", "samples", noise.samples),
      SPECREG_U64("noise", "seed", noise.seed),
      {"noise", "phi", [](const ExperimentConfig& c) { return std::string(to_string(c.noise.phi)); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.noise.phi = parse_enum(f, v, kPhiKinds);
       }},
      SPECREG_INT("noise", "phi_samples", noise.phi_samples),

      {"stopping", "rule", [](const ExperimentConfig& c) { return std::string(to_string(c.stopping.rule)); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.stopping.rule = parse_enum(f, v, kStopRules);
       }},
      SPECREG_DOUBLE("stopping", "tau", stopping.tau),
      SPECREG_DOUBLE("stopping", "rho", stopping.rho),
      {"stopping", "R", [](const ExperimentConfig& c) { return format_optional(c.stopping.bound_R, "none"); },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.stopping.bound_R = parse_optional_double(f, v);
       }},
      SPECREG_INT("stopping", "fixed_k", stopping.fixed_k),

      {"work_precision", "methods",
       [](const ExperimentConfig& c) {
         std::string out;
         for (Method m : c.compare_methods) {
           if (!out.empty()) out += ",";
           out += to_string(m);
         }
         return out;
       },
       [](ExperimentConfig& c, const std::string& f, const std::string& v) {
         c.compare_methods.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) {
           item = trim(item);
           if (!item.empty()) c.compare_methods.push_back(parse_enum(f, item, kMethods));
         }
       }},

      {"output", "dir", [](const ExperimentConfig& c) { return c.output_dir; },
       [](ExperimentConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
  };
  return fields;
}

#undef SPECREG_DOUBLE
#undef SPECREG_INT
#undef SPECREG_U64

// Line of every "section.key" in the source text, for diagnostics.
std::map<std::string, int> key_lines(const std::string& text) {
  std::map<std::string, int> lines;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == ';' || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      lines.emplace(section, number);
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos) lines.emplace(section + "." + trim(std::string_view(t).substr(0, eq)), number);
  }
  return lines;
}

std::optional<int> line_of(const std::map<std::string, int>& lines, const std::string& field) {
  const auto it = lines.find(field);
  if (it == lines.end()) return std::nullopt;
  return it->second;
}

bool is_irgnm(Method m) { return m == Method::IrgnmPrec || m == Method::IrgnmPlain; }

void check(bool ok, const char* field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

}  // namespace

// ---------------------------------------------------------------- config

bool operator==(const SolverSpec& a, const SolverSpec& b) {
  const NewtonConfig& x = a.newton;
  const NewtonConfig& y = b.newton;
  return a.method == b.method && a.inner_rho == b.inner_rho && a.landweber_mu == b.landweber_mu &&
         a.landweber_max_steps == b.landweber_max_steps && a.budget == b.budget &&
         x.gamma0 == y.gamma0 && x.gamma_factor == y.gamma_factor && x.rhs_kind == y.rhs_kind &&
         x.preconditioned == y.preconditioned && x.enable_updates == y.enable_updates &&
         x.eps_standard == y.eps_standard && x.eps_accurate == y.eps_accurate &&
         x.update_age_min == y.update_age_min && x.update_inner_min == y.update_inner_min &&
         x.recompute_inner_min == y.recompute_inner_min &&
         x.ritz_separation == y.ritz_separation && x.ritz_residual_tol == y.ritz_residual_tol &&
         x.max_newton == y.max_newton && x.max_inner == y.max_inner &&
         x.initial_phase == y.initial_phase && x.initial_rho == y.initial_rho &&
         x.initial_switch_ratio == y.initial_switch_ratio &&
         x.initial_max_steps == y.initial_max_steps;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.problem == b.problem && a.solver == b.solver && a.noise == b.noise &&
         a.stopping == b.stopping && a.compare_methods == b.compare_methods &&
         a.output_dir == b.output_dir;
}

void ExperimentConfig::validate() const {
  const ProblemSpec& p = problem;
  check(p.m > 0, "problem.m", "must be positive");
  if (p.kind == ProblemKind::Diagonal) {
    check(p.n >= p.m, "problem.n", "must be at least problem.m");
    check(p.decay_a > 0.0, "problem.decay_a", "must be positive");
  } else {
    check(p.m >= 8, "problem.m", "the convolution grid needs at least 8 points");
    check(p.kernel_width > 0.0, "problem.kernel_width", "must be positive");
  }
  check(p.c3 >= 0.0, "problem.c3", "must be nonnegative");

  const NewtonConfig& nc = solver.newton;
  if (nc.gamma0) check(*nc.gamma0 > 0.0, "solver.gamma0", "must be positive or auto");
  check(nc.gamma_factor > 1.0, "solver.gamma_factor", "must exceed 1");
  check(nc.eps_standard > 0.0 && nc.eps_standard < 1.0, "solver.eps_standard", "must lie in (0, 1)");
  check(nc.eps_accurate > 0.0 && nc.eps_accurate <= nc.eps_standard, "solver.eps_accurate",
        "must lie in (0, eps_standard]");
  check(nc.ritz_separation > 1.0, "solver.ritz_separation", "must exceed 1");
  check(nc.ritz_residual_tol > 0.0, "solver.ritz_residual_tol", "must be positive");
  check(nc.max_newton > 0, "solver.max_newton", "must be positive");
  check(nc.max_inner > 0, "solver.max_inner", "must be positive");
  check(nc.update_age_min >= 0, "solver.update_age_min", "must be nonnegative");
  check(nc.initial_rho > 0.0 && nc.initial_rho < 1.0, "solver.initial_rho", "must lie in (0, 1)");
  check(nc.initial_max_steps > 0, "solver.initial_max_steps", "must be positive");
  check(solver.inner_rho > 0.0 && solver.inner_rho < 1.0, "solver.inner_rho", "must lie in (0, 1)");
  if (solver.landweber_mu) check(*solver.landweber_mu >= 0.0, "solver.landweber_mu", "must be nonnegative");
  check(solver.landweber_max_steps > 0, "solver.landweber_max_steps", "must be positive");

  check(noise.level >= 0.0, "noise.level", "must be nonnegative");
  check(noise.samples >= 1, "noise.samples", "must be positive");
  check(noise.phi_samples >= 1, "noise.phi_samples", "must be positive");

  check(stopping.tau > 1.0, "stopping.tau", "must exceed 1");
  check(stopping.rho > 4.0, "stopping.rho", "must exceed 4");
  if (stopping.bound_R) check(*stopping.bound_R > 0.0, "stopping.R", "must be positive");
  check(stopping.fixed_k >= 0, "stopping.fixed_k", "must be nonnegative");
  if (stopping.rule == StopRule::Lepskii) {
    check(stopping.bound_R.has_value(), "stopping.R",
          "Lepskii's rule needs an upper bound R on the propagated noise error");
    check(is_irgnm(solver.method), "stopping.rule",
          "Lepskii's rule needs a Phi estimate, available for irgnm-prec and irgnm-plain only");
  }

  check(!compare_methods.empty(), "work_precision.methods", "must list at least one method");
  check(!output_dir.empty(), "output.dir", "must not be empty");
}

ExperimentConfig parse_config_string(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", e.message(), static_cast<int>(e.line()));
  }
  const auto lines = key_lines(text);

  std::set<std::string> known_sections;
  std::set<std::string> known_fields;
  for (const Field& f : registry()) {
    known_sections.insert(f.section);
    known_fields.insert(std::string(f.section) + "." + f.key);
  }
  for (const auto& [section, body] : tree) {
    if (!known_sections.count(section)) {
      throw ConfigError(section, "unknown section", line_of(lines, section));
    }
    for (const auto& [key, value] : body) {
      const std::string field = section + "." + key;
      if (!known_fields.count(field)) throw ConfigError(field, "unknown key", line_of(lines, field));
    }
  }

  ExperimentConfig config;
  for (const Field& f : registry()) {
    const auto section = tree.get_child_optional(f.section);
    if (!section) continue;
    const auto value = section->get_optional<std::string>(pt::ptree::path_type(f.key, '\0'));
    if (!value) continue;
    const std::string field = std::string(f.section) + "." + f.key;
    try {
      f.set(config, field, trim(*value));
    } catch (const ConfigError& e) {
      throw ConfigError(e.field(), std::string(e.what()).substr(e.field().size() + 2),
                        line_of(lines, field));
    }
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.field(), std::string(e.what()).substr(e.field().size() + 2),
                      line_of(lines, e.field()));
  }
  return config;
}

ExperimentConfig parse_config(std::istream& in) {
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config_string(buffer.str());
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path.string() + "'");
  return parse_config(in);
}

std::string serialize_config(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const Field& f : registry()) {
    if (section != f.section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------- runs

ProblemInstance build_problem(const ProblemSpec& spec) {
  std::shared_ptr<const LinearMap> map;
  Vector truth;
  if (spec.kind == ProblemKind::Diagonal) {
    DiagonalProblemOptions options;
    options.smooth_right_basis = spec.smooth_basis;
    DiagonalProblem p = make_diagonal_problem(spec.m, spec.n, spec.decay_a, spec.seed, options);
    map = p.map;
    truth = p.truth;
  } else {
    ConvolutionProblem p = make_convolution_problem(spec.m, spec.kernel_width, spec.seed);
    map = p.map;
    truth = p.truth;
  }
  ProblemInstance inst;
  if (spec.c3 > 0.0) {
    inst.model = make_nonlinear_composite(map, spec.c3, truth).model;
  } else {
    inst.model = std::make_shared<LinearModel>(map);
  }
  inst.truth = std::move(truth);
  inst.y_exact = inst.model->evaluate(inst.truth);
  return inst;
}

double noise_sigma(const NoiseConfig& noise, const Vector& y_exact) {
  if (noise.kind == NoiseKind::None) return 0.0;
  return sigma_for_relative_level(y_exact, noise.level);
}

namespace {

constexpr std::uint64_t kPhiSeedSalt = 0x5bd1e9955bd1e995ULL;

NoiseSpec phi_spec(const NoiseConfig& noise, double sigma, Index n) {
  switch (noise.phi) {
    case PhiKind::White: return WhiteNoise{sigma};
    case PhiKind::Sampled:
      return SampledNoise{generate_noise(sigma, n, static_cast<std::size_t>(noise.phi_samples),
                                         noise.seed ^ kPhiSeedSalt)};
    case PhiKind::Deterministic:
      return DeterministicNoise{sigma * std::sqrt(static_cast<double>(n))};
  }
  return WhiteNoise{sigma};
}

StoppingDriver budget_stop(const SolverSpec& solver) {
  if (solver.budget == 0) return StoppingDriver::never();
  return StoppingDriver::cost_budget(solver.budget);
}

struct RuleEvaluation {
  std::optional<std::size_t> k_max;
  std::map<std::string, StopOutcome> stops;
};

StopOutcome outcome(std::optional<std::size_t> index, const std::vector<double>& errors) {
  StopOutcome out;
  if (index) {
    out.index = index;
    out.error = errors[*index];
  }
  return out;
}

RuleEvaluation evaluate_rules(const ExperimentConfig& config, const RunHistory& history,
                              const Vector& truth, double sigma, Index n) {
  RuleEvaluation eval;
  const bool has_phi = is_irgnm(config.solver.method);
  const std::vector<double> phi = history.phi_values();
  if (has_phi && config.stopping.bound_R) {
    const double bound = *config.stopping.bound_R;
    if (phi.front() > bound) {
      throw ConfigError("stopping.R", "R = " + format_double(bound) + " is below Phi(0) = " +
                                          format_double(phi.front()));
    }
    eval.k_max = k_max_from_bound([&](std::size_t k) { return phi[k]; }, bound, phi.size() - 1);
  }
  const std::size_t k_end = eval.k_max.value_or(history.size() - 1);
  const std::vector<double> errors = history.errors(truth);
  const std::vector<double> residuals = history.residual_norms();
  const std::vector<Vector> iterates = history.iterates();

  const double delta = sigma * std::sqrt(static_cast<double>(n));
  eval.stops["discrepancy"] = outcome(
      discrepancy_stop(std::span<const double>(residuals.data(), k_end + 1), config.stopping.tau, delta),
      errors);
  if (eval.k_max) {
    eval.stops["lepskii"] =
        outcome(lepskii_select(iterates, phi, config.stopping.rho, *eval.k_max), errors);
  } else {
    eval.stops["lepskii"] = StopOutcome{};
  }
  eval.stops["optimal"] = outcome(oracle_optimal_index(iterates, truth, k_end), errors);
  if (config.stopping.rule == StopRule::Fixed) {
    const auto fixed = static_cast<std::size_t>(config.stopping.fixed_k);
    eval.stops["fixed"] =
        outcome(fixed <= k_end ? std::optional<std::size_t>(fixed) : std::nullopt, errors);
  }
  return eval;
}

std::string_view rule_key(StopRule rule) {
  switch (rule) {
    case StopRule::Discrepancy: return "discrepancy";
    case StopRule::Lepskii: return "lepskii";
    case StopRule::Fixed: return "fixed";
    case StopRule::OracleOptimal: return "optimal";
    case StopRule::None: return "none";
  }
  return "none";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

RunHistory run_method(const SolverSpec& solver, const ForwardModel& model, const Vector& y_obs,
                      const std::optional<NoiseSpec>& phi_noise, const StoppingDriver& stop) {
  const Vector x0 = Vector::Zero(model.domain_dim());
  switch (solver.method) {
    case Method::IrgnmPrec:
    case Method::IrgnmPlain: {
      NewtonConfig cfg = solver.newton;
      cfg.enable_updates = solver.method == Method::IrgnmPrec;
      cfg.phi_noise = phi_noise;
      return irgnm_run(model, y_obs, x0, cfg, stop);
    }
    case Method::NewtonCg:
      return newton_cg_run(model, y_obs, x0, solver.inner_rho, stop, solver.newton.max_newton,
                           solver.newton.max_inner);
    case Method::Landweber: {
      const double mu = solver.landweber_mu ? *solver.landweber_mu
                                            : 1.0 / estimate_gram_norm(model.linearize(x0));
      return landweber_run(model, y_obs, x0, mu, stop, solver.landweber_max_steps);
    }
  }
  throw ContractViolation("run_method: unknown method");
}

SingleRunResult run_single(const ExperimentConfig& config,
                           const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  const ProblemInstance inst = build_problem(config.problem);
  const Index n = inst.model->range_dim();
  SingleRunResult result;
  result.truth = inst.truth;
  result.sigma = noise_sigma(config.noise, inst.y_exact);
  const Vector y_obs = inst.y_exact + generate_noise(result.sigma, n, 1, config.noise.seed).front();

  StoppingDriver stop = budget_stop(config.solver);
  std::optional<NoiseSpec> phi;
  if (is_irgnm(config.solver.method)) {
    phi = phi_spec(config.noise, result.sigma, n);
    if (config.stopping.bound_R) stop = stop || StoppingDriver::phi_bound(*config.stopping.bound_R);
  }
  if (config.stopping.rule == StopRule::Fixed) stop = stop || StoppingDriver::fixed(config.stopping.fixed_k);

  result.history = run_method(config.solver, *inst.model, y_obs, phi, stop);
  const RuleEvaluation eval = evaluate_rules(config, result.history, inst.truth, result.sigma, n);
  result.k_max = eval.k_max;
  result.stops = eval.stops;

  const std::vector<double> errors = result.history.errors(inst.truth);
  const std::size_t k_end = eval.k_max.value_or(result.history.size() - 1);
  result.selected_index = k_end;
  result.selected_reached = config.stopping.rule == StopRule::None;
  if (config.stopping.rule != StopRule::None) {
    const StopOutcome& chosen = result.stops.at(std::string(rule_key(config.stopping.rule)));
    if (chosen.index) {
      result.selected_index = *chosen.index;
      result.selected_reached = true;
    }
  }
  result.selected_error = errors[result.selected_index];

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::ostringstream csv;
    write_history_csv(csv, result.history, inst.truth);
    write_text(*out_dir / "history.csv", csv.str());
    write_text(*out_dir / "summary.json", summary_json(config, result));
  }
  return result;
}

void write_history_csv(std::ostream& out, const RunHistory& history, const Vector& truth) {
  out << "k,m,gamma_k,residual,l2_error,inner_iters,cumulative_cost,phi,event\n";
  for (const RunRecord& r : history.records) {
    out << r.k << ',' << r.m << ',' << (r.gamma_k > 0.0 ? format_double(r.gamma_k) : "") << ','
        << format_double(r.residual_norm) << ',' << format_double((r.x - truth).norm()) << ','
        << r.inner_iterations << ',' << r.cumulative_cost << ','
        << (r.phi ? format_double(*r.phi) : "") << ',' << to_string(r.event) << '\n';
  }
}

std::string summary_json(const ExperimentConfig& config, const SingleRunResult& result) {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["csv_schema_version"] = kCsvSchemaVersion;
  j["method"] = to_string(config.solver.method);
  j["steps"] = result.history.size();
  j["terminal_reason"] = to_string(result.history.terminal_reason);
  if (!result.history.message.empty()) j["message"] = result.history.message;
  j["total_cost"] = result.history.empty() ? 0 : result.history.back().cumulative_cost;
  j["noise_sigma"] = result.sigma;
  j["k_max"] = result.k_max ? nlohmann::ordered_json(*result.k_max) : nlohmann::ordered_json();
  j["stopping_rule"] = to_string(config.stopping.rule);
  j["stop_index"] = result.selected_index;
  j["stop_reached"] = result.selected_reached;
  j["final_error"] = result.selected_error;
  nlohmann::ordered_json rules = nlohmann::ordered_json::object();
  for (const auto& [name, o] : result.stops) {
    nlohmann::ordered_json entry;
    if (o.index) {
      entry["stop_index"] = *o.index;
      entry["error_at_stop"] = *o.error;
    } else {
      entry["stop_index"] = "not reached";
    }
    rules[name] = entry;
  }
  j["rules"] = rules;
  j["config"] = serialize_config(config);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- work-precision

std::vector<ExperimentConfig> expand_work_precision(const ExperimentConfig& config) {
  std::vector<ExperimentConfig> out;
  for (Method m : config.compare_methods) {
    ExperimentConfig c = config;
    c.solver.method = m;
    // The stop rule plays no part in a work-precision run.
    c.stopping.rule = StopRule::None;
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<WorkPrecisionRow> run_work_precision(const std::vector<ExperimentConfig>& configs) {
  if (configs.empty()) throw ConfigError("work_precision.methods", "no configurations given");
  for (const auto& c : configs) {
    c.validate();
    if (!(c.problem == configs.front().problem)) {
      throw ConfigError("problem", "work-precision runs must share the problem");
    }
    if (!(c.noise == configs.front().noise)) {
      throw ConfigError("noise", "work-precision runs must share the noise settings");
    }
    if (c.solver.budget == 0) throw ConfigError("solver.budget", "work-precision runs need a positive budget");
  }
  std::vector<WorkPrecisionRow> rows;
  for (const auto& c : configs) {
    const ProblemInstance inst = build_problem(c.problem);
    const double sigma = noise_sigma(c.noise, inst.y_exact);
    const Vector y_obs =
        inst.y_exact + generate_noise(sigma, inst.model->range_dim(), 1, c.noise.seed).front();
    const RunHistory h = run_method(c.solver, *inst.model, y_obs, std::nullopt, budget_stop(c.solver));
    for (std::size_t k = 0; k < h.size(); ++k) {
      WorkPrecisionRow row;
      row.method = std::string(to_string(c.solver.method));
      row.step = k;
      // x_k exists once step k-1 is complete.
      row.cumulative_cost = k == 0 ? 0 : h.records[k - 1].cumulative_cost;
      row.wall_time_s = k == 0 ? 0.0 : h.records[k - 1].elapsed_s;
      row.l2_error = (h.records[k].x - inst.truth).norm();
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_work_precision_csv(std::ostream& out, const std::vector<WorkPrecisionRow>& rows) {
  out << "method,step,cumulative_cost,wall_time_s,l2_error\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.step << ',' << r.cumulative_cost << ','
        << format_double(r.wall_time_s) << ',' << format_double(r.l2_error) << '\n';
  }
}

// ---------------------------------------------------------------- stopping study

namespace {

constexpr const char* kStudyRules[] = {"discrepancy", "lepskii", "optimal"};

std::vector<StudyRow> study_sample(const ExperimentConfig& config, int sample_id, const Vector& eps,
                                   double sigma) {
  // Each replica owns its model so cost counters are not shared between threads.
  const ProblemInstance inst = build_problem(config.problem);
  const Index n = inst.model->range_dim();
  const Vector y_obs = inst.y_exact + eps;
  const StoppingDriver stop =
      budget_stop(config.solver) || StoppingDriver::phi_bound(*config.stopping.bound_R);
  const RunHistory h =
      run_method(config.solver, *inst.model, y_obs, phi_spec(config.noise, sigma, n), stop);
  if (h.terminal_reason == TerminalReason::Breakdown) {
    throw NumericalError("sample " + std::to_string(sample_id) + ": " + h.message);
  }
  const RuleEvaluation eval = evaluate_rules(config, h, inst.truth, sigma, n);
  std::vector<StudyRow> rows;
  for (const char* rule : kStudyRules) {
    const StopOutcome& o = eval.stops.at(rule);
    rows.push_back(StudyRow{sample_id, rule, o.index, o.error});
  }
  return rows;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

}  // namespace

StudyResult run_stopping_study(const ExperimentConfig& config, int num_samples, int jobs) {
  config.validate();
  if (num_samples < 2) throw ConfigError("noise.samples", "the stopping study needs at least 2 samples");
  if (!is_irgnm(config.solver.method)) {
    throw ConfigError("solver.method", "the stopping study needs irgnm-prec or irgnm-plain (Phi estimates)");
  }
  if (!config.stopping.bound_R) {
    throw ConfigError("stopping.R", "the stopping study needs an upper bound R on the propagated noise error");
  }
  require(jobs >= 1, "run_stopping_study: jobs must be positive");

  const ProblemInstance reference = build_problem(config.problem);
  const double sigma = noise_sigma(config.noise, reference.y_exact);
  const std::vector<Vector> noise = generate_noise(sigma, reference.model->range_dim(),
                                                   static_cast<std::size_t>(num_samples), config.noise.seed);

  std::vector<std::vector<StudyRow>> per_sample(static_cast<std::size_t>(num_samples));
  std::vector<std::exception_ptr> failures(static_cast<std::size_t>(num_samples));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < num_samples; i = next++) {
      try {
        per_sample[static_cast<std::size_t>(i)] = study_sample(config, i, noise[static_cast<std::size_t>(i)], sigma);
      } catch (...) {
        failures[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  const int threads = std::min(jobs, num_samples);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  StudyResult result;
  for (auto& rows : per_sample) {
    for (auto& row : rows) result.rows.push_back(std::move(row));
  }
  for (const char* rule : kStudyRules) {
    std::vector<double> indices;
    std::vector<double> errors;
    for (const auto& row : result.rows) {
      if (row.rule != rule || !row.stop_index) continue;
      indices.push_back(static_cast<double>(*row.stop_index));
      errors.push_back(*row.error_at_stop);
    }
    RuleSummary s;
    s.rule = rule;
    s.samples = num_samples;
    s.reached = static_cast<int>(indices.size());
    std::tie(s.mean_stop_index, s.std_stop_index) = mean_std(indices);
    std::tie(s.mean_error, s.std_error) = mean_std(errors);
    result.summary.push_back(s);
  }
  return result;
}

void write_study_csv(std::ostream& out, const StudyResult& result) {
  out << "sample_id,rule,stop_index,error_at_stop\n";
  for (const auto& r : result.rows) {
    out << r.sample_id << ',' << r.rule << ','
        << (r.stop_index ? std::to_string(*r.stop_index) : std::string("not reached")) << ','
        << (r.error_at_stop ? format_double(*r.error_at_stop) : std::string()) << '\n';
  }
}

void write_study_summary_csv(std::ostream& out, const StudyResult& result) {
  out << "rule,samples,reached,mean_stop_index,std_stop_index,mean_error,std_error\n";
  for (const auto& s : result.summary) {
    out << s.rule << ',' << s.samples << ',' << s.reached << ',';
    if (s.reached == 0) {
      out << "not reached,,,\n";
      continue;
    }
    out << format_double(s.mean_stop_index) << ',' << format_double(s.std_stop_index) << ','
        << format_double(s.mean_error) << ',' << format_double(s.std_error) << '\n';
  }
}

// ---------------------------------------------------------------- checks

bool run_checks(const ProblemSpec& spec, std::ostream& log) {
  const ProblemInstance inst = build_problem(spec);
  const ForwardModel& model = *inst.model;
  bool all = true;
  auto report = [&](bool ok, const std::string& name, const std::string& detail) {
    log << (ok ? "PASS " : "FAIL ") << name << ": " << detail << '\n';
    all = all && ok;
  };

  const Vector x0 = Vector::Zero(model.domain_dim());
  for (const auto& [label, point] : {std::pair<const char*, const Vector*>{"x0", &x0},
                                     std::pair<const char*, const Vector*>{"truth", &inst.truth}}) {
    const AdjointTestReport adj = adjoint_test(model.linearize(*point), 100, spec.seed);
    report(adj.passed, std::string("adjoint at ") + label,
           "worst relative gap " + format_double(adj.worst_relative_gap) + " over 100 pairs");
  }

  std::mt19937_64 gen(spec.seed ^ 0xfdULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(model.domain_dim());
  for (Index i = 0; i < v.size(); ++i) v[i] = normal(gen);
  v.normalize();
  const FiniteDifferenceReport fd = finite_difference_test(model, inst.truth, v);
  report(fd.passed, "finite-difference Jacobian", "observed order " + format_double(fd.observed_order));

  const JacobianHandle jac = model.linearize(x0);
  const std::uint64_t before = model.cost().total();
  (void)model.evaluate(x0);
  const std::uint64_t after_eval = model.cost().total();
  (void)jac.apply(x0);
  const std::uint64_t after_apply = model.cost().total();
  (void)jac.apply_adjoint(Vector::Zero(model.range_dim()));
  const std::uint64_t after_adjoint = model.cost().total();
  const bool counted = after_eval - before == 1 && after_apply - after_eval == 1 &&
                       after_adjoint - after_apply == 1;
  report(counted, "cost counters", "one unit per evaluation, apply and adjoint");

  if (model.domain_dim() <= 200) {
    const DenseOracle oracle(assemble_dense(jac));
    const Vector lambdas = oracle.gram_eigenvalues();
    const Matrix vectors = oracle.gram_eigenvectors();
    const Index keep = std::min<Index>(10, lambdas.size());
    const double gamma = std::max(lambdas[keep - 1] * 0.5, 1e-12 * lambdas[0]);
    const SpectralPreconditioner p(gamma, lambdas.head(keep), vectors.leftCols(keep));
    const SpectrumReport spectrum = preconditioned_spectrum_check(p, oracle.matrix());
    report(spectrum.matches, "preconditioned spectrum",
           "max relative deviation " + format_double(spectrum.max_deviation) + " with " +
               std::to_string(keep) + " exact eigenpairs");
  } else {
    log << "SKIP preconditioned spectrum: dense check limited to M <= 200\n";
  }
  return all;
}

}  // namespace specreg
