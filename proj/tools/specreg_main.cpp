#include "specreg/experiment.hpp"
#include "specreg/format.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

using namespace specreg;

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitBreakdown = 3;

struct Options {
  std::string config_path;
  std::string out_dir;
  int jobs = 1;
  std::optional<std::uint64_t> seed;
  std::optional<int> samples;
  std::string problem;
};

ExperimentConfig load(const Options& opt) {
  ExperimentConfig config = opt.config_path.empty() ? ExperimentConfig{} : load_config(opt.config_path);
  if (opt.seed) config.noise.seed = *opt.seed;
  if (!opt.out_dir.empty()) config.output_dir = opt.out_dir;
  config.validate();
  return config;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

int solve(const Options& opt) {
  const ExperimentConfig config = load(opt);
  const SingleRunResult r = run_single(config, std::filesystem::path(config.output_dir));
  std::cout << to_string(config.solver.method) << ": " << r.history.size() << " steps, "
            << "stop index " << r.selected_index << (r.selected_reached ? "" : " (rule not reached)")
            << ", error " << format_double(r.selected_error) << ", cost "
            << (r.history.empty() ? 0 : r.history.back().cumulative_cost) << " units\n";
  if (r.history.terminal_reason == TerminalReason::Breakdown) {
    std::cerr << "breakdown: " << r.history.message << '\n';
    return kExitBreakdown;
  }
  return 0;
}

int work_precision(const Options& opt) {
  const ExperimentConfig config = load(opt);
  const auto rows = run_work_precision(expand_work_precision(config));
  std::filesystem::create_directories(config.output_dir);
  std::ostringstream csv;
  write_work_precision_csv(csv, rows);
  write_file(std::filesystem::path(config.output_dir) / "work_precision.csv", csv.str());
  for (Method m : config.compare_methods) {
    const std::string name(to_string(m));
    const WorkPrecisionRow* last = nullptr;
    for (const auto& row : rows) {
      if (row.method == name) last = &row;
    }
    if (last) {
      std::cout << name << ": " << last->step + 1 << " iterates, error " << format_double(last->l2_error)
                << " at " << last->cumulative_cost << " units\n";
    }
  }
  return 0;
}

int stopping_study(const Options& opt) {
  const ExperimentConfig config = load(opt);
  const int samples = opt.samples.value_or(config.noise.samples);
  const StudyResult result = run_stopping_study(config, samples, opt.jobs);
  std::filesystem::create_directories(config.output_dir);
  std::ostringstream rows;
  write_study_csv(rows, result);
  write_file(std::filesystem::path(config.output_dir) / "stopping_study.csv", rows.str());
  std::ostringstream summary;
  write_study_summary_csv(summary, result);
  write_file(std::filesystem::path(config.output_dir) / "stopping_summary.csv", summary.str());
  for (const auto& s : result.summary) {
    std::cout << s.rule << ": ";
    if (s.reached == 0) {
      std::cout << "not reached\n";
      continue;
    }
    std::cout << "stop index " << format_double(s.mean_stop_index) << " +- "
              << format_double(s.std_stop_index) << ", error " << format_double(s.mean_error)
              << " +- " << format_double(s.std_error) << " (" << s.reached << "/" << s.samples
              << " samples)\n";
  }
  return 0;
}

int check(const Options& opt) {
  ProblemSpec spec = load(opt).problem;
  if (opt.problem == "diagonal") {
    spec = ProblemSpec{};
    spec.c3 = 0.0;
  } else if (opt.problem == "convolution") {
    spec = ProblemSpec{};
    spec.kind = ProblemKind::Convolution;
    spec.m = 64;
    spec.c3 = 0.0;
  } else if (opt.problem == "nonlinear") {
    spec = ProblemSpec{};
  } else if (opt.problem == "nonlinear-convolution") {
    spec = ProblemSpec{};
    spec.kind = ProblemKind::Convolution;
    spec.m = 64;
  } else if (!opt.problem.empty()) {
    throw ConfigError("--problem", "unknown problem '" + opt.problem +
                                       "' (expected diagonal, convolution, nonlinear or nonlinear-convolution)");
  }
  return run_checks(spec, std::cout) ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spectrally preconditioned iterative regularization toolkit"};
  app.set_version_flag("--version", std::string(specreg::kVersion));
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opt.config_path, "Experiment configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--out", opt.out_dir, "Output directory (overrides output.dir)");
    cmd->add_option("--seed", opt.seed, "Noise seed (overrides noise.seed)");
  };
  CLI::App* solve_cmd = app.add_subcommand("solve", "Run one inversion, write history.csv and summary.json");
  add_common(solve_cmd);
  CLI::App* wp_cmd = app.add_subcommand("work-precision", "Compare methods by error against model units");
  add_common(wp_cmd);
  CLI::App* study_cmd = app.add_subcommand("stopping-study", "Compare stopping rules over noise samples");
  add_common(study_cmd);
  study_cmd->add_option("--jobs", opt.jobs, "Samples run concurrently")->check(CLI::PositiveNumber);
  study_cmd->add_option("--samples", opt.samples, "Number of noise samples (overrides noise.samples)");
  CLI::App* check_cmd = app.add_subcommand("check", "Run invariant checks on a problem");
  add_common(check_cmd);
  check_cmd->add_option("--problem", opt.problem,
                        "Named problem: diagonal, convolution, nonlinear, nonlinear-convolution");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*solve_cmd) return solve(opt);
    if (*wp_cmd) return work_precision(opt);
    if (*study_cmd) return stopping_study(opt);
    return check(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const specreg::NumericalError& e) {
    std::cerr << "numerical breakdown: " << e.what() << '\n';
    return kExitBreakdown;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
