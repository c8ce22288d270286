#ifndef SPECREG_RUN_HISTORY_HPP
#define SPECREG_RUN_HISTORY_HPP

#include "specreg/types.hpp"

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace specreg {

enum class StepEvent { Recompute, Update, Plain, Baseline };
enum class TerminalReason { StopRule, MaxNewton, Breakdown };

std::string_view to_string(StepEvent event);
std::string_view to_string(TerminalReason reason);

/// One outer step. Record k holds the iterate x_k, its data misfit and what
/// was done to compute the step h_k from it.
struct RunRecord {
  int k = 0;
  int m = 0;  // index of the linearization point in use
  double gamma_k = 0.0;
  Vector x;
  double residual_norm = 0.0;
  int inner_iterations = 0;
  std::uint64_t cumulative_cost = 0;  // model units spent through step k
  double elapsed_s = 0.0;             // wall time through step k
  std::optional<double> phi;
  StepEvent event = StepEvent::Plain;
  std::uint64_t linearization_id = 0;
  int preconditioner_size = 0;
  double step_norm = 0.0;
};

struct RunHistory {
  std::vector<RunRecord> records;
  TerminalReason terminal_reason = TerminalReason::MaxNewton;
  std::string message;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  const RunRecord& back() const { return records.back(); }

  std::vector<double> residual_norms() const;
  std::vector<Vector> iterates() const;
  /// Phi(k) per record; records without an estimate yield 0.
  std::vector<double> phi_values() const;
  std::vector<double> errors(const Vector& truth) const;
};

}  // namespace specreg

#endif  // SPECREG_RUN_HISTORY_HPP
