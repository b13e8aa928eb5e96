#pragma once

#include "qstar/policy.hpp"
#include "qstar/qmodel.hpp"
#include "qstar/utility.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace qstar {

/// Order among frontier nodes with equal f.
enum class TieBreak {
  deeper_first,   ///< larger depth, then earlier insertion
  insertion_order ///< earlier insertion only
};

/// How h is assigned to a terminal state, which has no next action.
enum class TerminalScore {
  q_estimate,    ///< Q-hat(s_T, a_T) of the step that ended the trajectory
  outcome_reward ///< ground-truth outcome reward of that step
};

std::string_view to_string(TieBreak tie);
TieBreak parse_tie_break(std::string_view text);
std::string_view to_string(TerminalScore score);
TerminalScore parse_terminal_score(std::string_view text);

struct SearchConfig {
  double lambda = 1.0;
  std::size_t k = 6;
  std::size_t n_trajectories = 6;
  std::size_t max_expansions = 1000;
  std::size_t max_depth = 0; ///< 0 keeps the task's own depth budget
  TieBreak tie_break = TieBreak::deeper_first;
  std::uint64_t seed = 0;
  TerminalScore terminal_score = TerminalScore::outcome_reward;

  /// Throws UsageError unless k, n_trajectories and max_expansions are positive.
  void validate() const;
};

struct SearchStats {
  std::size_t expansions = 0;
  std::size_t pops = 0;
  std::size_t policy_calls = 0;
  std::size_t q_calls = 0;
  std::size_t nodes_scored = 0;
  std::size_t frontier_peak = 0;
  double wall_seconds = 0.0;
};

struct FValue {
  double f = 0.0;
  double h = 0.0;
  std::vector<StepCandidate> candidates; ///< empty for terminal states
};

/// f = g + lambda * max over the top-k candidates of Q-hat(state, candidate).
/// Counts one policy call and k q calls into `stats` when given.
FValue f_value(const State& state, double g, const QModel& qmodel, const PolicyHandle& policy,
               const SearchConfig& config, Rng& rng, SearchStats* stats = nullptr);

/// f of a terminal state under config.terminal_score.
FValue terminal_f_value(const State& state, double g, const QModel& qmodel, const SearchConfig& config,
                        SearchStats* stats = nullptr);

struct SearchEvent {
  enum class Kind { pop, expand, insert };
  Kind kind = Kind::insert;
  std::size_t node = 0; ///< insertion index, 0 for the root
  const State* state = nullptr;
  double g = 0.0;
  double h = 0.0;
  double f = 0.0;
};

std::string_view to_string(SearchEvent::Kind kind);

using SearchObserver = std::function<void(const SearchEvent&)>;

/// {event, state_hash, depth, g, h, f, step_text}
nlohmann::ordered_json trace_record(const SearchEvent& event);

struct SearchResult {
  Trajectory trajectory;
  double f = 0.0;
  double g = 0.0;
  double h = 0.0;
  SearchStats stats;
};

/// No terminal state was popped within the expansion budget.
class BudgetExhausted : public Error {
public:
  BudgetExhausted(SearchResult best_partial, std::string what)
      : Error(std::move(what)), best_partial_(std::move(best_partial)) {}
  /// Highest-f node seen, as an incomplete trajectory.
  [[nodiscard]] const SearchResult& best_partial() const { return best_partial_; }

private:
  SearchResult best_partial_;
};

struct SearchHooks {
  SearchObserver observer;
  /// Expand only this root candidate (by rank, modulo the candidate count).
  std::optional<std::size_t> forced_root;
};

/// Best-first search over reasoning steps. Pops the max-f state of the frontier, returns it if
/// terminal, and otherwise inserts its unseen top-k children. Expands at most max_expansions
/// states; the text of a state identifies it.
SearchResult astar_deliberate(const QuestionPtr& question, const PolicyHandle& policy, const QModel& qmodel,
                              const UtilityConfig& utility, const SearchConfig& config, const SearchHooks& hooks = {});

/// Receives the run index with every event of that run.
using RunObserver = std::function<void(std::size_t run, const SearchEvent&)>;

struct PlanRun {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::optional<std::size_t> forced_root;
  bool completed = false;
  std::string failure;
  SearchResult result;
};

struct BestOfNResult {
  Trajectory best;
  double best_f = 0.0;
  std::size_t best_index = 0;
  std::vector<PlanRun> runs;
};

/// Runs n_trajectories searches and keeps the completed one with the highest terminal f
/// (earliest on ties). Run 0 is a plain search with config.seed. Later runs reseed a sampling
/// adapter or, for a deterministic one, force a different root candidate. Throws
/// BudgetExhausted only when every run exhausts its budget.
BestOfNResult best_of_n_plan(const QuestionPtr& question, const PolicyHandle& policy, const QModel& qmodel,
                             const UtilityConfig& utility, const SearchConfig& config,
                             const RunObserver& observer = {});

/// Temperature-0 decoding.
Trajectory greedy_decode_baseline(const QuestionPtr& question, const PolicyHandle& policy);

/// Copy of the question whose rules carry a different depth budget.
QuestionPtr with_max_depth(const QuestionPtr& question, std::size_t max_depth);

} // namespace qstar
