#pragma once

#include "qstar/policy.hpp"
#include "qstar/qmodel.hpp"
#include "qstar/qvalue.hpp"
#include "qstar/search.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace qstar {

enum class EnvKind { arithmetic_chain, string_rewrite, trap_tree };

std::string_view to_string(EnvKind kind);
EnvKind parse_env_kind(std::string_view text);

struct EnvSpec {
  EnvKind kind = EnvKind::arithmetic_chain;
  std::size_t horizon = 3;   ///< T
  std::size_t branching = 2; ///< b
  std::uint64_t seed = 0;
  std::size_t questions = 1;
  double trap_margin = 0.2; ///< extra root probability of the deceptive branch

  friend bool operator==(const EnvSpec&, const EnvSpec&) = default;
};

/// Largest b^T an environment may have.
inline constexpr double kMaxTrajectories = 1e6;

/// Where a state sits in its question's tree.
struct EnvLocation {
  std::size_t question = 0;
  std::vector<std::size_t> path; ///< option index chosen at each depth
  std::size_t correct_prefix = 0; ///< leading steps that follow the intended path
};

/// A family of questions whose reasoning steps form a complete b-ary tree of depth T.
/// Every state offers b text steps with known probabilities; the final step states an answer.
/// Immutable after generation.
class SyntheticEnv final : public ActionModel {
public:
  /// Throws SizeBound when b^T exceeds kMaxTrajectories and UsageError on invalid sizes.
  static std::shared_ptr<const SyntheticEnv> generate(const EnvSpec& spec);

  [[nodiscard]] const EnvSpec& spec() const { return spec_; }
  [[nodiscard]] const std::vector<QuestionPtr>& questions() const { return questions_; }
  [[nodiscard]] const std::shared_ptr<const TaskRules>& rules() const { return rules_; }
  [[nodiscard]] const std::string& answer(std::size_t question) const { return answers_.at(question); }
  [[nodiscard]] QuestionPtr find_question(const std::string& id) const;

  [[nodiscard]] std::vector<WeightedStep> actions(const State& state) const override;

  /// Options at a node, in option-index order.
  [[nodiscard]] std::vector<WeightedStep> options(std::size_t question, std::span<const std::size_t> path) const;
  /// Option index that follows the intended path at depth path.size().
  [[nodiscard]] std::size_t correct_option(std::size_t question, std::size_t depth) const;

  /// nullopt when the state is not part of this environment.
  [[nodiscard]] std::optional<EnvLocation> locate(const State& state) const;
  [[nodiscard]] std::optional<EnvLocation> locate(std::string_view state_text) const;

  /// {format_version, kind, horizon, branching, seed, questions, trap_margin, items: [{id, prompt, answer}]}
  [[nodiscard]] nlohmann::ordered_json to_json() const;
  /// Regenerates from the stored parameters and checks the stored questions match.
  static std::shared_ptr<const SyntheticEnv> from_json(const nlohmann::json& j);
  /// content_hash of the canonical JSON text.
  [[nodiscard]] std::string fingerprint() const;

private:
  explicit SyntheticEnv(EnvSpec spec);

  struct Plan {
    std::int64_t start = 0;
    std::string start_text;
    std::vector<std::vector<std::int64_t>> operands; ///< per depth, one operand per option
    std::vector<std::size_t> correct;                ///< intended option per depth
  };

  [[nodiscard]] std::string step_text(std::size_t question, std::span<const std::size_t> path, std::size_t option) const;
  [[nodiscard]] std::vector<double> probabilities(std::size_t question, std::span<const std::size_t> path) const;
  [[nodiscard]] std::string value_after(std::size_t question, std::span<const std::size_t> path) const;
  [[nodiscard]] std::string leaf_answer(std::size_t question, std::span<const std::size_t> path) const;

  EnvSpec spec_;
  std::shared_ptr<const TaskRules> rules_;
  std::vector<Plan> plans_;
  std::vector<QuestionPtr> questions_;
  std::vector<std::string> answers_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
  std::map<std::string, std::size_t, std::less<>> by_prompt_;
};

using EnvPtr = std::shared_ptr<const SyntheticEnv>;

/// Environment plus its questions, deterministic in (kind, T, b, seed).
EnvPtr generate_env(const EnvSpec& spec);

std::string env_to_text(const SyntheticEnv& env);
EnvPtr env_from_text(std::string_view text);

/// Linear features "synthetic_v1": depth, correct-prefix length, whether [s; a] stays on the
/// intended path, and a one-hot of the option index of a. No bias term.
class SyntheticFeatures final : public FeatureExtractor {
public:
  explicit SyntheticFeatures(EnvPtr env) : env_(std::move(env)) {}
  [[nodiscard]] std::string id() const override { return "synthetic_v1"; }
  [[nodiscard]] std::size_t dimension() const override { return 3 + env_->spec().branching; }
  [[nodiscard]] std::vector<double> features(std::string_view state_text, std::string_view action_text) const override;

private:
  EnvPtr env_;
};

// ============================================================================
// Oracles
// ============================================================================

struct OracleEntry {
  State state;
  Step action;
  double value = 0.0;
};

/// Exact Q* over the top-k-restricted tree, from backward induction.
struct OracleQTable {
  std::shared_ptr<const TabularQ> table;
  std::vector<OracleEntry> entries; ///< every (s, a) of the restricted tree, depth-first order
  double gamma = 1.0;
  std::size_t k = 0;
};

/// Q*(s, a) = R(s, a) + gamma * max_{a' in top-k(s')} Q*(s', a'), solved exactly for every
/// question. Throws SizeBound when a question's restricted tree exceeds kMaxTrajectories leaves.
OracleQTable brute_force_optimal_q(std::span<const QuestionPtr> questions, const PolicyHandle& policy, std::size_t k,
                                   double gamma);
OracleQTable brute_force_optimal_q(const SyntheticEnv& env, const PolicyHandle& policy, std::size_t k, double gamma);

/// Every trajectory of the top-k-restricted tree of `question`.
std::vector<Trajectory> enumerate_trajectories(const QuestionPtr& question, const PolicyHandle& policy, std::size_t k);

/// Tabular policy that ranks the top-k candidates of `base` by oracle Q* (ties keep the
/// base order), so temperature-0 decoding follows an optimal path.
PolicyHandle oracle_greedy_policy(const PolicyHandle& base, std::shared_ptr<const QModel> oracle, std::size_t k);

/// Oracle Q* values with each {0,1} label flipped with probability `rate`, fitted as a table.
std::shared_ptr<const QModel> noisy_oracle(const OracleQTable& oracle, double rate, std::uint64_t seed);

// ============================================================================
// Evaluation
// ============================================================================

enum class Strategy { greedy, best_of_n_resample, qstar };

std::string_view to_string(Strategy strategy);
Strategy parse_strategy(std::string_view text);

struct EvalConfig {
  Strategy strategy = Strategy::qstar;
  SearchConfig search;
  UtilityConfig utility;
  double resample_temperature = 0.9;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct QuestionVerdict {
  std::string question_id;
  bool solved = false;
  std::string status = "ok"; ///< ok, budget_exhausted or an error message
  Trajectory trajectory;
  double f = 0.0;
  std::size_t expansions = 0;
  std::size_t policy_calls = 0;
  std::size_t selected_run = 0;
  std::vector<std::uint64_t> run_seeds;
};

struct EvalReport {
  std::string strategy;
  std::vector<QuestionVerdict> verdicts; ///< in question order
  double solve_rate = 0.0;
  double mean_expansions = 0.0;
  double mean_policy_calls = 0.0;
  std::size_t budget_exhausted = 0;
  std::size_t upstream_failures = 0; ///< policy or scorer endpoint unavailable
  std::size_t failures = 0;          ///< questions that raised any other error
};

/// Receives the question index and run index with every search event.
using EvalObserver = std::function<void(std::size_t question, std::size_t run, const SearchEvent&)>;

/// Runs `strategy` on every question. Question i uses seed derive_seed(config.seed, {i}).
/// Per-question errors are recorded as unsolved with their reason; the batch always completes.
EvalReport evaluate_strategy(std::span<const QuestionPtr> questions, const PolicyHandle& policy,
                             const QModel& qmodel, const EvalConfig& config, const EvalObserver& observer = {});

} // namespace qstar
