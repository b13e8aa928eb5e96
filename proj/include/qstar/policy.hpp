#pragma once

#include "qstar/mdp.hpp"
#include "qstar/rng.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qstar {

/// One proposed next step. `score` is a log-probability (or synthetic log-weight).
struct StepCandidate {
  Step step;
  double score = 0.0;
  std::size_t rank = 0;
};

/// The generator pi_theta. Implementations hold no mutable state between calls and
/// must tolerate concurrent use; all randomness comes from the caller's Rng.
class Policy {
public:
  virtual ~Policy() = default;

  [[nodiscard]] virtual std::string_view kind() const = 0;

  /// True when propose() ignores the Rng, so repeated calls return identical lists.
  [[nodiscard]] virtual bool deterministic_proposals() const = 0;

  /// At most k candidates with mutually distinct text, sorted by non-increasing score.
  [[nodiscard]] virtual std::vector<StepCandidate> propose(const State& state, std::size_t k, Rng& rng) const = 0;

  /// Draws one next step; temperature 0 is greedy.
  [[nodiscard]] virtual Step sample_step(const State& state, double temperature, Rng& rng) const = 0;

  [[nodiscard]] virtual const Tokenizer& tokenizer() const { return whitespace_tokenizer(); }
};

struct PolicyHandle {
  std::shared_ptr<const Policy> adapter;
  /// Default sampling temperature for rollouts drawn through this handle.
  double temperature = 1.0;

  [[nodiscard]] const Policy& operator*() const { return *adapter; }
  [[nodiscard]] const Policy* operator->() const { return adapter.get(); }
};

/// Checks preconditions (non-terminal state, k >= 1) then asks the adapter.
std::vector<StepCandidate> top_k_candidates(const PolicyHandle& policy, const State& state, std::size_t k, Rng& rng);

/// Samples steps from `from` until a terminal state is reached and returns that state.
State sample_continuation(const PolicyHandle& policy, const State& from, double temperature, Rng& rng);

Trajectory sample_trajectory(const PolicyHandle& policy, const QuestionPtr& question, double temperature, Rng& rng);

/// Visits every terminal state reachable from `from` when each state is restricted to its
/// top-k candidates. Intended for deterministic (tabular) policies and small trees.
void for_each_completion(const PolicyHandle& policy, const State& from, std::size_t k,
                         const std::function<void(const State&)>& visit);

// ============================================================================
// Tabular adapter
// ============================================================================

struct WeightedStep {
  std::string text;
  double probability = 0.0;
};

/// Source of explicit next-step distributions.
class ActionModel {
public:
  virtual ~ActionModel() = default;
  /// Next-step distribution at `state`; empty when the state has no actions.
  [[nodiscard]] virtual std::vector<WeightedStep> actions(const State& state) const = 0;
};

/// Distributions listed per rendered state text.
class TableActionModel final : public ActionModel {
public:
  void set(std::string state_text, std::vector<WeightedStep> actions);
  [[nodiscard]] std::vector<WeightedStep> actions(const State& state) const override;

private:
  std::map<std::string, std::vector<WeightedStep>, std::less<>> table_;
};

/// Policy with known action probabilities. top-K is exact: highest probability first,
/// ties broken lexicographically by step text.
class TabularPolicy final : public Policy {
public:
  explicit TabularPolicy(std::shared_ptr<const ActionModel> model) : model_(std::move(model)) {}

  [[nodiscard]] std::string_view kind() const override { return "tabular"; }
  [[nodiscard]] bool deterministic_proposals() const override { return true; }
  [[nodiscard]] std::vector<StepCandidate> propose(const State& state, std::size_t k, Rng& rng) const override;
  [[nodiscard]] Step sample_step(const State& state, double temperature, Rng& rng) const override;

  /// pi(text | state), or nullopt when the step is outside the support.
  [[nodiscard]] std::optional<double> probability(const State& state, std::string_view text) const;

private:
  [[nodiscard]] std::vector<WeightedStep> ranked(const State& state) const;

  std::shared_ptr<const ActionModel> model_;
};

PolicyHandle make_tabular_policy(std::shared_ptr<const ActionModel> model, double temperature = 1.0);

/// Draws an index from `weights` raised to 1/temperature (argmax, first wins, at temperature 0).
std::size_t sample_tempered(std::span<const double> log_weights, double temperature, Rng& rng);

} // namespace qstar
