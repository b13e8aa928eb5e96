#include "qstar/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qstar {

std::vector<StepCandidate> top_k_candidates(const PolicyHandle& policy, const State& state, std::size_t k, Rng& rng) {
  if (state.terminal()) throw TerminalExpansion();
  if (k == 0) throw UsageError("top-k needs k >= 1");
  if (!policy.adapter) throw UsageError("policy handle has no adapter");
  return policy->propose(state, k, rng);
}

State sample_continuation(const PolicyHandle& policy, const State& from, double temperature, Rng& rng) {
  if (temperature < 0.0) throw UsageError("temperature must be >= 0");
  State state = from;
  while (!state.terminal()) state = transition(state, policy->sample_step(state, temperature, rng));
  return state;
}

Trajectory sample_trajectory(const PolicyHandle& policy, const QuestionPtr& question, double temperature, Rng& rng) {
  return make_trajectory(sample_continuation(policy, State::initial(question), temperature, rng));
}

void for_each_completion(const PolicyHandle& policy, const State& from, std::size_t k,
                         const std::function<void(const State&)>& visit) {
  if (from.terminal()) {
    visit(from);
    return;
  }
  Rng rng(0);
  for (auto& candidate : top_k_candidates(policy, from, k, rng))
    for_each_completion(policy, transition(from, std::move(candidate.step)), k, visit);
}

std::size_t sample_tempered(std::span<const double> log_weights, double temperature, Rng& rng) {
  if (log_weights.empty()) throw UsageError("cannot sample from an empty distribution");
  const auto best = static_cast<std::size_t>(std::max_element(log_weights.begin(), log_weights.end()) - log_weights.begin());
  if (temperature == 0.0) return best;
  const double top = log_weights[best];
  std::vector<double> weights(log_weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = std::exp((log_weights[i] - top) / temperature);
    total += weights[i];
  }
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

// ----------------------------------------------------------------------------
// Tabular
// ----------------------------------------------------------------------------

void TableActionModel::set(std::string state_text, std::vector<WeightedStep> actions) {
  table_[std::move(state_text)] = std::move(actions);
}

std::vector<WeightedStep> TableActionModel::actions(const State& state) const {
  auto it = table_.find(state.text());
  return it == table_.end() ? std::vector<WeightedStep>{} : it->second;
}

std::vector<WeightedStep> TabularPolicy::ranked(const State& state) const {
  auto actions = model_->actions(state);
  if (actions.empty()) throw ExhaustedSupport("no actions at state of question '" + state.question().id + "'");
  std::sort(actions.begin(), actions.end(), [](const WeightedStep& a, const WeightedStep& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    return a.text < b.text;
  });
  for (std::size_t i = 1; i < actions.size(); ++i)
    if (actions[i].text == actions[i - 1].text) throw UsageError("duplicate action text '" + actions[i].text + "'");
  return actions;
}

std::vector<StepCandidate> TabularPolicy::propose(const State& state, std::size_t k, Rng&) const {
  const auto actions = ranked(state);
  std::vector<StepCandidate> out;
  const auto mode = state.rules().mode;
  for (std::size_t i = 0; i < std::min(k, actions.size()); ++i) {
    const double lp = std::log(actions[i].probability);
    out.push_back({Step{actions[i].text, mode, lp}, lp, i});
  }
  return out;
}

Step TabularPolicy::sample_step(const State& state, double temperature, Rng& rng) const {
  const auto actions = ranked(state);
  std::vector<double> logs;
  logs.reserve(actions.size());
  for (const auto& a : actions)
    logs.push_back(a.probability > 0.0 ? std::log(a.probability) : -std::numeric_limits<double>::infinity());
  const auto i = sample_tempered(logs, temperature, rng);
  return Step{actions[i].text, state.rules().mode, logs[i]};
}

std::optional<double> TabularPolicy::probability(const State& state, std::string_view text) const {
  for (const auto& a : model_->actions(state))
    if (a.text == text) return a.probability;
  return std::nullopt;
}

PolicyHandle make_tabular_policy(std::shared_ptr<const ActionModel> model, double temperature) {
  return PolicyHandle{std::make_shared<const TabularPolicy>(std::move(model)), temperature};
}

} // namespace qstar
