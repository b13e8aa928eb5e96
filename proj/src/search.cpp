#include "qstar/search.hpp"

#include "qstar/hash.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <queue>
#include <unordered_set>

namespace qstar {

std::string_view to_string(TieBreak tie) { return tie == TieBreak::deeper_first ? "deeper_first" : "insertion_order"; }

TieBreak parse_tie_break(std::string_view text) {
  if (text == "deeper_first") return TieBreak::deeper_first;
  if (text == "insertion_order") return TieBreak::insertion_order;
  throw UsageError("unknown tie break '" + std::string(text) + "'");
}

std::string_view to_string(TerminalScore score) {
  return score == TerminalScore::q_estimate ? "q_estimate" : "outcome_reward";
}

TerminalScore parse_terminal_score(std::string_view text) {
  if (text == "q_estimate") return TerminalScore::q_estimate;
  if (text == "outcome_reward") return TerminalScore::outcome_reward;
  throw UsageError("unknown terminal score '" + std::string(text) + "'");
}

void SearchConfig::validate() const {
  if (k == 0) throw UsageError("search k must be >= 1");
  if (n_trajectories == 0) throw UsageError("n_trajectories must be >= 1");
  if (max_expansions == 0) throw UsageError("max_expansions must be >= 1");
}

FValue f_value(const State& state, double g, const QModel& qmodel, const PolicyHandle& policy,
               const SearchConfig& config, Rng& rng, SearchStats* stats) {
  FValue out;
  out.candidates = top_k_candidates(policy, state, config.k, rng);
  if (out.candidates.empty()) throw ExhaustedSupport("policy proposed no candidates");
  out.h = -std::numeric_limits<double>::infinity();
  for (const auto& c : out.candidates) out.h = std::max(out.h, qmodel.predict(state, c.step));
  out.f = g + config.lambda * out.h;
  if (stats) {
    ++stats->policy_calls;
    stats->q_calls += out.candidates.size();
  }
  return out;
}

FValue terminal_f_value(const State& state, double g, const QModel& qmodel, const SearchConfig& config,
                        SearchStats* stats) {
  FValue out;
  if (config.terminal_score == TerminalScore::outcome_reward) {
    out.h = reached_reward(state, state.question().checker);
  } else {
    out.h = qmodel.predict(state.parent(), *state.last_step());
    if (stats) ++stats->q_calls;
  }
  out.f = g + config.lambda * out.h;
  return out;
}

std::string_view to_string(SearchEvent::Kind kind) {
  switch (kind) {
  case SearchEvent::Kind::pop: return "pop";
  case SearchEvent::Kind::expand: return "expand";
  case SearchEvent::Kind::insert: return "insert";
  }
  return "insert";
}

nlohmann::ordered_json trace_record(const SearchEvent& event) {
  nlohmann::ordered_json j;
  j["event"] = to_string(event.kind);
  j["state_hash"] = content_hash(event.state->text());
  j["depth"] = event.state->depth();
  j["g"] = event.g;
  j["h"] = event.h;
  j["f"] = event.f;
  j["step_text"] = event.state->last_step() ? event.state->last_step()->text : "";
  return j;
}

QuestionPtr with_max_depth(const QuestionPtr& question, std::size_t max_depth) {
  auto rules = std::make_shared<TaskRules>(*question->rules);
  rules->max_depth = max_depth;
  return std::make_shared<const Question>(Question{question->id, question->prompt, question->checker, std::move(rules)});
}

namespace {

struct Node {
  State state;
  UtilityAccumulator utility;
  double g = 0.0;
  FValue score;
};

class Search {
public:
  Search(const PolicyHandle& policy, const QModel& qmodel, const UtilityConfig& utility, const SearchConfig& config,
         const SearchHooks& hooks)
      : policy_(policy), qmodel_(qmodel), utility_(utility), config_(config), hooks_(hooks), rng_(config.seed),
        frontier_(Later{this}) {}

  SearchResult run(const QuestionPtr& question) {
    const auto started = std::chrono::steady_clock::now();
    State root = State::initial(question);
    insert(std::move(root), UtilityAccumulator(utility_.agg));

    while (!frontier_.empty()) {
      const std::size_t id = frontier_.top();
      frontier_.pop();
      ++stats_.pops;
      emit(SearchEvent::Kind::pop, id);
      Node& node = nodes_[id];
      if (node.state.terminal()) {
        stats_.wall_seconds = seconds_since(started);
        return result_of(id);
      }
      if (stats_.expansions == config_.max_expansions) break;
      ++stats_.expansions;
      emit(SearchEvent::Kind::expand, id);

      std::vector<StepCandidate> children = std::move(node.score.candidates);
      if (id == 0 && hooks_.forced_root && !children.empty())
        children = {children[*hooks_.forced_root % children.size()]};
      const State parent = node.state;
      const UtilityAccumulator parent_utility = node.utility;
      for (auto& c : children) {
        State child = transition(parent, std::move(c.step));
        if (seen_.contains(child.text())) continue;
        insert(std::move(child), parent_utility);
      }
    }

    stats_.wall_seconds = seconds_since(started);
    std::size_t best = 0;
    for (std::size_t i = 1; i < nodes_.size(); ++i)
      if (before(i, best)) best = i;
    throw BudgetExhausted(result_of(best), "no terminal state within " + std::to_string(config_.max_expansions) +
                                               " expansions for question '" + nodes_[0].state.question().id + "'");
  }

private:
  /// Orders node ids so that the priority queue top is the node to pop next.
  struct Later {
    const Search* search;
    bool operator()(std::size_t a, std::size_t b) const { return search->before(b, a); }
  };

  /// True when node a pops before node b.
  [[nodiscard]] bool before(std::size_t a, std::size_t b) const {
    const Node& x = nodes_[a];
    const Node& y = nodes_[b];
    if (x.score.f != y.score.f) return x.score.f > y.score.f;
    if (config_.tie_break == TieBreak::deeper_first && x.state.depth() != y.state.depth())
      return x.state.depth() > y.state.depth();
    return a < b;
  }

  void insert(State state, const UtilityAccumulator& parent_utility) {
    UtilityAccumulator utility = parent_utility.extended(utility_.reward(state));
    Node node{std::move(state), utility, 0.0, {}};
    node.g = node.utility.value();
    node.score = node.state.terminal() ? terminal_f_value(node.state, node.g, qmodel_, config_, &stats_)
                                       : f_value(node.state, node.g, qmodel_, policy_, config_, rng_, &stats_);
    ++stats_.nodes_scored;
    seen_.insert(node.state.text());
    nodes_.push_back(std::move(node));
    const std::size_t id = nodes_.size() - 1;
    emit(SearchEvent::Kind::insert, id);
    frontier_.push(id);
    stats_.frontier_peak = std::max(stats_.frontier_peak, frontier_.size());
  }

  void emit(SearchEvent::Kind kind, std::size_t id) const {
    if (!hooks_.observer) return;
    const Node& n = nodes_[id];
    hooks_.observer(SearchEvent{kind, id, &n.state, n.g, n.score.h, n.score.f});
  }

  [[nodiscard]] SearchResult result_of(std::size_t id) const {
    const Node& n = nodes_[id];
    return {make_trajectory(n.state), n.score.f, n.g, n.score.h, stats_};
  }

  static double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }

  const PolicyHandle& policy_;
  const QModel& qmodel_;
  const UtilityConfig& utility_;
  const SearchConfig& config_;
  const SearchHooks& hooks_;
  Rng rng_;
  std::vector<Node> nodes_;
  std::unordered_set<std::string> seen_;
  std::priority_queue<std::size_t, std::vector<std::size_t>, Later> frontier_;
  SearchStats stats_;
};

} // namespace

SearchResult astar_deliberate(const QuestionPtr& question, const PolicyHandle& policy, const QModel& qmodel,
                              const UtilityConfig& utility, const SearchConfig& config, const SearchHooks& hooks) {
  config.validate();
  if (!question) throw UsageError("search needs a question");
  const QuestionPtr q = config.max_depth > 0 ? with_max_depth(question, config.max_depth) : question;
  return Search(policy, qmodel, utility, config, hooks).run(q);
}

BestOfNResult best_of_n_plan(const QuestionPtr& question, const PolicyHandle& policy, const QModel& qmodel,
                             const UtilityConfig& utility, const SearchConfig& config, const RunObserver& observer) {
  config.validate();
  const bool deterministic = policy->deterministic_proposals();
  BestOfNResult out;
  std::optional<std::size_t> best;
  std::optional<std::size_t> best_partial;
  for (std::size_t j = 0; j < config.n_trajectories; ++j) {
    PlanRun run;
    run.index = j;
    SearchConfig run_config = config;
    SearchHooks hooks;
    if (j > 0) {
      if (deterministic)
        run.forced_root = j - 1;
      else
        run_config.seed = derive_seed(config.seed, {j});
    }
    run.seed = run_config.seed;
    hooks.forced_root = run.forced_root;
    if (observer) hooks.observer = [&observer, j](const SearchEvent& e) { observer(j, e); };
    try {
      run.result = astar_deliberate(question, policy, qmodel, utility, run_config, hooks);
      run.completed = true;
      if (!best || run.result.f > out.runs[*best].result.f) best = j;
    } catch (const BudgetExhausted& e) {
      run.result = e.best_partial();
      run.failure = e.what();
      if (!best_partial || run.result.f > out.runs[*best_partial].result.f) best_partial = j;
    }
    out.runs.push_back(std::move(run));
  }
  if (!best) {
    const auto& partial = out.runs[*best_partial];
    throw BudgetExhausted(partial.result, "all " + std::to_string(config.n_trajectories) +
                                              " runs exhausted their budget for question '" + question->id + "'");
  }
  out.best_index = *best;
  out.best = out.runs[*best].result.trajectory;
  out.best_f = out.runs[*best].result.f;
  return out;
}

Trajectory greedy_decode_baseline(const QuestionPtr& question, const PolicyHandle& policy) {
  Rng rng(0);
  return sample_trajectory(policy, question, 0.0, rng);
}

} // namespace qstar
