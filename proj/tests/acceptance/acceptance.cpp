// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include "qstar/hash.hpp"
#include "qstar/remote_policy.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <sys/wait.h>

using namespace qstar;
using namespace qstar::testing;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::size_t index_of(const std::vector<WeightedStep>& options, const std::string& text) {
  return static_cast<std::size_t>(
      std::find_if(options.begin(), options.end(), [&](const WeightedStep& w) { return w.text == text; }) -
      options.begin());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// successor state text -> its restricted actions, from a reference Q table
std::map<std::string, std::vector<std::string>> actions_by_state(const RefQ& ref) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [key, value] : ref) out[key.first].push_back(key.second);
  return out;
}

std::vector<StateAction> pairs_of(const OracleQTable& oracle) {
  std::vector<StateAction> pairs;
  for (const auto& e : oracle.entries) pairs.push_back({e.state, e.action});
  return pairs;
}

// ----------------------------------------------------------------------------

Verdict oracle_optimality() {
  Verdict v;
  const auto started = std::chrono::steady_clock::now();
  std::size_t questions = 0, matched = 0;
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    const std::size_t T = 2 + seed % 5;
    const std::size_t b = 2 + seed % 3;
    const std::size_t k = seed % 4 == 3 ? b - 1 : b;
    const auto env = generate_env({.kind = EnvKind::trap_tree, .horizon = T, .branching = b, .seed = seed, .questions = 5});
    const auto policy = make_tabular_policy(env);
    const auto oracle = brute_force_optimal_q(*env, policy, k, 1.0);
    for (std::size_t i = 0; i < env->questions().size(); ++i) {
      ++questions;
      const auto result =
          astar_deliberate(env->questions()[i], policy, *oracle.table, UtilityConfig{}, SearchConfig{.lambda = 1.0, .k = k});
      if (result.trajectory.total_return == ref_max_return(*env, i, k)) ++matched;
    }
  }
  const double elapsed = seconds_since(started);
  v.require(matched == questions, std::to_string(questions - matched) + " questions below the enumeration maximum");
  v.require(elapsed < 10.0, "took " + std::to_string(elapsed) + " s");
  v.detail = v.pass ? std::to_string(matched) + "/" + std::to_string(questions) + " questions, " +
                          std::to_string(elapsed).substr(0, 5) + " s"
                    : v.detail;
  return v;
}

Verdict fitted_q_convergence() {
  Verdict v;
  double worst_gap = 0.0, worst_residual = 0.0;
  std::size_t envs = 0;
  for (auto kind : {EnvKind::arithmetic_chain, EnvKind::string_rewrite, EnvKind::trap_tree}) {
    for (std::size_t T = 1; T <= 5; ++T) {
      const std::size_t b = T <= 3 ? 3 : 2;
      for (double gamma : {1.0, 0.9}) {
        ++envs;
        const auto env = generate_env({.kind = kind, .horizon = T, .branching = b, .seed = 31 * T + b, .questions = 2});
        const auto policy = make_tabular_policy(env);
        RolloutDataset data;
        for (const auto& q : env->questions()) data.entries.push_back({q, enumerate_trajectories(q, policy, b)});
        const auto result = fitted_q_iteration(data, policy, {.iterations = T + 1, .k = b, .gamma = gamma});

        const auto ref = ref_optimal_q(*env, b, gamma);
        for (const auto& [key, value] : ref)
          worst_gap = std::max(worst_gap, std::abs(result.model->predict(key.first, key.second) - value));

        // Bellman residual by the direct definition over the stored pairs.
        const auto successors = actions_by_state(ref);
        for (const auto& pair : data.pairs()) {
          const State next = transition(pair.state, pair.action);
          double target = outcome_reward(pair.state, pair.action);
          if (!next.terminal()) {
            double best = -1e300;
            for (const auto& a : successors.at(next.text())) best = std::max(best, result.model->predict(next.text(), a));
            target += gamma * best;
          }
          worst_residual = std::max(worst_residual, std::abs(result.model->predict(pair.state, pair.action) - target));
        }
        worst_residual = std::max(worst_residual, max_bellman_residual(*result.model, data.pairs(), policy, b, gamma));
      }
    }
  }
  v.require(worst_gap < 1e-9, "max |Q_L - Q*| = " + std::to_string(worst_gap));
  v.require(worst_residual < 1e-9, "max Bellman residual = " + std::to_string(worst_residual));
  if (v.pass) v.detail = std::to_string(envs) + " environments, max gap " + std::to_string(worst_gap);
  return v;
}

Verdict rollout_label_exactness() {
  Verdict v;
  std::size_t pairs_checked = 0;
  for (auto kind : {EnvKind::arithmetic_chain, EnvKind::string_rewrite, EnvKind::trap_tree}) {
    for (auto [T, b] : {std::pair<std::size_t, std::size_t>{3, 3}, {4, 4}, {6, 4}, {2, 2}}) {
      const auto env = generate_env({.kind = kind, .horizon = T, .branching = b, .seed = T * 7 + b, .questions = 2});
      const auto policy = make_tabular_policy(env);
      const auto k = b == 4 && T == 6 ? 4 : b;
      const auto oracle = brute_force_optimal_q(*env, policy, k, 1.0);
      const auto ref = ref_optimal_q(*env, k, 1.0);
      const auto pairs = pairs_of(oracle);
      const auto labels =
          rollout_labels(pairs, policy, {.gamma = 1.0, .pool = PoolKind::exhaustive, .exhaustive_k = k, .jobs = 4});
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        ++pairs_checked;
        const double expected = ref.at({pairs[i].state.text(), pairs[i].action.text});
        v.require(labels[i].label == expected && oracle.entries[i].value == expected,
                  "label mismatch at '" + pairs[i].action.text + "'");
      }
    }
  }
  if (v.pass) v.detail = std::to_string(pairs_checked) + " pairs";
  return v;
}

Verdict completion_label_exactness() {
  Verdict v;
  std::size_t pairs_checked = 0;
  for (auto kind : {EnvKind::arithmetic_chain, EnvKind::string_rewrite, EnvKind::trap_tree}) {
    for (auto [T, b] : {std::pair<std::size_t, std::size_t>{3, 3}, {5, 3}, {4, 2}}) {
      const auto env = generate_env({.kind = kind, .horizon = T, .branching = b, .seed = T * 5 + b, .questions = 3});
      const auto policy = make_tabular_policy(env);
      const auto oracle = brute_force_optimal_q(*env, policy, b, 1.0);
      const auto ref = ref_optimal_q(*env, b, 1.0);
      const auto strong = oracle_greedy_policy(policy, oracle.table, b);
      const auto pairs = pairs_of(oracle);
      const auto labels = completion_labels(pairs, strong, {.gamma = 1.0, .jobs = 4});
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        ++pairs_checked;
        v.require(labels[i].label == ref.at({pairs[i].state.text(), pairs[i].action.text}),
                  "completion label mismatch at '" + pairs[i].action.text + "'");
      }
    }
  }
  if (v.pass) v.detail = std::to_string(pairs_checked) + " pairs";
  return v;
}

Verdict aggregation_algebra() {
  Verdict v;
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> r(1 + uniform_index(rng, 20));
    for (auto& x : r) x = uniform01(rng) * 10.0 - 5.0;
    double lo = r[0], hi = r[0], sum = 0.0;
    for (double x : r) {
      lo = x < lo ? x : lo;
      hi = x > hi ? x : hi;
      sum += x;
    }
    v.require(aggregate(r, AggKind::min) == lo, "min");
    v.require(aggregate(r, AggKind::max) == hi, "max");
    v.require(aggregate(r, AggKind::sum) == sum, "sum");
    v.require(aggregate(r, AggKind::last) == r.back(), "last");
    for (auto agg : {AggKind::min, AggKind::max, AggKind::sum, AggKind::last}) {
      UtilityAccumulator acc(agg);
      for (double x : r) acc = acc.extended(x);
      v.require(acc.value() == aggregate(r, agg), "accumulator disagrees with aggregate");
    }
  }
  v.require(aggregate(std::vector<double>{-0.5, -0.5, 0.0}, AggKind::last) == 0.0, "penalties not cancelled");
  if (v.pass) v.detail = "1000 sequences";
  return v;
}

/// Best-first search ordered by g only, written from scratch against the environment's options.
std::vector<std::string> g_only_expansions(const SyntheticEnv& env, std::size_t question, const SearchConfig& config,
                                           AggKind agg) {
  struct RefNode {
    std::vector<std::size_t> path;
    std::vector<std::string> texts;
    std::vector<double> rewards;
    double g = 0.0;
  };
  std::vector<RefNode> nodes{{{}, {}, {0.0}, 0.0}};
  nodes[0].g = aggregate(nodes[0].rewards, agg);
  std::set<std::string> seen{env.questions()[question]->prompt};
  std::vector<std::size_t> frontier{0};
  std::vector<std::string> order;
  const auto before = [&](std::size_t a, std::size_t b) {
    if (nodes[a].g != nodes[b].g) return nodes[a].g > nodes[b].g;
    if (config.tie_break == TieBreak::deeper_first && nodes[a].path.size() != nodes[b].path.size())
      return nodes[a].path.size() > nodes[b].path.size();
    return a < b;
  };
  while (!frontier.empty()) {
    auto it = std::min_element(frontier.begin(), frontier.end(), [&](auto a, auto b) { return before(a, b); });
    const std::size_t id = *it;
    frontier.erase(it);
    if (nodes[id].path.size() == env.spec().horizon) break;
    if (order.size() == config.max_expansions) break;
    const RefNode parent = nodes[id];
    order.push_back(ref_state_text(env.questions()[question]->prompt, parent.texts));
    const auto options = env.options(question, parent.path);
    for (const auto& option : ref_top_k(options, config.k)) {
      RefNode child = parent;
      child.path.push_back(index_of(options, option.text));
      child.texts.push_back(option.text);
      child.rewards.push_back(std::log(option.probability));
      child.g = aggregate(child.rewards, agg);
      const auto text = ref_state_text(env.questions()[question]->prompt, child.texts);
      if (!seen.insert(text).second) continue;
      nodes.push_back(std::move(child));
      frontier.push_back(nodes.size() - 1);
    }
  }
  return order;
}

Verdict search_invariants() {
  Verdict v;
  Rng rng(77);
  const EnvKind kinds[] = {EnvKind::arithmetic_chain, EnvKind::string_rewrite, EnvKind::trap_tree};
  const AggKind aggs[] = {AggKind::min, AggKind::max, AggKind::sum, AggKind::last};
  const double lambdas[] = {0.0, 0.5, 1.0, 2.0};
  std::size_t compared = 0, exhausted = 0;
  for (int run = 0; run < 1000; ++run) {
    const auto kind = kinds[uniform_index(rng, 3)];
    const std::size_t T = 1 + uniform_index(rng, 5);
    const std::size_t b = (kind == EnvKind::trap_tree ? 2 : 1) + uniform_index(rng, 3);
    const auto env = generate_env({.kind = kind, .horizon = T, .branching = b, .seed = rng(), .questions = 1});
    const auto policy = make_tabular_policy(env);
    SearchConfig config;
    config.k = 1 + uniform_index(rng, 4);
    config.lambda = run % 4 == 0 ? 0.0 : lambdas[uniform_index(rng, 4)];
    config.max_expansions = 1 + uniform_index(rng, 40);
    config.tie_break = uniform_index(rng, 2) == 0 ? TieBreak::deeper_first : TieBreak::insertion_order;
    const AggKind agg = aggs[uniform_index(rng, 4)];
    const UtilityConfig utility{ProcessReward::confidence(), agg};
    const HashQ qmodel(rng());

    struct Shadow {
      double f;
      std::size_t depth;
    };
    std::map<std::size_t, Shadow> frontier;
    std::set<std::string> expanded;
    std::vector<std::string> order;
    std::size_t expansions = 0;
    const auto pops_before = [&](std::size_t a, std::size_t b) {
      const auto& x = frontier.at(a);
      const auto& y = frontier.at(b);
      if (x.f != y.f) return x.f > y.f;
      if (config.tie_break == TieBreak::deeper_first && x.depth != y.depth) return x.depth > y.depth;
      return a < b;
    };
    SearchHooks hooks;
    hooks.observer = [&](const SearchEvent& e) {
      switch (e.kind) {
      case SearchEvent::Kind::insert: frontier[e.node] = {e.f, e.state->depth()}; break;
      case SearchEvent::Kind::pop: {
        v.require(frontier.contains(e.node), "popped a node that is not on the frontier");
        double top = -1e300;
        for (const auto& [id, s] : frontier) top = std::max(top, s.f);
        v.require(e.f == top, "popped f below the frontier maximum");
        for (const auto& [id, s] : frontier)
          v.require(id == e.node || pops_before(e.node, id), "pop order disagrees with the frontier ordering");
        frontier.erase(e.node);
        break;
      }
      case SearchEvent::Kind::expand:
        ++expansions;
        v.require(expanded.insert(e.state->text()).second, "state expanded twice");
        order.push_back(e.state->text());
        break;
      }
    };
    std::size_t reported = 0;
    try {
      reported = astar_deliberate(env->questions()[0], policy, qmodel, utility, config, hooks).stats.expansions;
    } catch (const BudgetExhausted& e) {
      reported = e.best_partial().stats.expansions;
      ++exhausted;
    }
    v.require(expansions <= config.max_expansions, "expansion budget exceeded");
    v.require(reported == expansions, "reported expansions differ from observed");
    if (config.lambda == 0.0) {
      ++compared;
      v.require(order == g_only_expansions(*env, 0, config, agg), "lambda = 0 order differs from the g-only search");
    }
  }
  if (v.pass)
    v.detail = "1000 searches, " + std::to_string(compared) + " g-only comparisons, " + std::to_string(exhausted) +
               " budget exhaustions";
  return v;
}

Verdict best_of_n_dominance() {
  Verdict v;
  const auto env = generate_env({.kind = EnvKind::trap_tree, .horizon = 4, .branching = 3, .seed = 2718, .questions = 100});
  const auto policy = make_tabular_policy(env);
  const auto oracle = brute_force_optimal_q(*env, policy, 3, 1.0);
  const auto noisy = noisy_oracle(oracle, 0.2, 99);
  std::size_t solved1 = 0, solved6 = 0;
  for (const auto& q : env->questions()) {
    for (std::size_t n : {1, 6}) {
      const auto result = best_of_n_plan(q, policy, *noisy, UtilityConfig{}, SearchConfig{.k = 3, .n_trajectories = n});
      double top = -1e300;
      for (const auto& run : result.runs)
        if (run.completed) top = std::max(top, run.result.f);
      v.require(result.runs.size() == n, "wrong number of runs");
      v.require(result.best_f == top, "selected f is not the maximum collected");
      v.require(result.best == result.runs[result.best_index].result.trajectory, "selected trajectory mismatch");
      (n == 1 ? solved1 : solved6) += result.best.solved();
    }
  }
  v.require(solved6 >= solved1, "N=6 solved " + std::to_string(solved6) + " < N=1 " + std::to_string(solved1));
  if (v.pass) v.detail = "N=1 " + std::to_string(solved1) + "/100, N=6 " + std::to_string(solved6) + "/100";
  return v;
}

Verdict separation() {
  Verdict v;
  std::size_t questions = 0, greedy_solved = 0, guided_solved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t T = 2 + seed % 4;
    const std::size_t b = 2 + seed % 3;
    const auto env = generate_env({.kind = EnvKind::trap_tree, .horizon = T, .branching = b, .seed = 100 + seed, .questions = 10});
    const auto policy = make_tabular_policy(env);
    const auto oracle = brute_force_optimal_q(*env, policy, b, 1.0);
    const auto ref = ref_optimal_q(*env, b, 1.0);
    for (const auto& e : oracle.entries)
      v.require(ref.at({e.state.text(), e.action.text}) == e.value, "oracle table disagrees with backward induction");
    EvalConfig config;
    config.search.k = b;
    config.strategy = Strategy::greedy;
    const auto greedy = evaluate_strategy(env->questions(), policy, *oracle.table, config);
    config.strategy = Strategy::qstar;
    const auto guided = evaluate_strategy(env->questions(), policy, *oracle.table, config);
    for (std::size_t i = 0; i < env->questions().size(); ++i) {
      ++questions;
      greedy_solved += ref_reward(greedy.verdicts[i].trajectory.steps.back().text, env->answer(i)) == 1.0;
      guided_solved += ref_reward(guided.verdicts[i].trajectory.steps.back().text, env->answer(i)) == 1.0;
    }
    v.require(greedy.solve_rate == 0.0, "greedy solved a trap question");
    v.require(guided.solve_rate == 1.0, "guided search missed a question");
  }
  v.require(greedy_solved == 0 && guided_solved == questions, "independent answer check disagrees");
  if (v.pass)
    v.detail = "greedy " + std::to_string(greedy_solved) + "/" + std::to_string(questions) + ", guided " +
               std::to_string(guided_solved) + "/" + std::to_string(questions);
  return v;
}

Verdict round_trips() {
  Verdict v;
  const auto env = generate_env({.kind = EnvKind::string_rewrite, .horizon = 3, .branching = 3, .seed = 4, .questions = 3});
  const auto policy = make_tabular_policy(env, 1.0);
  const auto data = build_rollout_dataset(env->questions(), policy, 3, 1.0, 8);
  for (const auto& entry : data.entries)
    for (const auto& t : entry.trajectories) {
      const auto line = trajectory_to_json_line(t);
      v.require(trajectory_to_json_line(trajectory_from_json_line(line)) == line, "trajectory line changed");
    }
  const auto labels = rollout_labels(data.pairs(), policy, {.rollouts_per_pair = 3, .gamma = 0.9, .seed = 1});
  for (const auto& r : labels) {
    const auto line = label_to_json_line(r);
    v.require(label_to_json_line(label_from_json_line(line)) == line, "label line changed");
  }
  FeatureRegistry registry;
  registry.add(std::make_shared<SyntheticFeatures>(env));
  for (auto kind : {ModelKind::tabular, ModelKind::linear}) {
    FitOptions options;
    options.kind = kind;
    options.features = std::make_shared<SyntheticFeatures>(env);
    const auto model = fit_q(labels, options).model;
    const auto text = model_to_text(*model);
    v.require(model_to_text(*model_from_text(text, registry)) == text, "model file changed");
  }

  MockServer server({{200, completion({{"b", -0.9}, {"a", -0.2}, {"b", -0.9}, {"c\ntrailing", std::nullopt}})},
                     {503, {}},
                     {503, {}},
                     {200, completion({{"x", -0.1}})},
                     {500, {}}});
  RemoteOptions options;
  options.endpoint.url = server.url();
  options.endpoint.auth_token = "token";
  options.endpoint.max_retries = 2;
  options.endpoint.backoff_ms = 1;
  PolicyHandle remote{std::make_shared<RemotePolicy>(options), 1.0};
  const auto q = env->questions()[0];
  Rng rng(0);
  const auto top = top_k_candidates(remote, State::initial(q), 3, rng);
  v.require(top.size() == 3 && top[0].step.text == "a" && top[1].step.text == "b" && top[2].step.text == "c",
            "proposals not deduplicated and ranked");
  const auto first = server.requests().at(0);
  v.require(first["prompt"] == q->prompt + "\n" && first["n"] == 6 && first["stop"] == nlohmann::json::array({"\n"}),
            "request body");
  v.require(server.authorization().at(0) == "Bearer token", "authorization header");
  v.require(remote->sample_step(State::initial(q), 0.5, rng).text == "x", "retry then succeed");
  v.require(server.hits() == 4, "retry count after recovery");
  bool unavailable = false;
  try {
    (void)remote->sample_step(State::initial(q), 0.5, rng);
  } catch (const PolicyUnavailable&) {
    unavailable = true;
  }
  v.require(unavailable, "retry then fail did not raise PolicyUnavailable");
  v.require(server.hits() == 7, "retry then fail attempt count");
  if (v.pass) v.detail = "trajectories, labels, models, remote contract";
  return v;
}

Verdict determinism() {
  Verdict v;
  const std::string binary = QSTAR_CLI_PATH;
  const std::string common = " --seed 11 --set env.questions=5 --set env.horizon=3 --set env.branching=3 --set search.k=3";
  std::vector<std::map<std::string, std::string>> hashes(2);
  for (std::size_t attempt = 0; attempt < 2; ++attempt) {
    TempDir dir;
    const auto f = [&](const char* name) { return dir.file(name); };
    const std::vector<std::string> commands{
        "generate --out " + f("data.jsonl") + common,
        "label --dataset " + f("data.jsonl") + " --out " + f("labels.jsonl") + " --jobs 3" + common,
        "train --labels " + f("labels.jsonl") + " --out " + f("model.json") + common,
        "plan --model " + f("model.json") + " --out " + f("plan.jsonl") + " --metrics " + f("plan_metrics.json") +
            " --trace " + f("trace.jsonl") + common,
        "evaluate --model " + f("model.json") + " --out " + f("metrics.json") + " --trajectories " + f("eval.jsonl") +
            common,
        "report --metrics " + f("metrics.json"),
    };
    for (const auto& command : commands) {
      const std::string sink = command.starts_with("report") ? f("report.txt") : "/dev/null";
      const int status = std::system((binary + " " + command + " >" + sink + " 2>&1").c_str());
      v.require(WIFEXITED(status) && WEXITSTATUS(status) == 0, "command failed: " + command);
    }
    for (const auto* name : {"data.jsonl", "labels.jsonl", "model.json", "plan.jsonl", "plan_metrics.json", "trace.jsonl",
                             "metrics.json", "eval.jsonl", "report.txt"}) {
      const auto content = slurp(f(name));
      v.require(!content.empty(), std::string(name) + " is empty");
      hashes[attempt][name] = sha256_hex(content);
    }
  }
  for (const auto& [name, hash] : hashes[0]) v.require(hashes[1][name] == hash, name + " differs between runs");
  if (v.pass) v.detail = std::to_string(hashes[0].size()) + " artifacts identical";
  return v;
}

} // namespace

int main() {
  const std::vector<std::pair<std::string, Verdict (*)()>> criteria{
      {"oracle_optimality", oracle_optimality},
      {"fitted_q_convergence", fitted_q_convergence},
      {"rollout_label_exactness", rollout_label_exactness},
      {"completion_label_exactness", completion_label_exactness},
      {"aggregation_algebra", aggregation_algebra},
      {"search_invariants", search_invariants},
      {"best_of_n_dominance", best_of_n_dominance},
      {"separation", separation},
      {"round_trips", round_trips},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& [name, check] = criteria[i];
    Verdict verdict;
    try {
      verdict = check();
    } catch (const std::exception& e) {
      verdict = {false, std::string("exception: ") + e.what()};
    }
    failures += !verdict.pass;
    std::cout << (verdict.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << name << ": " << verdict.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
