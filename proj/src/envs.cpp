#include "qstar/envs.hpp"

#include "qstar/hash.hpp"
#include "qstar/parallel.hpp"
#include "qstar/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace qstar {

std::string_view to_string(EnvKind kind) {
  switch (kind) {
  case EnvKind::arithmetic_chain: return "arithmetic_chain";
  case EnvKind::string_rewrite: return "string_rewrite";
  case EnvKind::trap_tree: return "trap_tree";
  }
  return "arithmetic_chain";
}

EnvKind parse_env_kind(std::string_view text) {
  if (text == "arithmetic_chain") return EnvKind::arithmetic_chain;
  if (text == "string_rewrite") return EnvKind::string_rewrite;
  if (text == "trap_tree") return EnvKind::trap_tree;
  throw UsageError("unknown environment kind '" + std::string(text) + "'");
}

namespace {

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

std::string signed_op(std::int64_t operand) {
  return operand >= 0 ? "add " + std::to_string(operand) : "subtract " + std::to_string(-operand);
}

// String rewrite op codes: kind = code % 4, parameter = code / 4 + 1.
std::string rewrite_name(std::int64_t code) {
  const auto p = code / 4 + 1;
  switch (code % 4) {
  case 0: return "rotate left by " + std::to_string(p);
  case 1: return "rotate right by " + std::to_string(p);
  case 2: return "swap positions 0 and " + std::to_string(p);
  default: return "append '" + std::string(1, static_cast<char>('a' + (p - 1) % 26)) + "'";
  }
}

std::string rewrite_apply(std::string s, std::int64_t code) {
  const auto p = static_cast<std::size_t>(code / 4 + 1);
  const std::size_t n = s.size();
  switch (code % 4) {
  case 0: std::rotate(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(p % n), s.end()); break;
  case 1: std::rotate(s.begin(), s.begin() + static_cast<std::ptrdiff_t>((n - p % n) % n), s.end()); break;
  case 2: std::swap(s[0], s[p % n]); break;
  default: s.push_back(static_cast<char>('a' + (p - 1) % 26)); break;
  }
  return s;
}

std::uint64_t node_seed(std::uint64_t seed, std::size_t question, std::span<const std::size_t> path) {
  std::uint64_t s = derive_seed(seed, {question, 0x70A7});
  for (auto i : path) s = derive_seed(s, {i});
  return s;
}

} // namespace

// ----------------------------------------------------------------------------
// Generation
// ----------------------------------------------------------------------------

SyntheticEnv::SyntheticEnv(EnvSpec spec) : spec_(spec) {}

std::shared_ptr<const SyntheticEnv> SyntheticEnv::generate(const EnvSpec& spec) {
  if (spec.horizon == 0 || spec.branching == 0 || spec.questions == 0)
    throw UsageError("environment needs T >= 1, b >= 1 and at least one question");
  if (std::pow(static_cast<double>(spec.branching), static_cast<double>(spec.horizon)) > kMaxTrajectories)
    throw SizeBound("b^T = " + std::to_string(spec.branching) + "^" + std::to_string(spec.horizon) +
                    " exceeds the 1e6 trajectory cap");
  if (spec.kind == EnvKind::trap_tree) {
    if (spec.branching < 2) throw UsageError("trap_tree needs b >= 2");
    if (!(spec.trap_margin > 0.0 && spec.trap_margin < 1.0)) throw UsageError("trap_margin must lie in (0, 1)");
  }

  std::shared_ptr<SyntheticEnv> env(new SyntheticEnv(spec));
  env->rules_ = std::make_shared<const TaskRules>(
      TaskRules{SegmentationMode::line(), AnswerKind::marker_suffix, "####", "<eos>", spec.horizon});

  const auto b = spec.branching;
  for (std::size_t q = 0; q < spec.questions; ++q) {
    Rng rng(derive_seed(spec.seed, {q}));
    Plan plan;
    plan.correct.resize(spec.horizon);
    plan.operands.resize(spec.horizon);
    for (std::size_t t = 0; t < spec.horizon; ++t) {
      if (spec.kind == EnvKind::arithmetic_chain) {
        const auto span = static_cast<std::int64_t>(b) + 9;
        std::vector<std::int64_t> pool;
        for (std::int64_t v = -span; v <= span; ++v)
          if (v != 0) pool.push_back(v);
        shuffle(pool, rng);
        plan.operands[t].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(b));
      } else if (spec.kind == EnvKind::string_rewrite) {
        std::vector<std::int64_t> pool(4 * (b + 2));
        std::iota(pool.begin(), pool.end(), 0);
        shuffle(pool, rng);
        plan.operands[t].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(b));
      }
      plan.correct[t] = uniform_index(rng, b);
    }

    std::string prompt = "Problem " + std::to_string(q + 1) + ": ";
    if (spec.kind == EnvKind::arithmetic_chain) {
      plan.start = static_cast<std::int64_t>(uniform_index(rng, 20)) + 1;
      prompt += "start at " + std::to_string(plan.start);
      for (std::size_t t = 0; t < spec.horizon; ++t) prompt += ", then " + signed_op(plan.operands[t][plan.correct[t]]);
      prompt += ". What is the result?";
    } else if (spec.kind == EnvKind::string_rewrite) {
      for (int i = 0; i < 5; ++i) plan.start_text.push_back(static_cast<char>('a' + uniform_index(rng, 26)));
      prompt += "start from \"" + plan.start_text + "\"";
      for (std::size_t t = 0; t < spec.horizon; ++t)
        prompt += ", then " + rewrite_name(plan.operands[t][plan.correct[t]]);
      prompt += ". What is the final string?";
    } else {
      // Leaf codes are an odd-multiplier bijection of the leaf index, so they never collide.
      plan.start = static_cast<std::int64_t>(rng() | 1U);
      plan.start_text = std::to_string(rng() & 0xFFFFFF);
      prompt += "find the hidden code at the end of a " + std::to_string(spec.horizon) + "-step path.";
    }
    env->plans_.push_back(std::move(plan));

    const std::string answer = env->leaf_answer(q, env->plans_.back().correct);
    auto question = make_question("q" + std::to_string(q + 1), prompt, AnswerChecker::env_oracle(answer), env->rules_);
    if (env->by_prompt_.contains(question->prompt)) throw Error("duplicate prompt in generated environment");
    env->by_id_.emplace(question->id, q);
    env->by_prompt_.emplace(question->prompt, q);
    env->answers_.push_back(answer);
    env->questions_.push_back(std::move(question));
  }
  return env;
}

EnvPtr generate_env(const EnvSpec& spec) { return SyntheticEnv::generate(spec); }

QuestionPtr SyntheticEnv::find_question(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw UsageError("environment has no question '" + id + "'");
  return questions_[it->second];
}

std::size_t SyntheticEnv::correct_option(std::size_t question, std::size_t depth) const {
  return plans_.at(question).correct.at(depth);
}

std::string SyntheticEnv::value_after(std::size_t question, std::span<const std::size_t> path) const {
  const Plan& plan = plans_[question];
  if (spec_.kind == EnvKind::arithmetic_chain) {
    std::int64_t v = plan.start;
    for (std::size_t t = 0; t < path.size(); ++t) v += plan.operands[t][path[t]];
    return std::to_string(v);
  }
  std::string s = plan.start_text;
  for (std::size_t t = 0; t < path.size(); ++t) s = rewrite_apply(std::move(s), plan.operands[t][path[t]]);
  return s;
}

std::string SyntheticEnv::leaf_answer(std::size_t question, std::span<const std::size_t> path) const {
  if (spec_.kind != EnvKind::trap_tree) return value_after(question, path);
  const Plan& plan = plans_[question];
  std::uint64_t leaf = 0;
  for (auto i : path) leaf = leaf * spec_.branching + i;
  const std::uint64_t code =
      (leaf * static_cast<std::uint64_t>(plan.start) + std::stoull(plan.start_text)) & 0xFFFFFF;
  char buf[8];
  std::snprintf(buf, sizeof buf, "%06llx", static_cast<unsigned long long>(code));
  return buf;
}

std::string SyntheticEnv::step_text(std::size_t question, std::span<const std::size_t> path, std::size_t option) const {
  const std::size_t t = path.size();
  std::string text = "step " + std::to_string(t + 1) + ": ";
  std::vector<std::size_t> next(path.begin(), path.end());
  next.push_back(option);
  if (spec_.kind == EnvKind::trap_tree) {
    text += "take branch " + std::to_string(option + 1);
  } else {
    const auto operand = plans_[question].operands[t][option];
    text += (spec_.kind == EnvKind::arithmetic_chain ? signed_op(operand) : rewrite_name(operand)) + " -> " +
            value_after(question, next);
  }
  if (t + 1 == spec_.horizon) text += " #### " + leaf_answer(question, next);
  return text;
}

std::vector<double> SyntheticEnv::probabilities(std::size_t question, std::span<const std::size_t> path) const {
  const std::size_t b = spec_.branching;
  Rng rng(node_seed(spec_.seed, question, path));
  std::vector<double> p(b);
  const Plan& plan = plans_[question];
  const bool on_path = std::equal(path.begin(), path.end(), plan.correct.begin());

  if (spec_.kind == EnvKind::trap_tree && path.empty()) {
    // Correct child x, deceptive child x + m, the rest x / 2; sums to one.
    const double m = spec_.trap_margin;
    const double x = (1.0 - m) / (1.0 + static_cast<double>(b) / 2.0);
    const std::size_t correct = plan.correct[0];
    const std::size_t deceptive = (correct + 1 + uniform_index(rng, b - 1)) % b;
    for (std::size_t i = 0; i < b; ++i) p[i] = i == correct ? x : i == deceptive ? x + m : x / 2.0;
    return p;
  }

  std::vector<double> w(b);
  for (auto& v : w) v = 0.1 + uniform01(rng);
  if (spec_.kind == EnvKind::trap_tree && on_path && b > 1) {
    // The intended child ranks first or second.
    std::sort(w.begin(), w.end(), std::greater<>());
    const std::size_t rank = uniform_index(rng, 2);
    const std::size_t correct = plan.correct[path.size()];
    std::vector<double> rest;
    for (std::size_t i = 0; i < b; ++i)
      if (i != rank) rest.push_back(w[i]);
    shuffle(rest, rng);
    const double chosen = w[rank];
    for (std::size_t i = 0, r = 0; i < b; ++i) w[i] = i == correct ? chosen : rest[r++];
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < b; ++i) p[i] = w[i] / total;
  return p;
}

std::vector<WeightedStep> SyntheticEnv::options(std::size_t question, std::span<const std::size_t> path) const {
  if (path.size() >= spec_.horizon) return {};
  const auto p = probabilities(question, path);
  std::vector<WeightedStep> out;
  out.reserve(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back({step_text(question, path, i), p[i]});
  return out;
}

std::vector<WeightedStep> SyntheticEnv::actions(const State& state) const {
  const auto where = locate(state);
  if (!where) return {};
  return options(where->question, where->path);
}

// ----------------------------------------------------------------------------
// Locating states
// ----------------------------------------------------------------------------

namespace {

template <class Steps>
std::optional<EnvLocation> walk(const SyntheticEnv& env, std::size_t question, const Steps& steps) {
  EnvLocation where;
  where.question = question;
  bool on_path = true;
  for (const auto& text : steps) {
    const auto depth = where.path.size();
    if (depth >= env.spec().horizon) return std::nullopt;
    const auto options = env.options(question, where.path);
    std::optional<std::size_t> match;
    for (std::size_t i = 0; i < options.size() && !match; ++i)
      if (options[i].text == text) match = i;
    if (!match) return std::nullopt;
    on_path = on_path && *match == env.correct_option(question, depth);
    if (on_path) ++where.correct_prefix;
    where.path.push_back(*match);
  }
  return where;
}

} // namespace

std::optional<EnvLocation> SyntheticEnv::locate(const State& state) const {
  auto it = by_id_.find(state.question().id);
  if (it == by_id_.end() || questions_[it->second]->prompt != state.question().prompt) return std::nullopt;
  std::vector<std::string_view> texts;
  for (const auto& s : state.steps()) texts.push_back(s.text);
  return walk(*this, it->second, texts);
}

std::optional<EnvLocation> SyntheticEnv::locate(std::string_view state_text) const {
  const auto newline = state_text.find('\n');
  auto it = by_prompt_.find(state_text.substr(0, newline));
  if (it == by_prompt_.end()) return std::nullopt;
  std::vector<std::string_view> texts;
  if (newline != std::string_view::npos) {
    std::string_view rest = state_text.substr(newline + 1);
    for (;;) {
      const auto end = rest.find('\n');
      texts.push_back(rest.substr(0, end));
      if (end == std::string_view::npos) break;
      rest.remove_prefix(end + 1);
    }
  }
  return walk(*this, it->second, texts);
}

// ----------------------------------------------------------------------------
// Serialization
// ----------------------------------------------------------------------------

nlohmann::ordered_json SyntheticEnv::to_json() const {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["kind"] = to_string(spec_.kind);
  j["horizon"] = spec_.horizon;
  j["branching"] = spec_.branching;
  j["seed"] = spec_.seed;
  j["questions"] = spec_.questions;
  j["trap_margin"] = spec_.trap_margin;
  auto items = nlohmann::ordered_json::array();
  for (std::size_t q = 0; q < questions_.size(); ++q) {
    nlohmann::ordered_json item;
    item["id"] = questions_[q]->id;
    item["prompt"] = questions_[q]->prompt;
    item["answer"] = answers_[q];
    items.push_back(std::move(item));
  }
  j["items"] = std::move(items);
  return j;
}

std::shared_ptr<const SyntheticEnv> SyntheticEnv::from_json(const nlohmann::json& j) {
  EnvSpec spec;
  try {
    if (j.at("format_version").get<int>() != 1) throw FormatError("unsupported environment format_version");
    spec.kind = parse_env_kind(j.at("kind").get<std::string>());
    spec.horizon = j.at("horizon").get<std::size_t>();
    spec.branching = j.at("branching").get<std::size_t>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.questions = j.at("questions").get<std::size_t>();
    spec.trap_margin = j.at("trap_margin").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed environment: ") + e.what());
  }
  auto env = generate(spec);
  const auto& items = j.at("items");
  if (items.size() != env->questions().size()) throw FormatError("environment question count mismatch");
  for (std::size_t q = 0; q < items.size(); ++q) {
    if (items[q].at("id").get<std::string>() != env->questions()[q]->id ||
        items[q].at("prompt").get<std::string>() != env->questions()[q]->prompt ||
        items[q].at("answer").get<std::string>() != env->answer(q))
      throw FormatError("environment item " + std::to_string(q) + " does not match its generator parameters");
  }
  return env;
}

std::string SyntheticEnv::fingerprint() const { return content_hash(to_json().dump()); }

std::string env_to_text(const SyntheticEnv& env) { return env.to_json().dump(2) + "\n"; }

EnvPtr env_from_text(std::string_view text) {
  try {
    return SyntheticEnv::from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed environment: ") + e.what());
  }
}

std::vector<double> SyntheticFeatures::features(std::string_view state_text, std::string_view action_text) const {
  std::vector<double> f(dimension(), 0.0);
  const auto where = env_->locate(state_text);
  if (!where) return f;
  f[0] = static_cast<double>(where->path.size());
  f[1] = static_cast<double>(where->correct_prefix);
  const auto options = env_->options(where->question, where->path);
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (options[i].text != action_text) continue;
    const bool prefix_ok = where->correct_prefix == where->path.size();
    f[2] = prefix_ok && i == env_->correct_option(where->question, where->path.size()) ? 1.0 : 0.0;
    f[3 + i] = 1.0;
  }
  return f;
}

// ----------------------------------------------------------------------------
// Oracles
// ----------------------------------------------------------------------------

namespace {

class OracleSolver {
public:
  OracleSolver(const PolicyHandle& policy, std::size_t k, double gamma, OracleQTable& out, TabularQ& table)
      : policy_(policy), k_(k), gamma_(gamma), out_(out), table_(table) {}

  /// max over the top-k actions of Q*(state, a).
  double solve(const State& state) {
    Rng rng(0);
    double best = 0.0;
    bool any = false;
    for (auto& c : top_k_candidates(policy_, state, k_, rng)) {
      State next = transition(state, c.step);
      double q = reached_reward(next, next.question().checker);
      if (next.terminal()) {
        if (++leaves_ > kMaxTrajectories) throw SizeBound("restricted tree exceeds the 1e6 trajectory cap");
      } else {
        q += gamma_ * solve(next);
      }
      table_.set(QKey::of(state.text(), c.step.text), q);
      out_.entries.push_back({state, std::move(c.step), q});
      best = any ? std::max(best, q) : q;
      any = true;
    }
    return best;
  }

  void reset_leaves() { leaves_ = 0; }

private:
  const PolicyHandle& policy_;
  std::size_t k_;
  double gamma_;
  OracleQTable& out_;
  TabularQ& table_;
  double leaves_ = 0;
};

} // namespace

OracleQTable brute_force_optimal_q(std::span<const QuestionPtr> questions, const PolicyHandle& policy, std::size_t k,
                                   double gamma) {
  if (k == 0) throw UsageError("oracle k must be >= 1");
  OracleQTable out;
  out.gamma = gamma;
  out.k = k;
  auto table = std::make_shared<TabularQ>();
  OracleSolver solver(policy, k, gamma, out, *table);
  for (const auto& q : questions) {
    solver.reset_leaves();
    const State root = State::initial(q);
    if (!root.terminal()) solver.solve(root);
  }
  out.table = std::move(table);
  return out;
}

OracleQTable brute_force_optimal_q(const SyntheticEnv& env, const PolicyHandle& policy, std::size_t k, double gamma) {
  return brute_force_optimal_q(env.questions(), policy, k, gamma);
}

std::vector<Trajectory> enumerate_trajectories(const QuestionPtr& question, const PolicyHandle& policy, std::size_t k) {
  std::vector<Trajectory> out;
  for_each_completion(policy, State::initial(question), k, [&](const State& s) { out.push_back(make_trajectory(s)); });
  return out;
}

namespace {

class OracleGreedyModel final : public ActionModel {
public:
  OracleGreedyModel(PolicyHandle base, std::shared_ptr<const QModel> oracle, std::size_t k)
      : base_(std::move(base)), oracle_(std::move(oracle)), k_(k) {}

  [[nodiscard]] std::vector<WeightedStep> actions(const State& state) const override {
    Rng rng(0);
    const auto candidates = top_k_candidates(base_, state, k_, rng);
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t i = 0; i < candidates.size(); ++i) order.emplace_back(oracle_->predict(state, candidates[i].step), i);
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    // Strictly decreasing weights 2^-r keep the oracle ranking through the tabular sort.
    std::vector<WeightedStep> out;
    double total = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) total += std::ldexp(1.0, -static_cast<int>(r));
    for (std::size_t r = 0; r < order.size(); ++r)
      out.push_back({candidates[order[r].second].step.text, std::ldexp(1.0, -static_cast<int>(r)) / total});
    return out;
  }

private:
  PolicyHandle base_;
  std::shared_ptr<const QModel> oracle_;
  std::size_t k_;
};

} // namespace

PolicyHandle oracle_greedy_policy(const PolicyHandle& base, std::shared_ptr<const QModel> oracle, std::size_t k) {
  return make_tabular_policy(std::make_shared<const OracleGreedyModel>(base, std::move(oracle), k), 0.0);
}

std::shared_ptr<const QModel> noisy_oracle(const OracleQTable& oracle, double rate, std::uint64_t seed) {
  std::vector<QLabelRecord> records;
  records.reserve(oracle.entries.size());
  for (const auto& e : oracle.entries) {
    QLabelRecord r;
    r.state_text = e.state.text();
    r.action_text = e.action.text;
    r.label = e.value;
    r.gamma = oracle.gamma;
    r.provenance = "oracle";
    records.push_back(std::move(r));
  }
  return fit_q(flip_labels(records, rate, seed)).model;
}

// ----------------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------------

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
  case Strategy::greedy: return "greedy";
  case Strategy::best_of_n_resample: return "best_of_n_resample";
  case Strategy::qstar: return "qstar";
  }
  return "qstar";
}

Strategy parse_strategy(std::string_view text) {
  if (text == "greedy") return Strategy::greedy;
  if (text == "best_of_n_resample") return Strategy::best_of_n_resample;
  if (text == "qstar") return Strategy::qstar;
  throw UsageError("unknown strategy '" + std::string(text) + "'");
}

namespace {

QuestionVerdict run_question(std::size_t index, const QuestionPtr& question, const PolicyHandle& policy,
                             const QModel& qmodel, const EvalConfig& config, const EvalObserver& observer) {
  QuestionVerdict v;
  v.question_id = question->id;
  const std::uint64_t seed = derive_seed(config.seed, {index});
  switch (config.strategy) {
  case Strategy::greedy: {
    v.trajectory = greedy_decode_baseline(question, policy);
    v.policy_calls = v.trajectory.steps.size();
    v.run_seeds = {0};
    break;
  }
  case Strategy::best_of_n_resample: {
    std::optional<double> best;
    for (std::size_t j = 0; j < config.search.n_trajectories; ++j) {
      const std::uint64_t run_seed = derive_seed(seed, {j});
      Rng rng(run_seed);
      Trajectory t = sample_trajectory(policy, question, config.resample_temperature, rng);
      const State last = replay(t, question).back();
      const double g = g_value(config.utility.reward, config.utility.agg, last);
      const double f = terminal_f_value(last, g, qmodel, config.search).f;
      v.policy_calls += t.steps.size();
      v.run_seeds.push_back(run_seed);
      if (!best || f > *best) {
        best = f;
        v.trajectory = std::move(t);
        v.selected_run = j;
      }
    }
    v.f = *best;
    break;
  }
  case Strategy::qstar: {
    SearchConfig search = config.search;
    search.seed = seed;
    RunObserver run_observer;
    if (observer) run_observer = [&observer, index](std::size_t run, const SearchEvent& e) { observer(index, run, e); };
    try {
      auto plan = best_of_n_plan(question, policy, qmodel, config.utility, search, run_observer);
      v.trajectory = std::move(plan.best);
      v.f = plan.best_f;
      v.selected_run = plan.best_index;
      for (const auto& run : plan.runs) {
        v.expansions += run.result.stats.expansions;
        v.policy_calls += run.result.stats.policy_calls;
        v.run_seeds.push_back(run.seed);
      }
    } catch (const BudgetExhausted& e) {
      v.status = "budget_exhausted";
      v.trajectory = e.best_partial().trajectory;
      v.f = e.best_partial().f;
      v.expansions = e.best_partial().stats.expansions;
      v.policy_calls = e.best_partial().stats.policy_calls;
    }
    break;
  }
  }
  v.solved = v.status == "ok" && v.trajectory.solved();
  return v;
}

} // namespace

EvalReport evaluate_strategy(std::span<const QuestionPtr> questions, const PolicyHandle& policy, const QModel& qmodel,
                             const EvalConfig& config, const EvalObserver& observer) {
  config.search.validate();
  EvalReport report;
  report.strategy = to_string(config.strategy);
  report.verdicts.resize(questions.size());
  const auto failed = [&](std::size_t i, std::string status) {
    QuestionVerdict v;
    v.question_id = questions[i]->id;
    v.status = std::move(status);
    report.verdicts[i] = std::move(v);
  };
  parallel_for(questions.size(), config.jobs, [&](std::size_t i) {
    try {
      report.verdicts[i] = run_question(i, questions[i], policy, qmodel, config, observer);
    } catch (const PolicyUnavailable& e) {
      failed(i, std::string("upstream: ") + e.what());
    } catch (const ScorerUnavailable& e) {
      failed(i, std::string("upstream: ") + e.what());
    } catch (const Error& e) {
      failed(i, std::string("error: ") + e.what());
    }
  });
  double solved = 0.0;
  double expansions = 0.0;
  double calls = 0.0;
  for (const auto& v : report.verdicts) {
    solved += v.solved ? 1.0 : 0.0;
    expansions += static_cast<double>(v.expansions);
    calls += static_cast<double>(v.policy_calls);
    if (v.status == "budget_exhausted")
      ++report.budget_exhausted;
    else if (v.status.starts_with("upstream: "))
      ++report.upstream_failures;
    else if (v.status != "ok")
      ++report.failures;
  }
  const double n = questions.empty() ? 1.0 : static_cast<double>(questions.size());
  report.solve_rate = solved / n;
  report.mean_expansions = expansions / n;
  report.mean_policy_calls = calls / n;
  return report;
}

} // namespace qstar
