#include "qstar/qvalue.hpp"

#include "qstar/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <unordered_map>

namespace qstar {

// ----------------------------------------------------------------------------
// Records
// ----------------------------------------------------------------------------

std::string method_name(const QLabelRecord& record) {
  switch (record.method) {
  case LabelMethod::fitted_q: return "fitted_q:" + std::to_string(record.iteration);
  case LabelMethod::rollout: return "rollout";
  case LabelMethod::completion: return "completion";
  }
  return "rollout";
}

std::string label_to_json_line(const QLabelRecord& r) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["state_text"] = r.state_text;
  j["action_text"] = r.action_text;
  j["label"] = r.label;
  j["method"] = method_name(r);
  j["gamma"] = r.gamma;
  j["seed"] = r.seed;
  j["pool_size"] = r.pool_size;
  j["provenance"] = r.provenance;
  return j.dump();
}

QLabelRecord label_from_json_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("format_version").get<int>() != 1) throw FormatError("unsupported label format_version");
    QLabelRecord r;
    r.state_text = j.at("state_text").get<std::string>();
    r.action_text = j.at("action_text").get<std::string>();
    r.label = j.at("label").get<double>();
    const auto method = j.at("method").get<std::string>();
    if (method == "rollout") {
      r.method = LabelMethod::rollout;
    } else if (method == "completion") {
      r.method = LabelMethod::completion;
    } else if (method.starts_with("fitted_q:")) {
      r.method = LabelMethod::fitted_q;
      r.iteration = std::stoul(method.substr(9));
    } else {
      throw FormatError("unknown label method '" + method + "'");
    }
    r.gamma = j.at("gamma").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.pool_size = j.at("pool_size").get<std::size_t>();
    r.provenance = j.at("provenance").get<std::string>();
    if (!std::isfinite(r.label)) throw FormatError("non-finite label");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed label record: ") + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed label record: ") + e.what());
  }
}

std::size_t RolloutDataset::trajectory_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.trajectories.size();
  return n;
}

std::vector<StateAction> RolloutDataset::pairs() const {
  std::vector<StateAction> out;
  for (const auto& entry : entries) {
    for (const auto& trajectory : entry.trajectories) {
      const auto states = replay(trajectory, entry.question);
      for (std::size_t t = 0; t < trajectory.steps.size(); ++t) out.push_back({states[t], trajectory.steps[t]});
    }
  }
  return out;
}

std::string_view to_string(DiscountExponent exponent) {
  return exponent == DiscountExponent::as_written ? "as_written" : "forward";
}

DiscountExponent parse_discount_exponent(std::string_view text) {
  if (text == "as_written") return DiscountExponent::as_written;
  if (text == "forward") return DiscountExponent::forward;
  throw UsageError("unknown discount exponent '" + std::string(text) + "'");
}

double discounted_suffix(const Trajectory& trajectory, std::size_t t, double gamma, DiscountExponent exponent) {
  const std::size_t T = trajectory.steps.size();
  double total = 0.0;
  for (std::size_t tp = t + 1; tp <= T; ++tp) {
    const double power = exponent == DiscountExponent::as_written ? static_cast<double>(T - tp)
                                                                  : static_cast<double>(tp - t);
    total += std::pow(gamma, power) * trajectory.rewards[tp - 1];
  }
  return total;
}

std::string_view to_string(ModelKind kind) { return kind == ModelKind::tabular ? "tabular" : "linear"; }

ModelKind parse_model_kind(std::string_view text) {
  if (text == "tabular") return ModelKind::tabular;
  if (text == "linear") return ModelKind::linear;
  throw UsageError("unknown model kind '" + std::string(text) + "'");
}

// ----------------------------------------------------------------------------
// Regression
// ----------------------------------------------------------------------------

namespace {

FitResult fit_tabular(std::span<const QLabelRecord> records, const FitOptions& options) {
  struct Cell {
    double sum = 0.0;
    std::size_t count = 0;
  };
  std::unordered_map<QKey, Cell, QKeyHash> cells;
  std::vector<QKey> keys;
  keys.reserve(records.size());
  for (const auto& r : records) {
    keys.push_back(QKey::of(r.state_text, r.action_text));
    auto& cell = cells[keys.back()];
    cell.sum += r.label;
    ++cell.count;
  }
  auto model = std::make_shared<TabularQ>(0.0, options.clamp);
  for (const auto& [key, cell] : cells) model->set(key, cell.sum / static_cast<double>(cell.count));

  FitDiagnostics diag;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const double e = *model->find(keys[i]) - records[i].label;
    diag.mse += e * e;
  }
  diag.mse /= static_cast<double>(records.size());
  diag.iterations = 1;
  return {std::move(model), diag};
}

FitResult fit_linear(std::span<const QLabelRecord> records, const FitOptions& options) {
  if (!options.features) throw UsageError("linear fit needs a feature extractor");
  const auto n = static_cast<Eigen::Index>(records.size());
  const auto d = static_cast<Eigen::Index>(options.features->dimension());
  Eigen::MatrixXd X(n, d);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    const auto f = options.features->features(r.state_text, r.action_text);
    for (Eigen::Index c = 0; c < d; ++c) X(i, c) = f[static_cast<std::size_t>(c)];
    y(i) = r.label;
  }

  FitDiagnostics diag;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  Eigen::VectorXd w;
  Eigen::LDLT<Eigen::MatrixXd> normal;
  if (qr.rank() < d) {
    diag.ridge_applied = true;
    diag.warning = "features are rank-deficient (rank " + std::to_string(qr.rank()) + " of " + std::to_string(d) +
                   "); applied ridge " + std::to_string(options.ridge);
    normal.compute(X.transpose() * X + options.ridge * Eigen::MatrixXd::Identity(d, d));
    w = normal.solve(X.transpose() * y);
  } else {
    w = qr.solve(y);
  }
  diag.iterations = 1;

  // Iterative refinement on the (possibly regularised) normal equations.
  for (; diag.iterations < options.max_iterations; ++diag.iterations) {
    const Eigen::VectorXd residual = y - X * w;
    Eigen::VectorXd gradient = X.transpose() * residual;
    if (diag.ridge_applied) gradient -= options.ridge * w;
    if (gradient.lpNorm<Eigen::Infinity>() <= options.tolerance) break;
    w += diag.ridge_applied ? Eigen::VectorXd(normal.solve(gradient)) : Eigen::VectorXd(qr.solve(residual));
  }
  diag.mse = (y - X * w).squaredNorm() / static_cast<double>(n);
  std::vector<double> weights(w.data(), w.data() + w.size());
  return {std::make_shared<const LinearQ>(options.features, std::move(weights), options.clamp), diag};
}

} // namespace

FitResult fit_q(std::span<const QLabelRecord> records, const FitOptions& options) {
  if (records.empty()) throw UsageError("cannot fit a Q model to an empty dataset");
  for (const auto& r : records)
    if (!std::isfinite(r.label)) throw UsageError("labels must be finite");
  return options.kind == ModelKind::tabular ? fit_tabular(records, options) : fit_linear(records, options);
}

// ----------------------------------------------------------------------------
// Fitted Q-iteration
// ----------------------------------------------------------------------------

FittedQResult fitted_q_iteration(const RolloutDataset& data, const PolicyHandle& policy, const FittedQOptions& options) {
  if (options.iterations == 0) throw UsageError("fitted Q-iteration needs L >= 1");
  if (!(options.gamma > 0.0 && options.gamma <= 1.0)) throw UsageError("gamma must lie in (0, 1]");

  struct Transition {
    StateAction pair;
    double reward = 0.0;
    std::optional<State> next; ///< empty when [s_t; a_t] is terminal
  };
  std::vector<Transition> transitions;
  for (auto& pair : data.pairs()) {
    State next = transition(pair.state, pair.action);
    const double reward = reached_reward(next, next.question().checker);
    Transition tr{std::move(pair), reward, std::nullopt};
    if (!next.terminal()) tr.next = std::move(next);
    transitions.push_back(std::move(tr));
  }
  if (transitions.empty()) throw UsageError("rollout dataset has no transitions");

  // Successor candidates are fixed across iterations.
  std::unordered_map<std::string, std::vector<StepCandidate>> candidates;
  for (const auto& tr : transitions) {
    if (!tr.next || candidates.contains(tr.next->text())) continue;
    Rng rng(derive_seed(options.seed, {hash_string(tr.next->text())}));
    candidates.emplace(tr.next->text(), top_k_candidates(policy, *tr.next, options.k, rng));
  }

  FittedQResult result;
  std::shared_ptr<const QModel> previous = std::make_shared<const TabularQ>();
  std::vector<double> previous_labels(transitions.size(), 0.0);
  for (std::size_t iteration = 1; iteration <= options.iterations; ++iteration) {
    std::vector<QLabelRecord> labels;
    labels.reserve(transitions.size());
    double delta = 0.0;
    for (std::size_t i = 0; i < transitions.size(); ++i) {
      const auto& tr = transitions[i];
      double y = tr.reward;
      if (tr.next) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& c : candidates.at(tr.next->text())) best = std::max(best, previous->predict(*tr.next, c.step));
        y += options.gamma * best;
      }
      delta = std::max(delta, std::abs(y - previous_labels[i]));
      previous_labels[i] = y;
      QLabelRecord r;
      r.state_text = tr.pair.state.text();
      r.action_text = tr.pair.action.text;
      r.label = y;
      r.method = LabelMethod::fitted_q;
      r.iteration = iteration;
      r.gamma = options.gamma;
      r.seed = options.seed;
      r.pool_size = 0;
      r.provenance = "top_k=" + std::to_string(options.k);
      labels.push_back(std::move(r));
    }
    auto fit = fit_q(labels, options.fit);
    result.history.push_back({iteration, delta, fit.diagnostics});
    previous = fit.model;
    result.labels = std::move(labels);
  }
  result.model = previous;
  return result;
}

// ----------------------------------------------------------------------------
// Rollout and completion labels
// ----------------------------------------------------------------------------

double best_of_pool_label(const StateAction& pair, std::span<const Trajectory> pool, double gamma,
                          DiscountExponent exponent) {
  const double reward = outcome_reward(pair.state, pair.action);
  const std::size_t t = pair.state.depth() + 1;
  double best = 0.0;
  bool any = false;
  for (const auto& trajectory : pool) {
    if (trajectory.steps.size() < t || trajectory.steps[t - 1].text != pair.action.text)
      throw UsageError("pool trajectory does not extend the labelled pair");
    const double suffix = discounted_suffix(trajectory, t, gamma, exponent);
    best = any ? std::max(best, suffix) : suffix;
    any = true;
  }
  return reward + best;
}

std::vector<Trajectory> rollout_pool(const StateAction& pair, std::size_t index, const PolicyHandle& policy,
                                     const RolloutOptions& options) {
  const State next = transition(pair.state, pair.action);
  if (next.terminal()) return {};
  std::vector<Trajectory> pool;
  if (options.pool == PoolKind::exhaustive) {
    for_each_completion(policy, next, options.exhaustive_k, [&](const State& s) { pool.push_back(make_trajectory(s)); });
    return pool;
  }
  const double temperature = options.temperature.value_or(policy.temperature);
  pool.reserve(options.rollouts_per_pair);
  for (std::size_t j = 0; j < options.rollouts_per_pair; ++j) {
    Rng rng(derive_seed(options.seed, {index, j}));
    pool.push_back(make_trajectory(sample_continuation(policy, next, temperature, rng)));
  }
  return pool;
}

std::vector<QLabelRecord> rollout_labels(std::span<const StateAction> pairs, const PolicyHandle& policy,
                                         const RolloutOptions& options) {
  if (options.pool == PoolKind::sampled && options.rollouts_per_pair == 0)
    throw UsageError("rollouts_per_pair must be >= 1");
  std::vector<QLabelRecord> out(pairs.size());
  parallel_for(pairs.size(), options.jobs, [&](std::size_t i) {
    const auto pool = rollout_pool(pairs[i], i, policy, options);
    QLabelRecord& r = out[i];
    r.state_text = pairs[i].state.text();
    r.action_text = pairs[i].action.text;
    r.label = best_of_pool_label(pairs[i], pool, options.gamma, options.exponent);
    r.method = LabelMethod::rollout;
    r.gamma = options.gamma;
    r.seed = derive_seed(options.seed, {i});
    r.pool_size = pool.size();
    r.provenance = options.pool == PoolKind::exhaustive ? "exhaustive:k=" + std::to_string(options.exhaustive_k)
                                                        : "sampled";
  });
  return out;
}

std::vector<QLabelRecord> completion_labels(std::span<const StateAction> pairs, const PolicyHandle& strong_policy,
                                            const CompletionOptions& options) {
  std::vector<QLabelRecord> out(pairs.size());
  parallel_for(pairs.size(), options.jobs, [&](std::size_t i) {
    const State next = transition(pairs[i].state, pairs[i].action);
    std::vector<Trajectory> completion;
    if (!next.terminal()) {
      Rng rng(0);
      completion.push_back(make_trajectory(sample_continuation(strong_policy, next, 0.0, rng)));
    }
    QLabelRecord& r = out[i];
    r.state_text = pairs[i].state.text();
    r.action_text = pairs[i].action.text;
    r.label = best_of_pool_label(pairs[i], completion, options.gamma, options.exponent);
    r.method = LabelMethod::completion;
    r.gamma = options.gamma;
    r.pool_size = completion.size();
    r.provenance = options.completer_id;
  });
  return out;
}

RolloutDataset build_rollout_dataset(std::span<const QuestionPtr> questions, const PolicyHandle& policy,
                                     std::size_t samples_per_question, double temperature, std::uint64_t seed,
                                     std::string preset) {
  if (samples_per_question == 0) throw UsageError("samples per question must be >= 1");
  RolloutDataset data;
  data.temperature = temperature;
  data.samples_per_question = samples_per_question;
  data.seed = seed;
  data.preset = std::move(preset);
  for (std::size_t i = 0; i < questions.size(); ++i) {
    RolloutDataset::Entry entry{questions[i], {}};
    for (std::size_t j = 0; j < samples_per_question; ++j) {
      Rng rng(derive_seed(seed, {i, j}));
      entry.trajectories.push_back(sample_trajectory(policy, questions[i], temperature, rng));
    }
    data.entries.push_back(std::move(entry));
  }
  return data;
}

std::vector<QLabelRecord> flip_labels(std::span<const QLabelRecord> records, double rate, std::uint64_t seed) {
  std::vector<QLabelRecord> out(records.begin(), records.end());
  for (auto& r : out) {
    Rng rng(derive_seed(seed, {hash_string(r.state_text), hash_string(r.action_text)}));
    if (uniform01(rng) < rate) r.label = 1.0 - r.label;
  }
  return out;
}

double max_bellman_residual(const QModel& model, std::span<const StateAction> pairs, const PolicyHandle& policy,
                            std::size_t k, double gamma) {
  double worst = 0.0;
  for (const auto& pair : pairs) {
    const State next = transition(pair.state, pair.action);
    double target = reached_reward(next, next.question().checker);
    if (!next.terminal()) {
      Rng rng(0);
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& c : top_k_candidates(policy, next, k, rng)) best = std::max(best, model.predict(next, c.step));
      target += gamma * best;
    }
    worst = std::max(worst, std::abs(model.predict(pair.state, pair.action) - target));
  }
  return worst;
}

} // namespace qstar
