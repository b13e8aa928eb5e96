#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

#include <cmath>

using namespace qstar;
using namespace qstar::testing;

namespace {

Trajectory trajectory_with_rewards(std::vector<double> rewards) {
  Trajectory t;
  t.question_id = "q";
  t.prompt = "P";
  for (std::size_t i = 0; i < rewards.size(); ++i)
    t.steps.push_back(Step{"s" + std::to_string(i + 1), SegmentationMode::line(), std::nullopt});
  t.rewards = std::move(rewards);
  for (double r : t.rewards) t.total_return += r;
  return t;
}

/// Bias, x and x^2 of the state length; exact for quadratic targets.
class PolyFeatures final : public FeatureExtractor {
public:
  [[nodiscard]] std::string id() const override { return "poly_test"; }
  [[nodiscard]] std::size_t dimension() const override { return 3; }
  [[nodiscard]] std::vector<double> features(std::string_view s, std::string_view a) const override {
    const double x = static_cast<double>(s.size()) / 10.0 + static_cast<double>(a.size()) / 100.0;
    return {1.0, x, x * x};
  }
};

/// Two identical columns.
class DuplicateFeatures final : public FeatureExtractor {
public:
  [[nodiscard]] std::string id() const override { return "duplicate_test"; }
  [[nodiscard]] std::size_t dimension() const override { return 2; }
  [[nodiscard]] std::vector<double> features(std::string_view s, std::string_view) const override {
    const double x = static_cast<double>(s.size());
    return {x, x};
  }
};

QLabelRecord record(std::string s, std::string a, double label) {
  QLabelRecord r;
  r.state_text = std::move(s);
  r.action_text = std::move(a);
  r.label = label;
  return r;
}

RolloutDataset full_coverage(const EnvPtr& env, const PolicyHandle& policy, std::size_t k) {
  RolloutDataset data;
  for (const auto& q : env->questions()) data.entries.push_back({q, enumerate_trajectories(q, policy, k)});
  return data;
}

} // namespace

TEST_CASE("discount exponent readings differ as documented") {
  const auto t = trajectory_with_rewards({0.0, 0.0, 1.0});
  CHECK(discounted_suffix(t, 2, 0.5, DiscountExponent::as_written) == 1.0);
  CHECK(discounted_suffix(t, 2, 0.5, DiscountExponent::forward) == 0.5);
  CHECK(discounted_suffix(t, 1, 0.5, DiscountExponent::as_written) == 1.0);
  CHECK(discounted_suffix(t, 1, 0.5, DiscountExponent::forward) == 0.25);
  CHECK(discounted_suffix(t, 3, 0.5, DiscountExponent::forward) == 0.0);
  for (auto e : {DiscountExponent::as_written, DiscountExponent::forward})
    CHECK(discounted_suffix(t, 1, 1.0, e) == 1.0);
  CHECK(parse_discount_exponent(to_string(DiscountExponent::forward)) == DiscountExponent::forward);
}

TEST_CASE("tabular fit stores per-cell means") {
  const std::vector<QLabelRecord> labels{record("s", "a", 1.0), record("s", "a", 0.0), record("s", "b", 0.25)};
  const auto fit = fit_q(labels);
  CHECK(fit.model->predict("s", "a") == 0.5);
  CHECK(fit.model->predict("s", "b") == 0.25);
  CHECK(fit.model->predict("s", "c") == 0.0);
  CHECK(fit.diagnostics.mse == doctest::Approx(0.25 * 2 / 3));
}

TEST_CASE("linear fit recovers a realizable target") {
  const auto features = std::make_shared<PolyFeatures>();
  std::vector<QLabelRecord> labels;
  Rng rng(2);
  for (int i = 0; i < 60; ++i) {
    const std::string s(1 + uniform_index(rng, 50), 'x');
    const std::string a(uniform_index(rng, 30), 'y');
    const auto f = features->features(s, a);
    labels.push_back(record(s, a, 0.3 - 1.5 * f[1] + 0.25 * f[2]));
  }
  FitOptions options;
  options.kind = ModelKind::linear;
  options.features = features;
  const auto fit = fit_q(labels, options);
  CHECK(fit.diagnostics.mse < 1e-10);
  CHECK_FALSE(fit.diagnostics.ridge_applied);
  for (const auto& r : labels) CHECK(fit.model->predict(r.state_text, r.action_text) == doctest::Approx(r.label));
}

TEST_CASE("rank-deficient features fall back to ridge with a warning") {
  FitOptions options;
  options.kind = ModelKind::linear;
  options.features = std::make_shared<DuplicateFeatures>();
  const std::vector<QLabelRecord> labels{record("ab", "a", 2.0), record("abcd", "a", 4.0), record("a", "a", 1.0)};
  const auto fit = fit_q(labels, options);
  CHECK(fit.diagnostics.ridge_applied);
  CHECK_FALSE(fit.diagnostics.warning.empty());
  CHECK(fit.model->predict("abc", "a") == doctest::Approx(3.0).epsilon(1e-4));
}

TEST_CASE("linear fit requires features and labels") {
  FitOptions options;
  options.kind = ModelKind::linear;
  CHECK_THROWS_AS(fit_q(std::vector<QLabelRecord>{record("s", "a", 1.0)}, options), UsageError);
}

TEST_CASE("clamped models stay within bounds") {
  const auto fit = fit_q(std::vector<QLabelRecord>{record("s", "a", 3.0)}, FitOptions{.clamp = ValueClamp{0.0, 1.0}});
  CHECK(fit.model->predict("s", "a") == 1.0);
}

TEST_CASE("label records round-trip") {
  QLabelRecord r = record("P\nstep 1", "step 2 #### 4", 1.0);
  r.method = LabelMethod::fitted_q;
  r.iteration = 3;
  r.gamma = 0.9;
  r.seed = 77;
  r.pool_size = 12;
  r.provenance = "exhaustive";
  const auto line = label_to_json_line(r);
  const auto back = label_from_json_line(line);
  CHECK(back == r);
  CHECK(label_to_json_line(back) == line);
  CHECK(method_name(r) == "fitted_q:3");
  CHECK_THROWS_AS(label_from_json_line("not json"), FormatError);
}

TEST_CASE("model files round-trip") {
  FeatureRegistry registry;
  const auto tab = fit_q(std::vector<QLabelRecord>{record("s", "a", 0.5), record("t", "b", 1.0)}).model;
  const auto text = model_to_text(*tab);
  const auto back = model_from_text(text, registry);
  CHECK(model_to_text(*back) == text);
  CHECK(back->predict("t", "b") == 1.0);

  FitOptions options;
  options.kind = ModelKind::linear;
  options.features = std::make_shared<TextFeatures>();
  std::vector<QLabelRecord> labels;
  for (int i = 0; i < 30; ++i) labels.push_back(record("s" + std::to_string(i), "word" + std::to_string(i % 7), i % 2));
  const auto lin = fit_q(labels, options).model;
  const auto lin_text = model_to_text(*lin);
  const auto lin_back = model_from_text(lin_text, registry);
  CHECK(model_to_text(*lin_back) == lin_text);
  CHECK(lin_back->predict("s3", "word3") == lin->predict("s3", "word3"));

  CHECK_THROWS_AS(model_from_text("{\"format_version\": 1, \"model\": \"linear\", \"feature_set_id\": \"nope\", "
                                  "\"weights\": [1.0]}",
                                  registry),
                  UsageError);
}

TEST_CASE("one fitted-Q iteration on a one-step task learns the outcome rewards") {
  const auto env = generate_env({.kind = EnvKind::arithmetic_chain, .horizon = 1, .branching = 3, .seed = 5, .questions = 2});
  const auto policy = make_tabular_policy(env);
  const auto data = full_coverage(env, policy, 3);
  const auto result = fitted_q_iteration(data, policy, {.iterations = 1, .k = 3});
  REQUIRE(result.history.size() == 1);
  for (std::size_t q = 0; q < env->questions().size(); ++q) {
    for (const auto& option : env->options(q, {})) {
      const double expected = ref_reward(option.text, env->answer(q));
      CHECK(result.model->predict(env->questions()[q]->prompt, option.text) == expected);
    }
  }
  for (const auto& label : result.labels) CHECK(label.method == LabelMethod::fitted_q);
}

TEST_CASE("fitted-Q label deltas vanish once the horizon is covered") {
  const auto env = generate_env({.kind = EnvKind::trap_tree, .horizon = 3, .branching = 2, .seed = 1, .questions = 2});
  const auto policy = make_tabular_policy(env);
  const auto data = full_coverage(env, policy, 2);
  const auto result = fitted_q_iteration(data, policy, {.iterations = 5, .k = 2, .gamma = 0.9});
  REQUIRE(result.history.size() == 5);
  CHECK(result.history[3].max_label_delta == 0.0);
  CHECK(result.history[4].max_label_delta == 0.0);
  CHECK(max_bellman_residual(*result.model, data.pairs(), policy, 2, 0.9) < 1e-12);
}

TEST_CASE("best-of-pool label takes the best suffix") {
  const auto env = generate_env({.kind = EnvKind::trap_tree, .horizon = 2, .branching = 3, .seed = 4});
  const auto policy = make_tabular_policy(env);
  const auto q = env->questions()[0];
  const State root = State::initial(q);
  const auto options = env->options(0, {});
  const StateAction pair{root, Step{options[0].text, SegmentationMode::line(), std::nullopt}};
  std::vector<Trajectory> pool;
  for_each_completion(policy, transition(root, pair.action), 3, [&](const State& s) { pool.push_back(make_trajectory(s)); });
  double expected = 0.0;
  for (const auto& t : pool) expected = std::max(expected, t.total_return);
  CHECK(best_of_pool_label(pair, pool, 1.0, DiscountExponent::as_written) == expected);
}

TEST_CASE("sampled rollout pools are prefix-stable in the budget") {
  const auto env = generate_env({.kind = EnvKind::arithmetic_chain, .horizon = 3, .branching = 3, .seed = 2});
  const auto policy = make_tabular_policy(env, 1.0);
  const auto q = env->questions()[0];
  const StateAction pair{State::initial(q), Step{env->options(0, {})[1].text, SegmentationMode::line(), std::nullopt}};
  const auto small = rollout_pool(pair, 7, policy, {.rollouts_per_pair = 3, .seed = 11});
  const auto large = rollout_pool(pair, 7, policy, {.rollouts_per_pair = 6, .seed = 11});
  REQUIRE(small.size() == 3);
  REQUIRE(large.size() == 6);
  for (std::size_t i = 0; i < small.size(); ++i) CHECK(small[i] == large[i]);
  for (const auto& t : large) CHECK(t.steps.front().text == pair.action.text);
}

TEST_CASE("rollout and completion labels are independent of the job count") {
  const auto env = generate_env({.kind = EnvKind::string_rewrite, .horizon = 3, .branching = 2, .seed = 3, .questions = 3});
  const auto policy = make_tabular_policy(env, 1.0);
  Rng rng(0);
  const auto data = build_rollout_dataset(env->questions(), policy, 3, 1.0, 9);
  CHECK(data.trajectory_count() == 9);
  const auto pairs = data.pairs();
  CHECK(pairs.size() == 27);
  const auto serial = rollout_labels(pairs, policy, {.rollouts_per_pair = 4, .seed = 5, .jobs = 1});
  const auto threaded = rollout_labels(pairs, policy, {.rollouts_per_pair = 4, .seed = 5, .jobs = 4});
  CHECK(serial == threaded);
  const auto c1 = completion_labels(pairs, policy, {.jobs = 1});
  const auto c4 = completion_labels(pairs, policy, {.jobs = 3});
  CHECK(c1 == c4);
}

TEST_CASE("label flipping is deterministic and matches its rate") {
  std::vector<QLabelRecord> labels;
  for (int i = 0; i < 4000; ++i) labels.push_back(record("s" + std::to_string(i), "a", i % 2));
  CHECK(flip_labels(labels, 0.0, 1) == labels);
  const auto all = flip_labels(labels, 1.0, 1);
  for (std::size_t i = 0; i < labels.size(); ++i) CHECK(all[i].label == 1.0 - labels[i].label);
  const auto some = flip_labels(labels, 0.2, 1);
  CHECK(some == flip_labels(labels, 0.2, 1));
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) flipped += some[i].label != labels[i].label;
  CHECK(binomial_z(flipped, labels.size(), 0.2) < 4.5);
}
