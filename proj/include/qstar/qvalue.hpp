#pragma once

#include "qstar/parallel.hpp"
#include "qstar/policy.hpp"
#include "qstar/qmodel.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace qstar {

// ============================================================================
// Records
// ============================================================================

enum class LabelMethod { fitted_q, rollout, completion };

/// A Q-value training triple with its provenance.
struct QLabelRecord {
  std::string state_text;
  std::string action_text;
  double label = 0.0;
  LabelMethod method = LabelMethod::rollout;
  std::size_t iteration = 0; ///< fitted-Q iteration that produced the label
  double gamma = 1.0;
  std::uint64_t seed = 0;
  std::size_t pool_size = 0; ///< trajectories the label was maximised over
  std::string provenance;    ///< completer id or pool description

  friend bool operator==(const QLabelRecord&, const QLabelRecord&) = default;
};

/// "fitted_q:<l>", "rollout" or "completion".
std::string method_name(const QLabelRecord& record);

/// {format_version, state_text, action_text, label, method, gamma, seed, pool_size, provenance}
std::string label_to_json_line(const QLabelRecord& record);
QLabelRecord label_from_json_line(std::string_view line);

struct StateAction {
  State state;
  Step action;
};

/// M sampled trajectories per question.
struct RolloutDataset {
  struct Entry {
    QuestionPtr question;
    std::vector<Trajectory> trajectories;
  };
  std::vector<Entry> entries;
  double temperature = 1.0;
  std::size_t samples_per_question = 1;
  std::uint64_t seed = 0;
  std::string preset;

  [[nodiscard]] std::size_t trajectory_count() const;
  /// Every (s_t, a_t) along every trajectory, in dataset order (duplicates kept).
  [[nodiscard]] std::vector<StateAction> pairs() const;
};

/// Reward convention of the discounted suffix sum_{t'>t} w(t') R(s_t', a_t').
enum class DiscountExponent {
  as_written, ///< w = gamma^(T - t')
  forward     ///< w = gamma^(t' - t), the reading consistent with the Bellman recursion
};

std::string_view to_string(DiscountExponent exponent);
DiscountExponent parse_discount_exponent(std::string_view text);

/// Discounted suffix return of `trajectory` after 1-based step t.
double discounted_suffix(const Trajectory& trajectory, std::size_t t, double gamma, DiscountExponent exponent);

// ============================================================================
// Regression
// ============================================================================

enum class ModelKind { tabular, linear };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);

struct FitOptions {
  ModelKind kind = ModelKind::tabular;
  std::shared_ptr<const FeatureExtractor> features; ///< required for linear models
  double ridge = 1e-6;                              ///< applied only when features are rank-deficient
  double tolerance = 1e-8;                          ///< gradient norm that ends refinement
  std::size_t max_iterations = 50;
  std::optional<ValueClamp> clamp;
};

struct FitDiagnostics {
  double mse = 0.0;
  std::size_t iterations = 0;
  bool ridge_applied = false;
  std::string warning;
};

struct FitResult {
  std::shared_ptr<const QModel> model;
  FitDiagnostics diagnostics;
};

/// Least-squares fit of Q to the labels. Tabular cells become per-cell label means.
FitResult fit_q(std::span<const QLabelRecord> records, const FitOptions& options = {});

// ============================================================================
// Label construction
// ============================================================================

struct FittedQOptions {
  std::size_t iterations = 1; ///< L
  std::size_t k = 6;          ///< top-K at the successor state
  double gamma = 1.0;
  FitOptions fit;
  std::uint64_t seed = 0; ///< for sampling adapters' top-K proposals
};

struct FittedQIteration {
  std::size_t iteration = 0;
  double max_label_delta = 0.0; ///< max |y_l - y_{l-1}| over pairs (y_0 = 0)
  FitDiagnostics fit;
};

struct FittedQResult {
  std::shared_ptr<const QModel> model; ///< Q-hat_L
  std::vector<QLabelRecord> labels;    ///< labels of the final iteration
  std::vector<FittedQIteration> history;
};

/// Alternates Bellman-backup labelling and regression L times starting from Q-hat_0 = 0.
FittedQResult fitted_q_iteration(const RolloutDataset& data, const PolicyHandle& policy, const FittedQOptions& options);

enum class PoolKind {
  sampled,   ///< rollouts_per_pair seeded samples from the policy
  exhaustive ///< every top-k-restricted continuation (deterministic policies only)
};

struct RolloutOptions {
  std::size_t rollouts_per_pair = 8;
  double gamma = 1.0;
  std::uint64_t seed = 0;
  std::optional<double> temperature; ///< defaults to the handle's temperature
  PoolKind pool = PoolKind::sampled;
  std::size_t exhaustive_k = 6;
  DiscountExponent exponent = DiscountExponent::as_written;
  std::size_t jobs = 1;
};

/// Label of one pair from an explicit trajectory pool: R(s_t, a_t) plus the best discounted
/// suffix return among `pool`. Each pool trajectory must extend [s_t; a_t].
double best_of_pool_label(const StateAction& pair, std::span<const Trajectory> pool, double gamma,
                          DiscountExponent exponent);

/// The pool of pair `index` under `options`. Rollout j uses seed derive_seed(seed, {index, j}),
/// so a larger budget extends a smaller one.
std::vector<Trajectory> rollout_pool(const StateAction& pair, std::size_t index, const PolicyHandle& policy,
                                     const RolloutOptions& options);

std::vector<QLabelRecord> rollout_labels(std::span<const StateAction> pairs, const PolicyHandle& policy,
                                         const RolloutOptions& options);

struct CompletionOptions {
  double gamma = 1.0;
  DiscountExponent exponent = DiscountExponent::as_written;
  std::string completer_id = "strong";
  std::size_t jobs = 1;
};

/// Completes [s_t; a_t] greedily with `strong_policy` and sums the discounted rewards.
std::vector<QLabelRecord> completion_labels(std::span<const StateAction> pairs, const PolicyHandle& strong_policy,
                                            const CompletionOptions& options);

/// Samples M trajectories per question; sample j of question i uses seed derive_seed(seed, {i, j}).
RolloutDataset build_rollout_dataset(std::span<const QuestionPtr> questions, const PolicyHandle& policy,
                                     std::size_t samples_per_question, double temperature, std::uint64_t seed,
                                     std::string preset = {});

/// Flips each {0,1} label with probability `rate`, deterministically per (state, action) and seed.
std::vector<QLabelRecord> flip_labels(std::span<const QLabelRecord> records, double rate, std::uint64_t seed);

/// max |Q(s,a) - (R(s,a) + gamma * max_{a' in top-k(s')} Q(s',a'))| over the pairs.
double max_bellman_residual(const QModel& model, std::span<const StateAction> pairs, const PolicyHandle& policy,
                            std::size_t k, double gamma);

} // namespace qstar
