#pragma once

#include "qstar/http.hpp"
#include "qstar/mdp.hpp"

#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>

namespace qstar {

/// Aggregation over the process rewards of a path prefix. `last` keeps only the final reward.
enum class AggKind { min, max, sum, last };

std::string_view to_string(AggKind agg);
AggKind parse_agg(std::string_view text);

/// min / max / left-to-right sum / last element. Throws EmptyPath on an empty sequence.
double aggregate(std::span<const double> rewards, AggKind agg);

/// Running aggregate along a path. Extending one reward at a time gives exactly the
/// value aggregate() computes over the whole prefix.
class UtilityAccumulator {
public:
  explicit UtilityAccumulator(AggKind agg) : agg_(agg) {}

  [[nodiscard]] UtilityAccumulator extended(double reward) const;
  [[nodiscard]] double value() const;
  [[nodiscard]] std::size_t count() const { return count_; }
  [[nodiscard]] AggKind agg() const { return agg_; }

private:
  AggKind agg_;
  double value_ = 0.0;
  std::size_t count_ = 0;
};

/// Concurrent score cache keyed by the SHA-256 of the scored text. First write per key wins.
class ScoreCache {
public:
  [[nodiscard]] std::optional<double> find(const std::string& key) const;
  void insert(const std::string& key, double score);
  [[nodiscard]] std::size_t size() const;

  /// JSON lines {"key": ..., "score": ...}, sorted by key.
  void save(const std::string& path) const;
  static std::shared_ptr<ScoreCache> load(const std::string& path);

private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, double> scores_;
};

/// R_P: per-state process reward.
class ProcessReward {
public:
  enum class Kind { constant, confidence, code_delimiter_penalty, external_scorer };

  static ProcessReward constant(double value);
  /// Log-probability stored on the state's last step (0 for s_1 or unscored steps).
  static ProcessReward confidence();
  /// `penalty` when the code so far has unbalanced delimiters or inconsistent indentation.
  static ProcessReward code_delimiter_penalty(double penalty = -0.5);
  /// POSTs {state_text} and reads {score}; answers are cached by content hash.
  static ProcessReward external_scorer(HttpEndpoint endpoint, std::shared_ptr<ScoreCache> cache);

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] double parameter() const { return parameter_; }
  [[nodiscard]] double operator()(const State& state) const;

private:
  Kind kind_ = Kind::constant;
  double parameter_ = 0.0;
  HttpEndpoint endpoint_;
  std::shared_ptr<ScoreCache> cache_;
};

inline double process_reward(const ProcessReward& fn, const State& state) { return fn(state); }

/// g(s_t) = Agg(R_P(s_1), ..., R_P(s_t)) recomputed over every prefix of `state`.
double g_value(const ProcessReward& fn, AggKind agg, const State& state);

struct UtilityConfig {
  ProcessReward reward = ProcessReward::constant(0.0);
  AggKind agg = AggKind::last;
};

/// Incremental scanner approximating Python's tokenizer: false when a bracket is closed by the
/// wrong kind, a bracket or string is left open at the end, a single-quoted string runs past
/// its line, or a dedent matches no enclosing indentation level.
bool code_prefix_well_formed(std::string_view code);

} // namespace qstar
