#pragma once

#include "qstar/policy.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace qstar {

struct NgramOptions {
  std::size_t order = 2;                ///< n; contexts hold n-1 tokens
  std::size_t max_tokens_per_step = 64; ///< hard cap on words per line-mode step
  double proposal_temperature = 1.0;    ///< temperature used when proposing top-K
  std::size_t attempt_budget = 4;       ///< sampling rounds allowed to fill K distinct proposals
};

/// Word-level n-gram generator with backoff to shorter contexts. Trained once, then
/// immutable. Documents are solution bodies; lines become steps.
class NgramPolicy final : public Policy {
public:
  static std::shared_ptr<const NgramPolicy> train(std::span<const std::string> documents, NgramOptions options = {});

  [[nodiscard]] std::string_view kind() const override { return "ngram"; }
  [[nodiscard]] bool deterministic_proposals() const override { return false; }
  [[nodiscard]] std::vector<StepCandidate> propose(const State& state, std::size_t k, Rng& rng) const override;
  [[nodiscard]] Step sample_step(const State& state, double temperature, Rng& rng) const override;

  [[nodiscard]] const NgramOptions& options() const { return options_; }

private:
  using Counts = std::map<std::string, std::size_t>;

  explicit NgramPolicy(NgramOptions options) : options_(options) {}

  [[nodiscard]] std::vector<std::string> context_of(const State& state) const;
  [[nodiscard]] const Counts& distribution(const std::vector<std::string>& history) const;
  /// Samples one token; adds its log-probability to `logprob`.
  std::string draw(const std::vector<std::string>& history, double temperature, Rng& rng, double& logprob) const;

  NgramOptions options_;
  /// context (joined with '\x1f') -> next-token counts, for every context length 0..n-1
  std::map<std::string, Counts> table_;
};

} // namespace qstar
