#pragma once

#include "qstar/http.hpp"
#include "qstar/policy.hpp"

#include <memory>
#include <semaphore>

namespace qstar {

struct RemoteOptions {
  HttpEndpoint endpoint;
  std::string preamble;                  ///< prepended to every prompt
  double proposal_temperature = 1.0;     ///< temperature of the 2K proposal samples
  std::size_t attempt_budget = 3;        ///< proposal rounds allowed to fill K distinct steps
  std::size_t max_tokens_per_step = 256; ///< line mode cap; fixed mode uses the chunk size
  std::ptrdiff_t max_in_flight = 8;      ///< concurrent requests per adapter
};

/// Completion endpoint speaking
///   request  {prompt, n, temperature, stop, max_tokens}
///   response {choices: [{text, logprob|null}]}
/// One call yields one step: line mode stops at "\n", fixed mode caps max_tokens.
class RemotePolicy final : public Policy {
public:
  explicit RemotePolicy(RemoteOptions options);

  [[nodiscard]] std::string_view kind() const override { return "remote"; }
  [[nodiscard]] bool deterministic_proposals() const override { return false; }
  [[nodiscard]] std::vector<StepCandidate> propose(const State& state, std::size_t k, Rng& rng) const override;
  [[nodiscard]] Step sample_step(const State& state, double temperature, Rng& rng) const override;

  [[nodiscard]] const RemoteOptions& options() const { return options_; }

  /// Endpoint url and token from QSTAR_REMOTE_URL / QSTAR_REMOTE_TOKEN when set.
  static RemoteOptions options_from_env(RemoteOptions base = {});

private:
  struct Choice {
    Step step;
    std::optional<double> logprob;
  };
  [[nodiscard]] std::vector<Choice> complete(const State& state, std::size_t n, double temperature) const;

  RemoteOptions options_;
  std::unique_ptr<std::counting_semaphore<>> in_flight_;
};

} // namespace qstar
