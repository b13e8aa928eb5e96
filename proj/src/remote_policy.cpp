#include "qstar/remote_policy.hpp"

#include <algorithm>
#include <cstdlib>

namespace qstar {

RemotePolicy::RemotePolicy(RemoteOptions options)
    : options_(std::move(options)),
      in_flight_(std::make_unique<std::counting_semaphore<>>(std::max<std::ptrdiff_t>(1, options_.max_in_flight))) {
  if (options_.endpoint.url.empty()) throw UsageError("remote policy needs an endpoint url");
}

RemoteOptions RemotePolicy::options_from_env(RemoteOptions base) {
  if (const char* url = std::getenv("QSTAR_REMOTE_URL"); url && *url) base.endpoint.url = url;
  if (const char* token = std::getenv("QSTAR_REMOTE_TOKEN"); token && *token) base.endpoint.auth_token = token;
  return base;
}

std::vector<RemotePolicy::Choice> RemotePolicy::complete(const State& state, std::size_t n, double temperature) const {
  const auto mode = state.rules().mode;
  const bool line = mode.kind == SegmentationMode::Kind::line;
  nlohmann::json request{
      {"prompt", options_.preamble + state.text() + std::string(state.depth() == 0 ? "\n" : std::string(mode.separator()))},
      {"n", n},
      {"temperature", temperature},
      {"stop", line ? nlohmann::json::array({"\n"}) : nlohmann::json::array()},
      {"max_tokens", line ? options_.max_tokens_per_step : mode.tokens},
  };
  nlohmann::json response;
  in_flight_->acquire();
  try {
    response = post_json(options_.endpoint, request);
  } catch (const TransportError& e) {
    in_flight_->release();
    throw PolicyUnavailable(e.what());
  } catch (...) {
    in_flight_->release();
    throw;
  }
  in_flight_->release();

  std::vector<Choice> out;
  try {
    for (const auto& choice : response.at("choices")) {
      std::string text = choice.at("text").get<std::string>();
      if (line) {
        // Servers that ignore `stop` still yield one step.
        if (auto nl = text.find('\n'); nl != std::string::npos) text.resize(nl);
      } else {
        auto tokens = whitespace_tokenizer().tokenize(text);
        if (tokens.size() > mode.tokens) {
          text.clear();
          for (std::size_t i = 0; i < mode.tokens; ++i) text += tokens[i];
        }
      }
      std::optional<double> logprob;
      if (auto it = choice.find("logprob"); it != choice.end() && !it->is_null()) logprob = it->get<double>();
      out.push_back({Step{std::move(text), mode, logprob}, logprob});
    }
  } catch (const nlohmann::json::exception& e) {
    throw PolicyUnavailable(std::string("malformed completion response: ") + e.what());
  }
  return out;
}

Step RemotePolicy::sample_step(const State& state, double temperature, Rng&) const {
  auto choices = complete(state, 1, temperature);
  if (choices.empty()) throw PolicyUnavailable("completion response has no choices");
  return std::move(choices.front().step);
}

std::vector<StepCandidate> RemotePolicy::propose(const State& state, std::size_t k, Rng&) const {
  std::vector<Choice> distinct;
  for (std::size_t round = 0; round < std::max<std::size_t>(1, options_.attempt_budget) && distinct.size() < k; ++round) {
    for (auto& c : complete(state, 2 * k, options_.proposal_temperature)) {
      const bool known = std::any_of(distinct.begin(), distinct.end(),
                                     [&](const Choice& d) { return d.step.text == c.step.text; });
      if (!known) distinct.push_back(std::move(c));
    }
  }
  // Scored choices first by log-probability; unscored ones keep arrival order after them.
  std::stable_sort(distinct.begin(), distinct.end(), [](const Choice& a, const Choice& b) {
    if (a.logprob.has_value() != b.logprob.has_value()) return a.logprob.has_value();
    return a.logprob && *a.logprob > *b.logprob;
  });
  std::vector<StepCandidate> out;
  for (std::size_t i = 0; i < std::min(k, distinct.size()); ++i) {
    const double score = distinct[i].logprob ? *distinct[i].logprob : (out.empty() ? 0.0 : out.back().score);
    out.push_back({distinct[i].step, score, i});
  }
  if (out.empty()) throw ExhaustedSupport("remote policy returned no proposals");
  return out;
}

} // namespace qstar
