#include "qstar/ngram_policy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace qstar {

namespace {

constexpr std::string_view kBegin = "<s>";
constexpr std::string_view kNewline = "<nl>";
constexpr std::string_view kEnd = "</s>";

std::vector<std::string> words_of(std::string_view line) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const auto start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) words.emplace_back(line.substr(start, i - start));
  }
  return words;
}

/// Word and newline tokens of free text; one <nl> per '\n'.
std::vector<std::string> text_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '\n') {
      out.emplace_back(kNewline);
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
    } else {
      const auto start = i;
      while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      out.emplace_back(text.substr(start, i - start));
    }
  }
  return out;
}

std::string join_context(std::span<const std::string> tokens) {
  std::string key;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) key.push_back('\x1f');
    key += tokens[i];
  }
  return key;
}

} // namespace

std::shared_ptr<const NgramPolicy> NgramPolicy::train(std::span<const std::string> documents, NgramOptions options) {
  if (options.order == 0) throw UsageError("n-gram order must be >= 1");
  if (documents.empty()) throw UsageError("n-gram policy needs at least one training document");
  std::shared_ptr<NgramPolicy> policy(new NgramPolicy(options));
  const std::size_t history = options.order - 1;
  for (const auto& doc : documents) {
    std::vector<std::string> tokens(history, std::string(kBegin));
    std::size_t start = 0;
    while (start <= doc.size()) {
      auto nl = doc.find('\n', start);
      if (nl == std::string::npos) nl = doc.size();
      for (auto& w : words_of(std::string_view(doc).substr(start, nl - start))) tokens.push_back(std::move(w));
      tokens.emplace_back(kNewline);
      start = nl + 1;
    }
    tokens.emplace_back(kEnd);
    for (std::size_t i = history; i < tokens.size(); ++i) {
      for (std::size_t c = 0; c <= history; ++c) {
        const auto key = join_context(std::span(tokens).subspan(i - c, c));
        ++policy->table_[key][tokens[i]];
      }
    }
  }
  return policy;
}

std::vector<std::string> NgramPolicy::context_of(const State& state) const {
  std::vector<std::string> tokens(options_.order - 1, std::string(kBegin));
  if (state.rules().mode.kind == SegmentationMode::Kind::line) {
    for (const auto& step : state.steps()) {
      for (auto& w : words_of(step.text)) tokens.push_back(std::move(w));
      tokens.emplace_back(kNewline);
    }
  } else {
    for (auto& t : text_tokens(state.body())) tokens.push_back(std::move(t));
  }
  return tokens;
}

const NgramPolicy::Counts& NgramPolicy::distribution(const std::vector<std::string>& history) const {
  const std::size_t longest = std::min(options_.order - 1, history.size());
  for (std::size_t c = longest + 1; c-- > 0;) {
    const auto key = join_context(std::span(history).subspan(history.size() - c, c));
    auto it = table_.find(key);
    if (it != table_.end() && !it->second.empty()) return it->second;
  }
  // The empty context always exists after training.
  return table_.at("");
}

std::string NgramPolicy::draw(const std::vector<std::string>& history, double temperature, Rng& rng,
                              double& logprob) const {
  const auto& counts = distribution(history);
  std::vector<double> logs;
  std::vector<const std::string*> tokens;
  double total = 0.0;
  for (const auto& [token, count] : counts) {
    logs.push_back(std::log(static_cast<double>(count)));
    tokens.push_back(&token);
    total += static_cast<double>(count);
  }
  const auto i = sample_tempered(logs, temperature, rng);
  logprob += logs[i] - std::log(total);
  return *tokens[i];
}

Step NgramPolicy::sample_step(const State& state, double temperature, Rng& rng) const {
  const auto mode = state.rules().mode;
  const auto& eos = state.rules().eos_token;
  auto history = context_of(state);
  double logprob = 0.0;
  std::string text;

  if (mode.kind == SegmentationMode::Kind::line) {
    std::vector<std::string> words;
    bool ended = false;
    while (words.size() < options_.max_tokens_per_step) {
      auto token = draw(history, temperature, rng, logprob);
      if (token == kNewline) break;
      if (token == kEnd) {
        ended = true;
        break;
      }
      history.push_back(token);
      words.push_back(std::move(token));
    }
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) text.push_back(' ');
      text += words[i];
    }
    if (ended) text += text.empty() ? eos : " " + eos;
    return Step{std::move(text), mode, logprob};
  }

  std::string prefix = state.depth() == 0 ? "" : " ";
  std::size_t count = 0;
  std::size_t draws = 0;
  while (count < mode.tokens && draws++ < 4 * mode.tokens + 8) {
    auto token = draw(history, temperature, rng, logprob);
    if (token == kNewline) {
      prefix = "\n";
      history.push_back(std::move(token));
      continue;
    }
    if (token == kEnd) {
      text += (text.empty() && state.depth() == 0 ? "" : prefix) + eos;
      break;
    }
    text += prefix + token;
    prefix = " ";
    history.push_back(std::move(token));
    ++count;
  }
  if (text.empty()) text = eos;
  return Step{std::move(text), mode, logprob};
}

std::vector<StepCandidate> NgramPolicy::propose(const State& state, std::size_t k, Rng& rng) const {
  struct Seen {
    Step step;
    std::size_t arrival;
  };
  std::vector<Seen> distinct;
  for (std::size_t round = 0; round < std::max<std::size_t>(1, options_.attempt_budget) && distinct.size() < k; ++round) {
    for (std::size_t i = 0; i < 2 * k; ++i) {
      auto step = sample_step(state, options_.proposal_temperature, rng);
      const bool known = std::any_of(distinct.begin(), distinct.end(), [&](const Seen& s) { return s.step.text == step.text; });
      if (!known) distinct.push_back({std::move(step), distinct.size()});
    }
  }
  std::stable_sort(distinct.begin(), distinct.end(),
                   [](const Seen& a, const Seen& b) { return *a.step.logprob > *b.step.logprob; });
  std::vector<StepCandidate> out;
  for (std::size_t i = 0; i < std::min(k, distinct.size()); ++i)
    out.push_back({distinct[i].step, *distinct[i].step.logprob, i});
  if (out.empty()) throw ExhaustedSupport("n-gram policy produced no proposals");
  return out;
}

} // namespace qstar
