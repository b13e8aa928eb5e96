#include "qstar/utility.hpp"

#include "qstar/hash.hpp"

#include <algorithm>
#include <fstream>
#include <mutex>
#include <vector>

namespace qstar {

std::string_view to_string(AggKind agg) {
  switch (agg) {
  case AggKind::min: return "min";
  case AggKind::max: return "max";
  case AggKind::sum: return "sum";
  case AggKind::last: return "last";
  }
  return "last";
}

AggKind parse_agg(std::string_view text) {
  if (text == "min") return AggKind::min;
  if (text == "max") return AggKind::max;
  if (text == "sum") return AggKind::sum;
  if (text == "last" || text == "[-1]") return AggKind::last;
  throw UsageError("unknown aggregation '" + std::string(text) + "'");
}

double aggregate(std::span<const double> rewards, AggKind agg) {
  if (rewards.empty()) throw EmptyPath();
  switch (agg) {
  case AggKind::min: return *std::min_element(rewards.begin(), rewards.end());
  case AggKind::max: return *std::max_element(rewards.begin(), rewards.end());
  case AggKind::sum: {
    double total = 0.0;
    for (double r : rewards) total += r;
    return total;
  }
  case AggKind::last: return rewards.back();
  }
  return rewards.back();
}

UtilityAccumulator UtilityAccumulator::extended(double reward) const {
  UtilityAccumulator next = *this;
  if (count_ == 0) {
    next.value_ = agg_ == AggKind::sum ? 0.0 + reward : reward;
  } else {
    switch (agg_) {
    case AggKind::min: next.value_ = std::min(value_, reward); break;
    case AggKind::max: next.value_ = std::max(value_, reward); break;
    case AggKind::sum: next.value_ = value_ + reward; break;
    case AggKind::last: next.value_ = reward; break;
    }
  }
  ++next.count_;
  return next;
}

double UtilityAccumulator::value() const {
  if (count_ == 0) throw EmptyPath();
  return value_;
}

// ----------------------------------------------------------------------------
// Score cache
// ----------------------------------------------------------------------------

std::optional<double> ScoreCache::find(const std::string& key) const {
  std::shared_lock lock(mutex_);
  auto it = scores_.find(key);
  if (it == scores_.end()) return std::nullopt;
  return it->second;
}

void ScoreCache::insert(const std::string& key, double score) {
  std::unique_lock lock(mutex_);
  scores_.try_emplace(key, score);
}

std::size_t ScoreCache::size() const {
  std::shared_lock lock(mutex_);
  return scores_.size();
}

void ScoreCache::save(const std::string& path) const {
  std::shared_lock lock(mutex_);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write score cache " + path);
  for (const auto& [key, score] : scores_) {
    nlohmann::ordered_json j;
    j["key"] = key;
    j["score"] = score;
    out << j.dump() << '\n';
  }
}

std::shared_ptr<ScoreCache> ScoreCache::load(const std::string& path) {
  auto cache = std::make_shared<ScoreCache>();
  std::ifstream in(path, std::ios::binary);
  if (!in) return cache;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      cache->insert(j.at("key").get<std::string>(), j.at("score").get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed score cache line in " + path + ": " + e.what());
    }
  }
  return cache;
}

// ----------------------------------------------------------------------------
// Process rewards
// ----------------------------------------------------------------------------

ProcessReward ProcessReward::constant(double value) {
  ProcessReward r;
  r.kind_ = Kind::constant;
  r.parameter_ = value;
  return r;
}

ProcessReward ProcessReward::confidence() {
  ProcessReward r;
  r.kind_ = Kind::confidence;
  return r;
}

ProcessReward ProcessReward::code_delimiter_penalty(double penalty) {
  ProcessReward r;
  r.kind_ = Kind::code_delimiter_penalty;
  r.parameter_ = penalty;
  return r;
}

ProcessReward ProcessReward::external_scorer(HttpEndpoint endpoint, std::shared_ptr<ScoreCache> cache) {
  ProcessReward r;
  r.kind_ = Kind::external_scorer;
  r.endpoint_ = std::move(endpoint);
  r.cache_ = cache ? std::move(cache) : std::make_shared<ScoreCache>();
  return r;
}

double ProcessReward::operator()(const State& state) const {
  switch (kind_) {
  case Kind::constant: return parameter_;
  case Kind::confidence: {
    const Step* last = state.last_step();
    return last && last->logprob ? *last->logprob : 0.0;
  }
  case Kind::code_delimiter_penalty: return code_prefix_well_formed(state.body()) ? 0.0 : parameter_;
  case Kind::external_scorer: {
    const auto key = sha256_hex(state.text());
    if (auto hit = cache_->find(key)) return *hit;
    double score = 0.0;
    try {
      const auto reply = post_json(endpoint_, nlohmann::json{{"state_text", state.text()}});
      score = reply.at("score").get<double>();
    } catch (const TransportError& e) {
      throw ScorerUnavailable(e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ScorerUnavailable(std::string("malformed scorer response: ") + e.what());
    }
    cache_->insert(key, score);
    return *cache_->find(key);
  }
  }
  return 0.0;
}

double g_value(const ProcessReward& fn, AggKind agg, const State& state) {
  std::vector<double> rewards;
  rewards.reserve(state.depth() + 1);
  State prefix = State::initial(state.question_ptr());
  rewards.push_back(fn(prefix));
  for (const auto& step : state.steps()) {
    prefix = transition(prefix, step);
    rewards.push_back(fn(prefix));
  }
  return aggregate(rewards, agg);
}

// ----------------------------------------------------------------------------
// Code prefix scanner
// ----------------------------------------------------------------------------

bool code_prefix_well_formed(std::string_view code) {
  std::vector<char> brackets;
  std::vector<int> indents{0};
  char quote = 0;
  bool triple = false;
  bool continuation = false;

  std::size_t start = 0;
  while (start <= code.size()) {
    auto end = code.find('\n', start);
    if (end == std::string_view::npos) end = code.size();
    const std::string_view line = code.substr(start, end - start);
    std::size_t i = 0;

    if (brackets.empty() && quote == 0 && !continuation) {
      int column = 0;
      for (; i < line.size(); ++i) {
        if (line[i] == ' ')
          ++column;
        else if (line[i] == '\t')
          column = (column / 8 + 1) * 8;
        else if (line[i] == '\f')
          column = 0;
        else
          break;
      }
      const bool blank = i == line.size() || line[i] == '#' || line[i] == '\r';
      if (!blank) {
        if (column > indents.back()) {
          indents.push_back(column);
        } else {
          while (column < indents.back()) indents.pop_back();
          if (column != indents.back()) return false;
        }
      }
    }

    continuation = false;
    bool string_continues = false;
    while (i < line.size()) {
      const char c = line[i];
      if (quote != 0) {
        if (c == '\\') {
          if (i + 1 == line.size()) string_continues = true;
          i += 2;
          continue;
        }
        if (triple) {
          if (line.substr(i, 3) == std::string(3, quote)) {
            quote = 0;
            i += 3;
            continue;
          }
        } else if (c == quote) {
          quote = 0;
        }
        ++i;
        continue;
      }
      if (c == '#') break;
      if (c == '\'' || c == '"') {
        if (line.substr(i, 3) == std::string(3, c)) {
          quote = c;
          triple = true;
          i += 3;
        } else {
          quote = c;
          triple = false;
          ++i;
        }
        continue;
      }
      if (c == '(' || c == '[' || c == '{') {
        brackets.push_back(c);
      } else if (c == ')' || c == ']' || c == '}') {
        const char open = c == ')' ? '(' : c == ']' ? '[' : '{';
        if (brackets.empty() || brackets.back() != open) return false;
        brackets.pop_back();
      } else if (c == '\\' && i + 1 == line.size()) {
        continuation = true;
      }
      ++i;
    }
    if (quote != 0 && !triple && !string_continues) return false;
    start = end + 1;
  }
  return brackets.empty() && quote == 0 && !continuation;
}

} // namespace qstar
