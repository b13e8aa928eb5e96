#pragma once

// Test-side reference implementations. They read only an environment's option lists and
// answers and recompute everything else directly, without the library's search, oracle or
// labelling code.

#include "qstar/envs.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <unistd.h>

namespace qstar::testing {

/// Options at a node sorted by probability (descending) then text, truncated to k.
inline std::vector<WeightedStep> ref_top_k(std::vector<WeightedStep> options, std::size_t k) {
  std::sort(options.begin(), options.end(), [](const WeightedStep& a, const WeightedStep& b) {
    return a.probability != b.probability ? a.probability > b.probability : a.text < b.text;
  });
  if (options.size() > k) options.resize(k);
  return options;
}

inline std::string ref_state_text(const std::string& prompt, const std::vector<std::string>& steps) {
  std::string text = prompt;
  for (std::size_t i = 0; i < steps.size(); ++i) text += "\n" + steps[i];
  return text;
}

/// 1 when the text after the last "####" equals the expected answer.
inline double ref_reward(const std::string& step, const std::string& answer) {
  const auto pos = step.rfind("####");
  if (pos == std::string::npos) return 0.0;
  std::string tail = step.substr(pos + 4);
  const auto first = tail.find_first_not_of(' ');
  const auto last = tail.find_last_not_of(' ');
  tail = first == std::string::npos ? "" : tail.substr(first, last - first + 1);
  return tail == answer ? 1.0 : 0.0;
}

struct RefLeaf {
  std::vector<std::string> steps;
  double reward = 0.0;
};

/// Every leaf of the top-k-restricted tree of question q.
inline std::vector<RefLeaf> ref_leaves(const SyntheticEnv& env, std::size_t q, std::size_t k) {
  std::vector<RefLeaf> out;
  std::vector<std::size_t> path;
  std::vector<std::string> texts;
  std::function<void()> visit = [&] {
    const auto all = env.options(q, path);
    const auto top = ref_top_k(all, k);
    for (const auto& option : top) {
      const auto index = static_cast<std::size_t>(
          std::find_if(all.begin(), all.end(), [&](const WeightedStep& w) { return w.text == option.text; }) -
          all.begin());
      path.push_back(index);
      texts.push_back(option.text);
      if (path.size() == env.spec().horizon)
        out.push_back({texts, ref_reward(option.text, env.answer(q))});
      else
        visit();
      path.pop_back();
      texts.pop_back();
    }
  };
  visit();
  return out;
}

inline double ref_max_return(const SyntheticEnv& env, std::size_t q, std::size_t k) {
  double best = 0.0;
  for (const auto& leaf : ref_leaves(env, q, k)) best = std::max(best, leaf.reward);
  return best;
}

using RefQ = std::map<std::pair<std::string, std::string>, double>;

/// Q*(s, a) = R(s, a) + gamma * max_{a'} Q*(s', a') by direct backward recursion.
inline RefQ ref_optimal_q(const SyntheticEnv& env, std::size_t k, double gamma) {
  RefQ table;
  for (std::size_t q = 0; q < env.questions().size(); ++q) {
    const auto& prompt = env.questions()[q]->prompt;
    std::vector<std::size_t> path;
    std::vector<std::string> texts;
    std::function<double()> value = [&]() -> double {
      const auto all = env.options(q, path);
      double best = -1e300;
      for (const auto& option : ref_top_k(all, k)) {
        const auto index = static_cast<std::size_t>(
            std::find_if(all.begin(), all.end(), [&](const WeightedStep& w) { return w.text == option.text; }) -
            all.begin());
        const std::string state = ref_state_text(prompt, texts);
        double qv = 0.0;
        if (path.size() + 1 == env.spec().horizon) {
          qv = ref_reward(option.text, env.answer(q));
        } else {
          path.push_back(index);
          texts.push_back(option.text);
          qv = gamma * value();
          path.pop_back();
          texts.pop_back();
        }
        table[{state, option.text}] = qv;
        best = std::max(best, qv);
      }
      return best;
    };
    value();
  }
  return table;
}

/// Writes into a fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("qstar_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
  std::filesystem::path path_;
};

/// Local HTTP server answering POSTs from a script of (status, body) replies.
/// Once the script runs out the last reply repeats.
class MockServer {
public:
  struct Reply {
    int status = 200;
    nlohmann::json body;
  };

  MockServer(std::initializer_list<Reply> script) : script_(script) {
    server_.Post(".*", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      requests_.push_back(nlohmann::json::parse(req.body));
      authorization_.push_back(req.get_header_value("Authorization"));
      const Reply& reply = script_[std::min(next_++, script_.size() - 1)];
      res.status = reply.status;
      res.set_content(reply.body.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  [[nodiscard]] std::string url(const std::string& path = "/v1/completions") const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }

  [[nodiscard]] std::size_t hits() const {
    std::lock_guard lock(mutex_);
    return requests_.size();
  }

  [[nodiscard]] std::vector<nlohmann::json> requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }

  [[nodiscard]] std::vector<std::string> authorization() const {
    std::lock_guard lock(mutex_);
    return authorization_;
  }

private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::vector<Reply> script_;
  std::size_t next_ = 0;
  mutable std::mutex mutex_;
  std::vector<nlohmann::json> requests_;
  std::vector<std::string> authorization_;
};

/// choices reply of a completion endpoint.
inline nlohmann::json completion(std::vector<std::pair<std::string, std::optional<double>>> choices) {
  nlohmann::json out{{"choices", nlohmann::json::array()}};
  for (auto& [text, logprob] : choices)
    out["choices"].push_back({{"text", text}, {"logprob", logprob ? nlohmann::json(*logprob) : nlohmann::json()}});
  return out;
}

/// Deterministic pseudo-random Q values in [0, 1), keyed by text.
class HashQ final : public QModel {
public:
  explicit HashQ(std::uint64_t salt) : salt_(salt) {}
  [[nodiscard]] std::string_view kind() const override { return "hash"; }
  [[nodiscard]] double predict(std::string_view s, std::string_view a) const override {
    const auto h = splitmix64(hash_string(s) ^ splitmix64(hash_string(a) + salt_));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  [[nodiscard]] nlohmann::ordered_json to_json() const override { return {}; }

private:
  std::uint64_t salt_;
};

/// Two-sided binomial test statistic |k - n p| / sqrt(n p (1 - p)).
inline double binomial_z(std::size_t k, std::size_t n, double p) {
  const double mean = static_cast<double>(n) * p;
  return std::abs(static_cast<double>(k) - mean) / std::sqrt(mean * (1.0 - p));
}

} // namespace qstar::testing
