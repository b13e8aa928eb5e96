#include "qstar/mdp.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

extern char** environ;

namespace qstar {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

} // namespace

// ----------------------------------------------------------------------------
// Segmentation
// ----------------------------------------------------------------------------

SegmentationMode SegmentationMode::fixed_tokens(std::size_t n) {
  if (n == 0) throw UsageError("fixed_tokens segmentation needs n >= 1");
  return {Kind::fixed_tokens, n};
}

std::string SegmentationMode::to_string() const {
  return kind == Kind::line ? std::string("line") : "fixed_tokens:" + std::to_string(tokens);
}

SegmentationMode SegmentationMode::parse(std::string_view text) {
  if (text == "line") return line();
  constexpr std::string_view prefix = "fixed_tokens:";
  if (text.starts_with(prefix)) {
    auto digits = text.substr(prefix.size());
    std::size_t n = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
    if (ec == std::errc() && ptr == digits.data() + digits.size()) return fixed_tokens(n);
  }
  throw UsageError("unknown segmentation mode '" + std::string(text) + "'");
}

std::vector<std::string> WhitespaceTokenizer::tokenize(std::string_view text) const {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    while (i < text.size() && is_space(text[i])) ++i;
    if (i == text.size()) {
      // Whitespace-only tail joins the previous token.
      if (tokens.empty())
        tokens.emplace_back(text.substr(start));
      else
        tokens.back().append(text.substr(start));
      break;
    }
    while (i < text.size() && !is_space(text[i])) ++i;
    tokens.emplace_back(text.substr(start, i - start));
  }
  return tokens;
}

const Tokenizer& whitespace_tokenizer() {
  static const WhitespaceTokenizer tokenizer;
  return tokenizer;
}

void validate_step(const Step& step, const Tokenizer& tokenizer) {
  if (step.mode.kind == SegmentationMode::Kind::line) {
    if (step.text.find('\n') != std::string::npos)
      throw UsageError("line-mode step contains a newline");
  } else if (tokenizer.tokenize(step.text).size() > step.mode.tokens) {
    throw UsageError("step exceeds its token budget of " + std::to_string(step.mode.tokens));
  }
}

std::vector<Step> split_into_steps(std::string_view text, SegmentationMode mode, const Tokenizer& tokenizer) {
  if (text.empty()) throw EmptyInput();
  std::vector<Step> steps;
  if (mode.kind == SegmentationMode::Kind::line) {
    std::size_t start = 0;
    while (true) {
      const auto nl = text.find('\n', start);
      if (nl == std::string_view::npos) {
        steps.push_back({std::string(text.substr(start)), mode, std::nullopt});
        break;
      }
      steps.push_back({std::string(text.substr(start, nl - start)), mode, std::nullopt});
      start = nl + 1;
    }
    return steps;
  }
  if (mode.tokens == 0) throw UsageError("fixed_tokens segmentation needs n >= 1");
  const auto tokens = tokenizer.tokenize(text);
  for (std::size_t i = 0; i < tokens.size(); i += mode.tokens) {
    std::string chunk;
    for (std::size_t j = i; j < std::min(tokens.size(), i + mode.tokens); ++j) chunk += tokens[j];
    steps.push_back({std::move(chunk), mode, std::nullopt});
  }
  return steps;
}

std::string join_steps(std::span<const Step> steps, SegmentationMode mode) {
  std::string out;
  const auto sep = mode.separator();
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (i > 0) out.append(sep);
    out.append(steps[i].text);
  }
  return out;
}

std::string_view to_string(TerminalReason reason) {
  switch (reason) {
  case TerminalReason::none: return "none";
  case TerminalReason::answer: return "answer";
  case TerminalReason::eos: return "eos";
  case TerminalReason::budget: return "budget";
  }
  return "none";
}

TerminalReason parse_terminal_reason(std::string_view text) {
  if (text == "none") return TerminalReason::none;
  if (text == "answer") return TerminalReason::answer;
  if (text == "eos") return TerminalReason::eos;
  if (text == "budget") return TerminalReason::budget;
  throw FormatError("unknown terminal reason '" + std::string(text) + "'");
}

// ----------------------------------------------------------------------------
// Answer checking
// ----------------------------------------------------------------------------

std::optional<double> parse_numeral(std::string_view text) {
  text = trim(text);
  if (!text.empty() && text.front() == '$') text.remove_prefix(1);
  std::string cleaned;
  for (char c : text)
    if (c != ',') cleaned.push_back(c);
  if (cleaned.empty()) return std::nullopt;
  char* end = nullptr;
  const double value = std::strtod(cleaned.c_str(), &end);
  if (end != cleaned.c_str() + cleaned.size() || !std::isfinite(value)) return std::nullopt;
  return value;
}

AnswerChecker AnswerChecker::exact_numeric(std::string truth) {
  if (!parse_numeral(truth)) throw UsageError("numeric ground truth '" + truth + "' is not a number");
  AnswerChecker c;
  c.kind_ = Kind::exact_numeric_match;
  c.truth_ = std::move(truth);
  return c;
}

AnswerChecker AnswerChecker::test_cases(std::vector<std::string> tests, std::string interpreter,
                                        double timeout_seconds) {
  AnswerChecker c;
  c.kind_ = Kind::test_case_runner;
  c.tests_ = std::move(tests);
  c.interpreter_ = std::move(interpreter);
  c.timeout_seconds_ = timeout_seconds;
  return c;
}

AnswerChecker AnswerChecker::env_oracle(std::string truth) {
  AnswerChecker c;
  c.kind_ = Kind::env_oracle;
  c.truth_ = std::move(truth);
  return c;
}

namespace {

bool run_test_program(const std::string& code, const std::vector<std::string>& tests,
                      const std::string& interpreter, double timeout_seconds) {
  static std::atomic<unsigned> counter{0};
  const auto path = std::filesystem::temp_directory_path() /
                    ("qstar_check_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + ".py");
  {
    std::ofstream out(path);
    if (!out) throw CheckerFailure("cannot write test program " + path.string());
    out << code << '\n';
    for (const auto& t : tests) out << t << '\n';
  }
  struct Cleanup {
    std::filesystem::path p;
    ~Cleanup() {
      std::error_code ec;
      std::filesystem::remove(p, ec);
    }
  } cleanup{path};

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDIN_FILENO, "/dev/null", O_RDONLY, 0);
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, "/dev/null", O_WRONLY, 0);
  posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, "/dev/null", O_WRONLY, 0);
  std::string script = path.string();
  std::vector<char*> argv{const_cast<char*>(interpreter.c_str()), script.data(), nullptr};
  pid_t pid = 0;
  const int rc = posix_spawnp(&pid, interpreter.c_str(), &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw CheckerFailure("cannot launch test interpreter '" + interpreter + "'");

  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
  int status = 0;
  while (true) {
    const pid_t done = ::waitpid(pid, &status, WNOHANG);
    if (done == pid) break;
    if (done < 0) throw CheckerFailure("lost track of test process");
    if (std::chrono::steady_clock::now() > deadline) {
      ::kill(pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      return false; // a hung program fails its tests
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  if (WIFEXITED(status)) {
    const int code_status = WEXITSTATUS(status);
    if (code_status == 126 || code_status == 127) throw CheckerFailure("test interpreter could not execute");
    return code_status == 0;
  }
  return false;
}

} // namespace

bool AnswerChecker::accepts(std::string_view answer) const {
  switch (kind_) {
  case Kind::exact_numeric_match: {
    const auto got = parse_numeral(answer);
    return got && *got == *parse_numeral(truth_);
  }
  case Kind::env_oracle: return trim(answer) == trim(truth_);
  case Kind::test_case_runner: return run_test_program(std::string(answer), tests_, interpreter_, timeout_seconds_);
  }
  return false;
}

QuestionPtr make_question(std::string id, std::string prompt, AnswerChecker checker,
                          std::shared_ptr<const TaskRules> rules) {
  if (prompt.empty()) throw UsageError("question '" + id + "' has an empty prompt");
  if (!rules) throw UsageError("question '" + id + "' has no task rules");
  return std::make_shared<const Question>(Question{std::move(id), std::move(prompt), std::move(checker), std::move(rules)});
}

// ----------------------------------------------------------------------------
// States
// ----------------------------------------------------------------------------

State State::initial(QuestionPtr question) {
  if (!question) throw UsageError("null question");
  State s;
  s.question_ = std::move(question);
  s.text_ = s.question_->prompt;
  s.reason_ = classify_terminal(s);
  return s;
}

std::string State::body() const { return join_steps(steps_, rules().mode); }

State State::parent() const {
  if (steps_.empty()) throw UsageError("initial state has no parent");
  State s = initial(question_);
  s.steps_.assign(steps_.begin(), steps_.end() - 1);
  if (!s.steps_.empty()) s.text_ += "\n" + s.body();
  s.reason_ = classify_terminal(s);
  return s;
}

State transition(const State& state, Step step) {
  if (state.terminal()) throw TerminalExpansion();
  State next = state;
  next.text_ += next.steps_.empty() ? std::string_view("\n") : state.rules().mode.separator();
  next.text_ += step.text;
  next.steps_.push_back(std::move(step));
  next.reason_ = classify_terminal(next);
  return next;
}

TerminalReason classify_terminal(const State& state) {
  const auto& rules = state.rules();
  if (const Step* last = state.last_step()) {
    if (rules.answer_kind == AnswerKind::marker_suffix && !rules.answer_marker.empty() &&
        last->text.find(rules.answer_marker) != std::string::npos)
      return TerminalReason::answer;
    if (!rules.eos_token.empty() && last->text.find(rules.eos_token) != std::string::npos)
      return TerminalReason::eos;
  }
  if (state.depth() >= rules.max_depth) return TerminalReason::budget;
  return TerminalReason::none;
}

bool is_terminal(const State& state) { return classify_terminal(state) != TerminalReason::none; }

std::optional<std::string> extract_answer(const State& state) {
  const auto& rules = state.rules();
  std::string body = state.body();
  if (rules.answer_kind == AnswerKind::code_body) {
    if (!rules.eos_token.empty()) {
      for (auto pos = body.find(rules.eos_token); pos != std::string::npos; pos = body.find(rules.eos_token))
        body.erase(pos, rules.eos_token.size());
    }
    return body;
  }
  if (rules.answer_marker.empty()) return std::nullopt;
  const auto pos = body.rfind(rules.answer_marker);
  if (pos == std::string::npos) return std::nullopt;
  std::string_view rest(body);
  rest.remove_prefix(pos + rules.answer_marker.size());
  rest = rest.substr(0, rest.find('\n'));
  if (!rules.eos_token.empty()) {
    if (auto eos = rest.find(rules.eos_token); eos != std::string_view::npos) rest = rest.substr(0, eos);
  }
  return std::string(trim(rest));
}

double reached_reward(const State& state, const AnswerChecker& checker) {
  if (!state.terminal() || state.depth() == 0) return 0.0;
  const auto answer = extract_answer(state);
  if (!answer) return 0.0;
  return checker.accepts(*answer) ? 1.0 : 0.0;
}

double outcome_reward(const State& state, const Step& step, const AnswerChecker& checker) {
  return reached_reward(transition(state, step), checker);
}

double outcome_reward(const State& state, const Step& step) {
  return outcome_reward(state, step, state.question().checker);
}

// ----------------------------------------------------------------------------
// Trajectories
// ----------------------------------------------------------------------------

double Trajectory::log_probability() const {
  double total = 0.0;
  for (const auto& s : steps) total += s.logprob.value_or(0.0);
  return total;
}

Trajectory make_trajectory(const State& last) {
  Trajectory t;
  t.question_id = last.question().id;
  t.prompt = last.question().prompt;
  t.steps.assign(last.steps().begin(), last.steps().end());
  t.rewards.assign(t.steps.size(), 0.0);
  t.terminal_reason = last.terminal_reason();
  if (last.terminal() && !t.steps.empty()) {
    t.rewards.back() = reached_reward(last, last.question().checker);
    t.final_answer = extract_answer(last).value_or("");
  }
  t.total_return = 0.0;
  for (double r : t.rewards) t.total_return += r;
  return t;
}

std::vector<State> replay(const Trajectory& trajectory, const QuestionPtr& question) {
  if (!question || question->id != trajectory.question_id)
    throw UsageError("trajectory does not belong to the supplied question");
  std::vector<State> states{State::initial(question)};
  states.reserve(trajectory.steps.size() + 1);
  for (const auto& step : trajectory.steps) states.push_back(transition(states.back(), step));
  return states;
}

std::string trajectory_to_json_line(const Trajectory& t) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["question_id"] = t.question_id;
  j["prompt"] = t.prompt;
  auto steps = nlohmann::ordered_json::array();
  auto logprobs = nlohmann::ordered_json::array();
  for (const auto& s : t.steps) {
    steps.push_back(s.text);
    logprobs.push_back(s.logprob ? nlohmann::ordered_json(*s.logprob) : nlohmann::ordered_json(nullptr));
  }
  j["steps"] = std::move(steps);
  j["logprobs"] = std::move(logprobs);
  j["segmentation"] = t.steps.empty() ? std::string("line") : t.steps.front().mode.to_string();
  j["rewards"] = t.rewards;
  j["total_return"] = t.total_return;
  j["final_answer"] = t.final_answer;
  j["terminal_reason"] = std::string(to_string(t.terminal_reason));
  return j.dump();
}

Trajectory trajectory_from_json_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("format_version").get<int>() != 1) throw FormatError("unsupported trajectory format_version");
    Trajectory t;
    t.question_id = j.at("question_id").get<std::string>();
    t.prompt = j.at("prompt").get<std::string>();
    const auto mode = SegmentationMode::parse(j.at("segmentation").get<std::string>());
    const auto& steps = j.at("steps");
    const auto& logprobs = j.at("logprobs");
    if (steps.size() != logprobs.size()) throw FormatError("steps/logprobs length mismatch");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      Step s{steps[i].get<std::string>(), mode, std::nullopt};
      if (!logprobs[i].is_null()) s.logprob = logprobs[i].get<double>();
      t.steps.push_back(std::move(s));
    }
    t.rewards = j.at("rewards").get<std::vector<double>>();
    if (t.rewards.size() != t.steps.size()) throw FormatError("steps/rewards length mismatch");
    t.total_return = j.at("total_return").get<double>();
    t.final_answer = j.at("final_answer").get<std::string>();
    t.terminal_reason = parse_terminal_reason(j.at("terminal_reason").get<std::string>());
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed trajectory record: ") + e.what());
  }
}

} // namespace qstar
