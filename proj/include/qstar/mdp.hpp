#pragma once

#include "qstar/error.hpp"

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qstar {

// ============================================================================
// Segmentation
// ============================================================================

/// How raw generated text is cut into reasoning steps.
struct SegmentationMode {
  enum class Kind { line, fixed_tokens };

  Kind kind = Kind::line;
  std::size_t tokens = 0; ///< chunk size for fixed_tokens

  static SegmentationMode line() { return {}; }
  static SegmentationMode fixed_tokens(std::size_t n);

  /// Text placed between consecutive steps when rendering a state.
  [[nodiscard]] std::string_view separator() const { return kind == Kind::line ? "\n" : ""; }

  /// "line" or "fixed_tokens:<n>".
  [[nodiscard]] std::string to_string() const;
  static SegmentationMode parse(std::string_view text);

  friend bool operator==(const SegmentationMode&, const SegmentationMode&) = default;
};

/// Splits text into tokens whose concatenation reproduces the input exactly.
class Tokenizer {
public:
  virtual ~Tokenizer() = default;
  [[nodiscard]] virtual std::vector<std::string> tokenize(std::string_view text) const = 0;
};

/// Each token is a run of leading whitespace followed by a run of non-whitespace.
/// Trailing whitespace is attached to the final token.
class WhitespaceTokenizer final : public Tokenizer {
public:
  [[nodiscard]] std::vector<std::string> tokenize(std::string_view text) const override;
};

const Tokenizer& whitespace_tokenizer();

// ============================================================================
// Steps, rules, questions
// ============================================================================

/// One reasoning increment.
struct Step {
  std::string text;
  SegmentationMode mode;
  /// Generation log-probability, when the producing policy reported one.
  std::optional<double> logprob;

  friend bool operator==(const Step&, const Step&) = default;
};

/// Throws UsageError if the step violates its segmentation mode.
void validate_step(const Step& step, const Tokenizer& tokenizer = whitespace_tokenizer());

/// Lossless segmentation: join_steps(split_into_steps(t, m), m) == t.
std::vector<Step> split_into_steps(std::string_view text, SegmentationMode mode,
                                   const Tokenizer& tokenizer = whitespace_tokenizer());

std::string join_steps(std::span<const Step> steps, SegmentationMode mode);

enum class AnswerKind {
  marker_suffix, ///< answer is the text after the last answer marker
  code_body      ///< answer is the whole generated body
};

enum class TerminalReason { none, answer, eos, budget };

std::string_view to_string(TerminalReason reason);
TerminalReason parse_terminal_reason(std::string_view text);

/// Immutable per-environment conventions shared by all questions of a task.
struct TaskRules {
  SegmentationMode mode;
  AnswerKind answer_kind = AnswerKind::marker_suffix;
  std::string answer_marker = "####";
  std::string eos_token = "<eos>";
  std::size_t max_depth = 16;
};

/// Ground-truth predicate. Deterministic and safe to call concurrently.
class AnswerChecker {
public:
  enum class Kind { exact_numeric_match, test_case_runner, env_oracle };

  static AnswerChecker exact_numeric(std::string truth);
  /// Runs `interpreter <file>` on the candidate code followed by the test lines;
  /// exit status 0 is a pass.
  static AnswerChecker test_cases(std::vector<std::string> tests, std::string interpreter = "python3",
                                  double timeout_seconds = 10.0);
  static AnswerChecker env_oracle(std::string truth);

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] const std::string& truth() const { return truth_; }
  [[nodiscard]] const std::vector<std::string>& tests() const { return tests_; }

  /// Throws CheckerFailure if the verdict cannot be computed.
  [[nodiscard]] bool accepts(std::string_view answer) const;

private:
  Kind kind_ = Kind::env_oracle;
  std::string truth_;
  std::vector<std::string> tests_;
  std::string interpreter_;
  double timeout_seconds_ = 10.0;
};

/// Parses a numeral, tolerating thousands separators, a leading '$' and surrounding space.
std::optional<double> parse_numeral(std::string_view text);

struct Question {
  std::string id;
  std::string prompt;
  AnswerChecker checker;
  std::shared_ptr<const TaskRules> rules;
};

using QuestionPtr = std::shared_ptr<const Question>;

/// Validates the prompt and wraps the question for sharing.
QuestionPtr make_question(std::string id, std::string prompt, AnswerChecker checker,
                          std::shared_ptr<const TaskRules> rules);

// ============================================================================
// States and transitions
// ============================================================================

/// s_t: the question followed by the steps emitted so far. Immutable value.
class State {
public:
  static State initial(QuestionPtr question);

  [[nodiscard]] const Question& question() const { return *question_; }
  [[nodiscard]] const QuestionPtr& question_ptr() const { return question_; }
  [[nodiscard]] const TaskRules& rules() const { return *question_->rules; }
  [[nodiscard]] std::span<const Step> steps() const { return steps_; }
  [[nodiscard]] std::size_t depth() const { return steps_.size(); }
  [[nodiscard]] bool terminal() const { return reason_ != TerminalReason::none; }
  [[nodiscard]] TerminalReason terminal_reason() const { return reason_; }

  /// Prompt, then a newline, then the steps joined by the mode separator.
  [[nodiscard]] const std::string& text() const { return text_; }
  /// Steps joined by the mode separator, without the prompt.
  [[nodiscard]] std::string body() const;
  [[nodiscard]] const Step* last_step() const { return steps_.empty() ? nullptr : &steps_.back(); }

  /// The state one step earlier. Requires depth() > 0.
  [[nodiscard]] State parent() const;

private:
  friend State transition(const State& state, Step step);

  QuestionPtr question_;
  std::vector<Step> steps_;
  std::string text_;
  TerminalReason reason_ = TerminalReason::none;
};

/// Concatenates `step` onto a non-terminal state. Throws TerminalExpansion otherwise.
State transition(const State& state, Step step);

/// Why the state is terminal, or none. Priority: answer marker, end-of-sequence, depth budget.
TerminalReason classify_terminal(const State& state);
bool is_terminal(const State& state);

/// Answer text of a state according to its rules; nullopt when no answer marker is present.
std::optional<std::string> extract_answer(const State& state);

/// 1 iff [state; step] is terminal and the checker accepts its answer.
double outcome_reward(const State& state, const Step& step, const AnswerChecker& checker);
double outcome_reward(const State& state, const Step& step);

/// Outcome reward of a state that has already been reached (0 if not terminal).
double reached_reward(const State& state, const AnswerChecker& checker);

// ============================================================================
// Trajectories
// ============================================================================

struct Trajectory {
  std::string question_id;
  std::string prompt;
  std::vector<Step> steps;
  std::vector<double> rewards; ///< reward of each step; only the last may be nonzero
  double total_return = 0.0;
  std::string final_answer;
  TerminalReason terminal_reason = TerminalReason::none;

  [[nodiscard]] bool solved() const { return total_return > 0.5; }
  /// Sum of per-step log-probabilities (steps without one count as 0).
  [[nodiscard]] double log_probability() const;
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Builds the trajectory ending at `last`, scoring its final step with the question's checker.
/// A non-terminal `last` yields an incomplete trajectory with zero return.
Trajectory make_trajectory(const State& last);

/// Replays the steps from s_1, returning s_1 .. s_{T+1}.
std::vector<State> replay(const Trajectory& trajectory, const QuestionPtr& question);

/// Single-line JSON record:
/// {question_id, prompt, steps, logprobs, segmentation, rewards, total_return, final_answer,
///  terminal_reason, format_version}.
std::string trajectory_to_json_line(const Trajectory& trajectory);
Trajectory trajectory_from_json_line(std::string_view line);

} // namespace qstar
