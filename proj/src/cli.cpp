#include "qstar/cli.hpp"

#include "qstar/envs.hpp"
#include "qstar/hash.hpp"
#include "qstar/ngram_policy.hpp"
#include "qstar/qvalue.hpp"
#include "qstar/remote_policy.hpp"
#include "qstar/search.hpp"
#include "qstar/utility.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace qstar {

// ============================================================================
// Configuration
// ============================================================================

const std::vector<ConfigKey>& RunConfig::schema() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "base seed of every random stream"},
      {"env.kind", "trap_tree", "arithmetic_chain | string_rewrite | trap_tree"},
      {"env.horizon", "3", "steps per trajectory (T)"},
      {"env.branching", "2", "options per state (b)"},
      {"env.seed", "0", "generator seed"},
      {"env.questions", "20", "questions in the environment"},
      {"env.trap_margin", "0.2", "extra root probability of the deceptive trap branch"},
      {"env.file", "", "load an environment JSON instead of generating one"},
      {"tasks.file", "", "JSONL tasks {id, prompt, answer} or {id, prompt, tests}; replaces env.*"},
      {"tasks.segmentation", "line", "line | fixed_tokens:<n>"},
      {"tasks.max_depth", "16", "step budget per trajectory"},
      {"tasks.answer_marker", "####", "marker preceding a final answer"},
      {"tasks.interpreter", "python3", "program that runs code answers against their tests"},
      {"tasks.timeout", "10", "seconds allowed per test run"},
      {"policy.kind", "env", "env | ngram | remote"},
      {"policy.temperature", "0.9", "rollout sampling temperature"},
      {"policy.ngram_corpus", "", "JSONL documents {text} for the n-gram policy"},
      {"policy.ngram_order", "2", "n of the n-gram policy"},
      {"policy.remote_preamble", "", "text prepended to every remote prompt"},
      {"policy.remote_timeout_ms", "30000", "remote request timeout"},
      {"policy.remote_retries", "3", "retries after a failed remote request"},
      {"utility.reward", "constant", "constant | confidence | code_delimiter_penalty | external"},
      {"utility.constant", "0", "value of the constant process reward"},
      {"utility.penalty", "-0.5", "reward of a malformed code prefix"},
      {"utility.agg", "last", "min | max | sum | last"},
      {"utility.scorer_url", "", "endpoint of the external scorer"},
      {"utility.score_cache", "", "JSONL file caching external scores"},
      {"generate.samples", "4", "trajectories sampled per question (M)"},
      {"label.method", "rollout", "fitted_q | rollout | completion"},
      {"label.gamma", "1", "discount factor"},
      {"label.iterations", "1", "fitted Q-iteration rounds (L)"},
      {"label.k", "6", "top-K at successor states"},
      {"label.rollouts", "8", "sampled rollouts per pair"},
      {"label.pool", "sampled", "sampled | exhaustive"},
      {"label.exhaustive_k", "6", "branching kept by the exhaustive pool"},
      {"label.exponent", "as_written", "as_written | forward discount exponent"},
      {"label.completer", "oracle_greedy", "oracle_greedy | policy"},
      {"train.model", "tabular", "tabular | linear"},
      {"train.features", "text_v1", "text_v1 | synthetic_v1"},
      {"train.ridge", "1e-6", "ridge used when features are rank-deficient"},
      {"train.clamp", "none", "none | <lower>,<upper>"},
      {"qvalue.oracle_flip_rate", "0", "label noise applied to the oracle model"},
      {"search.lambda", "1", "weight of h in f = g + lambda h"},
      {"search.k", "6", "candidates per expansion"},
      {"search.n", "6", "Best-of-N searches per question"},
      {"search.max_expansions", "1000", "expansions allowed per search"},
      {"search.max_depth", "0", "depth budget override (0 keeps the task budget)"},
      {"search.tie_break", "deeper_first", "deeper_first | insertion_order"},
      {"search.terminal_score", "outcome_reward", "outcome_reward | q_estimate"},
      {"evaluate.strategy", "qstar", "greedy | best_of_n_resample | qstar"},
      {"evaluate.temperature", "0.9", "sampling temperature of best_of_n_resample"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& key : schema()) values_.emplace(key.name, key.default_value);
}

namespace {

std::string_view trim_view(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

double parse_real(const std::string& v, std::string_view what) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::logic_error&) {
  }
  throw UsageError(std::string(what) + " expects a number, got '" + v + "'");
}

} // namespace

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig config;
  std::size_t number = 0;
  while (!text.empty()) {
    ++number;
    const auto end = text.find('\n');
    const auto line = trim_view(text.substr(0, end));
    text.remove_prefix(end == std::string_view::npos ? text.size() : end + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw UsageError("config line " + std::to_string(number) + ": expected 'key = value'");
    config.set(trim_view(line.substr(0, eq)), std::string(trim_view(line.substr(eq + 1))));
  }
  return config;
}

void RunConfig::set(std::string_view key, std::string value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + std::string(key) + "'");
  it->second = std::move(value);
}

const std::string& RunConfig::get(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + std::string(key) + "'");
  return it->second;
}

double RunConfig::real(std::string_view key) const { return parse_real(get(key), key); }

std::uint64_t RunConfig::u64(std::string_view key) const {
  const auto& v = get(key);
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw UsageError("config key '" + std::string(key) + "' expects a non-negative integer, got '" + v + "'");
  return x;
}

std::size_t RunConfig::count(std::string_view key) const { return static_cast<std::size_t>(u64(key)); }

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::string RunConfig::fingerprint() const { return content_hash(canonical()); }

// ============================================================================
// Workspace
// ============================================================================

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;
constexpr int kExitUpstream = 3;
constexpr int kExitBudget = 4;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out << content;
  if (!out) throw Error("failed writing '" + path + "'");
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

nlohmann::json parse_json(std::string_view text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed " + what + ": " + e.what());
  }
}

/// Settings resolved from a RunConfig plus the question set they describe.
class Workspace {
public:
  explicit Workspace(RunConfig config) : config_(std::move(config)) { load_questions(); }

  [[nodiscard]] const RunConfig& config() const { return config_; }
  [[nodiscard]] const EnvPtr& env() const { return env_; }
  [[nodiscard]] const std::vector<QuestionPtr>& questions() const { return questions_; }
  [[nodiscard]] const std::string& env_fingerprint() const { return env_fingerprint_; }

  [[nodiscard]] QuestionPtr question(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw UsageError("no question '" + id + "' in the configured task set");
    return it->second;
  }

  const EnvPtr& require_env(std::string_view why) const {
    if (!env_) throw UsageError(std::string(why) + " needs a synthetic environment");
    return env_;
  }

  const PolicyHandle& policy() {
    if (!policy_.adapter) policy_ = make_policy();
    return policy_;
  }

  [[nodiscard]] UtilityConfig utility() const {
    UtilityConfig u;
    u.agg = parse_agg(config_.get("utility.agg"));
    const auto& kind = config_.get("utility.reward");
    if (kind == "constant") {
      u.reward = ProcessReward::constant(config_.real("utility.constant"));
    } else if (kind == "confidence") {
      u.reward = ProcessReward::confidence();
    } else if (kind == "code_delimiter_penalty") {
      u.reward = ProcessReward::code_delimiter_penalty(config_.real("utility.penalty"));
    } else if (kind == "external") {
      HttpEndpoint endpoint;
      endpoint.url = config_.get("utility.scorer_url");
      if (endpoint.url.empty()) throw UsageError("utility.reward = external needs utility.scorer_url");
      const auto& cache_path = config_.get("utility.score_cache");
      u.reward = ProcessReward::external_scorer(endpoint, cache_path.empty() ? nullptr : ScoreCache::load(cache_path));
    } else {
      throw UsageError("unknown utility.reward '" + kind + "'");
    }
    return u;
  }

  [[nodiscard]] FeatureRegistry features() const {
    FeatureRegistry registry;
    if (env_) registry.add(std::make_shared<const SyntheticFeatures>(env_));
    return registry;
  }

  [[nodiscard]] SearchConfig search(std::uint64_t seed) const {
    SearchConfig s;
    s.lambda = config_.real("search.lambda");
    s.k = config_.count("search.k");
    s.n_trajectories = config_.count("search.n");
    s.max_expansions = config_.count("search.max_expansions");
    s.max_depth = config_.count("search.max_depth");
    s.tie_break = parse_tie_break(config_.get("search.tie_break"));
    s.terminal_score = parse_terminal_score(config_.get("search.terminal_score"));
    s.seed = seed;
    s.validate();
    return s;
  }

private:
  void load_questions() {
    const auto& tasks = config_.get("tasks.file");
    if (!tasks.empty()) {
      load_tasks(tasks);
    } else {
      const auto& file = config_.get("env.file");
      if (!file.empty()) {
        env_ = env_from_text(read_file(file));
      } else {
        EnvSpec spec;
        spec.kind = parse_env_kind(config_.get("env.kind"));
        spec.horizon = config_.count("env.horizon");
        spec.branching = config_.count("env.branching");
        spec.seed = config_.u64("env.seed");
        spec.questions = config_.count("env.questions");
        spec.trap_margin = config_.real("env.trap_margin");
        env_ = generate_env(spec);
      }
      questions_ = env_->questions();
      env_fingerprint_ = env_->fingerprint();
    }
    for (const auto& q : questions_)
      if (!by_id_.emplace(q->id, q).second) throw UsageError("duplicate question id '" + q->id + "'");
  }

  void load_tasks(const std::string& path) {
    const std::string text = read_file(path);
    auto rules = TaskRules{};
    rules.mode = SegmentationMode::parse(config_.get("tasks.segmentation"));
    rules.max_depth = config_.count("tasks.max_depth");
    rules.answer_marker = config_.get("tasks.answer_marker");
    auto answer_rules = std::make_shared<const TaskRules>(rules);
    rules.answer_kind = AnswerKind::code_body;
    auto code_rules = std::make_shared<const TaskRules>(rules);
    for (const auto& line : split_lines(text)) {
      const auto j = parse_json(line, "task record");
      try {
        auto id = j.at("id").get<std::string>();
        auto prompt = j.at("prompt").get<std::string>();
        if (j.contains("tests")) {
          questions_.push_back(make_question(
              std::move(id), std::move(prompt),
              AnswerChecker::test_cases(j.at("tests").get<std::vector<std::string>>(), config_.get("tasks.interpreter"),
                                        config_.real("tasks.timeout")),
              code_rules));
        } else {
          questions_.push_back(make_question(std::move(id), std::move(prompt),
                                             AnswerChecker::exact_numeric(j.at("answer").get<std::string>()),
                                             answer_rules));
        }
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed task record: ") + e.what());
      }
    }
    if (questions_.empty()) throw UsageError("task file '" + path + "' has no tasks");
    std::string settings;
    for (const auto* key : {"tasks.segmentation", "tasks.max_depth", "tasks.answer_marker"})
      settings += std::string(key) + "=" + config_.get(key) + "\n";
    env_fingerprint_ = content_hash(text + "\n" + settings);
  }

  PolicyHandle make_policy() const {
    const auto& kind = config_.get("policy.kind");
    const double temperature = config_.real("policy.temperature");
    if (kind == "env") return make_tabular_policy(require_env("policy.kind = env"), temperature);
    if (kind == "ngram") {
      const auto& corpus = config_.get("policy.ngram_corpus");
      if (corpus.empty()) throw UsageError("policy.kind = ngram needs policy.ngram_corpus");
      std::vector<std::string> documents;
      for (const auto& line : split_lines(read_file(corpus))) {
        try {
          documents.push_back(parse_json(line, "corpus record").at("text").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
          throw FormatError(std::string("malformed corpus record: ") + e.what());
        }
      }
      NgramOptions options;
      options.order = config_.count("policy.ngram_order");
      return {NgramPolicy::train(documents, options), temperature};
    }
    if (kind == "remote") {
      RemoteOptions options;
      options.preamble = config_.get("policy.remote_preamble");
      options.endpoint.timeout_ms = static_cast<int>(config_.count("policy.remote_timeout_ms"));
      options.endpoint.max_retries = static_cast<int>(config_.count("policy.remote_retries"));
      options = RemotePolicy::options_from_env(options);
      if (options.endpoint.url.empty()) throw UsageError("policy.kind = remote needs QSTAR_REMOTE_URL");
      return {std::make_shared<const RemotePolicy>(std::move(options)), temperature};
    }
    throw UsageError("unknown policy.kind '" + kind + "'");
  }

  RunConfig config_;
  EnvPtr env_;
  std::vector<QuestionPtr> questions_;
  std::map<std::string, QuestionPtr, std::less<>> by_id_;
  std::string env_fingerprint_;
  PolicyHandle policy_;
};

// ============================================================================
// Artifacts
// ============================================================================

struct Artifact {
  nlohmann::json header;
  std::vector<std::string> records;
};

nlohmann::ordered_json make_header(std::string_view kind, const Workspace& ws) {
  nlohmann::ordered_json h;
  h["format_version"] = 1;
  h["kind"] = kind;
  h["config_fingerprint"] = ws.config().fingerprint();
  h["env_fingerprint"] = ws.env_fingerprint();
  return h;
}

Artifact read_artifact(const std::string& path, std::string_view kind) {
  auto lines = split_lines(read_file(path));
  if (lines.empty()) throw UsageError("'" + path + "' is empty");
  Artifact a;
  a.header = parse_json(lines.front(), "artifact header");
  if (a.header.value("format_version", 0) != 1 || a.header.value("kind", "") != kind)
    throw FormatError("'" + path + "' is not a " + std::string(kind) + " file");
  a.records.assign(lines.begin() + 1, lines.end());
  return a;
}

void check_env(const nlohmann::json& header, const Workspace& ws, const std::string& path, bool allow_mismatch) {
  const auto stored = header.value("env_fingerprint", "");
  if (stored == ws.env_fingerprint() || allow_mismatch) return;
  throw UsageError("'" + path + "' was built for environment " + stored + " but the configuration describes " +
                   ws.env_fingerprint() + " (pass --allow-env-mismatch to override)");
}

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;
  std::string dataset;
  std::string labels;
  std::string model;
  std::string trace;
  std::string metrics;
  std::string trajectories;
  bool allow_env_mismatch = false;
};

RunConfig load_config(const Options& o) {
  RunConfig config = o.config_path.empty() ? RunConfig{} : RunConfig::parse(read_file(o.config_path));
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    config.set(trim_view(std::string_view(kv).substr(0, eq)), std::string(trim_view(std::string_view(kv).substr(eq + 1))));
  }
  if (o.seed) config.set("seed", std::to_string(*o.seed));
  return config;
}

void require(const std::string& value, std::string_view flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

// ============================================================================
// Commands
// ============================================================================

int cmd_generate(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  Workspace ws(load_config(o));
  const auto& c = ws.config();
  const auto samples = c.count("generate.samples");
  const double temperature = c.real("policy.temperature");
  const auto data = build_rollout_dataset(ws.questions(), ws.policy(), samples, temperature, c.u64("seed"),
                                          c.get("policy.kind"));
  auto header = make_header("rollout_dataset", ws);
  header["seed"] = data.seed;
  header["samples_per_question"] = data.samples_per_question;
  header["temperature"] = data.temperature;
  header["preset"] = data.preset;
  std::string text = header.dump() + "\n";
  for (const auto& entry : data.entries)
    for (const auto& t : entry.trajectories) text += trajectory_to_json_line(t) + "\n";
  write_file(o.out, text);
  out << "wrote " << data.trajectory_count() << " trajectories for " << data.entries.size() << " questions to "
      << o.out << "\n";
  return kExitOk;
}

RolloutDataset read_dataset(const std::string& path, Workspace& ws, bool allow_mismatch) {
  const auto artifact = read_artifact(path, "rollout_dataset");
  check_env(artifact.header, ws, path, allow_mismatch);
  RolloutDataset data;
  data.seed = artifact.header.value("seed", std::uint64_t{0});
  data.temperature = artifact.header.value("temperature", 1.0);
  data.samples_per_question = artifact.header.value("samples_per_question", std::size_t{1});
  data.preset = artifact.header.value("preset", "");
  std::map<std::string, std::size_t> slot;
  for (const auto& line : artifact.records) {
    auto t = trajectory_from_json_line(line);
    auto [it, fresh] = slot.emplace(t.question_id, data.entries.size());
    if (fresh) data.entries.push_back({ws.question(t.question_id), {}});
    data.entries[it->second].trajectories.push_back(std::move(t));
  }
  if (data.entries.empty()) throw UsageError("dataset '" + path + "' has no trajectories");
  return data;
}

int cmd_label(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  require(o.dataset, "--dataset");
  Workspace ws(load_config(o));
  const auto& c = ws.config();
  const auto data = read_dataset(o.dataset, ws, o.allow_env_mismatch);
  const auto& method = c.get("label.method");
  const double gamma = c.real("label.gamma");
  const auto exponent = parse_discount_exponent(c.get("label.exponent"));
  if (!(gamma > 0.0 && gamma <= 1.0)) throw UsageError("label.gamma must lie in (0, 1]");

  std::vector<QLabelRecord> labels;
  if (method == "rollout") {
    RolloutOptions r;
    r.rollouts_per_pair = c.count("label.rollouts");
    r.gamma = gamma;
    r.seed = c.u64("seed");
    r.exponent = exponent;
    r.exhaustive_k = c.count("label.exhaustive_k");
    r.jobs = o.jobs;
    const auto& pool = c.get("label.pool");
    if (pool == "exhaustive") {
      if (!ws.policy()->deterministic_proposals()) throw UsageError("label.pool = exhaustive needs a tabular policy");
      r.pool = PoolKind::exhaustive;
    } else if (pool != "sampled") {
      throw UsageError("unknown label.pool '" + pool + "'");
    }
    labels = rollout_labels(data.pairs(), ws.policy(), r);
  } else if (method == "fitted_q") {
    FittedQOptions f;
    f.iterations = c.count("label.iterations");
    f.k = c.count("label.k");
    f.gamma = gamma;
    f.seed = c.u64("seed");
    f.fit.kind = parse_model_kind(c.get("train.model"));
    if (f.fit.kind == ModelKind::linear) f.fit.features = ws.features().find(c.get("train.features"));
    f.fit.ridge = c.real("train.ridge");
    labels = fitted_q_iteration(data, ws.policy(), f).labels;
  } else if (method == "completion") {
    CompletionOptions opts;
    opts.gamma = gamma;
    opts.exponent = exponent;
    opts.jobs = o.jobs;
    opts.completer_id = c.get("label.completer");
    PolicyHandle strong;
    if (opts.completer_id == "oracle_greedy") {
      ws.require_env("label.completer = oracle_greedy");
      const auto k = c.count("label.k");
      const auto oracle = brute_force_optimal_q(ws.questions(), ws.policy(), k, gamma);
      strong = oracle_greedy_policy(ws.policy(), oracle.table, k);
    } else if (opts.completer_id == "policy") {
      strong = ws.policy();
    } else {
      throw UsageError("unknown label.completer '" + opts.completer_id + "'");
    }
    labels = completion_labels(data.pairs(), strong, opts);
  } else {
    throw UsageError("unknown label.method '" + method + "'");
  }

  auto header = make_header("labels", ws);
  header["method"] = method;
  header["dataset_hash"] = content_hash(read_file(o.dataset));
  std::string text = header.dump() + "\n";
  for (const auto& r : labels) text += label_to_json_line(r) + "\n";
  write_file(o.out, text);
  out << "wrote " << labels.size() << " " << method << " labels to " << o.out << "\n";
  return kExitOk;
}

std::optional<ValueClamp> parse_clamp(const std::string& text) {
  if (text == "none") return std::nullopt;
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw UsageError("train.clamp expects none or <lower>,<upper>");
  const double lower = parse_real(text.substr(0, comma), "train.clamp");
  const double upper = parse_real(text.substr(comma + 1), "train.clamp");
  if (!(lower <= upper)) throw UsageError("train.clamp lower bound exceeds upper bound");
  return ValueClamp{lower, upper};
}

int cmd_train(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  require(o.labels, "--labels");
  Workspace ws(load_config(o));
  const auto& c = ws.config();
  const auto artifact = read_artifact(o.labels, "labels");
  std::vector<QLabelRecord> records;
  for (const auto& line : artifact.records) records.push_back(label_from_json_line(line));
  if (records.empty()) throw UsageError("label file '" + o.labels + "' has no records");

  FitOptions fit;
  fit.kind = parse_model_kind(c.get("train.model"));
  if (fit.kind == ModelKind::linear) fit.features = ws.features().find(c.get("train.features"));
  fit.ridge = c.real("train.ridge");
  fit.clamp = parse_clamp(c.get("train.clamp"));
  const auto result = fit_q(records, fit);

  auto header = make_header("qmodel", ws);
  header["env_fingerprint"] = artifact.header.value("env_fingerprint", "");
  header["labels_hash"] = content_hash(read_file(o.labels));
  header["records"] = records.size();
  header["mse"] = result.diagnostics.mse;
  header["ridge_applied"] = result.diagnostics.ridge_applied;
  header["model"] = result.model->to_json();
  write_file(o.out, header.dump(2) + "\n");
  if (!result.diagnostics.warning.empty()) out << "warning: " << result.diagnostics.warning << "\n";
  out << "fitted " << result.model->kind() << " model on " << records.size() << " labels, mse " << std::setprecision(17)
      << result.diagnostics.mse << "\n";
  return kExitOk;
}

struct LoadedModel {
  std::shared_ptr<const QModel> model;
  std::string hash;
};

LoadedModel load_model(const Options& o, Workspace& ws) {
  require(o.model, "--model");
  if (o.model == "oracle") {
    ws.require_env("--model oracle");
    const auto& c = ws.config();
    const auto oracle = brute_force_optimal_q(ws.questions(), ws.policy(), c.count("search.k"), 1.0);
    const double rate = c.real("qvalue.oracle_flip_rate");
    auto model = rate > 0.0 ? noisy_oracle(oracle, rate, c.u64("seed")) : oracle.table;
    return {model, "oracle:" + content_hash(model_to_text(*model))};
  }
  const std::string text = read_file(o.model);
  const auto j = parse_json(text, "model file");
  if (j.value("format_version", 0) != 1 || j.value("kind", "") != "qmodel")
    throw FormatError("'" + o.model + "' is not a qmodel file");
  check_env(j, ws, o.model, o.allow_env_mismatch);
  return {model_from_json(j.at("model"), ws.features()), content_hash(text)};
}

nlohmann::ordered_json verdict_json(const QuestionVerdict& v) {
  nlohmann::ordered_json j;
  j["question_id"] = v.question_id;
  j["solved"] = v.solved;
  j["status"] = v.status;
  j["final_answer"] = v.trajectory.final_answer;
  j["terminal_reason"] = to_string(v.trajectory.terminal_reason);
  j["steps"] = v.trajectory.steps.size();
  j["f"] = v.f;
  j["expansions"] = v.expansions;
  j["policy_calls"] = v.policy_calls;
  j["selected_run"] = v.selected_run;
  j["run_seeds"] = v.run_seeds;
  return j;
}

int run_evaluation(const Options& o, std::ostream& out, bool plan) {
  require(o.out, "--out");
  Workspace ws(load_config(o));
  const auto& c = ws.config();
  const auto model = load_model(o, ws);

  EvalConfig eval;
  eval.strategy = plan ? Strategy::qstar : parse_strategy(c.get("evaluate.strategy"));
  eval.search = ws.search(c.u64("seed"));
  eval.utility = ws.utility();
  eval.resample_temperature = c.real("evaluate.temperature");
  eval.seed = c.u64("seed");
  eval.jobs = o.jobs;

  std::vector<std::vector<std::string>> trace(ws.questions().size());
  EvalObserver observer;
  if (!o.trace.empty()) {
    observer = [&](std::size_t question, std::size_t run, const SearchEvent& e) {
      nlohmann::ordered_json j;
      j["question_id"] = ws.questions()[question]->id;
      j["run"] = run;
      j.update(trace_record(e));
      trace[question].push_back(j.dump());
    };
  }
  const auto report = evaluate_strategy(ws.questions(), ws.policy(), *model.model, eval, observer);

  std::string trajectories;
  for (const auto& v : report.verdicts)
    if (!v.trajectory.question_id.empty()) trajectories += trajectory_to_json_line(v.trajectory) + "\n";

  auto metrics = make_header("metrics", ws);
  metrics["strategy"] = report.strategy;
  metrics["model_hash"] = model.hash;
  metrics["questions"] = report.verdicts.size();
  metrics["solve_rate"] = report.solve_rate;
  metrics["mean_expansions"] = report.mean_expansions;
  metrics["mean_policy_calls"] = report.mean_policy_calls;
  metrics["budget_exhausted"] = report.budget_exhausted;
  metrics["upstream_failures"] = report.upstream_failures;
  metrics["failures"] = report.failures;
  metrics["trajectories_hash"] = content_hash(trajectories);
  auto verdicts = nlohmann::ordered_json::array();
  for (const auto& v : report.verdicts) verdicts.push_back(verdict_json(v));
  metrics["verdicts"] = std::move(verdicts);
  const std::string metrics_text = metrics.dump(2) + "\n";

  const auto trajectory_path = plan ? o.out : o.trajectories;
  const auto metrics_path = plan ? o.metrics : o.out;
  if (!trajectory_path.empty()) write_file(trajectory_path, trajectories);
  if (!metrics_path.empty()) write_file(metrics_path, metrics_text);
  if (!o.trace.empty()) {
    std::string text;
    for (const auto& lines : trace)
      for (const auto& line : lines) text += line + "\n";
    write_file(o.trace, text);
  }

  out << report.strategy << ": solved " << std::count_if(report.verdicts.begin(), report.verdicts.end(),
                                                         [](const auto& v) { return v.solved; })
      << "/" << report.verdicts.size() << " (solve rate " << std::setprecision(6) << report.solve_rate << ")\n";
  if (report.upstream_failures > 0) return kExitUpstream;
  if (report.budget_exhausted > 0) return kExitBudget;
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out) {
  require(o.metrics, "--metrics");
  const auto j = parse_json(read_file(o.metrics), "metrics file");
  if (j.value("kind", "") != "metrics") throw FormatError("'" + o.metrics + "' is not a metrics file");
  try {
    out << "strategy      " << j.at("strategy").get<std::string>() << "\n"
        << "config        " << j.at("config_fingerprint").get<std::string>() << "\n"
        << "environment   " << j.at("env_fingerprint").get<std::string>() << "\n"
        << "model         " << j.at("model_hash").get<std::string>() << "\n"
        << "questions     " << j.at("questions").get<std::size_t>() << "\n"
        << std::fixed << std::setprecision(4) << "solve rate    " << j.at("solve_rate").get<double>() << "\n"
        << "expansions    " << j.at("mean_expansions").get<double>() << " per question\n"
        << "policy calls  " << j.at("mean_policy_calls").get<double>() << " per question\n"
        << "budget hits   " << j.at("budget_exhausted").get<std::size_t>() << "\n\n";
    out << std::left << std::setw(16) << "question" << std::setw(8) << "solved" << std::setw(12) << "expansions"
        << std::setw(10) << "run" << "answer\n";
    for (const auto& v : j.at("verdicts")) {
      out << std::setw(16) << v.at("question_id").get<std::string>() << std::setw(8)
          << (v.at("solved").get<bool>() ? "yes" : "no") << std::setw(12) << v.at("expansions").get<std::size_t>()
          << std::setw(10) << v.at("selected_run").get<std::size_t>() << v.at("final_answer").get<std::string>();
      if (v.at("status").get<std::string>() != "ok") out << "  [" << v.at("status").get<std::string>() << "]";
      out << "\n";
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metrics file: ") + e.what());
  }
  return kExitOk;
}

} // namespace

// ============================================================================
// Entry point
// ============================================================================

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deliberative planning with A* over reasoning steps guided by a Q-value model", "qstar"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");
  Options o;

  const auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", o.overrides, "override one configuration key (key=value)");
    sub->add_option("--seed", o.seed, "base seed (overrides the seed key)");
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--allow-env-mismatch", o.allow_env_mismatch, "accept artifacts built for another environment");
  };

  auto* generate = app.add_subcommand("generate", "sample rollout trajectories");
  common(generate);
  generate->add_option("--out", o.out, "dataset file (JSONL)")->required();

  auto* label = app.add_subcommand("label", "build Q-value labels from a rollout dataset");
  common(label);
  label->add_option("--dataset", o.dataset, "rollout dataset")->required();
  label->add_option("--out", o.out, "label file (JSONL)")->required();

  auto* train = app.add_subcommand("train", "fit a Q-value model to labels");
  common(train);
  train->add_option("--labels", o.labels, "label file")->required();
  train->add_option("--out", o.out, "model file")->required();

  auto* plan = app.add_subcommand("plan", "run Best-of-N A* deliberation on every question");
  common(plan);
  plan->add_option("--model", o.model, "model file, or 'oracle'")->required();
  plan->add_option("--out", o.out, "trajectory file (JSONL)")->required();
  plan->add_option("--metrics", o.metrics, "also write the metrics report here");
  plan->add_option("--trace", o.trace, "search trace (JSONL)");

  auto* evaluate = app.add_subcommand("evaluate", "score a decoding strategy on every question");
  common(evaluate);
  evaluate->add_option("--model", o.model, "model file, or 'oracle'")->required();
  evaluate->add_option("--out", o.out, "metrics report (JSON)")->required();
  evaluate->add_option("--trajectories", o.trajectories, "also write the chosen trajectories here");
  evaluate->add_option("--trace", o.trace, "search trace (JSONL)");

  auto* report = app.add_subcommand("report", "print a metrics report as a table");
  report->add_option("--metrics", o.metrics, "metrics report")->required();

  std::vector<const char*> argv{"qstar"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (generate->parsed()) return cmd_generate(o, out);
    if (label->parsed()) return cmd_label(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (plan->parsed()) return run_evaluation(o, out, true);
    if (evaluate->parsed()) return run_evaluation(o, out, false);
    if (report->parsed()) return cmd_report(o, out);
  } catch (const PolicyUnavailable& e) {
    err << "upstream failure: " << e.what() << "\n";
    return kExitUpstream;
  } catch (const ScorerUnavailable& e) {
    err << "upstream failure: " << e.what() << "\n";
    return kExitUpstream;
  } catch (const TransportError& e) {
    err << "upstream failure: " << e.what() << "\n";
    return kExitUpstream;
  } catch (const BudgetExhausted& e) {
    err << "budget exhausted: " << e.what() << "\n";
    return kExitBudget;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const SizeBound& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}

} // namespace qstar
