#pragma once

#include "qstar/mdp.hpp"

#include <json.hpp>

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace qstar {

/// Q-hat(s, a). Immutable once fitted; predict is safe to call concurrently.
class QModel {
public:
  virtual ~QModel() = default;

  [[nodiscard]] virtual std::string_view kind() const = 0;
  [[nodiscard]] virtual double predict(std::string_view state_text, std::string_view action_text) const = 0;
  [[nodiscard]] double predict(const State& state, const Step& action) const { return predict(state.text(), action.text); }

  /// Versioned JSON form ({"format_version": 1, "model": kind, ...}).
  [[nodiscard]] virtual nlohmann::ordered_json to_json() const = 0;
};

/// Table key: SHA-256 of the rendered state text and of the step text.
struct QKey {
  std::string state_hash;
  std::string action_hash;

  static QKey of(std::string_view state_text, std::string_view action_text);
  friend bool operator==(const QKey&, const QKey&) = default;
  friend auto operator<=>(const QKey&, const QKey&) = default;
};

struct QKeyHash {
  std::size_t operator()(const QKey& key) const noexcept;
};

struct ValueClamp {
  double lower = 0.0;
  double upper = 1.0;
};

/// Lookup table. Unseen pairs return the default value.
class TabularQ final : public QModel {
public:
  explicit TabularQ(double default_value = 0.0, std::optional<ValueClamp> clamp = std::nullopt)
      : default_value_(default_value), clamp_(clamp) {}

  [[nodiscard]] std::string_view kind() const override { return "tabular"; }
  [[nodiscard]] double predict(std::string_view state_text, std::string_view action_text) const override;
  [[nodiscard]] nlohmann::ordered_json to_json() const override;

  void set(const QKey& key, double value) { values_[key] = value; }
  [[nodiscard]] std::optional<double> find(const QKey& key) const;
  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] double default_value() const { return default_value_; }
  /// Entries sorted by key.
  [[nodiscard]] std::vector<std::pair<QKey, double>> entries() const;

  static std::shared_ptr<TabularQ> from_json(const nlohmann::json& j);

private:
  std::unordered_map<QKey, double, QKeyHash> values_;
  double default_value_;
  std::optional<ValueClamp> clamp_;
};

/// Maps a (state text, step text) pair to a fixed-length feature vector.
class FeatureExtractor {
public:
  virtual ~FeatureExtractor() = default;
  [[nodiscard]] virtual std::string id() const = 0;
  [[nodiscard]] virtual std::size_t dimension() const = 0;
  [[nodiscard]] virtual std::vector<double> features(std::string_view state_text, std::string_view action_text) const = 0;
};

/// Task-agnostic text features: bias, line count of the state, word count of the step, and
/// 16 hashed bag-of-words buckets of the step.
class TextFeatures final : public FeatureExtractor {
public:
  static constexpr std::size_t kBuckets = 16;
  [[nodiscard]] std::string id() const override { return "text_v1"; }
  [[nodiscard]] std::size_t dimension() const override { return 3 + kBuckets; }
  [[nodiscard]] std::vector<double> features(std::string_view state_text, std::string_view action_text) const override;
};

/// Resolves the feature_set_id stored in linear model files.
class FeatureRegistry {
public:
  FeatureRegistry();
  void add(std::shared_ptr<const FeatureExtractor> extractor);
  [[nodiscard]] std::shared_ptr<const FeatureExtractor> find(const std::string& id) const;

private:
  std::map<std::string, std::shared_ptr<const FeatureExtractor>> extractors_;
};

class LinearQ final : public QModel {
public:
  LinearQ(std::shared_ptr<const FeatureExtractor> features, std::vector<double> weights,
          std::optional<ValueClamp> clamp = std::nullopt);

  [[nodiscard]] std::string_view kind() const override { return "linear"; }
  [[nodiscard]] double predict(std::string_view state_text, std::string_view action_text) const override;
  [[nodiscard]] nlohmann::ordered_json to_json() const override;

  [[nodiscard]] const std::vector<double>& weights() const { return weights_; }
  [[nodiscard]] const FeatureExtractor& features() const { return *features_; }

private:
  std::shared_ptr<const FeatureExtractor> features_;
  std::vector<double> weights_;
  std::optional<ValueClamp> clamp_;
};

std::shared_ptr<const QModel> model_from_json(const nlohmann::json& j, const FeatureRegistry& registry);

/// Canonical single-document text (two-space indented JSON plus trailing newline).
std::string model_to_text(const QModel& model);
std::shared_ptr<const QModel> model_from_text(std::string_view text, const FeatureRegistry& registry);

} // namespace qstar
