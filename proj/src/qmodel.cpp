#include "qstar/qmodel.hpp"

#include "qstar/hash.hpp"
#include "qstar/rng.hpp"

#include <algorithm>
#include <cctype>

namespace qstar {

namespace {

double apply_clamp(double value, const std::optional<ValueClamp>& clamp) {
  return clamp ? std::clamp(value, clamp->lower, clamp->upper) : value;
}

void write_clamp(nlohmann::ordered_json& j, const std::optional<ValueClamp>& clamp) {
  if (clamp)
    j["clamp"] = {clamp->lower, clamp->upper};
  else
    j["clamp"] = nullptr;
}

std::optional<ValueClamp> read_clamp(const nlohmann::json& j) {
  auto it = j.find("clamp");
  if (it == j.end() || it->is_null()) return std::nullopt;
  return ValueClamp{it->at(0).get<double>(), it->at(1).get<double>()};
}

} // namespace

QKey QKey::of(std::string_view state_text, std::string_view action_text) {
  return {sha256_hex(state_text), sha256_hex(action_text)};
}

std::size_t QKeyHash::operator()(const QKey& key) const noexcept {
  return static_cast<std::size_t>(hash_string(key.state_hash) ^ (hash_string(key.action_hash) * 0x9E3779B97F4A7C15ULL));
}

// ----------------------------------------------------------------------------
// Tabular
// ----------------------------------------------------------------------------

double TabularQ::predict(std::string_view state_text, std::string_view action_text) const {
  auto it = values_.find(QKey::of(state_text, action_text));
  return apply_clamp(it == values_.end() ? default_value_ : it->second, clamp_);
}

std::optional<double> TabularQ::find(const QKey& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::pair<QKey, double>> TabularQ::entries() const {
  std::vector<std::pair<QKey, double>> out(values_.begin(), values_.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

nlohmann::ordered_json TabularQ::to_json() const {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["model"] = "tabular";
  j["default"] = default_value_;
  write_clamp(j, clamp_);
  auto cells = nlohmann::ordered_json::array();
  for (const auto& [key, value] : entries()) {
    nlohmann::ordered_json cell;
    cell["state_hash"] = key.state_hash;
    cell["action_hash"] = key.action_hash;
    cell["value"] = value;
    cells.push_back(std::move(cell));
  }
  j["cells"] = std::move(cells);
  return j;
}

std::shared_ptr<TabularQ> TabularQ::from_json(const nlohmann::json& j) {
  auto model = std::make_shared<TabularQ>(j.at("default").get<double>(), read_clamp(j));
  for (const auto& cell : j.at("cells"))
    model->set({cell.at("state_hash").get<std::string>(), cell.at("action_hash").get<std::string>()},
               cell.at("value").get<double>());
  return model;
}

// ----------------------------------------------------------------------------
// Features
// ----------------------------------------------------------------------------

std::vector<double> TextFeatures::features(std::string_view state_text, std::string_view action_text) const {
  std::vector<double> f(dimension(), 0.0);
  f[0] = 1.0;
  f[1] = static_cast<double>(std::count(state_text.begin(), state_text.end(), '\n'));
  std::size_t i = 0;
  while (i < action_text.size()) {
    while (i < action_text.size() && std::isspace(static_cast<unsigned char>(action_text[i]))) ++i;
    const auto start = i;
    while (i < action_text.size() && !std::isspace(static_cast<unsigned char>(action_text[i]))) ++i;
    if (i > start) {
      f[2] += 1.0;
      f[3 + hash_string(action_text.substr(start, i - start)) % kBuckets] += 1.0;
    }
  }
  return f;
}

FeatureRegistry::FeatureRegistry() { add(std::make_shared<const TextFeatures>()); }

void FeatureRegistry::add(std::shared_ptr<const FeatureExtractor> extractor) {
  auto id = extractor->id();
  extractors_[std::move(id)] = std::move(extractor);
}

std::shared_ptr<const FeatureExtractor> FeatureRegistry::find(const std::string& id) const {
  auto it = extractors_.find(id);
  if (it == extractors_.end()) throw UsageError("unknown feature set '" + id + "'");
  return it->second;
}

// ----------------------------------------------------------------------------
// Linear
// ----------------------------------------------------------------------------

LinearQ::LinearQ(std::shared_ptr<const FeatureExtractor> features, std::vector<double> weights,
                 std::optional<ValueClamp> clamp)
    : features_(std::move(features)), weights_(std::move(weights)), clamp_(clamp) {
  if (!features_ || weights_.size() != features_->dimension())
    throw UsageError("linear model weights do not match the feature dimension");
}

double LinearQ::predict(std::string_view state_text, std::string_view action_text) const {
  const auto x = features_->features(state_text, action_text);
  double value = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) value += weights_[i] * x[i];
  return apply_clamp(value, clamp_);
}

nlohmann::ordered_json LinearQ::to_json() const {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["model"] = "linear";
  j["feature_set_id"] = features_->id();
  write_clamp(j, clamp_);
  j["weights"] = weights_;
  return j;
}

std::shared_ptr<const QModel> model_from_json(const nlohmann::json& j, const FeatureRegistry& registry) {
  try {
    if (j.at("format_version").get<int>() != 1) throw FormatError("unsupported model format_version");
    const auto kind = j.at("model").get<std::string>();
    if (kind == "tabular") return TabularQ::from_json(j);
    if (kind == "linear")
      return std::make_shared<const LinearQ>(registry.find(j.at("feature_set_id").get<std::string>()),
                                             j.at("weights").get<std::vector<double>>(), read_clamp(j));
    throw FormatError("unknown model kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model: ") + e.what());
  }
}

std::string model_to_text(const QModel& model) { return model.to_json().dump(2) + "\n"; }

std::shared_ptr<const QModel> model_from_text(std::string_view text, const FeatureRegistry& registry) {
  try {
    return model_from_json(nlohmann::json::parse(text), registry);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed model: ") + e.what());
  }
}

} // namespace qstar
