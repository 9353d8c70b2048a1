#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "cytograd/attribution.hpp"
#include "cytograd/checkpoint.hpp"
#include "cytograd/error.hpp"
#include "cytograd/model.hpp"
#include "cytograd/rng.hpp"
#include "cytograd/training.hpp"

namespace cytograd {

struct SyntheticSource {
  std::size_t n = 2000;
  std::optional<std::uint64_t> seed;  // defaults to a sub-seed of the root seed
  std::size_t size = 64;
  friend bool operator==(const SyntheticSource&, const SyntheticSource&) = default;
};

struct DirectorySource {
  std::string path;
  std::size_t size = 64;
  friend bool operator==(const DirectorySource&, const DirectorySource&) = default;
};

using DataSource = std::variant<SyntheticSource, DirectorySource>;

struct AttributionConfig {
  std::size_t steps = 64;
  BaselineKind baseline = BaselineKind::White;
  AttributionTarget target;
  bool holdout_only = true;                // attribute the holdout split, else every sample
  std::optional<std::size_t> max_samples;  // cap on attributed samples
  friend bool operator==(const AttributionConfig&, const AttributionConfig&) = default;
};

struct ExperimentConfig {
  DataSource data = SyntheticSource{};
  std::uint64_t seed = 7;
  TrainConfig train;  // train.seed is unused; train_config() fills it from the root seed
  std::vector<PipelineKind> pipelines{PipelineKind::Classifier, PipelineKind::Combined};
  AttributionConfig attribution;
  std::string output_dir = "out";
  std::size_t folds = 4;
  double holdout_fraction = 0.25;
  double validation_fraction = 0.15;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  std::size_t image_size() const {
    return std::visit([](const auto& src) { return src.size; }, data);
  }

  TrainConfig train_config() const {
    TrainConfig tc = train;
    tc.seed = seed;
    return tc;
  }

  std::uint64_t data_seed() const {
    const auto* syn = std::get_if<SyntheticSource>(&data);
    return syn && syn->seed ? *syn->seed : derive_seed(seed, "data");
  }

  std::uint64_t split_seed() const { return derive_seed(seed, "split"); }
  std::uint64_t fold_seed() const { return derive_seed(seed, "folds"); }

  void validate() const {
    if (const auto* syn = std::get_if<SyntheticSource>(&data)) {
      if (syn->n < kNumClasses) throw ConfigError("data.synthetic.n must be at least 5");
    } else if (std::get<DirectorySource>(data).path.empty()) {
      throw ConfigError("data.directory.path must not be empty");
    }
    if (image_size() < 8) throw ConfigError("data image size must be at least 8");
    train_config().validate();
    Backbone bb = train.backbone;
    bb.input_size = image_size();
    bb.validate();
    if (pipelines.empty()) throw ConfigError("pipelines must not be empty");
    if (attribution.steps == 0) throw ConfigError("attribution.steps must be positive");
    if (attribution.target.kind == AttributionTarget::Kind::ClassProbability) check_label(attribution.target.cls);
    if (attribution.max_samples && *attribution.max_samples == 0) {
      throw ConfigError("attribution.max_samples must be positive when set");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (folds < 2) throw ConfigError("folds must be at least 2");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in (0,1)");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("validation_fraction must be in (0,1)");
    }
  }
};

inline AttributionTarget parse_attribution_target(std::string_view text) {
  if (text == "score") return {};
  if (text.starts_with("class:") && text.size() == 7 && text[6] >= '0' && text[6] <= '4') {
    return {AttributionTarget::Kind::ClassProbability, static_cast<std::size_t>(text[6] - '0')};
  }
  throw ConfigError("unknown attribution target '" + std::string(text) + "' (expected score or class:0..class:4)");
}

inline std::string target_to_string(const AttributionTarget& t) {
  return t.kind == AttributionTarget::Kind::Score ? "score" : "class:" + std::to_string(t.cls);
}

namespace detail {

/// Typed, strict access to one JSON object; errors name the dotted field path
/// and unknown keys are rejected.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  std::size_t size(const std::string& key, std::size_t fallback) {
    return has(key) ? to_size(raw(key), field(key)) : fallback;
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_number_unsigned()) throw ConfigError("config field " + field(key) + ": expected a nonnegative integer");
    return v.get<std::uint64_t>();
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_number()) throw ConfigError("config field " + field(key) + ": expected a number");
    return v.get<double>();
  }

  std::string text(const std::string& key, std::string fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_string()) throw ConfigError("config field " + field(key) + ": expected a string");
    return v.get<std::string>();
  }

  std::optional<std::size_t> optional_size(const std::string& key, std::optional<std::size_t> fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (v.is_null()) return std::nullopt;
    return to_size(v, field(key));
  }

  /// Wraps conversions that throw ConfigError so the message names the field.
  template <typename Fn>
  auto convert(const std::string& key, Fn&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const ConfigError& e) {
      throw ConfigError("config field " + field(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config field " + field(key));
    }
  }

  static std::size_t to_size(const nlohmann::json& v, const std::string& field) {
    if (!v.is_number_unsigned()) throw ConfigError("config field " + field + ": expected a nonnegative integer");
    return v.get<std::size_t>();
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : "config field " + path_ + ": "; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Backbone backbone_config_from_json(const nlohmann::json& j, const std::string& path) {
  FieldReader r(j, path);
  Backbone bb;
  if (r.has("conv_channels")) {
    const auto& list = r.raw("conv_channels");
    if (!list.is_array()) throw ConfigError("config field " + r.field("conv_channels") + ": expected an array");
    bb.conv_channels.clear();
    for (const auto& v : list) bb.conv_channels.push_back(FieldReader::to_size(v, r.field("conv_channels")));
  }
  bb.kernel = r.size("kernel", bb.kernel);
  bb.pool = r.size("pool", bb.pool);
  bb.hidden = r.size("hidden", bb.hidden);
  r.finish();
  return bb;
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  FieldReader r(j, "train");
  TrainConfig tc;
  if (r.has("pipeline")) {
    tc.kind = r.convert("pipeline", [&, name = r.text("pipeline", "")] { return parse_pipeline_kind(name); });
  }
  tc.epochs = r.size("epochs", tc.epochs);
  tc.batch_size = r.size("batch_size", tc.batch_size);
  tc.learning_rate = r.number("learning_rate", tc.learning_rate);
  if (r.has("optimizer")) {
    tc.optimizer = r.convert("optimizer", [&, name = r.text("optimizer", "")] { return parse_optimizer_kind(name); });
  }
  tc.momentum = r.number("momentum", tc.momentum);
  tc.regression_weight = r.number("regression_weight", tc.regression_weight);
  tc.patience = r.optional_size("patience", tc.patience);
  tc.clip_norm = r.number("clip_norm", tc.clip_norm);
  tc.workers = r.size("workers", tc.workers);
  if (r.has("backbone")) tc.backbone = backbone_config_from_json(r.raw("backbone"), "train.backbone");
  r.finish();
  return tc;
}

inline DataSource data_from_json(const nlohmann::json& j) {
  FieldReader r(j, "data");
  const bool syn = r.has("synthetic"), dir = r.has("directory");
  if (syn == dir) throw ConfigError("config field data: exactly one of synthetic or directory is required");
  DataSource out;
  if (syn) {
    FieldReader s(r.raw("synthetic"), "data.synthetic");
    SyntheticSource src;
    src.n = s.size("n", src.n);
    if (s.has("seed") && !s.raw("seed").is_null()) src.seed = s.u64("seed", 0);
    src.size = s.size("size", src.size);
    s.finish();
    out = src;
  } else {
    FieldReader d(r.raw("directory"), "data.directory");
    DirectorySource src;
    if (!d.has("path")) throw ConfigError("config field data.directory.path is required");
    src.path = d.text("path", "");
    src.size = d.size("size", src.size);
    d.finish();
    out = src;
  }
  r.finish();
  return out;
}

inline AttributionConfig attribution_from_json(const nlohmann::json& j) {
  FieldReader r(j, "attribution");
  AttributionConfig a;
  a.steps = r.size("steps", a.steps);
  if (r.has("baseline")) {
    a.baseline = r.convert("baseline", [&, name = r.text("baseline", "")] { return parse_baseline_kind(name); });
  }
  if (r.has("target")) {
    a.target = r.convert("target", [&, name = r.text("target", "")] { return parse_attribution_target(name); });
  }
  if (r.has("split")) {
    const std::string split = r.text("split", "");
    if (split != "holdout" && split != "all") {
      throw ConfigError("config field attribution.split: expected holdout or all, got '" + split + "'");
    }
    a.holdout_only = split == "holdout";
  }
  a.max_samples = r.optional_size("max_samples", a.max_samples);
  r.finish();
  return a;
}

/// 1-based line and column of a byte offset.
inline std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t offset) {
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i < std::min(offset, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::FieldReader r(j, "");
  ExperimentConfig c;
  if (r.has("data")) c.data = detail::data_from_json(r.raw("data"));
  c.seed = r.u64("seed", c.seed);
  if (r.has("train")) c.train = detail::train_from_json(r.raw("train"));
  if (r.has("pipelines")) {
    const auto& list = r.raw("pipelines");
    if (!list.is_array()) throw ConfigError("config field pipelines: expected an array");
    c.pipelines.clear();
    for (const auto& v : list) {
      if (!v.is_string()) throw ConfigError("config field pipelines: expected pipeline names");
      c.pipelines.push_back(r.convert("pipelines", [&] { return parse_pipeline_kind(v.get<std::string>()); }));
    }
  }
  if (r.has("attribution")) c.attribution = detail::attribution_from_json(r.raw("attribution"));
  c.output_dir = r.text("output_dir", c.output_dir);
  c.folds = r.size("folds", c.folds);
  c.holdout_fraction = r.number("holdout_fraction", c.holdout_fraction);
  c.validation_fraction = r.number("validation_fraction", c.validation_fraction);
  r.finish();
  c.validate();
  return c;
}

/// Every field, defaults included, so the dump is canonical.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  if (const auto* syn = std::get_if<SyntheticSource>(&c.data)) {
    j["data"]["synthetic"] = {{"n", syn->n}, {"size", syn->size},
                              {"seed", syn->seed ? nlohmann::json(*syn->seed) : nlohmann::json()}};
  } else {
    const auto& dir = std::get<DirectorySource>(c.data);
    j["data"]["directory"] = {{"path", dir.path}, {"size", dir.size}};
  }
  j["seed"] = c.seed;
  const TrainConfig& t = c.train;
  j["train"] = {{"pipeline", std::string(to_string(t.kind))},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"learning_rate", t.learning_rate},
                {"optimizer", std::string(to_string(t.optimizer))},
                {"momentum", t.momentum},
                {"regression_weight", t.regression_weight},
                {"patience", t.patience ? nlohmann::json(*t.patience) : nlohmann::json()},
                {"clip_norm", t.clip_norm},
                {"workers", t.workers},
                {"backbone",
                 {{"conv_channels", t.backbone.conv_channels},
                  {"kernel", t.backbone.kernel},
                  {"pool", t.backbone.pool},
                  {"hidden", t.backbone.hidden}}}};
  j["pipelines"] = nlohmann::json::array();
  for (PipelineKind k : c.pipelines) j["pipelines"].push_back(std::string(to_string(k)));
  j["attribution"] = {{"steps", c.attribution.steps},
                      {"baseline", std::string(to_string(c.attribution.baseline))},
                      {"target", target_to_string(c.attribution.target)},
                      {"split", c.attribution.holdout_only ? "holdout" : "all"},
                      {"max_samples", c.attribution.max_samples ? nlohmann::json(*c.attribution.max_samples)
                                                                : nlohmann::json()}};
  j["output_dir"] = c.output_dir;
  j["folds"] = c.folds;
  j["holdout_fraction"] = c.holdout_fraction;
  j["validation_fraction"] = c.validation_fraction;
  return j;
}

/// Parses config text; syntax errors report line and column.
inline ExperimentConfig parse_config(std::string_view text, std::string_view origin = "config") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, column] = detail::line_column(text, e.byte ? e.byte - 1 : 0);
    throw ConfigError(std::string(origin) + ":" + std::to_string(line) + ":" + std::to_string(column) +
                      ": JSON syntax error");
  }
  try {
    return config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(origin) + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("config file not found: " + path.string());
  return parse_config(read_file(path), path.string());
}

/// Hash of the settings that influence results; the output directory and
/// worker count are left out since they do not change any output bytes.
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = config_to_json(c);
  j.erase("output_dir");
  j["train"].erase("workers");
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace cytograd
