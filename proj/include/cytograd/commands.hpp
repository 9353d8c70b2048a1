#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cytograd/attribution.hpp"
#include "cytograd/checkpoint.hpp"
#include "cytograd/config.hpp"
#include "cytograd/data.hpp"
#include "cytograd/error.hpp"
#include "cytograd/log.hpp"
#include "cytograd/metrics.hpp"
#include "cytograd/training.hpp"

/// Experiment commands behind the command-line tool. Every output file is a
/// pure function of the config; nothing time-dependent is written.
namespace cytograd::commands {

namespace fs = std::filesystem;

inline fs::path ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  return dir;
}

inline void write_text(const fs::path& path, const std::string& text) { write_file(path, text); }

template <typename Writer>
void write_csv(const fs::path& path, Writer&& writer) {
  std::ostringstream out;
  writer(out);
  write_text(path, out.str());
}

inline std::vector<Sample> load_data(const ExperimentConfig& config) {
  std::vector<Sample> samples;
  if (const auto* syn = std::get_if<SyntheticSource>(&config.data)) {
    samples = generate_synthetic(syn->n, config.data_seed(), syn->size);
  } else {
    const auto& dir = std::get<DirectorySource>(config.data);
    samples = load_directory(dir.path, dir.size);
  }
  if (samples.empty()) throw ValidationError("the configured data source has no samples");
  return samples;
}

struct DataSplits {
  std::vector<Sample> fit;         // optimised on
  std::vector<Sample> validation;  // best-epoch selection
  std::vector<Sample> test;        // reported metrics
};

/// Stratified holdout, then a stratified validation split of the remainder.
inline DataSplits make_splits(const ExperimentConfig& config, const std::vector<Sample>& samples) {
  const HoldoutSplit outer = holdout_split(samples, config.holdout_fraction, config.split_seed());
  const auto train_part = select(samples, outer.train);
  const HoldoutSplit inner = holdout_split(train_part, config.validation_fraction,
                                           derive_seed(config.seed, "validation"));
  DataSplits s{select(train_part, inner.train), select(train_part, inner.test), select(samples, outer.test)};
  if (s.fit.empty() || s.test.empty()) {
    throw ValidationError("dataset of " + std::to_string(samples.size()) +
                          " samples is too small for the configured holdout split");
  }
  return s;
}

inline void write_report(const fs::path& dir, const MetricsReport& report, nlohmann::json extra = {}) {
  nlohmann::json j = report_to_json(report);
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_text(dir / "report.json", j.dump(2) + "\n");
  write_csv(dir / "confusion.csv", [&](std::ostream& o) { write_confusion_csv(o, report); });
  write_csv(dir / "auc.csv", [&](std::ostream& o) { write_auc_csv(o, report); });
  write_csv(dir / "histogram.csv", [&](std::ostream& o) { write_histogram_csv(o, report); });
}

struct TrainOutcome {
  TrainResult result;
  MetricsReport report;
  fs::path checkpoint;
};

/// Writes model.ckpt, trace.csv, report.json, confusion.csv, auc.csv and
/// histogram.csv under the output directory.
inline TrainOutcome cmd_train(const ExperimentConfig& config) {
  config.validate();
  const fs::path out = ensure_dir(config.output_dir);
  const auto samples = load_data(config);
  const DataSplits splits = make_splits(config, samples);
  log::info("train: " + std::to_string(splits.fit.size()) + " fit, " + std::to_string(splits.validation.size()) +
            " validation, " + std::to_string(splits.test.size()) + " test samples");

  TrainOutcome outcome{train(config.train_config(), splits.fit, splits.validation), {}, out / "model.ckpt"};
  save_checkpoint(outcome.checkpoint, {outcome.result.params, config_hash(config)});
  write_csv(out / "trace.csv", [&](std::ostream& o) { write_trace_csv(o, outcome.result.trace); });

  outcome.report = evaluate(outcome.result.params, splits.test);
  write_report(out, outcome.report,
               {{"config_hash", config_hash(config)},
                {"best_epoch", outcome.result.trace.best_epoch},
                {"split", {{"fit", splits.fit.size()}, {"validation", splits.validation.size()},
                           {"test", splits.test.size()}}}});
  return outcome;
}

inline Checkpoint load_checkpoint_for(const ExperimentConfig& config, const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError("checkpoint not found: " + path.string());
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.params.backbone.input_size != config.image_size()) {
    throw ConfigError("checkpoint expects " + std::to_string(ckpt.params.backbone.input_size) +
                      " pixel images but the config loads " + std::to_string(config.image_size()));
  }
  return ckpt;
}

/// Scores a checkpoint on the holdout split (or every sample).
inline MetricsReport cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint, bool all_samples) {
  config.validate();
  const Checkpoint ckpt = load_checkpoint_for(config, checkpoint);
  const fs::path out = ensure_dir(config.output_dir);
  const auto samples = load_data(config);
  const auto test = all_samples ? samples : make_splits(config, samples).test;
  MetricsReport report = evaluate(ckpt.params, test);
  write_report(out, report, {{"config_hash", ckpt.config_hash}, {"evaluated", all_samples ? "all" : "holdout"}});
  return report;
}

struct AttributionRow {
  AttributionStats stats;
  double completeness_error = 0.0;
};

struct SeveritySummary {
  std::size_t severity = 0;
  std::size_t count = 0;
  double mean_at_n = 0.0;
  double mean_at_c = 0.0;
  std::optional<double> mean_ratio;  // over finite ratios
  std::size_t infinite_ratios = 0;
};

struct AttributeOutcome {
  std::vector<AttributionRow> rows;
  std::vector<SeveritySummary> summary;
  std::size_t overlays = 0;
};

inline std::string file_stem_for(const std::string& source_id) {
  std::string stem = source_id;
  for (char& c : stem) {
    if (c == '/' || c == '\\') c = '_';
  }
  return stem;
}

inline std::vector<SeveritySummary> summarize_by_severity(const std::vector<AttributionRow>& rows) {
  std::vector<SeveritySummary> out;
  for (std::size_t sev = 0; sev < kNumClasses; ++sev) {
    SeveritySummary s{sev};
    double ratio_sum = 0.0;
    std::size_t finite = 0;
    for (const auto& row : rows) {
      if (row.stats.severity != sev) continue;
      ++s.count;
      s.mean_at_n += row.stats.at_n;
      s.mean_at_c += row.stats.at_c;
      if (row.stats.ratio) {
        ratio_sum += *row.stats.ratio;
        ++finite;
      } else {
        ++s.infinite_ratios;
      }
    }
    if (s.count == 0) continue;
    s.mean_at_n /= static_cast<double>(s.count);
    s.mean_at_c /= static_cast<double>(s.count);
    if (finite) s.mean_ratio = ratio_sum / static_cast<double>(finite);
    out.push_back(s);
  }
  return out;
}

inline std::string format_ratio(const std::optional<double>& ratio) {
  return ratio ? detail::fmt_double(*ratio) : "inf";
}

/// Integrated-gradients maps for the configured samples. Writes
/// attribution_stats.csv (masked samples only), attribution_summary.csv and
/// one overlay triptych per sample under overlays/.
inline AttributeOutcome cmd_attribute(const ExperimentConfig& config, const fs::path& checkpoint) {
  config.validate();
  const Checkpoint ckpt = load_checkpoint_for(config, checkpoint);
  const fs::path out = ensure_dir(config.output_dir);
  const fs::path overlay_dir = ensure_dir(out / "overlays");
  const auto all = load_data(config);
  auto samples = config.attribution.holdout_only ? make_splits(config, all).test : all;
  if (config.attribution.max_samples && samples.size() > *config.attribution.max_samples) {
    samples.resize(*config.attribution.max_samples);
  }
  const AttributionConfig& ac = config.attribution;
  const ScalarModel model = model_output(ckpt.params, ac.target);

  std::vector<std::optional<AttributionRow>> rows(samples.size());
  detail::parallel_for(samples.size(), config.train.workers, [&](std::size_t i) {
    const Sample& s = samples[i];
    const Tensor baseline = make_baseline(ac.baseline, s.image.shape());
    AttributionMap map = attribute_sample(ckpt.params, s, ac.baseline, ac.steps, ac.target);
    export_overlay(map, s.image, overlay_dir / (file_stem_for(s.source_id) + ".png"));
    if (!s.mask) return;
    try {
      AttributionRow row{attribution_stats(map, *s.mask), completeness_error(model, map, s.image, baseline)};
      row.stats.severity = s.severity;
      rows[i] = row;
    } catch (const ValidationError& e) {
      log::warn(std::string(e.what()) + "; no stats row written");
    }
  });

  AttributeOutcome outcome;
  outcome.overlays = samples.size();
  std::size_t unmasked = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].mask) ++unmasked;
    if (rows[i]) outcome.rows.push_back(*rows[i]);
  }
  if (unmasked) {
    log::warn(std::to_string(unmasked) + " of " + std::to_string(samples.size()) +
              " samples have no mask; they get overlays but no stats rows");
  }
  write_csv(out / "attribution_stats.csv", [&](std::ostream& o) {
    o << "source_id,severity,at_n,at_c,ratio,completeness_error\n";
    for (const auto& r : outcome.rows) {
      o << r.stats.source_id << ',' << r.stats.severity << ',' << detail::fmt_double(r.stats.at_n) << ','
        << detail::fmt_double(r.stats.at_c) << ',' << format_ratio(r.stats.ratio) << ','
        << detail::fmt_double(r.completeness_error) << '\n';
    }
  });
  outcome.summary = summarize_by_severity(outcome.rows);
  write_csv(out / "attribution_summary.csv", [&](std::ostream& o) {
    o << "severity,count,mean_at_n,mean_at_c,mean_ratio,infinite_ratios\n";
    for (const auto& s : outcome.summary) {
      o << s.severity << ',' << s.count << ',' << detail::fmt_double(s.mean_at_n) << ','
        << detail::fmt_double(s.mean_at_c) << ',' << (s.mean_ratio ? detail::fmt_double(*s.mean_ratio) : "")
        << ',' << s.infinite_ratios << '\n';
    }
  });
  return outcome;
}

/// Fold comparison over config.pipelines. Writes fold_auc.csv and
/// fold_summary.csv.
inline FoldComparison cmd_compare(const ExperimentConfig& config) {
  config.validate();
  if (config.pipelines.size() < 2) throw ConfigError("compare needs at least two pipelines in the config");
  const fs::path out = ensure_dir(config.output_dir);
  const auto samples = load_data(config);
  const FoldPlan plan = make_folds(samples, config.folds, config.fold_seed());
  std::vector<PipelineSpec> specs;
  for (PipelineKind kind : config.pipelines) {
    TrainConfig tc = config.train_config();
    tc.kind = kind;
    specs.push_back({std::string(to_string(kind)), tc});
  }
  FoldComparison cmp = compare_folds(specs, plan, samples, config.validation_fraction);
  write_csv(out / "fold_auc.csv", [&](std::ostream& o) { write_fold_auc_csv(o, cmp); });
  write_csv(out / "fold_summary.csv", [&](std::ostream& o) { write_fold_summary_csv(o, cmp); });
  return cmp;
}

/// Writes the synthetic set in the class-directory layout read by
/// load_directory.
inline std::vector<Sample> cmd_generate(const ExperimentConfig& config) {
  const auto* syn = std::get_if<SyntheticSource>(&config.data);
  if (!syn) throw ConfigError("generate needs a synthetic data source");
  config.validate();
  auto samples = generate_synthetic(syn->n, config.data_seed(), syn->size);
  export_directory(samples, ensure_dir(config.output_dir));
  return samples;
}

}  // namespace cytograd::commands
