#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cytograd/data.hpp"
#include "cytograd/error.hpp"
#include "cytograd/log.hpp"
#include "cytograd/model.hpp"
#include "cytograd/training.hpp"

namespace cytograd {

/// Mann-Whitney AUC: fraction of (pos, neg) pairs ordered correctly, ties
/// counting one half. Computed from mid-ranks in O(n log n).
inline double auc(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw ValidationError("AUC needs at least one positive and one negative");
  struct Scored {
    double value;
    bool positive;
  };
  std::vector<Scored> all;
  all.reserve(pos.size() + neg.size());
  for (double v : pos) all.push_back({v, true});
  for (double v : neg) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.value < b.value; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].value == all[i].value) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].positive) rank_sum += mid_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Mean squared error accumulated one observation at a time.
inline double mse_streaming(std::span<const double> predicted, std::span<const double> target) {
  if (predicted.size() != target.size() || predicted.empty()) throw ValidationError("MSE needs equal, nonempty inputs");
  double mean = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double e = predicted[i] - target[i];
    mean += (e * e - mean) / static_cast<double>(i + 1);
  }
  return mean;
}

/// Mean squared error from the materialised squared errors.
inline double mse_two_pass(std::span<const double> predicted, std::span<const double> target) {
  if (predicted.size() != target.size() || predicted.empty()) throw ValidationError("MSE needs equal, nonempty inputs");
  std::vector<double> sq(predicted.size());
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = (predicted[i] - target[i]) * (predicted[i] - target[i]);
  return std::accumulate(sq.begin(), sq.end(), 0.0) / static_cast<double>(sq.size());
}

using ConfusionMatrix = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>;

/// Normal (severity 0) vs abnormal agreement read off a confusion matrix.
inline double binary_accuracy_from_confusion(const ConfusionMatrix& confusion) {
  std::size_t agree = 0, total = 0;
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    for (std::size_t p = 0; p < kNumClasses; ++p) {
      total += confusion[t][p];
      if ((t == 0) == (p == 0)) agree += confusion[t][p];
    }
  }
  return total ? static_cast<double>(agree) / static_cast<double>(total) : 0.0;
}

struct MetricsReport {
  PipelineKind kind = PipelineKind::Combined;
  std::size_t count = 0;
  ConfusionMatrix confusion{};  // rows = truth, columns = prediction
  double severity_accuracy = 0.0;
  std::array<std::optional<double>, kNumClasses> per_class_auc{};  // empty when a class is absent
  std::optional<double> mean_auc;
  double binary_accuracy = 0.0;
  double binary_f1 = 0.0;  // on the abnormal class
  double score_mse = 0.0;         // expected score (probability heads) or raw regressor output
  double score_mse_argmax = 0.0;  // predicted class index + 1
  std::array<std::vector<double>, kNumClasses> score_histogram;  // predicted scores by true class
};

/// Metrics from predictions. Probability heads predict argmax (lowest index
/// on ties); the regressor predicts clamp(round(score), 1, 5) - 1. AUCs are
/// one-vs-rest on the class probability, or on -|score - (class + 1)| for
/// the regressor.
inline MetricsReport compute_metrics(PipelineKind kind, const Prediction& pred,
                                     std::span<const std::size_t> labels) {
  if (labels.empty()) throw ValidationError("cannot evaluate an empty test set");
  if (pred.size() != labels.size()) throw DimensionError("prediction and label counts differ");
  if (has_probabilities(kind) != !pred.probs.empty()) throw DimensionError("prediction does not match pipeline kind");
  MetricsReport r;
  r.kind = kind;
  r.count = labels.size();

  std::size_t correct = 0, binary_correct = 0, tp = 0, fp = 0, fn = 0;
  std::vector<double> scores, argmax_scores, targets;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check_label(labels[i]);
    const std::size_t predicted = pred.predicted_class(i);
    ++r.confusion[labels[i]][predicted];
    correct += predicted == labels[i];
    const bool truly_abnormal = labels[i] > 0, called_abnormal = predicted > 0;
    binary_correct += truly_abnormal == called_abnormal;
    tp += truly_abnormal && called_abnormal;
    fp += !truly_abnormal && called_abnormal;
    fn += truly_abnormal && !called_abnormal;
    scores.push_back(pred.score[i]);
    argmax_scores.push_back(static_cast<double>(predicted + 1));
    targets.push_back(static_cast<double>(labels[i] + 1));
    r.score_histogram[labels[i]].push_back(pred.score[i]);
  }
  const double n = static_cast<double>(labels.size());
  r.severity_accuracy = static_cast<double>(correct) / n;
  r.binary_accuracy = static_cast<double>(binary_correct) / n;
  const std::size_t f1_denominator = 2 * tp + fp + fn;
  r.binary_f1 = f1_denominator ? 2.0 * static_cast<double>(tp) / static_cast<double>(f1_denominator) : 1.0;
  r.score_mse = mse_two_pass(scores, targets);
  r.score_mse_argmax = mse_two_pass(argmax_scores, targets);

  double auc_sum = 0.0;
  std::size_t auc_count = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double s = has_probabilities(kind) ? pred.probs[i * kNumClasses + c]
                                               : -std::abs(pred.score[i] - static_cast<double>(c + 1));
      (labels[i] == c ? pos : neg).push_back(s);
    }
    if (pos.empty() || neg.empty()) continue;
    r.per_class_auc[c] = auc(pos, neg);
    auc_sum += *r.per_class_auc[c];
    ++auc_count;
  }
  if (auc_count) r.mean_auc = auc_sum / static_cast<double>(auc_count);
  return r;
}

inline MetricsReport evaluate(const ModelParams& params, const std::vector<Sample>& test_set) {
  if (test_set.empty()) throw ValidationError("cannot evaluate an empty test set");
  std::vector<std::size_t> labels;
  for (const Sample& s : test_set) labels.push_back(s.severity);
  return compute_metrics(params.kind, predict(params, test_set), labels);
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["pipeline"] = std::string(to_string(r.kind));
  j["count"] = r.count;
  j["confusion"] = r.confusion;
  j["severity_accuracy"] = r.severity_accuracy;
  j["per_class_auc"] = nlohmann::json::array();
  for (const auto& a : r.per_class_auc) j["per_class_auc"].push_back(a ? nlohmann::json(*a) : nlohmann::json());
  j["mean_auc"] = r.mean_auc ? nlohmann::json(*r.mean_auc) : nlohmann::json();
  j["binary_accuracy"] = r.binary_accuracy;
  j["binary_f1"] = r.binary_f1;
  j["score_mse"] = r.score_mse;
  j["score_mse_argmax"] = r.score_mse_argmax;
  j["score_histogram"] = r.score_histogram;
  return j;
}

namespace detail {
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

/// `truth,pred_0,...,pred_4`
inline void write_confusion_csv(std::ostream& out, const MetricsReport& r) {
  out << "truth,pred_0,pred_1,pred_2,pred_3,pred_4\n";
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    out << t;
    for (std::size_t p = 0; p < kNumClasses; ++p) out << ',' << r.confusion[t][p];
    out << '\n';
  }
}

/// `class,auc` with an empty field for absent classes.
inline void write_auc_csv(std::ostream& out, const MetricsReport& r) {
  out << "class,auc\n";
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    out << c << ',' << (r.per_class_auc[c] ? detail::fmt_double(*r.per_class_auc[c]) : "") << '\n';
  }
}

/// `true_class,predicted_score`, one row per sample.
inline void write_histogram_csv(std::ostream& out, const MetricsReport& r) {
  out << "true_class,predicted_score\n";
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (double s : r.score_histogram[c]) out << c << ',' << detail::fmt_double(s) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Fold comparison

struct PipelineSpec {
  std::string name;
  TrainConfig config;
};

struct FoldAucRow {
  std::string pipeline;
  std::size_t cls = 0;
  std::size_t fold = 0;
  std::optional<double> auc;
  friend bool operator==(const FoldAucRow&, const FoldAucRow&) = default;
};

struct FiveNumberSummary {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  friend bool operator==(const FiveNumberSummary&, const FiveNumberSummary&) = default;
};

/// Quantiles by linear interpolation between order statistics.
inline FiveNumberSummary five_number_summary(std::vector<double> values) {
  if (values.empty()) throw ValidationError("summary of an empty list");
  std::sort(values.begin(), values.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  return {values.front(), q(0.25), q(0.5), q(0.75), values.back()};
}

struct ClassSummary {
  std::string pipeline;
  std::size_t cls = 0;
  std::optional<FiveNumberSummary> summary;
  friend bool operator==(const ClassSummary&, const ClassSummary&) = default;
};

struct FoldComparison {
  std::vector<FoldAucRow> rows;  // pipeline-major, then class, then fold
  std::vector<ClassSummary> summaries;
  std::vector<MetricsReport> reports;  // one per (pipeline, fold)

  const ClassSummary& summary(std::string_view pipeline, std::size_t cls) const {
    for (const auto& s : summaries) {
      if (s.pipeline == pipeline && s.cls == cls) return s;
    }
    throw Error("no summary for pipeline " + std::string(pipeline));
  }
};

/// Fraction of each fold's training portion held back for best-epoch selection.
inline constexpr double kInnerValidationFraction = 0.15;

/// Trains every pipeline on every fold's training portion (minus an inner
/// validation split used for epoch selection) and scores the fold's test
/// portion.
inline FoldComparison compare_folds(const std::vector<PipelineSpec>& pipelines, const FoldPlan& plan,
                                    const std::vector<Sample>& samples,
                                    double validation_fraction = kInnerValidationFraction) {
  if (pipelines.size() < 2) throw ConfigError("fold comparison needs at least two pipelines");
  if (plan.fold_of.size() != samples.size()) throw ValidationError("fold plan does not match the sample list");
  FoldComparison out;
  std::vector<std::vector<std::optional<double>>> table(pipelines.size() * kNumClasses);
  for (std::size_t p = 0; p < pipelines.size(); ++p) {
    for (std::size_t f = 0; f < plan.folds; ++f) {
      const auto train_part = select(samples, plan.train_indices(f));
      const auto test_part = select(samples, plan.test_indices(f));
      const auto inner = holdout_split(train_part, validation_fraction, derive_seed(plan.seed, f));
      MetricsReport report;
      try {
        log::info("compare: training " + pipelines[p].name + " on fold " + std::to_string(f));
        TrainResult trained = train(pipelines[p].config, select(train_part, inner.train),
                                    select(train_part, inner.test));
        report = evaluate(trained.params, test_part);
      } catch (const DivergenceError& e) {
        throw DivergenceError(e.epoch(), e.batch(),
                              "fold " + std::to_string(f) + ", pipeline " + pipelines[p].name + ": " + e.what());
      } catch (const Error& e) {
        throw Error("fold " + std::to_string(f) + ", pipeline " + pipelines[p].name + ": " + e.what());
      }
      for (std::size_t c = 0; c < kNumClasses; ++c) table[p * kNumClasses + c].push_back(report.per_class_auc[c]);
      out.reports.push_back(std::move(report));
    }
  }
  for (std::size_t p = 0; p < pipelines.size(); ++p) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      std::vector<double> present;
      for (std::size_t f = 0; f < plan.folds; ++f) {
        const auto& a = table[p * kNumClasses + c][f];
        out.rows.push_back({pipelines[p].name, c, f, a});
        if (a) present.push_back(*a);
      }
      ClassSummary s{pipelines[p].name, c, std::nullopt};
      if (!present.empty()) s.summary = five_number_summary(present);
      out.summaries.push_back(s);
    }
  }
  return out;
}

/// `pipeline,class,fold,auc`
inline void write_fold_auc_csv(std::ostream& out, const FoldComparison& cmp) {
  out << "pipeline,class,fold,auc\n";
  for (const auto& r : cmp.rows) {
    out << r.pipeline << ',' << r.cls << ',' << r.fold << ',' << (r.auc ? detail::fmt_double(*r.auc) : "") << '\n';
  }
}

/// `pipeline,class,min,q1,median,q3,max`
inline void write_fold_summary_csv(std::ostream& out, const FoldComparison& cmp) {
  out << "pipeline,class,min,q1,median,q3,max\n";
  for (const auto& s : cmp.summaries) {
    out << s.pipeline << ',' << s.cls;
    if (s.summary) {
      for (double v : {s.summary->min, s.summary->q1, s.summary->median, s.summary->q3, s.summary->max}) {
        out << ',' << detail::fmt_double(v);
      }
    } else {
      out << ",,,,,";
    }
    out << '\n';
  }
}

}  // namespace cytograd
