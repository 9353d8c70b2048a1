#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "cytograd/metrics.hpp"
#include "cytograd/rng.hpp"

using namespace cytograd;

namespace {

double brute_force_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double credit = 0.0;
  for (double p : pos) {
    for (double n : neg) credit += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return credit / static_cast<double>(pos.size() * neg.size());
}

Prediction one_hot_prediction(const std::vector<std::size_t>& classes) {
  Prediction p;
  p.probs = Tensor(Shape{classes.size(), kNumClasses}, 0.0);
  p.score = Tensor(Shape{classes.size(), 1});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    p.probs[i * kNumClasses + classes[i]] = 1.0;
    p.score[i] = static_cast<double>(classes[i] + 1);
  }
  return p;
}

std::vector<std::size_t> balanced_labels(std::size_t per_class) {
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < kNumClasses; ++c) labels.insert(labels.end(), per_class, c);
  return labels;
}

}  // namespace

TEST(Auc, SpecExamples) {
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.2}), 1.0);
  // Interleaved: only the pairs (0.9, 0.8) and (0.9, 0.2) are ordered correctly.
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<double>{0.8, 0.2}), 0.5);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.3, 0.5, 0.5}, std::vector<double>{0.5, 0.3, 0.5}), 0.5);
}

TEST(Auc, EmptySideThrows) {
  EXPECT_THROW(auc(std::vector<double>{}, std::vector<double>{1.0}), ValidationError);
  EXPECT_THROW(auc(std::vector<double>{1.0}, std::vector<double>{}), ValidationError);
}

TEST(Auc, MatchesPairEnumerationWithTies) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> pos(20), neg(20);
    // Coarse grid so ties are common.
    for (double& v : pos) v = static_cast<double>(rng.below(8)) / 8.0;
    for (double& v : neg) v = static_cast<double>(rng.below(8)) / 8.0 - 0.1;
    EXPECT_NEAR(auc(pos, neg), brute_force_auc(pos, neg), 1e-12);
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  Rng rng(9);
  std::vector<double> pos(15), neg(25);
  for (double& v : pos) v = rng.normal(0.5, 1.0);
  for (double& v : neg) v = rng.normal(0.0, 1.0);
  const double base = auc(pos, neg);
  auto transform = [](std::vector<double> v) {
    for (double& x : v) x = std::exp(3.0 * x) + std::atan(x);
    return v;
  };
  EXPECT_NEAR(auc(transform(pos), transform(neg)), base, 1e-15);
}

TEST(Metrics, PerfectPredictor) {
  const auto labels = balanced_labels(4);
  const MetricsReport r = compute_metrics(PipelineKind::Combined, one_hot_prediction(labels), labels);
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    for (std::size_t p = 0; p < kNumClasses; ++p) EXPECT_EQ(r.confusion[t][p], t == p ? 4u : 0u);
    EXPECT_EQ(*r.per_class_auc[t], 1.0);
  }
  EXPECT_EQ(r.severity_accuracy, 1.0);
  EXPECT_EQ(r.score_mse, 0.0);
  EXPECT_EQ(r.binary_f1, 1.0);
  EXPECT_EQ(*r.mean_auc, 1.0);
}

TEST(Metrics, ConstantNormalPredictor) {
  const auto labels = balanced_labels(3);
  const MetricsReport r =
      compute_metrics(PipelineKind::Classifier, one_hot_prediction(std::vector<std::size_t>(15, 0)), labels);
  EXPECT_DOUBLE_EQ(r.severity_accuracy, 0.2);
  EXPECT_DOUBLE_EQ(r.binary_accuracy, 0.2);
  EXPECT_EQ(r.binary_f1, 0.0);
}

TEST(Metrics, RegressorBinningAndDistanceAuc) {
  Prediction p;
  p.score = Tensor(Shape{5, 1}, std::vector<double>{1.2, 3.3, 2.9, 4.4, 5.8});
  const std::vector<std::size_t> labels{0, 1, 2, 3, 4};
  const MetricsReport r = compute_metrics(PipelineKind::Regressor, p, labels);
  EXPECT_EQ(r.confusion[1][2], 1u);
  EXPECT_EQ(r.confusion[4][4], 1u);
  EXPECT_DOUBLE_EQ(r.severity_accuracy, 0.8);
  const double mse = (0.04 + 1.69 + 0.01 + 0.16 + 0.64) / 5.0;
  EXPECT_NEAR(r.score_mse, mse, 1e-15);
  // Class 1 positive is 1.3 from score 2; negatives are 0.8, 0.9, 2.4, 3.8 away.
  EXPECT_DOUBLE_EQ(*r.per_class_auc[1], 0.5);
}

TEST(Metrics, ConfusionInvariantsOnRandomPredictions) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 30 + rng.below(40);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(kNumClasses);
    Prediction p;
    p.probs = Tensor(Shape{n, kNumClasses});
    p.score = Tensor(Shape{n, 1});
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < kNumClasses; ++c) total += p.probs[i * 5 + c] = rng.uniform() + 1e-3;
      double e = 0.0;
      for (std::size_t c = 0; c < kNumClasses; ++c) e += (c + 1) * (p.probs[i * 5 + c] /= total);
      p.score[i] = e;
    }
    const MetricsReport r = compute_metrics(PipelineKind::Combined, p, labels);
    std::size_t total = 0;
    for (std::size_t t = 0; t < kNumClasses; ++t) {
      std::size_t row = 0;
      for (std::size_t c = 0; c < kNumClasses; ++c) row += r.confusion[t][c];
      EXPECT_EQ(row, static_cast<std::size_t>(std::count(labels.begin(), labels.end(), t)));
      total += row;
    }
    EXPECT_EQ(total, n);
    EXPECT_EQ(binary_accuracy_from_confusion(r.confusion), r.binary_accuracy);
    for (const auto& a : r.per_class_auc) {
      if (a) EXPECT_TRUE(*a >= 0.0 && *a <= 1.0);
    }
  }
}

TEST(Metrics, MseStreamingMatchesTwoPass) {
  Rng rng(5);
  std::vector<double> a(1000), b(1000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.uniform(1.0, 5.0);
    b[i] = static_cast<double>(1 + rng.below(5));
  }
  EXPECT_NEAR(mse_streaming(a, b), mse_two_pass(a, b), 1e-12);
  EXPECT_THROW(mse_two_pass(std::vector<double>{}, std::vector<double>{}), ValidationError);
}

TEST(Metrics, AbsentClassHasNoAuc) {
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  const MetricsReport r = compute_metrics(PipelineKind::Classifier, one_hot_prediction(labels), labels);
  EXPECT_TRUE(r.per_class_auc[0].has_value());
  EXPECT_FALSE(r.per_class_auc[3].has_value());
  EXPECT_EQ(*r.mean_auc, 1.0);
}

TEST(Metrics, EmptyAndMismatchedInputsThrow) {
  EXPECT_THROW(compute_metrics(PipelineKind::Classifier, Prediction{}, std::vector<std::size_t>{}),
               ValidationError);
  EXPECT_THROW(compute_metrics(PipelineKind::Classifier, one_hot_prediction({0, 1}), std::vector<std::size_t>{0}),
               DimensionError);
}

TEST(Metrics, JsonHasEveryField) {
  const auto labels = balanced_labels(2);
  const auto j = report_to_json(compute_metrics(PipelineKind::Combined, one_hot_prediction(labels), labels));
  for (const char* key : {"confusion", "severity_accuracy", "per_class_auc", "mean_auc", "binary_accuracy",
                          "binary_f1", "score_mse", "score_mse_argmax", "score_histogram"}) {
    ASSERT_TRUE(j.contains(key)) << key;
    EXPECT_FALSE(j[key].is_null()) << key;
  }
  EXPECT_EQ(j["score_histogram"][4].size(), 2u);
}

TEST(Metrics, CsvWriters) {
  const std::vector<std::size_t> labels{0, 1};
  const MetricsReport r = compute_metrics(PipelineKind::Classifier, one_hot_prediction({0, 0}), labels);
  std::ostringstream confusion, aucs;
  write_confusion_csv(confusion, r);
  write_auc_csv(aucs, r);
  EXPECT_EQ(confusion.str(),
            "truth,pred_0,pred_1,pred_2,pred_3,pred_4\n0,1,0,0,0,0\n1,1,0,0,0,0\n2,0,0,0,0,0\n"
            "3,0,0,0,0,0\n4,0,0,0,0,0\n");
  EXPECT_EQ(aucs.str(), "class,auc\n0,0.5\n1,0.5\n2,\n3,\n4,\n");
}

TEST(FiveNumber, Quartiles) {
  const auto s = five_number_summary({4.0, 1.0, 3.0, 2.0});
  EXPECT_EQ(s.min, 1.0);
  EXPECT_DOUBLE_EQ(s.q1, 1.75);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.q3, 3.25);
  EXPECT_EQ(s.max, 4.0);
  EXPECT_THROW(five_number_summary({}), ValidationError);
}

TEST(CompareFolds, ShapeAndDeterminism) {
  auto previous = log::set_sink(nullptr);
  const auto data = generate_synthetic(60, 3, 16);
  const FoldPlan plan = make_folds(data, 4, 2);
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 16;
  c.backbone.conv_channels = {2};
  c.backbone.hidden = 4;
  TrainConfig classifier = c;
  classifier.kind = PipelineKind::Classifier;
  const std::vector<PipelineSpec> specs{{"classifier", classifier}, {"combined", c}};
  const FoldComparison a = compare_folds(specs, plan, data);
  const FoldComparison b = compare_folds(specs, plan, data);
  log::set_sink(previous);
  ASSERT_EQ(a.rows.size(), 2u * 5u * 4u);
  EXPECT_EQ(a.rows, b.rows);
  EXPECT_EQ(a.summaries, b.summaries);
  for (const auto& s : a.summaries) {
    ASSERT_TRUE(s.summary);
    EXPECT_LE(s.summary->min, s.summary->median);
    EXPECT_LE(s.summary->median, s.summary->max);
  }
  EXPECT_THROW(compare_folds({specs[0]}, plan, data), ConfigError);
}
