// Command-line front end: train, eval, attribute, compare, generate.
//
// Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cytograd/commands.hpp"

namespace {

using namespace cytograd;

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> pipelines;
  std::optional<std::size_t> steps;
  std::optional<std::string> baseline;
  std::optional<std::string> target;
  std::optional<std::size_t> folds;
  std::optional<std::size_t> n;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> workers;
  std::string checkpoint;
  bool all_samples = false;
};

ExperimentConfig resolve(const Overrides& o, bool pipeline_list) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (!o.pipelines.empty()) {
    if (pipeline_list) {
      c.pipelines.clear();
      for (const auto& p : o.pipelines) c.pipelines.push_back(parse_pipeline_kind(p));
    } else {
      if (o.pipelines.size() > 1) throw ConfigError("--pipeline given more than once");
      c.train.kind = parse_pipeline_kind(o.pipelines.front());
    }
  }
  if (o.steps) c.attribution.steps = *o.steps;
  if (o.baseline) c.attribution.baseline = parse_baseline_kind(*o.baseline);
  if (o.target) c.attribution.target = parse_attribution_target(*o.target);
  if (o.folds) c.folds = *o.folds;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.workers) c.train.workers = *o.workers;
  if (o.n) {
    auto* syn = std::get_if<SyntheticSource>(&c.data);
    if (!syn) throw ConfigError("--n applies only to a synthetic data source");
    syn->n = *o.n;
  }
  c.validate();
  return c;
}

void print_report(const MetricsReport& r) {
  std::printf("severity accuracy  %.4f\n", r.severity_accuracy);
  std::printf("binary accuracy    %.4f\n", r.binary_accuracy);
  std::printf("binary F1          %.4f\n", r.binary_f1);
  std::printf("score MSE          %.4f\n", r.score_mse);
  if (r.mean_auc) std::printf("mean AUC           %.4f\n", *r.mean_auc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ordinal severity grading of cell images with attribution analysis"};
  app.require_subcommand(1);
  Overrides o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Experiment config (JSON)");
    sub->add_option("--seed", o.seed, "Root seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--workers", o.workers, "Worker threads (0 = all cores)");
  };

  auto* train = app.add_subcommand("train", "Train on the holdout split and report test metrics");
  add_common(train);
  train->add_option("--pipeline", o.pipelines, "classifier | regressor | combined")->expected(1);
  train->add_option("--epochs", o.epochs, "Training epochs");
  train->add_option("--n", o.n, "Synthetic sample count");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  eval->add_flag("--all", o.all_samples, "Evaluate every sample instead of the holdout split");
  eval->add_option("--n", o.n, "Synthetic sample count");

  auto* attribute = app.add_subcommand("attribute", "Integrated-gradients maps and mask statistics");
  add_common(attribute);
  attribute->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  attribute->add_option("--steps", o.steps, "Riemann steps m");
  attribute->add_option("--baseline", o.baseline, "white | black");
  attribute->add_option("--target", o.target, "score | class:K");
  attribute->add_option("--n", o.n, "Synthetic sample count");

  auto* compare = app.add_subcommand("compare", "Per-fold AUC comparison of pipelines");
  add_common(compare);
  compare->add_option("--pipeline", o.pipelines, "Pipeline to compare (repeatable)");
  compare->add_option("--folds", o.folds, "Fold count");
  compare->add_option("--epochs", o.epochs, "Training epochs");
  compare->add_option("--n", o.n, "Synthetic sample count");

  auto* generate = app.add_subcommand("generate", "Write a synthetic dataset in class-directory layout");
  add_common(generate);
  generate->add_option("--n", o.n, "Sample count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (train->parsed()) {
      const auto outcome = commands::cmd_train(resolve(o, false));
      std::printf("best epoch %zu of %zu\n", outcome.result.trace.best_epoch, outcome.result.trace.epochs.size());
      print_report(outcome.report);
    } else if (eval->parsed()) {
      print_report(commands::cmd_eval(resolve(o, false), o.checkpoint, o.all_samples));
    } else if (attribute->parsed()) {
      const auto outcome = commands::cmd_attribute(resolve(o, false), o.checkpoint);
      std::printf("%zu overlays, %zu stats rows\n", outcome.overlays, outcome.rows.size());
      std::printf("severity  count  mean_at_n  mean_at_c  mean_ratio\n");
      for (const auto& s : outcome.summary) {
        std::printf("%8zu  %5zu  %9.4f  %9.4f  %10s\n", s.severity, s.count, s.mean_at_n, s.mean_at_c,
                    s.mean_ratio ? std::to_string(*s.mean_ratio).c_str() : "inf");
      }
    } else if (compare->parsed()) {
      const auto cmp = commands::cmd_compare(resolve(o, true));
      std::printf("pipeline     class  min     median  max\n");
      for (const auto& s : cmp.summaries) {
        if (!s.summary) continue;
        std::printf("%-11s  %5zu  %.4f  %.4f  %.4f\n", s.pipeline.c_str(), s.cls, s.summary->min,
                    s.summary->median, s.summary->max);
      }
    } else if (generate->parsed()) {
      const auto samples = commands::cmd_generate(resolve(o, false));
      std::printf("wrote %zu samples\n", samples.size());
    }
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
