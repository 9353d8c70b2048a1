#pragma once

#include <chrono>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cytograd/data.hpp"
#include "cytograd/error.hpp"
#include "cytograd/graph.hpp"
#include "cytograd/log.hpp"
#include "cytograd/model.hpp"
#include "cytograd/optim.hpp"
#include "cytograd/rng.hpp"

namespace cytograd {

struct TrainConfig {
  PipelineKind kind = PipelineKind::Combined;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  double regression_weight = 1.0;
  std::optional<std::size_t> patience;
  double clip_norm = 5.0;
  Backbone backbone;
  /// Worker threads for gradient computation; 0 picks hardware concurrency.
  /// Results do not depend on this value.
  std::size_t workers = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning_rate must be finite and nonnegative");
    }
    if (!(regression_weight >= 0.0)) throw ConfigError("regression_weight must be nonnegative");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (patience && *patience == 0) throw ConfigError("patience must be positive when set");
    backbone.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  std::size_t clipped_batches = 0;
  double seconds = 0.0;
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
};

struct TrainResult {
  ModelParams params;
  TrainTrace trace;
};

/// Samples per independent graph during gradient computation. Fixed so the
/// reduction order never depends on the worker count.
inline constexpr std::size_t kGradientChunk = 8;

struct LossAndGrads {
  double loss_sum = 0.0;
  std::vector<Tensor> grads;  // summed over the samples
};

namespace detail {

inline std::size_t resolve_workers(std::size_t requested, std::size_t jobs) {
  std::size_t w = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(w, jobs));
}

/// Runs fn(i) for i in [0, count) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = resolve_workers(workers, count);
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < count; i += workers) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline ModelParams with_values(const ModelParams& like, const std::vector<Tensor>& values) {
  ModelParams out{like.backbone, like.kind, {}};
  for (std::size_t i = 0; i < values.size(); ++i) out.tensors.push_back({like.tensors[i].name, values[i]});
  return out;
}

}  // namespace detail

/// Summed loss and parameter gradients over the selected samples.
inline LossAndGrads compute_gradients(const ModelParams& params, const std::vector<Sample>& samples,
                                      std::span<const std::size_t> indices,
                                      double regression_weight = 1.0, std::size_t workers = 1) {
  const std::size_t chunks = (indices.size() + kGradientChunk - 1) / kGradientChunk;
  std::vector<LossAndGrads> partial(chunks);
  detail::parallel_for(chunks, workers, [&](std::size_t c) {
    const auto part = indices.subspan(c * kGradientChunk,
                                      std::min(kGradientChunk, indices.size() - c * kGradientChunk));
    std::vector<std::size_t> labels;
    for (std::size_t i : part) labels.push_back(samples[i].severity);
    Graph g;
    NodeId x = g.leaf(stack_images(samples, part));
    ForwardNodes fwd = build_forward(g, params, x);
    NodeId loss = batch_loss_sum(g, fwd, params.kind, labels, regression_weight);
    Gradients grads = g.backward(loss, fwd.params);
    partial[c].loss_sum = g.value(loss).item();
    for (NodeId p : fwd.params) partial[c].grads.push_back(grads.take(p));
  });

  LossAndGrads total;
  for (const auto& t : params.tensors) total.grads.emplace_back(t.value.shape(), 0.0);
  for (const LossAndGrads& part : partial) {
    total.loss_sum += part.loss_sum;
    for (std::size_t k = 0; k < total.grads.size(); ++k) total.grads[k].axpy(1.0, part.grads[k]);
  }
  return total;
}

/// Inference over a sample list.
inline Prediction predict(const ModelParams& params, const std::vector<Sample>& samples,
                          std::size_t chunk = 32) {
  if (samples.empty()) throw ValidationError("cannot predict an empty sample set");
  return forward(params, stack_images(samples), chunk);
}

struct LossAndAccuracy {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

inline LossAndAccuracy evaluate_loss(const ModelParams& params, const std::vector<Sample>& samples,
                                     double regression_weight = 1.0) {
  const Prediction pred = predict(params, samples);
  LossAndAccuracy out;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto row = has_probabilities(params.kind)
                         ? pred.probs.values().subspan(i * kNumClasses, kNumClasses)
                         : pred.score.values().subspan(i, 1);
    out.mean_loss += sample_loss(params.kind, row, samples[i].severity, regression_weight);
    correct += pred.predicted_class(i) == samples[i].severity;
  }
  out.mean_loss /= static_cast<double>(samples.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return out;
}

/// Sample order for an epoch; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(derive_seed(seed, "shuffle"), epoch));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

/// Mini-batch training. Returns the parameters of the epoch with the lowest
/// validation loss (training loss when no validation set is given).
inline TrainResult train(const TrainConfig& config, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set) {
  config.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");
  Backbone bb = config.backbone;
  bb.in_channels = train_set[0].image.dim(0);
  bb.input_size = train_set[0].image.dim(1);
  for (const Sample& s : train_set) {
    s.validate();
    if (s.image.shape() != train_set[0].image.shape()) {
      throw DimensionError("sample " + s.source_id + " has image shape " + to_string(s.image.shape()) +
                           ", expected " + to_string(train_set[0].image.shape()));
    }
  }

  const ModelParams init = init_params(bb, config.kind, derive_seed(config.seed, "init"));
  std::vector<Tensor> values;
  for (const auto& t : init.tensors) values.push_back(t.value);
  Optimizer optimizer({config.optimizer, config.learning_rate, config.momentum});

  TrainResult result{init, {}};
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = epoch_order(config.seed, epoch, train_set.size());
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    const std::size_t batches = (order.size() + config.batch_size - 1) / config.batch_size;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t first = b * config.batch_size;
      const std::span<const std::size_t> batch(order.data() + first,
                                               std::min(config.batch_size, order.size() - first));
      try {
        LossAndGrads lg = compute_gradients(detail::with_values(init, values), train_set, batch,
                                            config.regression_weight, config.workers);
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (Tensor& g : lg.grads) {
          for (double& v : g.values()) v *= inv;
        }
        if (clip_global_norm(lg.grads, config.clip_norm) > config.clip_norm) ++rec.clipped_batches;
        optimizer.step(values, lg.grads);
        for (const Tensor& v : values) {
          if (!v.all_finite()) throw NumericError("non-finite parameter after optimizer step");
        }
        loss_sum += lg.loss_sum;
      } catch (const NumericError& e) {
        throw DivergenceError(epoch, b + 1, e.what());
      }
    }
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    const ModelParams current = detail::with_values(init, values);
    double selection = rec.train_loss;
    if (!val_set.empty()) {
      const LossAndAccuracy val = evaluate_loss(current, val_set, config.regression_weight);
      rec.val_loss = val.mean_loss;
      rec.val_accuracy = val.accuracy;
      selection = val.mean_loss;
    }
    if (rec.clipped_batches) {
      log::info("epoch " + std::to_string(epoch) + ": gradient norm clipped in " +
                std::to_string(rec.clipped_batches) + " of " + std::to_string(batches) + " batches");
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.trace.epochs.push_back(rec);

    if (selection < best_loss) {
      best_loss = selection;
      result.params = current;
      result.trace.best_epoch = epoch;
      since_best = 0;
    } else if (config.patience && ++since_best >= *config.patience) {
      break;
    }
  }
  return result;
}

/// CSV with header `epoch,train_loss,val_loss,val_acc`.
inline void write_trace_csv(std::ostream& out, const TrainTrace& trace) {
  out << "epoch,train_loss,val_loss,val_acc\n";
  char line[160];
  for (const EpochRecord& r : trace.epochs) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss,
                  r.val_accuracy);
    out << line;
  }
}

}  // namespace cytograd
