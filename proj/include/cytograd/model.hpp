#pragma once

#include <array>
#include <cmath>
#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cytograd/error.hpp"
#include "cytograd/graph.hpp"
#include "cytograd/ops.hpp"
#include "cytograd/rng.hpp"
#include "cytograd/tensor.hpp"

namespace cytograd {

inline constexpr std::size_t kNumClasses = 5;

/// Fixed score weights of the expected-score layer: class i scores i + 1.
inline constexpr std::array<double, kNumClasses> kClassWeights{1.0, 2.0, 3.0, 4.0, 5.0};

/// Floor applied to probabilities before taking a log in cross-entropy.
inline constexpr double kProbabilityFloor = 1e-12;

enum class PipelineKind { Classifier, Regressor, Combined };

inline std::string_view to_string(PipelineKind kind) {
  switch (kind) {
    case PipelineKind::Classifier: return "classifier";
    case PipelineKind::Regressor: return "regressor";
    case PipelineKind::Combined: return "combined";
  }
  return "unknown";
}

inline PipelineKind parse_pipeline_kind(std::string_view name) {
  if (name == "classifier") return PipelineKind::Classifier;
  if (name == "regressor") return PipelineKind::Regressor;
  if (name == "combined") return PipelineKind::Combined;
  throw ConfigError("unknown pipeline kind '" + std::string(name) +
                    "' (expected classifier, regressor or combined)");
}

inline bool has_probabilities(PipelineKind kind) { return kind != PipelineKind::Regressor; }

inline std::size_t head_units(PipelineKind kind) {
  return has_probabilities(kind) ? kNumClasses : 1;
}

/// Layer layout of the convolutional backbone. Each conv block is a
/// same-padded kernel x kernel convolution, relu, then pool x pool mean pooling.
/// Blocks are followed by a global mean pool, one hidden relu layer and the head.
struct Backbone {
  std::size_t in_channels = 3;
  std::size_t input_size = 64;
  std::vector<std::size_t> conv_channels{8, 16, 32};
  std::size_t kernel = 3;
  std::size_t pool = 2;
  std::size_t hidden = 64;

  friend bool operator==(const Backbone&, const Backbone&) = default;

  Shape input_shape(std::size_t batch) const {
    return Shape{batch, in_channels, input_size, input_size};
  }

  void validate() const {
    if (in_channels == 0 || input_size == 0 || kernel == 0 || pool == 0 || hidden == 0 ||
        conv_channels.empty()) {
      throw ConfigError("backbone dimensions must be positive and have at least one conv block");
    }
    std::size_t side = input_size;
    for (std::size_t c : conv_channels) {
      if (c == 0) throw ConfigError("conv channel width must be positive");
      if (side < pool) {
        throw ConfigError("input size " + std::to_string(input_size) + " is too small for " +
                          std::to_string(conv_channels.size()) + " pooling stages");
      }
      side /= pool;
    }
  }
};

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Parameter shapes, in canonical order, for a backbone and pipeline head.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const Backbone& bb,
                                                                   PipelineKind kind) {
  bb.validate();
  std::vector<std::pair<std::string, Shape>> layout;
  std::size_t channels = bb.in_channels;
  for (std::size_t i = 0; i < bb.conv_channels.size(); ++i) {
    const std::string prefix = "conv" + std::to_string(i);
    layout.emplace_back(prefix + ".weight", Shape{bb.conv_channels[i], channels, bb.kernel, bb.kernel});
    layout.emplace_back(prefix + ".bias", Shape{bb.conv_channels[i]});
    channels = bb.conv_channels[i];
  }
  layout.emplace_back("hidden.weight", Shape{channels, bb.hidden});
  layout.emplace_back("hidden.bias", Shape{bb.hidden});
  layout.emplace_back("head.weight", Shape{bb.hidden, head_units(kind)});
  layout.emplace_back("head.bias", Shape{head_units(kind)});
  return layout;
}

struct ModelParams {
  Backbone backbone;
  PipelineKind kind = PipelineKind::Combined;
  std::vector<NamedTensor> tensors;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

  /// Throws unless tensors match parameter_layout(backbone, kind) exactly.
  void validate() const {
    auto layout = parameter_layout(backbone, kind);
    if (layout.size() != tensors.size()) {
      throw ConfigError("expected " + std::to_string(layout.size()) + " parameter tensors, got " +
                        std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (tensors[i].name != layout[i].first || tensors[i].value.shape() != layout[i].second) {
        throw ConfigError("parameter " + std::to_string(i) + " should be " + layout[i].first + " " +
                          to_string(layout[i].second) + ", got " + tensors[i].name + " " +
                          to_string(tensors[i].value.shape()));
      }
    }
  }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& t : tensors) total += t.value.size();
    return total;
  }
};

/// He-scaled normal weights, zero biases.
inline ModelParams init_params(const Backbone& bb, PipelineKind kind, std::uint64_t seed) {
  ModelParams params{bb, kind, {}};
  Rng rng(seed);
  for (auto& [name, shape] : parameter_layout(bb, kind)) {
    Tensor t(shape, 0.0);
    if (shape.size() > 1) {
      const std::size_t fan_in = element_count(shape) / (shape.size() == 4 ? shape[0] : shape[1]);
      const double gain = name.starts_with("head") ? 1.0 : 2.0;
      const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
      for (double& v : t.values()) v = rng.normal(0.0, stddev);
    }
    params.tensors.push_back({name, std::move(t)});
  }
  return params;
}

/// Graph handles produced by build_forward.
struct ForwardNodes {
  NodeId input;
  std::vector<NodeId> params;
  NodeId head;                 // logits [N,5] or raw score [N,1]
  std::optional<NodeId> probs; // [N,5], absent for the regressor
  NodeId score;                // expected score [N,1] or regressor output
};

/// Expected severity score of probability rows: sum_i (i+1) * p_i.
inline NodeId expected_score(Graph& g, NodeId probs) {
  return ops::row_weighted_sum(g, probs, std::vector<double>(kClassWeights.begin(), kClassWeights.end()));
}

/// Wires the network onto `g` using existing parameter leaves, ordered as in
/// parameter_layout(backbone, kind).
inline ForwardNodes build_forward(Graph& g, const Backbone& bb, PipelineKind kind, NodeId input,
                                  std::span<const NodeId> param_leaves) {
  const Shape& xs = g.shape(input);
  if (xs.size() != 4 || xs[1] != bb.in_channels || xs[2] != bb.input_size ||
      xs[3] != bb.input_size) {
    throw DimensionError("model expects input [N," + std::to_string(bb.in_channels) + "," +
                         std::to_string(bb.input_size) + "," + std::to_string(bb.input_size) +
                         "], got " + to_string(xs));
  }
  if (param_leaves.size() != 2 * bb.conv_channels.size() + 4) {
    throw DimensionError("backbone needs " + std::to_string(2 * bb.conv_channels.size() + 4) +
                         " parameter tensors, got " + std::to_string(param_leaves.size()));
  }
  ForwardNodes nodes;
  nodes.input = input;
  nodes.params.assign(param_leaves.begin(), param_leaves.end());

  NodeId h = input;
  std::size_t p = 0;
  for (std::size_t i = 0; i < bb.conv_channels.size(); ++i) {
    h = ops::conv2d(g, h, nodes.params[p], 1, bb.kernel / 2);
    h = ops::add_channel_bias(g, h, nodes.params[p + 1]);
    h = ops::relu(g, h);
    h = ops::mean_pool(g, h, bb.pool);
    p += 2;
  }
  h = ops::global_mean_pool(g, h);
  h = ops::relu(g, ops::dense(g, h, nodes.params[p], nodes.params[p + 1]));
  nodes.head = ops::dense(g, h, nodes.params[p + 2], nodes.params[p + 3]);
  if (has_probabilities(kind)) {
    nodes.probs = ops::softmax(g, nodes.head);
    nodes.score = expected_score(g, *nodes.probs);
  } else {
    nodes.score = nodes.head;
  }
  return nodes;
}

inline ForwardNodes build_forward(Graph& g, const ModelParams& params, NodeId input) {
  std::vector<NodeId> leaves;
  leaves.reserve(params.tensors.size());
  for (const auto& t : params.tensors) leaves.push_back(g.leaf(t.value));
  return build_forward(g, params.backbone, params.kind, input, leaves);
}

inline void check_label(std::size_t label) {
  if (label >= kNumClasses) {
    throw ValidationError("severity label " + std::to_string(label) + " outside 0..4");
  }
}

/// Sum over the batch of per-sample losses:
///   classifier  CE(p; y)
///   regressor   (y+1 - score)^2
///   combined    CE(p; y) + w * (y+1 - expected_score(p))^2
inline NodeId batch_loss_sum(Graph& g, const ForwardNodes& fwd, PipelineKind kind,
                             std::span<const std::size_t> labels, double regression_weight = 1.0) {
  const std::size_t n = g.shape(fwd.head)[0];
  if (labels.size() != n) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for a batch of " +
                         std::to_string(n));
  }
  Tensor targets(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    check_label(labels[i]);
    targets[i] = static_cast<double>(labels[i] + 1);
  }
  auto squared_error = [&] {
    return ops::square(g, ops::sub(g, fwd.score, g.leaf(targets)));
  };
  if (kind == PipelineKind::Regressor) return ops::sum(g, squared_error());

  NodeId ce = ops::clamped_nll(g, ops::log_softmax(g, fwd.head), labels,
                               std::log(kProbabilityFloor));
  if (kind == PipelineKind::Classifier) return ops::sum(g, ce);
  NodeId penalty = ops::reshape(g, squared_error(), Shape{n});
  return ops::sum(g, ops::add(g, ce, ops::scale(g, penalty, regression_weight)));
}

/// Expected score of probability rows [N,5] -> [N,1]; rows must be
/// nonnegative and sum to 1 within 1e-9.
inline Tensor expected_score(const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(1) != kNumClasses) {
    throw DimensionError("expected_score needs [N,5] probabilities, got " + to_string(probs.shape()));
  }
  const std::size_t n = probs.dim(0);
  Tensor out(Shape{n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    double total = 0.0, score = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const double p = probs[r * kNumClasses + c];
      if (p < 0.0) throw ValidationError("negative probability in row " + std::to_string(r));
      total += p;
      score += kClassWeights[c] * p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ValidationError("probability row " + std::to_string(r) + " sums to " +
                            std::to_string(total));
    }
    out[r] = score;
  }
  return out;
}

/// Loss of one sample from the model output: probabilities for the
/// classifier and combined heads, a single score for the regressor.
inline double sample_loss(PipelineKind kind, std::span<const double> output, std::size_t label,
                          double regression_weight = 1.0) {
  check_label(label);
  const double target = static_cast<double>(label + 1);
  if (kind == PipelineKind::Regressor) {
    if (output.size() != 1) throw DimensionError("regressor output must be a single score");
    return (target - output[0]) * (target - output[0]);
  }
  if (output.size() != kNumClasses) throw DimensionError("probability output must have 5 entries");
  const double ce = -std::log(std::max(output[label], kProbabilityFloor));
  if (kind == PipelineKind::Classifier) return ce;
  Tensor row(Shape{1, kNumClasses}, std::vector<double>(output.begin(), output.end()));
  const double gap = target - expected_score(row)[0];
  return ce + regression_weight * gap * gap;
}

/// Index of the largest probability; ties resolve to the lowest index.
inline std::size_t argmax_class(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.size(); ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return best;
}

/// Severity class of a regressor score: clamp(round(score), 1, 5) - 1.
inline std::size_t class_from_score(double score) {
  const double rounded = std::clamp(std::round(score), 1.0, 5.0);
  return static_cast<std::size_t>(rounded) - 1;
}

struct Prediction {
  Tensor probs;  // [N,5]; empty for the regressor
  Tensor score;  // [N,1]

  std::size_t size() const { return score.empty() ? 0 : score.dim(0); }

  std::size_t predicted_class(std::size_t row) const {
    if (probs.empty()) return class_from_score(score[row]);
    return argmax_class(probs.values().subspan(row * kNumClasses, kNumClasses));
  }
};

/// Inference over a batch [N,C,H,W], processed in chunks.
inline Prediction forward(const ModelParams& params, const Tensor& batch, std::size_t chunk = 32) {
  const Shape expected = params.backbone.input_shape(batch.rank() == 4 ? batch.dim(0) : 1);
  if (batch.shape() != expected) {
    throw DimensionError("model expects input " + to_string(expected) + ", got " +
                         to_string(batch.shape()));
  }
  const std::size_t n = batch.dim(0);
  const std::size_t per_sample = batch.size() / n;
  Prediction out;
  if (has_probabilities(params.kind)) out.probs = Tensor(Shape{n, kNumClasses});
  out.score = Tensor(Shape{n, 1});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    std::vector<double> slice(batch.data() + start * per_sample,
                              batch.data() + (start + count) * per_sample);
    Graph g;
    NodeId x = g.leaf(Tensor(params.backbone.input_shape(count), std::move(slice)));
    ForwardNodes fwd = build_forward(g, params, x);
    if (fwd.probs) {
      const Tensor& p = g.value(*fwd.probs);
      std::copy(p.values().begin(), p.values().end(), out.probs.data() + start * kNumClasses);
    }
    const Tensor& s = g.value(fwd.score);
    std::copy(s.values().begin(), s.values().end(), out.score.data() + start);
  }
  return out;
}

}  // namespace cytograd
