#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cytograd/error.hpp"
#include "cytograd/tensor.hpp"

namespace cytograd {

enum class OptimizerKind { SgdMomentum, Adam };

inline std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "sgd";
}

inline OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd" || name == "sgd_momentum") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adam or sgd)");
}

struct SgdHyper {
  double learning_rate = 1e-2;
  double momentum = 0.9;
};

struct SgdState {
  std::vector<Tensor> velocity;
};

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;
};

namespace detail {

inline void check_grads(std::span<const Tensor> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw DimensionError("got " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw DimensionError("gradient " + std::to_string(i) + " has shape " +
                           to_string(grads[i].shape()) + ", parameter has " +
                           to_string(params[i].shape()));
    }
  }
}

inline void init_like(std::vector<Tensor>& state, std::span<const Tensor> params) {
  if (state.size() == params.size()) return;
  state.clear();
  for (const Tensor& p : params) state.emplace_back(p.shape(), 0.0);
}

}  // namespace detail

/// v <- momentum * v + g;  p <- p - lr * v
inline void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, SgdState& state,
                     const SgdHyper& hyper) {
  detail::check_grads(params, grads);
  detail::init_like(state.velocity, params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& v = state.velocity[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = hyper.momentum * v[i] + grads[k][i];
      params[k][i] -= hyper.learning_rate * v[i];
    }
  }
}

/// Adam with bias-corrected moment estimates.
inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
                      const AdamHyper& hyper) {
  detail::check_grads(params, grads);
  detail::init_like(state.first, params);
  detail::init_like(state.second, params);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& m = state.first[k];
    Tensor& v = state.second[k];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = grads[k][i];
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
      params[k][i] -= hyper.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper.epsilon);
    }
  }
}

/// Rescales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.values()) v *= factor;
    }
  }
  return norm;
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  void step(std::span<Tensor> params, std::span<const Tensor> grads) {
    if (config_.kind == OptimizerKind::Adam) {
      adam_step(params, grads, adam_, AdamHyper{config_.learning_rate});
    } else {
      sgd_step(params, grads, sgd_, SgdHyper{config_.learning_rate, config_.momentum});
    }
  }

 private:
  OptimizerConfig config_;
  SgdState sgd_;
  AdamState adam_;
};

}  // namespace cytograd
