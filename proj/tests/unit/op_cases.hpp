#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cytograd/ops.hpp"
#include "unit/gradient_check.hpp"

namespace cytograd::testing {

/// One differentiable op with a generator of random inputs.
struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> make_inputs;
  Expression expr;
};

/// Every op of the autodiff layer.
inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  cases.push_back({"conv2d",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor(r, {2, 2, 5, 5}),
                                                random_tensor(r, {3, 2, 3, 3})};
                   },
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return ops::conv2d(g, in[0], in[1], 1, 1);
                   }});
  cases.push_back({"conv2d_strided",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor(r, {1, 2, 6, 5}),
                                                random_tensor(r, {2, 2, 2, 3})};
                   },
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return ops::conv2d(g, in[0], in[1], 2, 0);
                   }});
  cases.push_back({"add_channel_bias",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor(r, {2, 3, 2, 2}), random_tensor(r, {3})};
                   },
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return ops::add_channel_bias(g, in[0], in[1]);
                   }});
  cases.push_back({"dense",
                   [](Rng& r) {
                     return std::vector<Tensor>{random_tensor(r, {3, 4}), random_tensor(r, {4, 2}),
                                                random_tensor(r, {2})};
                   },
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return ops::dense(g, in[0], in[1], in[2]);
                   }});
  cases.push_back({"relu",
                   [](Rng& r) { return std::vector<Tensor>{random_nonzero_tensor(r, {4, 5})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::relu(g, in[0]); }});
  cases.push_back({"mean_pool",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {2, 2, 5, 4})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::mean_pool(g, in[0], 2); }});
  cases.push_back({"global_mean_pool",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {2, 3, 3, 4})}; },
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return ops::global_mean_pool(g, in[0]);
                   }});
  cases.push_back({"reshape",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {2, 3, 2})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::flatten(g, in[0]); }});
  cases.push_back({"softmax",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 5}, -3.0, 3.0)}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::softmax(g, in[0]); }});
  cases.push_back({"log_softmax",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 5}, -3.0, 3.0)}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::log_softmax(g, in[0]); }});
  cases.push_back({"clamped_nll",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {4, 5}, -3.0, -0.1)}; },
                   [](Graph& g, const std::vector<NodeId>& in) {
                     const std::vector<std::size_t> labels{0, 4, 2, 3};
                     return ops::clamped_nll(g, in[0], labels, std::log(1e-12));
                   }});
  cases.push_back({"row_weighted_sum",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 5})}; },
                   [](Graph& g, const std::vector<NodeId>& in) {
                     return ops::row_weighted_sum(g, in[0], {1, 2, 3, 4, 5});
                   }});
  cases.push_back({"add",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 2}), random_tensor(r, {3, 2})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::add(g, in[0], in[1]); }});
  cases.push_back({"sub",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 2}), random_tensor(r, {3, 2})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::sub(g, in[0], in[1]); }});
  cases.push_back({"mul",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 2}), random_tensor(r, {3, 2})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::mul(g, in[0], in[1]); }});
  cases.push_back({"scale",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {4})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::scale(g, in[0], -1.7); }});
  cases.push_back({"square",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {4})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::square(g, in[0]); }});
  cases.push_back({"sum",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {2, 3})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::sum(g, in[0]); }});
  cases.push_back({"mean",
                   [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {2, 3})}; },
                   [](Graph& g, const std::vector<NodeId>& in) { return ops::mean(g, in[0]); }});
  return cases;
}

}  // namespace cytograd::testing
