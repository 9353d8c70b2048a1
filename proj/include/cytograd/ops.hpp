#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cytograd/error.hpp"
#include "cytograd/graph.hpp"
#include "cytograd/tensor.hpp"

/// Differentiable operations recorded on a Graph.
///
/// Every op computes its forward value eagerly and registers a closure that
/// accumulates input gradients. Convolution follows the cross-correlation
/// convention (the kernel is not flipped).
namespace cytograd::ops {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline void require_rank(const Graph& g, NodeId x, std::size_t rank, const char* op) {
  if (g.shape(x).size() != rank) {
    throw DimensionError(std::string(op) + " expects a rank-" + std::to_string(rank) +
                         " tensor, got " + to_string(g.shape(x)));
  }
}

inline void require_same_shape(const Graph& g, NodeId a, NodeId b, const char* op) {
  if (g.shape(a) != g.shape(b)) {
    throw DimensionError(std::string(op) + " shape mismatch: " + to_string(g.shape(a)) + " vs " +
                         to_string(g.shape(b)));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// cols[(c*kh + i)*kw + j, oy*out_w + ox] = x[c, oy*stride + i - pad, ox*stride + j - pad]
inline void im2col(const double* x, const ConvGeometry& geo, double* cols) {
  const std::size_t positions = geo.positions();
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        double* row = cols + ((c * geo.kh + i) * geo.kw + j) * positions;
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const long y = static_cast<long>(oy * geo.stride + i) - static_cast<long>(geo.pad);
          double* dst = row + oy * geo.out_w;
          if (y < 0 || y >= static_cast<long>(geo.height)) {
            std::fill(dst, dst + geo.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * geo.height + static_cast<std::size_t>(y)) * geo.width;
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const long xx = static_cast<long>(ox * geo.stride + j) - static_cast<long>(geo.pad);
            dst[ox] = (xx < 0 || xx >= static_cast<long>(geo.width)) ? 0.0
                                                                     : src[static_cast<std::size_t>(xx)];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& geo, double* x) {
  const std::size_t positions = geo.positions();
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        const double* row = cols + ((c * geo.kh + i) * geo.kw + j) * positions;
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const long y = static_cast<long>(oy * geo.stride + i) - static_cast<long>(geo.pad);
          if (y < 0 || y >= static_cast<long>(geo.height)) continue;
          double* dst = x + (c * geo.height + static_cast<std::size_t>(y)) * geo.width;
          const double* src = row + oy * geo.out_w;
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const long xx = static_cast<long>(ox * geo.stride + j) - static_cast<long>(geo.pad);
            if (xx >= 0 && xx < static_cast<long>(geo.width)) dst[xx] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// input [N,C,H,W], kernel [K,C,h,w] -> [N,K,H',W'] with
/// H' = (H + 2*padding - h) / stride + 1.
inline NodeId conv2d(Graph& g, NodeId input, NodeId kernel, std::size_t stride, std::size_t padding) {
  detail::require_rank(g, input, 4, "conv2d input");
  detail::require_rank(g, kernel, 4, "conv2d kernel");
  const Shape& xs = g.shape(input);
  const Shape& ks = g.shape(kernel);
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  if (xs[1] != ks[1] || ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding) {
    throw DimensionError("conv2d cannot apply kernel " + to_string(ks) + " to input " +
                         to_string(xs) + " with padding " + std::to_string(padding));
  }
  detail::ConvGeometry geo{xs[1], xs[2], xs[3], ks[2], ks[3], stride, padding,
                           (xs[2] + 2 * padding - ks[2]) / stride + 1,
                           (xs[3] + 2 * padding - ks[3]) / stride + 1};
  const std::size_t batch = xs[0];
  const std::size_t out_channels = ks[0];
  const std::size_t patch = geo.patch();
  const std::size_t positions = geo.positions();

  auto cols = std::make_shared<std::vector<double>>(batch * patch * positions);
  Tensor out(Shape{batch, out_channels, geo.out_h, geo.out_w});
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(kernel);
  detail::ConstMatMap wmat(w.data(), out_channels, patch);
  for (std::size_t n = 0; n < batch; ++n) {
    double* cn = cols->data() + n * patch * positions;
    detail::im2col(x.data() + n * geo.channels * geo.height * geo.width, geo, cn);
    detail::MatMap on(out.data() + n * out_channels * positions, out_channels, positions);
    on.noalias() = wmat * detail::ConstMatMap(cn, patch, positions);
  }

  Tensor wcopy = w;
  return g.record(
      "conv2d", std::move(out), {input, kernel},
      [geo, batch, out_channels, cols, wcopy = std::move(wcopy)](const Tensor& gout,
                                                                 std::span<Tensor* const> gin) {
        const std::size_t patch = geo.patch();
        const std::size_t positions = geo.positions();
        detail::ConstMatMap wmat(wcopy.data(), out_channels, patch);
        detail::RowMatrix dcols(patch, positions);
        for (std::size_t n = 0; n < batch; ++n) {
          detail::ConstMatMap gn(gout.data() + n * out_channels * positions, out_channels,
                                 positions);
          detail::ConstMatMap cn(cols->data() + n * patch * positions, patch, positions);
          if (gin[1]) {
            detail::MatMap gw(gin[1]->data(), out_channels, patch);
            gw.noalias() += gn * cn.transpose();
          }
          if (gin[0]) {
            dcols.noalias() = wmat.transpose() * gn;
            detail::col2im_add(dcols.data(), geo,
                               gin[0]->data() + n * geo.channels * geo.height * geo.width);
          }
        }
      });
}

/// Adds a per-channel bias to axis 1 of [N,C,...].
inline NodeId add_channel_bias(Graph& g, NodeId input, NodeId bias) {
  const Shape& xs = g.shape(input);
  const Shape& bs = g.shape(bias);
  if (xs.size() < 2 || bs.size() != 1 || bs[0] != xs[1]) {
    throw DimensionError("channel bias " + to_string(bs) + " does not match input " +
                         to_string(xs));
  }
  const std::size_t batch = xs[0], channels = xs[1];
  const std::size_t inner = element_count(xs) / (batch * channels);
  Tensor out = g.value(input);
  const Tensor& b = g.value(bias);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = out.data() + (n * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
    }
  }
  return g.record("add_channel_bias", std::move(out), {input, bias},
                  [batch, channels, inner](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (gin[0]) gin[0]->axpy(1.0, gout);
                    if (gin[1]) {
                      for (std::size_t n = 0; n < batch; ++n) {
                        for (std::size_t c = 0; c < channels; ++c) {
                          const double* p = gout.data() + (n * channels + c) * inner;
                          double acc = 0.0;
                          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                          (*gin[1])[c] += acc;
                        }
                      }
                    }
                  });
}

/// input [N,D] * weights [D,M] + bias [M]
inline NodeId dense(Graph& g, NodeId input, NodeId weights, NodeId bias) {
  detail::require_rank(g, input, 2, "dense input");
  detail::require_rank(g, weights, 2, "dense weights");
  detail::require_rank(g, bias, 1, "dense bias");
  const Shape& xs = g.shape(input);
  const Shape& ws = g.shape(weights);
  if (xs[1] != ws[0] || g.shape(bias)[0] != ws[1]) {
    throw DimensionError("dense cannot map input " + to_string(xs) + " with weights " +
                         to_string(ws) + " and bias " + to_string(g.shape(bias)));
  }
  const std::size_t n = xs[0], d = xs[1], m = ws[1];
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(weights);
  const Tensor& b = g.value(bias);
  Tensor out(Shape{n, m});
  detail::MatMap o(out.data(), n, m);
  o.noalias() = detail::ConstMatMap(x.data(), n, d) * detail::ConstMatMap(w.data(), d, m);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) o(r, c) += b[c];
  }
  return g.record("dense", std::move(out), {input, weights, bias},
                  [n, d, m, x, w](const Tensor& gout, std::span<Tensor* const> gin) {
                    detail::ConstMatMap go(gout.data(), n, m);
                    if (gin[0]) {
                      detail::MatMap gx(gin[0]->data(), n, d);
                      gx.noalias() += go * detail::ConstMatMap(w.data(), d, m).transpose();
                    }
                    if (gin[1]) {
                      detail::MatMap gw(gin[1]->data(), d, m);
                      gw.noalias() += detail::ConstMatMap(x.data(), n, d).transpose() * go;
                    }
                    if (gin[2]) {
                      for (std::size_t r = 0; r < n; ++r) {
                        for (std::size_t c = 0; c < m; ++c) (*gin[2])[c] += go(r, c);
                      }
                    }
                  });
}

inline NodeId relu(Graph& g, NodeId input) {
  Tensor out = g.value(input);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  Tensor mask_src = out;
  return g.record("relu", std::move(out), {input},
                  [mask_src = std::move(mask_src)](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t i = 0; i < gout.size(); ++i) {
                      if (mask_src[i] > 0.0) (*gin[0])[i] += gout[i];
                    }
                  });
}

/// Non-overlapping window x window average pooling on [N,C,H,W]. Trailing
/// rows/columns that do not fill a window are dropped.
inline NodeId mean_pool(Graph& g, NodeId input, std::size_t window) {
  detail::require_rank(g, input, 4, "mean_pool");
  const Shape& xs = g.shape(input);
  if (window == 0 || window > xs[2] || window > xs[3]) {
    throw DimensionError("mean_pool window " + std::to_string(window) + " does not fit " +
                         to_string(xs));
  }
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = h / window, ow = w / window;
  const double scale = 1.0 / static_cast<double>(window * window);
  const Tensor& x = g.value(input);
  Tensor out(Shape{xs[0], xs[1], oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh * window; ++y) {
      for (std::size_t xx = 0; xx < ow * window; ++xx) dst[(y / window) * ow + xx / window] += src[y * w + xx];
    }
    for (std::size_t i = 0; i < oh * ow; ++i) dst[i] *= scale;
  }
  return g.record("mean_pool", std::move(out), {input},
                  [planes, h, w, oh, ow, window, scale](const Tensor& gout,
                                                        std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t p = 0; p < planes; ++p) {
                      const double* src = gout.data() + p * oh * ow;
                      double* dst = gin[0]->data() + p * h * w;
                      for (std::size_t y = 0; y < oh * window; ++y) {
                        for (std::size_t xx = 0; xx < ow * window; ++xx) {
                          dst[y * w + xx] += scale * src[(y / window) * ow + xx / window];
                        }
                      }
                    }
                  });
}

/// [N,C,H,W] -> [N,C], averaging each channel plane.
inline NodeId global_mean_pool(Graph& g, NodeId input) {
  detail::require_rank(g, input, 4, "global_mean_pool");
  const Shape& xs = g.shape(input);
  const std::size_t planes = xs[0] * xs[1], area = xs[2] * xs[3];
  const double scale = 1.0 / static_cast<double>(area);
  const Tensor& x = g.value(input);
  Tensor out(Shape{xs[0], xs[1]});
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += x[p * area + i];
    out[p] = acc * scale;
  }
  return g.record("global_mean_pool", std::move(out), {input},
                  [planes, area, scale](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t p = 0; p < planes; ++p) {
                      for (std::size_t i = 0; i < area; ++i) (*gin[0])[p * area + i] += scale * gout[p];
                    }
                  });
}

inline NodeId reshape(Graph& g, NodeId input, Shape shape) {
  Tensor out = g.value(input).reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {input},
                  [](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    auto dst = gin[0]->values();
                    auto src = gout.values();
                    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
                  });
}

/// [N, ...] -> [N, prod(...)]
inline NodeId flatten(Graph& g, NodeId input) {
  const Shape& xs = g.shape(input);
  return reshape(g, input, Shape{xs[0], element_count(xs) / xs[0]});
}

/// Row-wise softmax of [N,K] with max subtraction.
inline NodeId softmax(Graph& g, NodeId input) {
  detail::require_rank(g, input, 2, "softmax");
  const std::size_t n = g.shape(input)[0], k = g.shape(input)[1];
  Tensor out = g.value(input);
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < k; ++c) row[c] /= total;
  }
  Tensor probs = out;
  return g.record("softmax", std::move(out), {input},
                  [n, k, probs = std::move(probs)](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t r = 0; r < n; ++r) {
                      const double* p = probs.data() + r * k;
                      const double* go = gout.data() + r * k;
                      double dot = 0.0;
                      for (std::size_t c = 0; c < k; ++c) dot += p[c] * go[c];
                      double* gi = gin[0]->data() + r * k;
                      for (std::size_t c = 0; c < k; ++c) gi[c] += p[c] * (go[c] - dot);
                    }
                  });
}

/// Row-wise log-softmax of [N,K] via log-sum-exp.
inline NodeId log_softmax(Graph& g, NodeId input) {
  detail::require_rank(g, input, 2, "log_softmax");
  const std::size_t n = g.shape(input)[0], k = g.shape(input)[1];
  Tensor out = g.value(input);
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) total += std::exp(row[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < k; ++c) row[c] -= lse;
  }
  Tensor logp = out;
  return g.record("log_softmax", std::move(out), {input},
                  [n, k, logp = std::move(logp)](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t r = 0; r < n; ++r) {
                      const double* lp = logp.data() + r * k;
                      const double* go = gout.data() + r * k;
                      double total = 0.0;
                      for (std::size_t c = 0; c < k; ++c) total += go[c];
                      double* gi = gin[0]->data() + r * k;
                      for (std::size_t c = 0; c < k; ++c) gi[c] += go[c] - std::exp(lp[c]) * total;
                    }
                  });
}

/// Per-row negative log-likelihood from log-probabilities [N,K]:
/// out[r] = -max(logp[r, labels[r]], log_floor). Returns [N].
inline NodeId clamped_nll(Graph& g, NodeId log_probs, std::span<const std::size_t> labels,
                          double log_floor) {
  detail::require_rank(g, log_probs, 2, "clamped_nll");
  const std::size_t n = g.shape(log_probs)[0], k = g.shape(log_probs)[1];
  if (labels.size() != n) {
    throw DimensionError("clamped_nll got " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  std::vector<char> active(n, 0);
  Tensor out(Shape{n});
  const Tensor& lp = g.value(log_probs);
  for (std::size_t r = 0; r < n; ++r) {
    if (lab[r] >= k) throw ValidationError("label " + std::to_string(lab[r]) + " out of range");
    const double v = lp[r * k + lab[r]];
    active[r] = v > log_floor;
    out[r] = -(active[r] ? v : log_floor);
  }
  return g.record("clamped_nll", std::move(out), {log_probs},
                  [k, lab = std::move(lab), active = std::move(active)](
                      const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t r = 0; r < lab.size(); ++r) {
                      if (active[r]) (*gin[0])[r * k + lab[r]] -= gout[r];
                    }
                  });
}

/// [N,K] -> [N,1]: out[r] = sum_c weights[c] * x[r,c] with constant weights.
inline NodeId row_weighted_sum(Graph& g, NodeId input, std::vector<double> weights) {
  detail::require_rank(g, input, 2, "row_weighted_sum");
  const std::size_t n = g.shape(input)[0], k = g.shape(input)[1];
  if (weights.size() != k) {
    throw DimensionError("row_weighted_sum has " + std::to_string(weights.size()) +
                         " weights for rows of width " + std::to_string(k));
  }
  const Tensor& x = g.value(input);
  Tensor out(Shape{n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) acc += weights[c] * x[r * k + c];
    out[r] = acc;
  }
  return g.record("row_weighted_sum", std::move(out), {input},
                  [n, k, weights = std::move(weights)](const Tensor& gout,
                                                       std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t c = 0; c < k; ++c) (*gin[0])[r * k + c] += weights[c] * gout[r];
                    }
                  });
}

inline NodeId add(Graph& g, NodeId a, NodeId b) {
  detail::require_same_shape(g, a, b, "add");
  Tensor out = g.value(a);
  out.axpy(1.0, g.value(b));
  return g.record("add", std::move(out), {a, b},
                  [](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (gin[0]) gin[0]->axpy(1.0, gout);
                    if (gin[1]) gin[1]->axpy(1.0, gout);
                  });
}

inline NodeId sub(Graph& g, NodeId a, NodeId b) {
  detail::require_same_shape(g, a, b, "sub");
  Tensor out = g.value(a);
  out.axpy(-1.0, g.value(b));
  return g.record("sub", std::move(out), {a, b},
                  [](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (gin[0]) gin[0]->axpy(1.0, gout);
                    if (gin[1]) gin[1]->axpy(-1.0, gout);
                  });
}

inline NodeId mul(Graph& g, NodeId a, NodeId b) {
  detail::require_same_shape(g, a, b, "mul");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record("mul", std::move(out), {a, b},
                  [av, bv](const Tensor& gout, std::span<Tensor* const> gin) {
                    for (std::size_t i = 0; i < gout.size(); ++i) {
                      if (gin[0]) (*gin[0])[i] += gout[i] * bv[i];
                      if (gin[1]) (*gin[1])[i] += gout[i] * av[i];
                    }
                  });
}

inline NodeId scale(Graph& g, NodeId input, double factor) {
  Tensor out = g.value(input);
  for (double& v : out.values()) v *= factor;
  return g.record("scale", std::move(out), {input},
                  [factor](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (gin[0]) gin[0]->axpy(factor, gout);
                  });
}

inline NodeId square(Graph& g, NodeId input) {
  const Tensor& x = g.value(input);
  Tensor out = x;
  for (double& v : out.values()) v *= v;
  return g.record("square", std::move(out), {input},
                  [x](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += 2.0 * x[i] * gout[i];
                  });
}

/// Sum of all elements -> scalar [1].
inline NodeId sum(Graph& g, NodeId input) {
  double acc = 0.0;
  for (double v : g.value(input).values()) acc += v;
  return g.record("sum", Tensor::scalar(acc), {input},
                  [](const Tensor& gout, std::span<Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (double& v : gin[0]->values()) v += gout[0];
                  });
}

/// Mean of all elements -> scalar [1].
inline NodeId mean(Graph& g, NodeId input) {
  return scale(g, sum(g, input), 1.0 / static_cast<double>(g.value(input).size()));
}

}  // namespace cytograd::ops
