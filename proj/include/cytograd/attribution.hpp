#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cytograd/data.hpp"
#include "cytograd/error.hpp"
#include "cytograd/graph.hpp"
#include "cytograd/image_io.hpp"
#include "cytograd/model.hpp"
#include "cytograd/ops.hpp"
#include "cytograd/tensor.hpp"

namespace cytograd {

/// Maps a batch node [N,...] to one differentiable output per sample,
/// shaped [N] or [N,1].
using ScalarModel = std::function<NodeId(Graph&, NodeId batch)>;

enum class BaselineKind { White, Black };

inline std::string_view to_string(BaselineKind kind) {
  return kind == BaselineKind::White ? "white" : "black";
}

inline BaselineKind parse_baseline_kind(std::string_view name) {
  if (name == "white") return BaselineKind::White;
  if (name == "black") return BaselineKind::Black;
  throw ConfigError("unknown baseline '" + std::string(name) + "' (expected white or black)");
}

/// All-ones image: a blank slide in [0,1] intensity.
inline Tensor white_baseline(const Shape& shape) { return Tensor(shape, 1.0); }

inline Tensor black_baseline(const Shape& shape) { return Tensor(shape, 0.0); }

inline Tensor make_baseline(BaselineKind kind, const Shape& shape) {
  return kind == BaselineKind::White ? white_baseline(shape) : black_baseline(shape);
}

/// What the attribution explains: the severity score (expected score for
/// probability heads, raw output for the regressor) or one class probability.
struct AttributionTarget {
  enum class Kind { Score, ClassProbability };
  Kind kind = Kind::Score;
  std::size_t cls = 0;

  friend bool operator==(const AttributionTarget&, const AttributionTarget&) = default;

  std::string label() const {
    return kind == Kind::Score ? "score" : "class" + std::to_string(cls);
  }
};

inline ScalarModel model_output(const ModelParams& params, AttributionTarget target = {}) {
  if (target.kind == AttributionTarget::Kind::ClassProbability) {
    if (!has_probabilities(params.kind)) {
      throw ConfigError("class-probability targets need a classifier or combined model");
    }
    check_label(target.cls);
  }
  return [&params, target](Graph& g, NodeId batch) {
    ForwardNodes fwd = build_forward(g, params, batch);
    if (target.kind == AttributionTarget::Kind::Score) return fwd.score;
    std::vector<double> onehot(kNumClasses, 0.0);
    onehot[target.cls] = 1.0;
    return ops::row_weighted_sum(g, *fwd.probs, std::move(onehot));
  };
}

/// F(x) for a single unbatched input.
inline double evaluate_output(const ScalarModel& model, const Tensor& input) {
  Shape batched{1};
  batched.insert(batched.end(), input.shape().begin(), input.shape().end());
  Graph g;
  NodeId out = model(g, g.leaf(input.reshaped(batched)));
  return g.value(out).item();
}

struct AttributionMap {
  Tensor values;        // signed, same shape as the image
  Tensor pixel_values;  // [H,W] = sum over channels of |values|
  BaselineKind baseline_kind = BaselineKind::White;
  std::size_t steps = 0;
  AttributionTarget target;
  std::string source_id;

  double total() const {
    double acc = 0.0;
    for (double v : values.values()) acc += v;
    return acc;
  }
};

/// Per-pixel magnitude of a [C,H,W] attribution: sum over channels of |v|.
inline Tensor aggregate_pixels(const Tensor& values) {
  if (values.rank() != 3) throw DimensionError("attribution values must be [C,H,W]");
  const std::size_t c = values.dim(0), plane = values.dim(1) * values.dim(2);
  Tensor out(Shape{values.dim(1), values.dim(2)});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) out[i] += std::abs(values[ch * plane + i]);
  }
  return out;
}

/// Integrated gradients with a right-endpoint Riemann sum:
///   A_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} dF/dx_i at x' + (k/m)(x - x').
/// Interpolation points are evaluated in batches of `chunk`.
inline AttributionMap integrated_gradients(const ScalarModel& model, const Tensor& image,
                                           const Tensor& baseline, std::size_t steps,
                                           std::size_t chunk = 16) {
  if (image.shape() != baseline.shape()) {
    throw DimensionError("image " + to_string(image.shape()) + " and baseline " +
                         to_string(baseline.shape()) + " differ in shape");
  }
  if (steps == 0) throw ValidationError("integrated gradients needs at least one step");
  if (chunk == 0) chunk = 1;
  const std::size_t per = image.size();
  Tensor grad_sum(image.shape(), 0.0);
  for (std::size_t first = 1; first <= steps; first += chunk) {
    const std::size_t count = std::min(chunk, steps - first + 1);
    Shape batched{count};
    batched.insert(batched.end(), image.shape().begin(), image.shape().end());
    Tensor points(batched);
    for (std::size_t j = 0; j < count; ++j) {
      const double alpha = static_cast<double>(first + j) / static_cast<double>(steps);
      for (std::size_t i = 0; i < per; ++i) {
        points[j * per + i] = baseline[i] + alpha * (image[i] - baseline[i]);
      }
    }
    Graph g;
    NodeId x = g.leaf(std::move(points));
    NodeId out = ops::sum(g, model(g, x));
    Gradients grads = g.backward(out, std::vector<NodeId>{x});
    const Tensor& gx = grads[x];
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t i = 0; i < per; ++i) grad_sum[i] += gx[j * per + i];
    }
  }
  AttributionMap map;
  map.steps = steps;
  map.values = Tensor(image.shape());
  for (std::size_t i = 0; i < per; ++i) {
    map.values[i] = (image[i] - baseline[i]) * grad_sum[i] / static_cast<double>(steps);
  }
  if (!map.values.all_finite()) throw NumericError("non-finite attribution values");
  if (image.rank() == 3) map.pixel_values = aggregate_pixels(map.values);
  return map;
}

/// Model-level convenience: attributes `target` of `params` on one sample.
inline AttributionMap attribute_sample(const ModelParams& params, const Sample& sample,
                                       BaselineKind baseline, std::size_t steps,
                                       AttributionTarget target = {}) {
  AttributionMap map = integrated_gradients(model_output(params, target), sample.image,
                                            make_baseline(baseline, sample.image.shape()), steps);
  map.baseline_kind = baseline;
  map.target = target;
  map.source_id = sample.source_id;
  return map;
}

/// |sum A - (F(x) - F(x'))|, with the output difference from two forward passes.
inline double completeness_error(const ScalarModel& model, const AttributionMap& map,
                                 const Tensor& image, const Tensor& baseline) {
  return std::abs(map.total() - (evaluate_output(model, image) - evaluate_output(model, baseline)));
}

struct AttributionStats {
  double at_n = 0.0;
  double at_c = 0.0;
  std::optional<double> ratio;  // nullopt when at_c == 0 (infinite ratio)
  double at_n_signed = std::numeric_limits<double>::quiet_NaN();
  double at_c_signed = std::numeric_limits<double>::quiet_NaN();
  std::size_t severity = 0;
  std::string source_id;

  bool ratio_infinite() const { return !ratio.has_value(); }
};

/// Fractions of attribution mass inside the nucleus and cytoplasm masks,
/// computed on the channel-aggregated magnitudes. The signed variants use
/// per-pixel channel sums of the signed values and are NaN when their
/// denominator is zero.
inline AttributionStats attribution_stats(const AttributionMap& map, const Tensor& mask) {
  if (mask.shape() != map.pixel_values.shape()) {
    throw DimensionError("mask " + to_string(mask.shape()) + " does not match attribution map " +
                         to_string(map.pixel_values.shape()));
  }
  constexpr double background = kBackground, nucleus_code = kNucleus, cytoplasm_code = kCytoplasm;
  const std::size_t plane = mask.size();
  const std::size_t channels = map.values.size() / plane;
  double total = 0.0, nucleus = 0.0, cytoplasm = 0.0;
  double s_total = 0.0, s_nucleus = 0.0, s_cytoplasm = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    const double code = mask[i];
    if (code != background && code != nucleus_code && code != cytoplasm_code) {
      throw ValidationError("mask code " + std::to_string(code) + " outside {0,1,2}");
    }
    double signed_px = 0.0;
    for (std::size_t c = 0; c < channels; ++c) signed_px += map.values[c * plane + i];
    const double px = map.pixel_values[i];
    total += px;
    s_total += signed_px;
    if (code == nucleus_code) {
      nucleus += px;
      s_nucleus += signed_px;
    } else if (code == cytoplasm_code) {
      cytoplasm += px;
      s_cytoplasm += signed_px;
    }
  }
  if (!(total > 0.0)) {
    throw ValidationError("attribution map " + map.source_id +
                          " is all zero; nucleus/cytoplasm fractions are undefined");
  }
  AttributionStats stats;
  stats.source_id = map.source_id;
  stats.at_n = nucleus / total;
  stats.at_c = cytoplasm / total;
  if (stats.at_c > 0.0) stats.ratio = stats.at_n / stats.at_c;
  if (s_total != 0.0) {
    stats.at_n_signed = s_nucleus / s_total;
    stats.at_c_signed = s_cytoplasm / s_total;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Overlay rendering

/// Jet-style colour ramp; 0 is the cold end (dark blue), 1 the hot end.
inline std::array<double, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  auto lobe = [t](double center) { return std::clamp(1.5 - std::abs(4.0 * t - center), 0.0, 1.0); };
  return {lobe(3.0), lobe(2.0), lobe(1.0)};
}

/// Side-by-side panels: original image, heat map of pixel_values normalised
/// by their maximum, and a 50/50 blend of the two.
inline RgbImage render_overlay(const AttributionMap& map, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3 || map.pixel_values.shape() != Shape{image.dim(1), image.dim(2)}) {
    throw DimensionError("overlay needs a [3,H,W] image matching the attribution map");
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  double peak = 0.0;
  for (double v : map.pixel_values.values()) peak = std::max(peak, v);

  RgbImage out{3 * w, h, std::vector<std::uint8_t>(3 * w * h * 3)};
  auto put = [&](std::size_t panel, std::size_t y, std::size_t x, const std::array<double, 3>& rgb) {
    std::uint8_t* px = out.pixels.data() + 3 * (y * out.width + panel * w + x);
    for (std::size_t c = 0; c < 3; ++c) {
      px[c] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb[c], 0.0, 1.0) * 255.0));
    }
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const std::array<double, 3> original{image[i], image[plane + i], image[2 * plane + i]};
      const auto heat = heat_color(peak > 0.0 ? map.pixel_values[i] / peak : 0.0);
      std::array<double, 3> blend;
      for (std::size_t c = 0; c < 3; ++c) blend[c] = 0.5 * original[c] + 0.5 * heat[c];
      put(0, y, x, original);
      put(1, y, x, heat);
      put(2, y, x, blend);
    }
  }
  return out;
}

inline void export_overlay(const AttributionMap& map, const Tensor& image,
                           const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_png_rgb(path, render_overlay(map, image));
}

}  // namespace cytograd
