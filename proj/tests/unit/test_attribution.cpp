#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "cytograd/attribution.hpp"
#include "cytograd/checkpoint.hpp"
#include "cytograd/log.hpp"
#include "cytograd/rng.hpp"
#include "cytograd/training.hpp"
#include "unit/gradient_check.hpp"

using namespace cytograd;

namespace {

// F(x) = sum_i w_i x_i + b on a batch [N,...].
ScalarModel linear_model(const Tensor& w, double b) {
  return [w, b](Graph& g, NodeId batch) {
    NodeId flat = ops::flatten(g, batch);
    NodeId wn = g.leaf(w.reshaped(Shape{w.size(), 1}));
    NodeId bn = g.leaf(Tensor::scalar(b));
    return ops::dense(g, flat, wn, bn);
  };
}

// F(x) = (w . x)^2, smooth and nonlinear along every path.
ScalarModel quadratic_model(const Tensor& w) {
  return [w](Graph& g, NodeId batch) {
    NodeId flat = ops::flatten(g, batch);
    NodeId wn = g.leaf(w.reshaped(Shape{w.size(), 1}));
    NodeId bn = g.leaf(Tensor::scalar(0.0));
    return ops::square(g, ops::dense(g, flat, wn, bn));
  };
}

Tensor uniform(Rng& rng, Shape shape) { return cytograd::testing::random_tensor(rng, std::move(shape), 0.0, 1.0); }

AttributionMap map_from_pixels(const Tensor& pixels) {
  AttributionMap m;
  m.values = Tensor(Shape{3, pixels.dim(0), pixels.dim(1)}, 0.0);
  std::copy(pixels.values().begin(), pixels.values().end(), m.values.values().begin());
  m.pixel_values = aggregate_pixels(m.values);
  return m;
}

ModelParams small_params(PipelineKind kind, std::uint64_t seed) {
  Backbone bb;
  bb.input_size = 16;
  bb.conv_channels = {4, 6};
  bb.hidden = 8;
  return init_params(bb, kind, seed);
}

}  // namespace

TEST(Attribution, WhiteBaselineIsOnes) {
  const Tensor b = white_baseline(Shape{3, 64, 64});
  EXPECT_EQ(b.shape(), (Shape{3, 64, 64}));
  for (double v : b.values()) EXPECT_EQ(v, 1.0);
  const Tensor black = black_baseline(Shape{3, 2, 2});
  for (double v : black.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(parse_baseline_kind("white"), BaselineKind::White);
  EXPECT_THROW(parse_baseline_kind("grey"), ConfigError);
}

TEST(Attribution, LinearModelIsExactForAnySteps) {
  Rng rng(17);
  for (std::size_t steps : {1u, 3u, 16u}) {
    const Tensor w = cytograd::testing::random_tensor(rng, Shape{3, 4, 4});
    const Tensor x = uniform(rng, Shape{3, 4, 4});
    const AttributionMap m = integrated_gradients(linear_model(w, 0.3), x, black_baseline(x.shape()), steps);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(m.values[i], w[i] * x[i], 1e-12);
  }
}

TEST(Attribution, ImageEqualToBaselineGivesZeroMap) {
  const auto params = small_params(PipelineKind::Combined, 2);
  Rng rng(3);
  const Tensor x = uniform(rng, Shape{3, 16, 16});
  const AttributionMap m = integrated_gradients(model_output(params), x, x, 8);
  for (double v : m.values.values()) EXPECT_EQ(v, 0.0);
  const Tensor white = white_baseline(x.shape());
  const AttributionMap at_white = integrated_gradients(model_output(params), white, white, 4);
  for (double v : at_white.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(Attribution, CompletenessOnNetworkBothBaselines) {
  for (PipelineKind kind : {PipelineKind::Combined, PipelineKind::Regressor}) {
    const auto params = small_params(kind, 5);
    const ScalarModel model = model_output(params);
    Rng rng(6);
    const Tensor x = uniform(rng, Shape{3, 16, 16});
    for (BaselineKind bk : {BaselineKind::White, BaselineKind::Black}) {
      const Tensor base = make_baseline(bk, x.shape());
      const AttributionMap m = integrated_gradients(model, x, base, 256);
      const double delta = std::abs(evaluate_output(model, x) - evaluate_output(model, base));
      EXPECT_LE(completeness_error(model, m, x, base), 0.01 * delta + 1e-6) << to_string(kind);
    }
  }
}

TEST(Attribution, RiemannErrorShrinksWithSteps) {
  Rng rng(8);
  const Tensor w = cytograd::testing::random_tensor(rng, Shape{3, 4, 4});
  const Tensor x = uniform(rng, Shape{3, 4, 4});
  const Tensor base = black_baseline(x.shape());
  const ScalarModel f = quadratic_model(w);
  double previous = INFINITY;
  for (std::size_t m : {4u, 16u, 64u, 256u}) {
    const double err = completeness_error(f, integrated_gradients(f, x, base, m), x, base);
    EXPECT_LT(err, previous);
    previous = err;
  }
  // Right-endpoint sum of a linear integrand: error is exactly (w.x)^2 / m.
  double wx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) wx += w[i] * x[i];
  EXPECT_NEAR(completeness_error(f, integrated_gradients(f, x, base, 10), x, base), wx * wx / 10, 1e-12);
}

TEST(Attribution, ChunkingDoesNotChangeValues) {
  const auto params = small_params(PipelineKind::Combined, 7);
  Rng rng(1);
  const Tensor x = uniform(rng, Shape{3, 16, 16});
  const Tensor base = white_baseline(x.shape());
  const AttributionMap a = integrated_gradients(model_output(params), x, base, 20, 16);
  const AttributionMap b = integrated_gradients(model_output(params), x, base, 20, 3);
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-14);
}

TEST(Attribution, ClassProbabilityTarget) {
  const auto params = small_params(PipelineKind::Combined, 7);
  Rng rng(2);
  const Tensor x = uniform(rng, Shape{3, 16, 16});
  const AttributionTarget t{AttributionTarget::Kind::ClassProbability, 2};
  const ScalarModel f = model_output(params, t);
  const Prediction p = forward(params, x.reshaped(Shape{1, 3, 16, 16}));
  EXPECT_NEAR(evaluate_output(f, x), p.probs[2], 1e-15);
  EXPECT_THROW(model_output(small_params(PipelineKind::Regressor, 1), t), ConfigError);
}

TEST(Attribution, ShapeMismatchAndZeroSteps) {
  const auto f = linear_model(Tensor(Shape{3, 2, 2}, 1.0), 0.0);
  EXPECT_THROW(integrated_gradients(f, Tensor(Shape{3, 2, 2}), Tensor(Shape{3, 2, 3}), 4), DimensionError);
  EXPECT_THROW(integrated_gradients(f, Tensor(Shape{3, 2, 2}), Tensor(Shape{3, 2, 2}), 0), ValidationError);
}

TEST(AttributionStats, AllMassInNucleus) {
  Tensor mask(Shape{2, 2}, std::vector<double>{1, 2, 0, 2});
  const auto m = map_from_pixels(Tensor(Shape{2, 2}, std::vector<double>{3.0, 0, 0, 0}));
  const AttributionStats s = attribution_stats(m, mask);
  EXPECT_EQ(s.at_n, 1.0);
  EXPECT_EQ(s.at_c, 0.0);
  EXPECT_TRUE(s.ratio_infinite());
}

TEST(AttributionStats, UniformMapFollowsArea) {
  Tensor mask(Shape{2, 4}, std::vector<double>{1, 1, 2, 2, 2, 2, 0, 0});
  const AttributionStats s = attribution_stats(map_from_pixels(Tensor(Shape{2, 4}, 0.7)), mask);
  EXPECT_DOUBLE_EQ(s.at_n, 0.25);
  EXPECT_DOUBLE_EQ(s.at_c, 0.5);
  ASSERT_TRUE(s.ratio);
  EXPECT_DOUBLE_EQ(*s.ratio, 0.5);
}

TEST(AttributionStats, InvariantUnderPositiveScaling) {
  Rng rng(4);
  Tensor mask(Shape{6, 6});
  for (double& v : mask.values()) v = static_cast<double>(rng.below(3));
  AttributionMap m;
  m.values = cytograd::testing::random_tensor(rng, Shape{3, 6, 6});
  m.pixel_values = aggregate_pixels(m.values);
  const AttributionStats base = attribution_stats(m, mask);
  AttributionMap scaled = m;
  for (double& v : scaled.values.values()) v *= 37.5;
  scaled.pixel_values = aggregate_pixels(scaled.values);
  const AttributionStats s = attribution_stats(scaled, mask);
  EXPECT_NEAR(s.at_n, base.at_n, 1e-14);
  EXPECT_NEAR(s.at_c, base.at_c, 1e-14);
  EXPECT_NEAR(*s.ratio, *base.ratio, 1e-12);
  EXPECT_LE(s.at_n + s.at_c, 1.0 + 1e-9);
}

TEST(AttributionStats, SignedVariantsUseChannelSums) {
  AttributionMap m;
  m.values = Tensor(Shape{3, 1, 2}, std::vector<double>{1, 2, -1, 1, 1, 1});
  m.pixel_values = aggregate_pixels(m.values);
  EXPECT_EQ(m.pixel_values, Tensor(Shape{1, 2}, std::vector<double>{3, 4}));
  const AttributionStats s = attribution_stats(m, Tensor(Shape{1, 2}, std::vector<double>{1, 2}));
  EXPECT_DOUBLE_EQ(s.at_n, 3.0 / 7.0);
  EXPECT_DOUBLE_EQ(s.at_n_signed, 1.0 / 5.0);
  EXPECT_DOUBLE_EQ(s.at_c_signed, 4.0 / 5.0);
}

TEST(AttributionStats, RejectsZeroMapBadCodesAndShapes) {
  const auto zero = map_from_pixels(Tensor(Shape{2, 2}, 0.0));
  EXPECT_THROW(attribution_stats(zero, Tensor(Shape{2, 2}, 1.0)), ValidationError);
  const auto m = map_from_pixels(Tensor(Shape{2, 2}, 1.0));
  EXPECT_THROW(attribution_stats(m, Tensor(Shape{2, 2}, 3.0)), ValidationError);
  EXPECT_THROW(attribution_stats(m, Tensor(Shape{2, 3}, 1.0)), DimensionError);
}

TEST(Overlay, ZeroMapRendersColdHeatPanel) {
  const Tensor image(Shape{3, 4, 5}, 0.5);
  const auto m = map_from_pixels(Tensor(Shape{4, 5}, 0.0));
  const RgbImage out = render_overlay(m, image);
  ASSERT_EQ(out.width, 15u);
  ASSERT_EQ(out.height, 4u);
  const auto cold = heat_color(0.0);
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 5; x < 10; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(out.pixels[3 * (y * 15 + x) + c], std::lround(cold[c] * 255));
      }
    }
  }
}

TEST(Overlay, MaximumPixelGetsFullHeat) {
  const Tensor image(Shape{3, 2, 2}, 0.0);
  const auto m = map_from_pixels(Tensor(Shape{2, 2}, std::vector<double>{0.1, 0.4, 2.0, 0.0}));
  const RgbImage out = render_overlay(m, image);
  const auto hot = heat_color(1.0);
  const std::size_t px = 3 * (1 * 6 + 2 + 0);  // row 1, heat panel column 0
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.pixels[px + c], std::lround(hot[c] * 255));
}

// Frozen once from this implementation; guards against silent rendering drift.
TEST(Overlay, GoldenPixels) {
  Rng rng(2024);
  const Tensor image = uniform(rng, Shape{3, 8, 8});
  AttributionMap m;
  m.values = cytograd::testing::random_tensor(rng, Shape{3, 8, 8});
  m.pixel_values = aggregate_pixels(m.values);
  const RgbImage out = render_overlay(m, image);
  const std::string bytes(out.pixels.begin(), out.pixels.end());
  EXPECT_EQ(fnv1a64(bytes), 0x1534429c877907a1ULL);
}

TEST(Overlay, FileBytesAreDeterministic) {
  const auto dir = std::filesystem::temp_directory_path() / "cytograd_test_overlay";
  std::filesystem::remove_all(dir);
  Rng rng(1);
  const Tensor image = uniform(rng, Shape{3, 8, 8});
  const auto m = map_from_pixels(uniform(rng, Shape{8, 8}));
  export_overlay(m, image, dir / "a.png");
  export_overlay(m, image, dir / "b.png");
  EXPECT_EQ(read_file(dir / "a.png"), read_file(dir / "b.png"));
  const RgbImage back = read_png_rgb(dir / "a.png");
  EXPECT_EQ(back.pixels, render_overlay(m, image).pixels);
  std::filesystem::remove_all(dir);
}

// Occluding the most-attributed pixels must move the score more than
// occluding a random set of the same size.
TEST(Attribution, SensitivityBeatsRandomOcclusion) {
  auto previous = log::set_sink(nullptr);
  const auto data = generate_synthetic(400, 13, 32);
  TrainConfig c;
  c.kind = PipelineKind::Combined;
  c.epochs = 8;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  c.seed = 4;
  c.backbone.conv_channels = {8, 16};
  c.backbone.hidden = 32;
  const std::vector<Sample> train_set(data.begin(), data.begin() + 360);
  const TrainResult trained = train(c, train_set, {});
  log::set_sink(previous);

  const ScalarModel model = model_output(trained.params);
  Rng rng(99);
  int wins = 0, trials = 0;
  for (std::size_t i = 360; i < 400; i += 2) {
    const Sample& s = data[i];
    const Tensor base = white_baseline(s.image.shape());
    const AttributionMap m = integrated_gradients(model, s.image, base, 32);
    const std::size_t plane = m.pixel_values.size(), k = plane / 10;
    std::vector<std::size_t> order(plane);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return m.pixel_values[a] > m.pixel_values[b] || (m.pixel_values[a] == m.pixel_values[b] && a < b);
    });
    std::vector<std::size_t> random_order(plane);
    std::iota(random_order.begin(), random_order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(random_order));
    auto occlude = [&](const std::vector<std::size_t>& pixels) {
      Tensor x = s.image;
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t ch = 0; ch < 3; ++ch) x[ch * plane + pixels[j]] = base[ch * plane + pixels[j]];
      }
      return std::abs(evaluate_output(model, x) - evaluate_output(model, s.image));
    };
    wins += occlude(order) > occlude(random_order);
    ++trials;
  }
  EXPECT_GE(trials, 20);
  EXPECT_GE(static_cast<double>(wins) / trials, 0.8) << wins << " of " << trials;
}
