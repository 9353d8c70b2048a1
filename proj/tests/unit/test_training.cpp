#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "cytograd/data.hpp"
#include "cytograd/log.hpp"
#include "cytograd/optim.hpp"
#include "cytograd/training.hpp"

using namespace cytograd;

namespace {

Backbone tiny_backbone() {
  Backbone bb;
  bb.conv_channels = {4, 8};
  bb.hidden = 16;
  return bb;
}

TrainConfig tiny_config(PipelineKind kind) {
  TrainConfig c;
  c.kind = kind;
  c.epochs = 2;
  c.batch_size = 8;
  c.seed = 5;
  c.backbone = tiny_backbone();
  c.workers = 1;
  return c;
}

struct QuietLog {
  log::Sink previous = log::set_sink(nullptr);
  ~QuietLog() { log::set_sink(previous); }
};

}  // namespace

TEST(Optim, SgdZeroGradientLeavesParams) {
  std::vector<Tensor> p{Tensor(Shape{3}, std::vector<double>{1, -2, 3})};
  const auto before = p;
  SgdState state;
  sgd_step(p, std::vector<Tensor>{Tensor(Shape{3}, 0.0)}, state, {0.1, 0.9});
  EXPECT_EQ(p, before);
}

TEST(Optim, SgdScalarStep) {
  std::vector<Tensor> p{Tensor::scalar(1.0)};
  SgdState state;
  sgd_step(p, std::vector<Tensor>{Tensor::scalar(2.0)}, state, {0.1, 0.0});
  EXPECT_DOUBLE_EQ(p[0].item(), 0.8);
  // With momentum the second step uses v = 0.9 * 2 + 2.
  std::vector<Tensor> q{Tensor::scalar(1.0)};
  SgdState s2;
  sgd_step(q, std::vector<Tensor>{Tensor::scalar(2.0)}, s2, {0.1, 0.9});
  sgd_step(q, std::vector<Tensor>{Tensor::scalar(2.0)}, s2, {0.1, 0.9});
  EXPECT_NEAR(q[0].item(), 1.0 - 0.2 - 0.38, 1e-15);
}

TEST(Optim, AdamFirstStepHasLearningRateMagnitude) {
  std::vector<Tensor> p{Tensor(Shape{2}, std::vector<double>{0.0, 0.0})};
  AdamState state;
  adam_step(p, std::vector<Tensor>{Tensor(Shape{2}, std::vector<double>{3.0, -0.01})}, state, {0.01});
  EXPECT_NEAR(p[0][0], -0.01, 1e-9);
  EXPECT_NEAR(p[0][1], 0.01, 1e-6);
}

TEST(Optim, AdamMinimisesQuadratic) {
  std::vector<Tensor> theta{Tensor::scalar(1.0)};
  AdamState state;
  for (int step = 0; step < 200; ++step) {
    const std::vector<Tensor> grad{Tensor::scalar(2.0 * theta[0].item())};
    adam_step(theta, grad, state, {0.05});
  }
  EXPECT_LT(std::abs(theta[0].item()), 1e-2);
}

TEST(Optim, ShapeMismatchThrows) {
  std::vector<Tensor> p{Tensor(Shape{2})};
  SgdState s;
  AdamState a;
  EXPECT_THROW(sgd_step(p, std::vector<Tensor>{Tensor(Shape{3})}, s, {}), DimensionError);
  EXPECT_THROW(adam_step(p, std::vector<Tensor>{}, a, {}), DimensionError);
}

TEST(Optim, ClipGlobalNorm) {
  std::vector<Tensor> g{Tensor(Shape{2}, std::vector<double>{3, 0}), Tensor::scalar(4.0)};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
  std::vector<Tensor> small{Tensor::scalar(0.5)};
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small[0].item(), 0.5);
}

TEST(Training, EpochOrderIsPurePermutation) {
  const auto a = epoch_order(3, 1, 50);
  EXPECT_EQ(a, epoch_order(3, 1, 50));
  EXPECT_NE(a, epoch_order(3, 2, 50));
  EXPECT_NE(a, epoch_order(4, 1, 50));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Training, ZeroLearningRateKeepsInitialisation) {
  QuietLog quiet;
  const auto data = generate_synthetic(16, 1, 16);
  TrainConfig c = tiny_config(PipelineKind::Combined);
  c.epochs = 1;
  c.learning_rate = 0.0;
  const TrainResult r = train(c, data, {});
  Backbone bb = c.backbone;
  bb.input_size = 16;
  EXPECT_EQ(r.params, init_params(bb, c.kind, derive_seed(c.seed, "init")));
}

TEST(Training, DeterministicAcrossRunsAndWorkerCounts) {
  QuietLog quiet;
  const auto data = generate_synthetic(40, 2, 16);
  const auto val = generate_synthetic(10, 3, 16);
  TrainConfig c = tiny_config(PipelineKind::Combined);
  const TrainResult a = train(c, data, val);
  const TrainResult b = train(c, data, val);
  c.workers = 3;
  const TrainResult threaded = train(c, data, val);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.params, threaded.params);
  ASSERT_EQ(a.trace.epochs.size(), 2u);
  EXPECT_EQ(a.trace.epochs[1].val_loss, threaded.trace.epochs[1].val_loss);
}

TEST(Training, GradientsMatchAcrossChunking) {
  const auto data = generate_synthetic(20, 4, 16);
  Backbone bb = tiny_backbone();
  bb.input_size = 16;
  const ModelParams params = init_params(bb, PipelineKind::Combined, 1);
  std::vector<std::size_t> idx(20);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const LossAndGrads all = compute_gradients(params, data, idx);
  LossAndGrads parts;
  for (std::size_t i : idx) {
    const LossAndGrads one = compute_gradients(params, data, std::span<const std::size_t>(&i, 1));
    parts.loss_sum += one.loss_sum;
    if (parts.grads.empty()) {
      parts.grads = one.grads;
    } else {
      for (std::size_t k = 0; k < one.grads.size(); ++k) parts.grads[k].axpy(1.0, one.grads[k]);
    }
  }
  EXPECT_NEAR(all.loss_sum, parts.loss_sum, 1e-10);
  for (std::size_t k = 0; k < all.grads.size(); ++k) {
    for (std::size_t i = 0; i < all.grads[k].size(); ++i) EXPECT_NEAR(all.grads[k][i], parts.grads[k][i], 1e-10);
  }
}

class Overfit : public ::testing::TestWithParam<PipelineKind> {};

// 200 full-batch steps on 8 samples must cut the training loss by 90%.
TEST_P(Overfit, TinyBatch) {
  QuietLog quiet;
  const auto data = generate_synthetic(8, 31, 16);
  TrainConfig c = tiny_config(GetParam());
  c.backbone = Backbone{};  // the narrow test backbone plateaus on 8 samples
  c.epochs = 200;
  c.batch_size = 8;
  c.learning_rate = 3e-2;
  Backbone bb = c.backbone;
  bb.input_size = 16;
  const double before = evaluate_loss(init_params(bb, c.kind, derive_seed(c.seed, "init")), data).mean_loss;
  const TrainResult r = train(c, data, {});
  const double after = evaluate_loss(r.params, data).mean_loss;
  EXPECT_LE(after, 0.1 * before) << "before " << before << " after " << after;
}

INSTANTIATE_TEST_SUITE_P(AllKinds, Overfit,
                         ::testing::Values(PipelineKind::Classifier, PipelineKind::Regressor,
                                           PipelineKind::Combined),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Training, DivergenceNamesEpochAndBatch) {
  QuietLog quiet;
  const auto data = generate_synthetic(16, 1, 16);
  TrainConfig c = tiny_config(PipelineKind::Regressor);
  c.optimizer = OptimizerKind::SgdMomentum;
  c.learning_rate = 1e300;
  try {
    train(c, data, {});
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 1u);
    EXPECT_GE(e.batch(), 1u);
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
  }
}

TEST(Training, PatienceStopsEarly) {
  QuietLog quiet;
  const auto data = generate_synthetic(16, 1, 16);
  TrainConfig c = tiny_config(PipelineKind::Classifier);
  c.epochs = 20;
  c.learning_rate = 0.0;  // loss never improves after epoch 1
  c.patience = 2;
  const TrainResult r = train(c, data, data);
  EXPECT_EQ(r.trace.epochs.size(), 3u);
  EXPECT_EQ(r.trace.best_epoch, 1u);
}

TEST(Training, ClippingIsLogged) {
  std::vector<std::string> messages;
  auto previous = log::set_sink([&](log::Level, std::string_view m) { messages.emplace_back(m); });
  const auto data = generate_synthetic(16, 1, 16);
  TrainConfig c = tiny_config(PipelineKind::Regressor);
  c.epochs = 1;
  c.clip_norm = 1e-6;
  train(c, data, {});
  log::set_sink(previous);
  ASSERT_EQ(messages.size(), 1u);
  EXPECT_NE(messages[0].find("clipped in 2 of 2 batches"), std::string::npos);
}

TEST(Training, ConfigValidation) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(train(TrainConfig{}, {}, {}), ValidationError);
}

TEST(Training, TraceCsvFormat) {
  TrainTrace t;
  t.epochs.push_back({1, 0.5, 0.25, 0.75, 0, 1.0});
  std::ostringstream out;
  write_trace_csv(out, t);
  EXPECT_EQ(out.str(), "epoch,train_loss,val_loss,val_acc\n1,0.5,0.25,0.75\n");
}
