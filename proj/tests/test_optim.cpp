#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "reference_network.hpp"
#include "sevolve/data.hpp"
#include "sevolve/optim.hpp"

using namespace sevolve;
using fixture::random_params;
using fixture::random_sample;
using fixture::small_config;

namespace {

ModelParams filled(const NetworkConfig& cfg, double value) {
  ModelParams p(cfg);
  p.for_each([&](const std::string&, Matrix& m) {
    for (double& x : m.flat()) x = value;
  });
  return p;
}

void expect_all(const ModelParams& p, double value, double tol = 0.0) {
  p.for_each([&](const std::string& name, const Matrix& m) {
    for (double x : m.flat()) EXPECT_NEAR(x, value, tol) << name;
  });
}

std::vector<Sample> toy_samples(std::size_t count, std::uint64_t seed) {
  GenConfig g;
  g.grid = 4;
  g.num_labels = 2;
  g.num_seeds = 2;
  g.feature_dim = 4;
  g.seed = seed;
  return generate_dataset(g, count);
}

}  // namespace

TEST(Sgd, ZeroGradZeroDecayLeavesParams) {
  const auto cfg = small_config(2, 2, 2);
  Rng rng(1);
  ModelParams p = random_params(cfg, 1.0, rng);
  const ModelParams before = p;
  OptimState st(p);
  OptimConfig oc;
  oc.weight_decay = 0.0;
  sgd_step(p, ModelParams(cfg), st, oc);
  EXPECT_EQ(p, before);
}

TEST(Sgd, WeightDecayOnlyStep) {
  const auto cfg = small_config(1, 1, 2);
  ModelParams p = filled(cfg, 1.0);
  OptimState st(p);
  OptimConfig oc{0.1, 0.0, 0.5, 1, 0};
  sgd_step(p, ModelParams(cfg), st, oc);
  expect_all(p, 0.95, 1e-16);
}

TEST(Sgd, MomentumTwoSteps) {
  const auto cfg = small_config(1, 1, 2);
  ModelParams p(cfg);
  const ModelParams g = filled(cfg, 1.0);
  OptimState st(p);
  OptimConfig oc{0.1, 0.9, 0.0, 1, 0};
  sgd_step(p, g, st, oc);
  expect_all(st.velocity, -0.1, 1e-16);
  expect_all(p, -0.1, 1e-16);
  sgd_step(p, g, st, oc);
  expect_all(st.velocity, -0.19, 1e-16);
  expect_all(p, -0.29, 1e-16);
}

TEST(Sgd, GeometricDecay) {
  const auto cfg = small_config(2, 2, 3);
  Rng rng(2);
  const ModelParams w0 = random_params(cfg, 1.0, rng);
  ModelParams p = w0;
  OptimState st(p);
  OptimConfig oc{0.05, 0.0, 0.3, 1, 0};
  for (int k = 0; k < 25; ++k) sgd_step(p, ModelParams(cfg), st, oc);
  const double factor = std::pow(1.0 - 0.05 * 0.3, 25);
  std::vector<double> a, b;
  w0.for_each([&](const std::string&, const Matrix& m) { a.insert(a.end(), m.flat().begin(), m.flat().end()); });
  p.for_each([&](const std::string&, const Matrix& m) { b.insert(b.end(), m.flat().begin(), m.flat().end()); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i] * factor, 1e-14);
}

TEST(Sgd, MatchesScalarRule) {
  const auto cfg = small_config(2, 3, 2);
  Rng rng(3);
  ModelParams p = random_params(cfg, 1.0, rng);
  const ModelParams g = random_params(cfg, 1.0, rng);
  OptimState st(p);
  st.velocity = random_params(cfg, 0.1, rng);
  const ModelParams w0 = p, v0 = st.velocity;
  OptimConfig oc{0.01, 0.9, 0.0005, 1, 0};
  sgd_step(p, g, st, oc);
  std::vector<std::span<const double>> W0, V0, G, W, V;
  w0.for_each([&](const std::string&, const Matrix& m) { W0.push_back(m.flat()); });
  v0.for_each([&](const std::string&, const Matrix& m) { V0.push_back(m.flat()); });
  g.for_each([&](const std::string&, const Matrix& m) { G.push_back(m.flat()); });
  p.for_each([&](const std::string&, const Matrix& m) { W.push_back(m.flat()); });
  st.velocity.for_each([&](const std::string&, const Matrix& m) { V.push_back(m.flat()); });
  for (std::size_t t = 0; t < W.size(); ++t)
    for (std::size_t i = 0; i < W[t].size(); ++i) {
      const double v = 0.9 * V0[t][i] - 0.01 * (G[t][i] + 0.0005 * W0[t][i]);
      EXPECT_EQ(V[t][i], v);
      EXPECT_EQ(W[t][i], W0[t][i] + v);
    }
}

TEST(Sgd, RejectsBadGradients) {
  const auto cfg = small_config(2, 2, 2);
  ModelParams p(cfg);
  OptimState st(p);
  ModelParams g(cfg);
  g.head_bias[1](1, 0) = NAN;
  try {
    sgd_step(p, g, st, OptimConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("head.1.bias"), std::string::npos) << e.what();
  }
  EXPECT_EQ(p, ModelParams(cfg));  // nothing applied
  ModelParams wrong(small_config(3, 2, 2));
  EXPECT_THROW(sgd_step(p, wrong, st, OptimConfig{}), ValidationError);
}

TEST(OptimConfig, Validation) {
  EXPECT_NO_THROW(OptimConfig{}.validate());
  EXPECT_THROW((OptimConfig{-0.1, 0.9, 0.0, 1, 0}.validate()), ValidationError);
  EXPECT_THROW((OptimConfig{0.1, 1.0, 0.0, 1, 0}.validate()), ValidationError);
  EXPECT_THROW((OptimConfig{0.1, 0.9, -1.0, 1, 0}.validate()), ValidationError);
}

TEST(GradCheck, UntouchedParameterHasZeroError) {
  const auto cfg = small_config(1, 2, 2);
  ModelParams p(cfg);
  const auto report = grad_check(p, ModelParams(cfg), [](const ModelParams&) { return 3.0; }, 1e-5);
  EXPECT_TRUE(report.passed);
  EXPECT_EQ(report.max_rel_error, 0.0);
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-16);
}

TEST(GradCheck, QuadraticLoss) {
  const auto cfg = small_config(1, 2, 2);
  Rng rng(4);
  ModelParams p = random_params(cfg, 1.0, rng);
  ModelParams analytic = p;  // d/dw of 0.5 * sum w^2
  auto loss = [](const ModelParams& q) {
    double s = 0.0;
    q.for_each([&](const std::string&, const Matrix& m) {
      for (double x : m.flat()) s += 0.5 * x * x;
    });
    return s;
  };
  EXPECT_TRUE(grad_check(p, analytic, loss, 1e-6).passed);
}

TEST(GradCheck, DetectsDroppedEdgeTerm) {
  Rng rng(5);
  const auto cfg = small_config(2, 3, 3);
  Sample s = random_sample(6, 3, 3, rng, 0.4);
  ModelParams p = random_params(cfg, 0.5, rng);
  Rng fwd(0);
  const auto r = forward(s, p, cfg, fwd, Mode::train);
  auto no_edge = cfg;
  no_edge.edge_loss_weight = 0.0;
  const ModelParams corrupted = backward(r, s, p, no_edge);
  const StructureReplay rep = replay_of(r);
  auto loss = [&](const ModelParams& q) {
    Rng unused(0);
    return compute_loss(forward(s, q, cfg, unused, Mode::train, &rep), s, cfg).total;
  };
  const auto report = grad_check(p, corrupted, loss, 1e-5);
  EXPECT_FALSE(report.passed);
  for (const auto& tc : report.tensors) {
    if (tc.name == "cell.edge_gate") {
      EXPECT_GT(tc.max_rel_error, 0.5);
    }
  }
  EXPECT_GT(reference::check_network_gradients(s, p, cfg, r, corrupted).max_rel_error, 1e-5);
}

TEST(GradCheck, DetectsDroppedTensor) {
  Rng rng(6);
  const auto cfg = small_config(2, 3, 3);
  Sample s = random_sample(6, 3, 3, rng, 0.4);
  ModelParams p = random_params(cfg, 0.5, rng);
  Rng fwd(0);
  const auto r = forward(s, p, cfg, fwd, Mode::train);
  ModelParams g = backward(r, s, p, cfg);
  g.cell.cell_gate.from_input.set_zero();
  const auto fd = reference::check_network_gradients(s, p, cfg, r, g);
  EXPECT_GT(fd.max_rel_error, 1e-5);
  EXPECT_EQ(fd.worst_tensor, "cell.cell_gate.from_input");
}

TEST(Metrics, ConfusionExample) {
  const std::vector<std::size_t> labels = {0, 0, 1, 1}, preds = {0, 1, 1, 1};
  const Metrics m = compute_metrics(labels, preds, 3);
  EXPECT_EQ(m.accuracy, 0.75);
  ASSERT_TRUE(m.class_iou[0] && m.class_iou[1]);
  EXPECT_EQ(*m.class_iou[0], 0.5);
  EXPECT_NEAR(*m.class_iou[1], 2.0 / 3.0, 1e-16);
  EXPECT_FALSE(m.class_iou[2]);
  EXPECT_NEAR(m.mean_iou, (0.5 + 2.0 / 3.0) / 2.0, 1e-16);
  EXPECT_EQ(m.num_nodes, 4u);
}

TEST(Metrics, PerfectAndErrors) {
  const std::vector<std::size_t> labels = {2, 0, 1};
  const Metrics m = compute_metrics(labels, labels, 3);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.mean_iou, 1.0);
  EXPECT_THROW(compute_metrics(labels, std::vector<std::size_t>{0, 0}, 3), ValidationError);
  EXPECT_THROW(compute_metrics(labels, std::vector<std::size_t>{0, 0, 3}, 3), ValidationError);
}

TEST(EpochLog, Format) {
  EpochLog row{3, 1.25, 1.0, 0.25, 0.5, 2.0};
  EXPECT_EQ(row.format(false), "epoch=3 total_loss=1.25 task_loss=1 edge_loss=0.25 eval_accuracy=0.5");
  EXPECT_EQ(row.format(true),
            "epoch=3 total_loss=1.25 task_loss=1 edge_loss=0.25 eval_accuracy=0.5 wall_time=2");
}

TEST(Train, ZeroLearningRateKeepsParamsBitIdentical) {
  const auto data = toy_samples(4, 1);
  auto cfg = small_config(3, 4, 2);
  Rng rng(7);
  ModelParams p = init_params(cfg, rng);
  const ModelParams before = p;
  OptimConfig oc;
  oc.learning_rate = 0.0;
  oc.epochs = 3;
  train(data, {}, p, cfg, oc);
  EXPECT_EQ(p, before);
}

TEST(Train, SameSeedSameLog) {
  const auto data = toy_samples(5, 2);
  const auto cfg = small_config(3, 4, 2);
  OptimConfig oc;
  oc.learning_rate = 0.01;
  oc.epochs = 3;
  oc.seed = 11;
  auto go = [&] {
    Rng rng(8);
    ModelParams p = init_params(cfg, rng);
    std::vector<std::string> rows;
    std::vector<ModelParams> snaps;
    TrainHooks hooks{[&](const EpochLog& row, const ModelParams& q) {
      rows.push_back(row.format(false));
      snaps.push_back(q);
    }};
    train(data, {}, p, cfg, oc, hooks);
    return std::pair{rows, snaps};
  };
  const auto a = go(), b = go();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.size(), 3u);
}

TEST(Train, LossDecreasesOnSmallToy) {
  const auto data = toy_samples(20, 3);
  auto cfg = small_config(2, 4, 2);
  Rng rng(9);
  ModelParams p = init_params(cfg, rng);
  OptimConfig oc;
  oc.learning_rate = 0.01;
  oc.epochs = 8;
  const auto log = train(data, {}, p, cfg, oc);
  EXPECT_LT(log.back().total_loss, log.front().total_loss);
}

TEST(Train, Errors) {
  const auto cfg = small_config(1, 4, 2);
  ModelParams p(cfg);
  EXPECT_THROW(train({}, {}, p, cfg, OptimConfig{}), ValidationError);
  p.head_weight[0](0, 0) = NAN;
  const auto data = toy_samples(2, 4);
  try {
    train(data, {}, p, cfg, OptimConfig{0.01, 0.9, 0.0, 1, 0});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("sample"), std::string::npos);
  }
}

TEST(Evaluate, DeterministicAndIndependentOfOrderOfCalls) {
  const auto data = toy_samples(6, 5);
  const auto cfg = small_config(3, 4, 2);
  Rng rng(10);
  ModelParams p = random_params(cfg, 0.5, rng);
  const Metrics a = evaluate(data, p, cfg, 3);
  const Metrics b = evaluate(data, p, cfg, 3);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.mean_iou, b.mean_iou);
  EXPECT_EQ(a.num_nodes, 6u * 16u);
}
