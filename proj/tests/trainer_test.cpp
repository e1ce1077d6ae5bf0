#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "fpcnet/models.hpp"
#include "fpcnet/trainer.hpp"
#include "test_util.hpp"

using namespace fpcnet;
using fpcnet::test_util::random_tensor;

namespace {

// Random inputs, constant target.
class ConstantTarget : public Dataset {
 public:
  ConstantTarget(Shape in, std::vector<double> target, std::size_t n) : in_(in), target_(std::move(target)), n_(n) {}
  std::size_t size() const override { return n_; }
  Sample get(std::size_t i) const override { return {random_tensor(in_, i, 0, 1), target_}; }

 private:
  Shape in_;
  std::vector<double> target_;
  std::size_t n_;
};

// Target is a fixed linear function of the channel means.
class LinearTarget : public Dataset {
 public:
  std::size_t size() const override { return 64; }
  Sample get(std::size_t i) const override {
    Tensor x = random_tensor({2, 4, 4}, i, 0, 1);
    double m0 = 0, m1 = 0;
    for (double v : x.channel(0)) m0 += v / 16;
    for (double v : x.channel(1)) m1 += v / 16;
    return {std::move(x), {0.7 * m0 - 0.2 * m1 + 0.1}};
  }
};

NetworkSpec small_net() {
  NetworkBuilder b("small", {3, 4, 4});
  int n = b.add("conv1", LayerSpec::pointwise(3, 4), {kNetworkInput});
  n = b.add("relu1", LayerSpec::relu(), {n});
  n = b.add("pool", LayerSpec::avg_pool(4, 0, 4), {n});
  b.output(b.add("conv2", LayerSpec::pointwise(4, 1), {n}));
  return b.build();
}

NetworkSpec smooth_net() {
  NetworkBuilder b("smooth", {2, 4, 4});
  int n = b.add("conv1", LayerSpec::conv(2, 3, 3, 1, 1), {kNetworkInput});
  n = b.add("pool", LayerSpec::avg_pool(4, 0, 4), {n});
  b.output(b.add("conv2", LayerSpec::pointwise(3, 1), {n}));
  return b.build();
}

}  // namespace

TEST(Mse, Basics) {
  const std::vector<double> a{0.3, -1.2, 4.0};
  EXPECT_EQ(mse_loss(a, a).value, 0.0);
  const std::vector<double> p{1, 0}, t{0, 0};
  const auto r = mse_loss(p, t);
  EXPECT_EQ(r.value, 0.5);
  EXPECT_EQ(r.grad[0], 1.0);
  EXPECT_EQ(r.grad[1], 0.0);
  EXPECT_THROW(mse_loss(p, a), dimension_error);
}

TEST(Mse, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(5), t(5);
    for (std::size_t i = 0; i < 5; ++i) {
      p[i] = rng.uniform(-2, 2);
      t[i] = rng.uniform(-2, 2);
    }
    const auto r = mse_loss(p, t);
    for (std::size_t i = 0; i < 5; ++i) {
      const double h = 1e-5, saved = p[i];
      p[i] = saved + h;
      const double lp = mse_loss(p, t).value;
      p[i] = saved - h;
      const double lm = mse_loss(p, t).value;
      p[i] = saved;
      EXPECT_NEAR((lp - lm) / (2 * h), r.grad[i], 1e-8);
    }
  }
}

namespace {

ParamStore single(std::vector<double> w) {
  ParamStore p;
  KernelWeights k(1, w.size(), 1, 1);
  k.weights = std::move(w);
  p.layers.push_back(std::move(k));
  return p;
}

}  // namespace

TEST(Sgd, ZeroGradientKeepsParams) {
  ParamStore p = single({0.5, -0.25});
  const ParamStore before = p;
  ParamStore v = p.zeros_like();
  sgd_step(p, p.zeros_like(), v, 0.1, 0.9);
  EXPECT_EQ(p, before);
}

TEST(Sgd, SingleStep) {
  ParamStore p = single({0.0});
  ParamStore g = single({1.0});
  ParamStore v = p.zeros_like();
  sgd_step(p, g, v, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.layers[0].weights[0], -0.1);
}

TEST(Sgd, QuadraticBowlConverges) {
  const std::vector<double> opt{1.5, -0.5, 2.0};
  ParamStore p = single({0, 0, 0});
  ParamStore v = p.zeros_like();
  double loss = 0;
  for (int it = 0; it < 1000; ++it) {
    ParamStore g = p.zeros_like();
    loss = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double d = p.layers[0].weights[i] - opt[i];
      loss += d * d;
      g.layers[0].weights[i] = 2 * d;
    }
    sgd_step(p, g, v, 0.05, 0.9);
  }
  EXPECT_LT(loss, 1e-6);
}

TEST(Train, ConstantTargetConverges) {
  const auto spec = small_net();
  ConstantTarget data({3, 4, 4}, {0.3}, 256);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.iterations = 2000;
  cfg.learning_rate = 0.05;
  cfg.seed = 1;
  const auto r = train(spec, init_params(spec, InitScheme::UniformFanIn, 2), data, cfg);
  EXPECT_LT(r.loss_curve.back().loss, 1e-4);
  EXPECT_EQ(r.loss_curve.back().iteration, 2000u);
  for (const auto& p : r.loss_curve) EXPECT_TRUE(std::isfinite(p.loss));
}

TEST(Train, ZeroLearningRateLeavesWeights) {
  const auto spec = small_net();
  ConstantTarget data({3, 4, 4}, {0.3}, 32);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.iterations = 50;
  cfg.learning_rate = 0.0;
  const auto p0 = init_params(spec, InitScheme::UniformFanIn, 2);
  EXPECT_EQ(train(spec, p0, data, cfg).params, p0);
}

TEST(Train, DeterministicAndThreadIndependent) {
  const auto spec = small_net();
  ConstantTarget data({3, 4, 4}, {0.8}, 100);
  TrainConfig cfg;
  cfg.batch_size = 12;
  cfg.iterations = 60;
  cfg.seed = 9;
  const auto p0 = init_params(spec, InitScheme::UniformFanIn, 4);
  const auto a = train(spec, p0, data, cfg);
  const auto b = train(spec, p0, data, cfg);
  cfg.threads = 3;
  const auto c = train(spec, p0, data, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.params, c.params);
  ASSERT_EQ(a.loss_curve.size(), b.loss_curve.size());
  for (std::size_t i = 0; i < a.loss_curve.size(); ++i) EXPECT_EQ(a.loss_curve[i].loss, b.loss_curve[i].loss);
  cfg.seed = 10;
  EXPECT_NE(train(spec, p0, data, cfg).params, a.params);
}

TEST(Train, NonFiniteLossAborts) {
  const auto spec = small_net();
  ConstantTarget data({3, 4, 4}, {std::numeric_limits<double>::quiet_NaN()}, 8);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.iterations = 5;
  try {
    train(spec, init_params(spec, InitScheme::UniformFanIn, 1), data, cfg);
    FAIL() << "expected numeric_error";
  } catch (const numeric_error& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("learning rate"), std::string::npos);
  }
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.learning_rate = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.iterations = 100;
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.005);
  EXPECT_DOUBLE_EQ(cfg.lr_at(24), 0.005);
  EXPECT_DOUBLE_EQ(cfg.lr_at(25), 0.0025);
  EXPECT_DOUBLE_EQ(cfg.lr_at(99), 0.005 * 0.125);
}

TEST(Train, EvalAndReportCsv) {
  const auto spec = small_net();
  ConstantTarget data({3, 4, 4}, {0.3}, 32);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.iterations = 20;
  cfg.log_interval = 5;
  cfg.eval_interval = 10;
  int calls = 0;
  const auto r = train(spec, init_params(spec, InitScheme::UniformFanIn, 1), data, cfg, [&](const ParamStore&) {
    return static_cast<double>(++calls);
  });
  ASSERT_EQ(r.loss_curve.size(), 4u);
  ASSERT_EQ(r.evals.size(), 2u);
  std::ostringstream os;
  write_report_csv(os, r);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,loss,eval");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 2), "5,");
  EXPECT_EQ(line.back(), ',');
  std::getline(in, line);
  EXPECT_EQ(line.substr(line.rfind(',')), ",1");
}

TEST(Train, SmallStepNeverIncreasesSmoothLoss) {
  const auto spec = smooth_net();
  LinearTarget data;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p0 = init_params(spec, InitScheme::UniformFanIn, seed);
    std::vector<std::size_t> idx(16);
    for (std::size_t i = 0; i < 16; ++i) idx[i] = (seed * 16 + i) % data.size();
    const auto before = detail::batch_gradient(spec, p0, data, idx, 1);
    ParamStore p = p0, v = p0.zeros_like();
    sgd_step(p, before.grads, v, 1e-6, 0.0);
    EXPECT_LE(detail::batch_gradient(spec, p, data, idx, 1).loss, before.loss);
  }
}

TEST(GradCheck, LinearNetIsExactToRoundoff) {
  NetworkBuilder b("linear", {3, 2, 2});
  b.output(b.add("conv", LayerSpec::conv(3, 2, 2, 0, 1), {kNetworkInput}));
  const auto spec = b.build();
  const std::vector<double> target{0.2, -0.4};
  const auto r = grad_check(spec, init_params(spec, InitScheme::UniformFanIn, 1), random_tensor({3, 2, 2}, 2), target, 200);
  EXPECT_EQ(r.checked, 24u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, FpcnetDh) {
  const auto spec = build_fpcnet_dh();
  auto p = init_params(spec, InitScheme::UniformFanIn, 3);
  for (auto& l : p.layers)
    for (double& b : l.bias) b = 0.1;
  const std::vector<double> target{0.35};
  const auto r = grad_check(spec, p, random_tensor({3, 16, 16}, 5, 0, 1), target, 200, 1e-4, 7);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, FpcnetCcHeads) {
  const auto spec = build_fpcnet_cc();
  auto p = init_params(spec, InitScheme::UniformFanIn, 4);
  const std::vector<double> target{0.5, 0.6, 0.62};
  const auto r = grad_check(spec, p, random_tensor({3, 32, 32}, 6, 0, 1), target, 200, 1e-4, 8);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}
