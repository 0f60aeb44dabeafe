#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"

#include "ikdmil/optim.hpp"
#include "ikdmil/rng.hpp"
#include "ikdmil/tensor.hpp"

using namespace ikdmil;

namespace {

// Straight-from-definition Adam with L2 weight decay folded into the
// gradient, matching the semantics torch.optim.Adam documents:
//   g = grad + wd * p
//   m = b1*m + (1-b1)*g;        v = b2*v + (1-b2)*g^2
//   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
struct ReferenceAdam {
  AdamConfig cfg;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  void step(std::vector<std::vector<double>>& params,
            const std::vector<std::vector<double>>& grads) {
    if (m.empty()) {
      for (const auto& p : params) {
        m.emplace_back(p.size(), 0.0);
        v.emplace_back(p.size(), 0.0);
      }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (size_t k = 0; k < params.size(); ++k) {
      for (size_t i = 0; i < params[k].size(); ++i) {
        const double g = grads[k][i] + cfg.weight_decay * params[k][i];
        m[k][i] = cfg.beta1 * m[k][i] + (1.0 - cfg.beta1) * g;
        v[k][i] = cfg.beta2 * v[k][i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[k][i] / bc1;
        const double vhat = v[k][i] / bc2;
        params[k][i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
      }
    }
  }
};

}  // namespace

TEST_SUITE_BEGIN("optim");

TEST_CASE("adam tracks the reference implementation over many steps") {
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.004;
  Adam opt(cfg);
  ReferenceAdam ref{cfg};

  Pcg32 rng(70);
  Tensor p1({3, 4}), p2({5});
  for (float& v : p1.raw()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (float& v : p2.raw()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  std::vector<std::vector<double>> rp{std::vector<double>(p1.raw().begin(), p1.raw().end()),
                                      std::vector<double>(p2.raw().begin(), p2.raw().end())};

  for (int step = 0; step < 25; ++step) {
    Tensor g1(p1.shape()), g2(p2.shape());
    for (float& v : g1.raw()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (float& v : g2.raw()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<std::vector<double>> rg{std::vector<double>(g1.raw().begin(), g1.raw().end()),
                                        std::vector<double>(g2.raw().begin(), g2.raw().end())};
    opt.step({&p1, &p2}, {&g1, &g2});
    ref.step(rp, rg);
    CHECK(opt.step_count() == step + 1);
    // The library keeps float state, the reference double; allow the drift
    // of 25 float roundings while staying far below any semantic error.
    for (size_t i = 0; i < p1.size(); ++i) {
      CHECK(oracle::rel_err(p1[i], rp[0][i], 1e-3) < 1e-3);
    }
    for (size_t i = 0; i < p2.size(); ++i) {
      CHECK(oracle::rel_err(p2[i], rp[1][i], 1e-3) < 1e-3);
    }
  }
}

TEST_CASE("adam first step moves each coordinate by roughly the learning rate") {
  // With zero moments, |update| = lr * g / (|g| + tiny) ~= lr * sign(g).
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  Adam opt(cfg);
  Tensor p({4});
  p.raw() = {1.0f, -2.0f, 0.5f, 3.0f};
  Tensor g({4});
  g.raw() = {0.3f, -0.7f, 0.0001f, 2.0f};
  const std::vector<float> before = p.raw();
  opt.step({&p}, {&g});
  for (size_t i = 0; i < p.size(); ++i) {
    const double moved = double(before[i]) - double(p[i]);
    CHECK(std::abs(moved) <= cfg.learning_rate * 1.0001);
    if (std::abs(g[i]) > 1e-3) {
      CHECK(moved * g[i] > 0.0);  // descends along the gradient sign
      CHECK(std::abs(moved) == doctest::Approx(cfg.learning_rate).epsilon(1e-3));
    }
  }
}

TEST_CASE("adam reset drops moments and step count") {
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  Adam opt(cfg);
  Tensor p({2}, 1.0f), g({2}, 0.5f);
  opt.step({&p}, {&g});
  opt.step({&p}, {&g});
  CHECK(opt.step_count() == 2);
  opt.reset();
  CHECK(opt.step_count() == 0);

  // After reset, behaviour matches a freshly constructed optimizer.
  Adam fresh(cfg);
  Tensor pa({2}, 0.75f), pb({2}, 0.75f), grad({2}, 0.25f);
  opt.step({&pa}, {&grad});
  fresh.step({&pb}, {&grad});
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("adam serialization round-trips moments and step count") {
  AdamConfig cfg;
  cfg.learning_rate = 0.02;
  Adam opt(cfg);
  Pcg32 rng(71);
  Tensor p({6});
  for (float& v : p.raw()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor p_copy = p;
  for (int s = 0; s < 5; ++s) {
    Tensor g({6});
    for (float& v : g.raw()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    opt.step({&p}, {&g});
  }
  std::stringstream buffer;
  opt.serialize(buffer);

  Adam restored(cfg);
  restored.deserialize(buffer);
  CHECK(restored.step_count() == opt.step_count());

  // Same future gradient must produce identical parameters on both paths.
  Tensor pa = p, pb = p;
  Tensor g({6}, 0.125f);
  opt.step({&pa}, {&g});
  restored.step({&pb}, {&g});
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("adam rejects mismatched parameter/gradient lists") {
  Adam opt(AdamConfig{});
  Tensor p({2}), g({3});
  CHECK_THROWS_AS(opt.step({&p}, {}), PreconditionError);
  CHECK_THROWS_AS(opt.step({&p}, {&g}), PreconditionError);
  Tensor ok({2});
  opt.step({&p}, {&ok});
  Tensor other({5}), go({5});
  // The second step must see the same slot shapes as the first.
  CHECK_THROWS_AS(opt.step({&other}, {&go}), PreconditionError);
}

TEST_CASE("adam config validation") {
  AdamConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.learning_rate = 0.0;  // zero is allowed: freezes parameters
  CHECK_NOTHROW(cfg.validate());
  cfg.learning_rate = -1e-3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AdamConfig{};
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AdamConfig{};
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AdamConfig{};
  cfg.weight_decay = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_SUITE_END();
