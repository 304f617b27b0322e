#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "rasr/optim.hpp"

using namespace rasr;
using namespace rasr::optim;

namespace {

struct Item {
  Tensor x, y;
};

nn::ParameterStore make_store(std::uint64_t seed) {
  nn::ParameterStore ps;
  Rng rng(seed);
  nn::Linear(ps, "lin", 3, 2, rng);
  return ps;
}

ad::Var batch_loss(const nn::ParameterStore& ps, std::span<const Item> items) {
  ad::Var total;
  for (const auto& it : items) {
    const ad::Var pred = ad::linear(ad::constant(it.x), ps.get("lin.weight"), ps.get("lin.bias"));
    const ad::Var l = ad::mse(pred, ad::constant(it.y));
    total = total.defined() ? ad::add(total, l) : l;
  }
  return ad::scale(total, 1.0 / static_cast<double>(items.size()));
}

} // namespace

TEST(AdamW, ZeroGradWithoutDecayLeavesParameters) {
  auto ps = make_store(1);
  const auto before = ps.snapshot();
  AdamW opt({1e-2, 0.9, 0.999, 1e-8, 0.0, true});
  for (int i = 0; i < 3; ++i) opt.step(ps, ps.gradients());
  for (const auto& [k, v] : before) EXPECT_TRUE(ps.get(k).value() == v) << k;
}

TEST(AdamW, FirstStepIsSignedLearningRate) {
  std::mt19937_64 r(2);
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double lr : {1e-3, 2e-5, 0.5}) {
    auto ps = make_store(3);
    const auto before = ps.snapshot();
    ad::GradientMap g;
    for (const auto& [k, v] : before) {
      Tensor t(v.shape());
      for (double& x : t.storage()) x = (sign(r) ? 1 : -1) * mag(r);
      g[k] = t;
    }
    AdamW opt({lr, 0.9, 0.999, 1e-8, 0.0, true});
    opt.step(ps, g);
    for (const auto& [k, v] : before) {
      const Tensor& now = ps.get(k).value();
      for (std::size_t i = 0; i < v.size(); ++i)
        EXPECT_NEAR(now[i] - v[i], -lr * (g[k][i] > 0 ? 1.0 : -1.0), lr * 1e-6);
    }
  }
}

TEST(AdamW, DecoupledDecayWithZeroGrad) {
  auto ps = make_store(4);
  const auto before = ps.snapshot();
  AdamW opt({0.1, 0.9, 0.999, 1e-8, 0.01, true});
  ad::GradientMap g;
  for (const auto& [k, v] : before) g[k] = Tensor(v.shape());
  opt.step(ps, g);
  for (const auto& [k, v] : before) {
    const Tensor& now = ps.get(k).value();
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(now[i], v[i] * (1.0 - 0.1 * 0.01), 1e-15);
  }
  EXPECT_EQ(opt.state().step, 1u);
  EXPECT_EQ(opt.state().m.at("lin.weight").shape(), before.at("lin.weight").shape());
}

TEST(AdamW, DiffersFromAdamWithL2) {
  auto a = make_store(5), b = make_store(5);
  ad::GradientMap g;
  for (const auto& [k, v] : a.snapshot()) g[k] = Tensor(v.shape(), 0.3);
  AdamW decoupled({0.01, 0.9, 0.999, 1e-8, 0.1, true}), coupled({0.01, 0.9, 0.999, 1e-8, 0.1, false});
  for (int i = 0; i < 3; ++i) {
    decoupled.step(a, g);
    coupled.step(b, g);
  }
  EXPECT_GT(max_abs_diff(a.get("lin.weight").value(), b.get("lin.weight").value()), 1e-6);
}

TEST(AdamW, RejectsBadSettings) {
  EXPECT_THROW(AdamW({-1, 0.9, 0.999, 1e-8, 0, true}), ConfigError);
  EXPECT_THROW(AdamW({1e-3, 1.0, 0.999, 1e-8, 0, true}), ConfigError);
  EXPECT_THROW(AdamW({1e-3, 0.9, 0.999, 0.0, 0, true}), ConfigError);
}

TEST(Accumulation, FourSingletonsMatchOneBatchOfFour) {
  std::mt19937_64 r(6);
  std::vector<Item> items;
  for (int i = 0; i < 4; ++i) items.push_back({oracle::random_tensor({2, 3}, r), oracle::random_tensor({2, 2}, r)});
  auto a = make_store(7), b = make_store(7);
  AdamW oa({1e-2, 0.9, 0.999, 1e-8, 0.01, true}), ob({1e-2, 0.9, 0.999, 1e-8, 0.01, true});
  for (int step = 0; step < 3; ++step) {
    std::vector<std::vector<Item>> singles;
    for (const auto& it : items) singles.push_back({it});
    const double la = accumulate_step(a, oa, std::span<const std::vector<Item>>(singles),
                                      [&](const std::vector<Item>& mb) { return batch_loss(a, mb); });
    const std::vector<std::vector<Item>> whole{items};
    const double lb = accumulate_step(b, ob, std::span<const std::vector<Item>>(whole),
                                      [&](const std::vector<Item>& mb) { return batch_loss(b, mb); });
    EXPECT_NEAR(la, lb, 1e-12);
  }
  for (const auto& [k, v] : a.snapshot()) EXPECT_LT(max_abs_diff(v, b.get(k).value()), 1e-9) << k;
}

TEST(Accumulation, ReportsMeanMicroLossAndClearsGrads) {
  std::mt19937_64 r(8);
  std::vector<std::vector<Item>> mbs;
  for (int i = 0; i < 3; ++i) mbs.push_back({{oracle::random_tensor({1, 3}, r), oracle::random_tensor({1, 2}, r)}});
  auto ps = make_store(9);
  double expect = 0;
  for (const auto& mb : mbs) expect += batch_loss(ps, mb).item() / 3.0;
  AdamW opt({1e-3, 0.9, 0.999, 1e-8, 0.0, true});
  const double got = accumulate_step(ps, opt, std::span<const std::vector<Item>>(mbs),
                                     [&](const std::vector<Item>& mb) { return batch_loss(ps, mb); });
  EXPECT_NEAR(got, expect, 1e-14);
  EXPECT_EQ(max_abs(ps.gradients().at("lin.weight")), 0.0);
  EXPECT_THROW(accumulate_step(ps, opt, std::span<const std::vector<Item>>(), [&](const std::vector<Item>& mb) {
                 return batch_loss(ps, mb);
               }),
               ConfigError);
}
