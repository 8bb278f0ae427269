#include <gtest/gtest.h>

#include "mirage/attack/attack.hpp"
#include "mirage/autograd/grad_check.hpp"

using namespace mirage;
using namespace mirage::attack;

namespace {

// logits = [x, -x] for a one-dimensional input x.
template <Scalar T>
TargetFn<T> mirror_target() {
  return [](ag::Graph<T>& g, const ag::Var<T>& x) {
    return ag::linear(x, g.constant(Tensor<T>({2, 1}, std::vector<T>{1, -1})), g.constant(Tensor<T>({2})));
  };
}

nn::NetworkSpec small_net() {
  nn::NetworkSpec s = nn::toy_resnet(4, 1, 4);
  s.resolution = 8;
  s.stem = {4, 3, 2};
  const std::size_t strides[4] = {1, 2, 1, 2};
  for (std::size_t i = 0; i < 4; ++i) s.stages[i].stride = strides[i];
  return s;
}

gen::Generator<double> pixel_gen(std::size_t c, std::size_t res) {
  gen::GeneratorSpec s;
  s.mode = gen::GeneratorMode::pixel;
  s.out_channels = c;
  s.resolution = res;
  return {s, {}};
}

nn::ModelParams<double> randomised(const nn::NetworkSpec& spec, std::uint64_t seed) {
  auto p = nn::build_network<double>(spec, Rng(seed));
  Rng r(seed + 100);
  for (auto& [n, t] : p.tensors) {
    if (n.ends_with("running_var"))
      for (auto& v : t.data()) v = r.uniform(0.5, 1.5);
    else if (n.ends_with("running_mean") || n.ends_with("beta") || n.ends_with("bias"))
      for (auto& v : t.data()) v = r.normal(0, 0.1);
  }
  return p;
}

AttackConfig quick(std::size_t iters) {
  AttackConfig c;
  c.iterations = iters;
  c.candidates = 3;
  c.seed = 21;
  return c;
}

}  // namespace

TEST(MiLoss, TwoClassAnalyticValue) {
  ag::Graph<double> g;
  auto w = g.leaf(Tensor<double>({1, 1}));
  auto l = mi_loss<double>(g, mirror_target<double>(), identity_generator<double>(), w, {0}, LossKind::nll, 0.0);
  EXPECT_NEAR(l.total.value().item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(std::round(l.total.value().item() * 1e4) / 1e4, 0.6931, 1e-12);
  auto lm = mi_loss<double>(g, mirror_target<double>(), identity_generator<double>(), g.constant(Tensor<double>({1, 1}, std::vector<double>{2.0})), {1},
                            LossKind::logit_max, 0.0);
  EXPECT_EQ(lm.total.value().item(), 2.0);
  EXPECT_THROW(mi_loss<double>(g, mirror_target<double>(), identity_generator<double>(), w, {2}, LossKind::nll, 0.0), LabelError);
}

TEST(MiLoss, ZeroLambdaIsBareNllAndPriorAddsExactly) {
  const auto spec = small_net();
  const nn::Model m(spec);
  const auto p = randomised(spec, 3);
  const auto G = pixel_gen(3, 8);
  Rng r(4);
  const auto w0 = Tensor<double>::randn({2, G.spec.input_dim()}, r, 1.0);
  const std::vector<std::size_t> y{1, 3};
  ag::Graph<double> g;
  auto w = g.constant(w0);
  auto bare = mi_loss<double>(g, classifier_target(m, p), generator_fn(G), w, y, LossKind::nll, 0.0);
  // Independent softmax over the network's logits.
  const auto logits = nn::forward(m, p, gen::generate(G, w0));
  double expect = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    double mx = -1e300, s = 0;
    for (std::size_t k = 0; k < 4; ++k) mx = std::max(mx, logits.at({i, k}));
    for (std::size_t k = 0; k < 4; ++k) s += std::exp(logits.at({i, k}) - mx);
    expect += -(logits.at({i, y[i]}) - mx - std::log(s));
  }
  EXPECT_NEAR(bare.total.value().item(), expect, 1e-12);
  auto reg = mi_loss<double>(g, classifier_target(m, p), generator_fn(G), w, y, LossKind::nll, 0.5);
  auto img = g.constant(gen::generate(G, w0));
  const double tv = ag::sum(ag::total_variation(img)).value().item();
  const double ms = ag::sum(ag::row_mean_square(w)).value().item();
  EXPECT_NEAR(reg.total.value().item(), bare.total.value().item() + 0.5 * (tv + ms), 1e-12);
}

TEST(MiLoss, LatentGradientMatchesFiniteDifferences) {
  const auto spec = small_net();
  const nn::Model m(spec);
  const auto p = randomised(spec, 5);
  const auto G = pixel_gen(3, 8);
  Rng r(6);
  const auto w0 = Tensor<double>::randn({2, G.spec.input_dim()}, r, 1.0);
  for (auto kind : {LossKind::nll, LossKind::logit_max}) {
    auto rep = ag::grad_check<double>(
        [&](ag::Graph<double>& g, const ag::Var<double>& w) {
          return mi_loss<double>(g, classifier_target(m, p), generator_fn(G), w, {0, 2}, kind, 0.01).total;
        },
        w0, 1e-3, 1e-6, {}, 4);
    EXPECT_TRUE(rep.pass) << loss_kind_name(kind) << " " << rep.max_rel_err;
    EXPECT_GT(rep.checked, 0u);
  }
}

TEST(MiAttack, OneDimensionalGradientDescentOracle) {
  AttackConfig c;
  c.iterations = 100;
  c.step_size = 0.5;
  c.optimizer = StepRule::gd;
  c.candidates = 1;
  c.prior_weight = 0.0;
  auto e = mi_attack<double>(mirror_target<double>(), identity_generator<double>(), 0, 1, c,
                             Tensor<double>({1, 1}, std::vector<double>{-1.0}));
  // Hand iteration: L(w) = log(1 + exp(-2w)), dL/dw = -2 / (1 + exp(2w)).
  double w = -1.0;
  std::vector<double> traj{std::log1p(std::exp(-2 * w))};
  for (int i = 0; i < 100; ++i) {
    w -= 0.5 * (-2.0 / (1.0 + std::exp(2 * w)));
    traj.push_back(std::log1p(std::exp(-2 * w)));
  }
  ASSERT_EQ(e.trajectory.size(), 101u);
  for (std::size_t i = 0; i < traj.size(); ++i) EXPECT_NEAR(e.trajectory[i], traj[i], 1e-12) << i;
  for (std::size_t i = 1; i < e.trajectory.size(); ++i) EXPECT_LE(e.trajectory[i], e.trajectory[i - 1]);
  EXPECT_NEAR(e.best_w[0], w, 1e-12);
  EXPECT_GE(e.final_likelihood, 0.99);
  EXPECT_NEAR(e.final_likelihood, 1.0 / (1.0 + std::exp(-2 * w)), 1e-12);
}

TEST(MiAttack, ZeroIterationsKeepsBestInitialisation) {
  auto c = quick(0);
  c.candidates = 4;
  c.prior_weight = 0;
  Tensor<double> init({4, 1}, std::vector<double>{-0.5, 0.7, 0.2, 0.7});
  auto e = mi_attack<double>(mirror_target<double>(), identity_generator<double>(), 0, 1, c, init);
  EXPECT_EQ(e.best_candidate, 1u);  // tie with candidate 3 keeps the lower index
  EXPECT_EQ(e.best_w[0], 0.7);
  EXPECT_EQ(e.trajectory.size(), 1u);
  // Defaults: seeded standard-normal starts.
  auto d = mi_attack<double>(mirror_target<double>(), identity_generator<double>(), 0, 1, c);
  double best = -1;
  for (std::size_t k = 0; k < 4; ++k) best = std::max(best, initial_latent<double>(c, 0, k, 1)[0]);
  EXPECT_EQ(d.best_w[0], best);
}

TEST(MiAttack, FailedCandidatesAreExcluded) {
  auto c = quick(3);
  c.candidates = 2;
  c.prior_weight = 0;
  Tensor<double> init({2, 1}, std::vector<double>{std::nan(""), 0.3});
  auto e = mi_attack<double>(mirror_target<double>(), identity_generator<double>(), 0, 1, c, init);
  EXPECT_TRUE(e.candidate_failed[0]);
  EXPECT_FALSE(e.candidate_failed[1]);
  EXPECT_EQ(e.best_candidate, 1u);
  EXPECT_TRUE(std::isnan(e.candidate_likelihoods[0]));
  EXPECT_EQ(e.trajectory.size(), 4u);
  Tensor<double> dead({2, 1}, std::vector<double>{std::nan(""), std::nan("")});
  EXPECT_THROW(mi_attack<double>(mirror_target<double>(), identity_generator<double>(), 0, 1, c, dead), AttackError);
}

TEST(AttackAll, SelectionLawDeterminismAndWorkerInvariance) {
  const auto spec = small_net();
  const nn::Model m(spec);
  const auto p = randomised(spec, 7);
  const auto G = pixel_gen(3, 8);
  auto c = quick(4);
  const std::vector<std::size_t> ids{3, 0, 2, 1};
  auto serial = attack_all<double>(m, p, G, ids, c, 1);
  auto again = attack_all<double>(m, p, G, ids, c, 1);
  auto parallel = attack_all<double>(m, p, G, ids, c, 3);
  c.max_batch_rows = 1;  // one id per block
  auto split = attack_all<double>(m, p, G, ids, c, 1);
  EXPECT_EQ(serial.ids(), ids);
  for (const auto* other : {&again, &parallel, &split}) {
    ASSERT_EQ(other->entries.size(), ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      EXPECT_EQ(other->entries[i].id, ids[i]);
      EXPECT_TRUE(other->entries[i].best_w.bitwise_equal(serial.entries[i].best_w));
      EXPECT_EQ(other->entries[i].trajectory, serial.entries[i].trajectory);
    }
  }
  for (const auto& e : serial.entries) {
    EXPECT_EQ(e.trajectory.size(), 5u);
    for (double l : e.candidate_likelihoods) EXPECT_GE(e.final_likelihood, l);
    // Likelihood recomputed from the stored latent.
    Tensor<double> w({1, e.best_w.size()}, std::vector<double>(e.best_w.data().begin(), e.best_w.data().end()));
    const auto logits = nn::forward(m, p, gen::generate(G, w));
    double mx = -1e300, s = 0;
    for (std::size_t k = 0; k < 4; ++k) mx = std::max(mx, logits[k]);
    for (std::size_t k = 0; k < 4; ++k) s += std::exp(logits[k] - mx);
    EXPECT_NEAR(e.final_likelihood, std::exp(logits[e.id] - mx) / s, 1e-12);
    EXPECT_TRUE(e.reconstruction.bitwise_equal(detail::row_of(gen::generate(G, w), 0)));
    ASSERT_EQ(e.candidate_reconstructions.shape(), (Shape{3, 3, 8, 8}));
    EXPECT_TRUE(detail::row_of(e.candidate_reconstructions, e.best_candidate).bitwise_equal(e.reconstruction));
  }
  EXPECT_TRUE(attack_all<double>(m, p, G, {}, c, 2).entries.empty());
  auto stacked = stack_reconstructions(serial);
  EXPECT_EQ(stacked.shape(), (Shape{4, 3, 8, 8}));
}

TEST(AttackAll, AttackImprovesLikelihood) {
  const auto spec = small_net();
  const nn::Model m(spec);
  const auto p = randomised(spec, 8);
  const auto G = pixel_gen(3, 8);
  auto c0 = quick(0), c = quick(30);
  auto before = attack_all<double>(m, p, G, {0, 1, 2, 3}, c0, 1);
  auto after = attack_all<double>(m, p, G, {0, 1, 2, 3}, c, 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_GT(after.entries[i].final_likelihood, before.entries[i].final_likelihood);
}

TEST(AttackConfig, Validation) {
  AttackConfig c;
  c.candidates = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_loss_kind("logit_max"), LossKind::logit_max);
  EXPECT_THROW(parse_step_rule("rmsprop"), ConfigError);
}

TEST(WorkerCount, ReadsEnvironment) {
  setenv("MIRAGE_THREADS", "3", 1);
  EXPECT_EQ(worker_count(), 3u);
  setenv("MIRAGE_THREADS", "zero", 1);
  EXPECT_GE(worker_count(), 1u);
  unsetenv("MIRAGE_THREADS");
}
