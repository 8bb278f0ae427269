#include <gtest/gtest.h>

#include "mirage/reparam/verify.hpp"

using namespace mirage;
using reparam::BatchNormState;

namespace {

BatchNormState<double> random_bn(std::size_t c, Rng& r) {
  return {Tensor<double>::uniform({c}, r, 0.5, 1.5), Tensor<double>::randn({c}, r, 0.3),
          Tensor<double>::randn({c}, r, 0.3), Tensor<double>::uniform({c}, r, 0.5, 2.0)};
}

Tensor<double> bn_apply(const Tensor<double>& x, const BatchNormState<double>& bn) {
  Tensor<double> y = x;
  const std::size_t C = x.extent(1), P = x.extent(2) * x.extent(3);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t c = (i / P) % C;
    y[i] = (x[i] - bn.running_mean[c]) * (bn.gamma[c] / bn.sigma(c)) + bn.beta[c];
  }
  return y;
}

Tensor<double> add_bias(Tensor<double> y, const Tensor<double>& b) {
  const std::size_t C = y.extent(1), P = y.extent(2) * y.extent(3);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[(i / P) % C];
  return y;
}

nn::ModelParams<double> randomize_bns(nn::ModelParams<double> p, std::uint64_t seed) {
  Rng r(seed);
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with(".gamma")) t = Tensor<double>::uniform(t.shape(), r, 0.5, 1.5);
    if (name.ends_with(".beta") || name.ends_with(".running_mean")) t = Tensor<double>::randn(t.shape(), r, 0.3);
    if (name.ends_with(".running_var")) t = Tensor<double>::uniform(t.shape(), r, 0.5, 2.0);
  }
  return p;
}

}  // namespace

TEST(FoldBn, IdentityBnLeavesKernel) {
  Rng r(1);
  auto w = Tensor<double>::randn({3, 2, 3, 3}, r);
  const double eps = 1.0 / 65536;
  BatchNormState<double> bn{Tensor<double>::ones({3}), Tensor<double>({3}), Tensor<double>({3}),
                            Tensor<double>::full({3}, 1.0 - eps), eps};
  auto f = reparam::fold_bn(w, bn);
  EXPECT_TRUE(f.weight.bitwise_equal(w));
  for (double v : f.bias.data()) EXPECT_EQ(v, 0.0);
}

TEST(FoldBn, DirectSubstitution) {
  const double eps = 1.0 / 65536;
  BatchNormState<double> bn{Tensor<double>::full({1}, 2.0), Tensor<double>::full({1}, 0.1),
                            Tensor<double>::full({1}, 0.5), Tensor<double>::full({1}, 1.0 - eps), eps};
  Tensor<double> w({1, 1, 1, 1}, std::vector<double>{0.75});
  auto f = reparam::fold_bn(w, bn);
  EXPECT_EQ(f.weight[0], 1.5);
  EXPECT_NEAR(f.bias[0], -0.9, 1e-15);
}

TEST(FoldBn, TrainModeIsContractError) {
  Rng r(1);
  auto bn = random_bn(2, r);
  bn.mode = reparam::BnMode::train;
  EXPECT_THROW(reparam::fold_bn(Tensor<double>({2, 2, 3, 3}), bn), ContractError);
}

TEST(FoldBn, MatchesBranchOnRandomInputs) {
  Rng r(2);
  auto w = Tensor<double>::randn({4, 3, 3, 3}, r);
  auto bn = random_bn(4, r);
  auto f = reparam::fold_bn(w, bn);
  double worst = 0;
  for (int s = 0; s < 50; ++s) {
    auto z = Tensor<double>::randn({1, 3, 6, 6}, r);
    auto direct = bn_apply(kern::conv2d(z, w, 1, 1), bn);
    auto folded = kern::conv2d(z, f.weight, &f.bias, 1, 1);
    worst = std::max(worst, kern::max_rel_diff(direct, folded));
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(Pad1x1, CentreAndEquivalence) {
  Rng r(3);
  auto w = Tensor<double>::randn({2, 3, 1, 1}, r);
  auto p = reparam::pad_1x1_to_3x3(w);
  ASSERT_EQ(p.shape(), (Shape{2, 3, 3, 3}));
  for (std::size_t oc = 0; oc < 6; ++oc)
    for (std::size_t s = 0; s < 9; ++s) EXPECT_EQ(p[oc * 9 + s], s == 4 ? w[oc] : 0.0);
  auto z = Tensor<double>::randn({2, 3, 5, 5}, r);
  EXPECT_LE(kern::max_rel_diff(kern::conv2d(z, p, 1, 1), kern::conv2d(z, w, 1, 0)), 1e-15);
  EXPECT_TRUE(reparam::pad_1x1_to_3x3(Tensor<double>({2, 3, 1, 1})).bitwise_equal(Tensor<double>({2, 3, 3, 3})));
  EXPECT_THROW(reparam::pad_1x1_to_3x3(Tensor<double>({2, 3, 3, 3})), DimensionError);
}

TEST(IdentityKernel, IsIdentity) {
  Rng r(4);
  auto z = Tensor<double>::randn({2, 5, 4, 4}, r);
  EXPECT_TRUE(kern::conv2d(z, reparam::identity_as_1x1<double>(5)).bitwise_equal(z));
  auto one = reparam::identity_as_1x1<double>(1);
  EXPECT_EQ(one.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(one[0], 1.0);
  auto bn = random_bn(5, r);
  auto f = reparam::fold_bn(reparam::identity_as_1x1<double>(5), bn);
  EXPECT_LE(kern::max_rel_diff(kern::conv2d(z, f.weight, &f.bias, 1, 0), bn_apply(z, bn)), 1e-14);
}

TEST(Merge, IdentityOnlyBlock) {
  const double eps = 1.0 / 65536;
  auto id = [&](std::size_t c) {
    return BatchNormState<double>{Tensor<double>::ones({c}), Tensor<double>({c}), Tensor<double>({c}),
                                  Tensor<double>::full({c}, 1.0 - eps), eps};
  };
  reparam::RepvggBranches<double> b{Tensor<double>({3, 3, 3, 3}), id(3), Tensor<double>({3, 3, 1, 1}), id(3), id(3)};
  auto m = reparam::merge_repvgg_block(b);
  EXPECT_TRUE(m.weight.bitwise_equal(reparam::pad_1x1_to_3x3(reparam::identity_as_1x1<double>(3))));
  for (double v : m.bias.data()) EXPECT_EQ(v, 0.0);
}

TEST(Merge, TwoBranchBlockIsSumOfFoldedKernels) {
  Rng r(5);
  reparam::RepvggBranches<double> b{Tensor<double>::randn({4, 3, 3, 3}, r), random_bn(4, r),
                                    Tensor<double>::randn({4, 3, 1, 1}, r), random_bn(4, r), std::nullopt};
  auto m = reparam::merge_repvgg_block(b);
  auto f3 = reparam::fold_bn(b.w3, b.bn3);
  auto f1 = reparam::fold_bn(b.w1, b.bn1);
  EXPECT_TRUE(m.weight.bitwise_equal(kern::add(f3.weight, reparam::pad_1x1_to_3x3(f1.weight))));
  EXPECT_TRUE(m.bias.bitwise_equal(kern::add(f3.bias, f1.bias)));
  auto again = reparam::merge_repvgg_block(b);
  EXPECT_TRUE(again.weight.bitwise_equal(m.weight));
}

TEST(Verify, CorrectMergePassesFloat64) {
  auto plan = nn::repvgg_block_plan("r", 6, 6, 1, nn::SkipMode::full());
  auto p = randomize_bns(nn::init_block<double>(plan, Rng(1)), 2);
  auto m = reparam::merge_repvgg_block(reparam::RepvggBranches<double>::from_params(p, "r", 1e-5));
  Rng r(3);
  auto rep = reparam::verify_equivalence(plan, p, m, 10, r, 1e-10, 8, 8);
  EXPECT_TRUE(rep.pass) << rep.max_forward_rel_err << " " << rep.max_input_grad_rel_err;
  EXPECT_EQ(rep.samples, 10u);
  // Direct recomputation of the merged form.
  Rng zr(4);
  auto z = Tensor<double>::randn({1, 6, 8, 8}, zr);
  auto oracle = add_bias(kern::conv2d(z, m.weight, 1, 1), m.bias);
  ag::Graph<double> g;
  nn::Context<double> ctx(g, p, nn::Mode::eval, false);
  auto pre = reparam::branch_sum(ctx, plan, g.constant(z));
  EXPECT_LE(kern::max_rel_diff(pre.value(), oracle), 1e-12);
}

TEST(Verify, CorruptedBiasFails) {
  auto plan = nn::repvgg_block_plan("r", 4, 4, 1, nn::SkipMode::full());
  auto p = randomize_bns(nn::init_block<double>(plan, Rng(1)), 2);
  auto m = reparam::merge_repvgg_block(reparam::RepvggBranches<double>::from_params(p, "r", 1e-5));
  for (auto& v : m.bias.data()) v += 1.0;
  Rng r(3);
  auto rep = reparam::verify_equivalence(plan, p, m, 5, r, 1e-10, 8, 8);
  EXPECT_FALSE(rep.pass);
  EXPECT_GT(rep.max_forward_rel_err, 0.05);
  EXPECT_LE(rep.max_input_grad_rel_err, 1e-10);  // a bias shift leaves the input gradient unchanged
}

TEST(Verify, CorrectMergePassesFloat32) {
  auto plan = nn::repvgg_block_plan("r", 8, 8, 1, nn::SkipMode::full());
  auto p = randomize_bns(nn::init_block<double>(plan, Rng(7)), 8).cast<float>();
  auto m = reparam::merge_repvgg_block(reparam::RepvggBranches<float>::from_params(p, "r", 1e-5f));
  Rng r(9);
  auto rep = reparam::verify_equivalence(plan, p, m, 10, r, 1e-4, 8, 8);
  EXPECT_TRUE(rep.pass) << rep.max_forward_rel_err << " " << rep.max_input_grad_rel_err;
}

TEST(Verify, StridedAndScaledBlocks) {
  Rng r(10);
  auto strided = nn::repvgg_block_plan("r", 4, 8, 1, nn::SkipMode::full(), 2);
  auto ps = randomize_bns(nn::init_block<double>(strided, Rng(1)), 2);
  auto ms = reparam::merge_repvgg_block(reparam::RepvggBranches<double>::from_params(ps, "r", 1e-5));
  EXPECT_TRUE(reparam::verify_equivalence(strided, ps, ms, 5, r, 1e-10, 9, 9).pass);

  auto scaled = nn::repvgg_block_plan("r", 4, 4, 1, nn::SkipMode::scaled(0.3));
  auto pk = randomize_bns(nn::init_block<double>(scaled, Rng(1)), 2);
  auto mk = reparam::merge_repvgg_block(reparam::RepvggBranches<double>::from_params(pk, "r", 1e-5, 0.3));
  EXPECT_TRUE(reparam::verify_equivalence(scaled, pk, mk, 5, r, 1e-10, 6, 6).pass);

  // The inference-time block form reproduces the training-time block including ReLU.
  auto z = Tensor<double>::randn({2, 4, 6, 6}, r);
  EXPECT_LE(kern::max_rel_diff(nn::repvgg_block_forward(scaled, pk, z, true), nn::repvgg_block_forward(scaled, pk, z, false)),
            1e-12);
}
