#include <gtest/gtest.h>

#include "mirage/autograd/decomposition.hpp"
#include "mirage/autograd/grad_check.hpp"
#include "mirage/nn/network.hpp"
#include "mirage/reparam/verify.hpp"

using namespace mirage;

TEST(Smoke, ToyResnetLogitsShape) {
  nn::Model m(nn::toy_resnet(20));
  auto p = nn::build_network<float>(m.spec, Rng(1));
  Rng r(2);
  auto x = Tensor<float>::uniform({3, 3, 32, 32}, r, 0, 1);
  auto y = nn::forward(m, p, x);
  EXPECT_EQ(y.shape(), (Shape{3, 20}));
}
