#include <gtest/gtest.h>

#include "cdistill/cdistill.hpp"

using namespace cdistill;

TEST(AdamW, ZeroGradientAndZeroDecayIsStationary) {
  Parameter<double> p("w", Tensor<double>({3}, {0.5, -1.0, 2.0}));
  OptimizerState<double> st;
  for (int i = 0; i < 5; ++i) optimizer_step<double>({&p}, st, 0.1, 0.0, 0.9, 0.999, 1e-8);
  EXPECT_EQ(p.value, Tensor<double>({3}, {0.5, -1.0, 2.0}));
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, TwoStepTrajectoryMatchesHandComputation) {
  Parameter<double> p("w", Tensor<double>({2}, {1.0, -2.0}));
  OptimizerState<double> st;
  p.grad = Tensor<double>({2}, {0.5, -1.0});
  optimizer_step<double>({&p}, st, 0.1, 0.01, 0.9, 0.999, 1e-8);
  EXPECT_NEAR(p.value[0], 0.899000002, 1e-7);
  EXPECT_NEAR(p.value[1], -1.898000001, 1e-7);
  p.grad = Tensor<double>({2}, {-0.3, 0.2});
  optimizer_step<double>({&p}, st, 0.1, 0.01, 0.9, 0.999, 1e-8);
  EXPECT_NEAR(p.value[0], 0.8789511989397751, 1e-7);
  EXPECT_NEAR(p.value[1], -1.8449993939894946, 1e-7);
}

TEST(AdamW, DecayOnlyStepShrinks) {
  Parameter<double> p("w", Tensor<double>({2}, {3.0, -4.0}));
  OptimizerState<double> st;
  optimizer_step<double>({&p}, st, 0.05, 0.2, 0.9, 0.999, 1e-8);
  EXPECT_DOUBLE_EQ(p.value[0], 3.0 * (1 - 0.05 * 0.2));
  EXPECT_DOUBLE_EQ(p.value[1], -4.0 * (1 - 0.05 * 0.2));
}

TEST(AdamW, FloatParametersUseDoubleArithmetic) {
  Parameter<float> pf("w", Tensor<float>({1}, {1.0f}));
  Parameter<double> pd("w", Tensor<double>({1}, {1.0}));
  OptimizerState<float> sf;
  OptimizerState<double> sd;
  for (double g : {0.5, -0.3, 0.8}) {
    pf.grad = Tensor<float>({1}, {static_cast<float>(g)});
    pd.grad = Tensor<double>({1}, {static_cast<float>(g)});
    optimizer_step<float>({&pf}, sf, AdamWConfig{}, 1e-3);
    optimizer_step<double>({&pd}, sd, AdamWConfig{}, 1e-3);
  }
  EXPECT_NEAR(pf.value[0], pd.value[0], 1e-6);
}

TEST(AdamW, MomentMismatchRejected) {
  Parameter<double> a("a", Tensor<double>({2})), b("b", Tensor<double>({3}));
  OptimizerState<double> st;
  optimizer_step<double>({&a}, st, 0.1, 0.0, 0.9, 0.999, 1e-8);
  EXPECT_THROW(optimizer_step<double>({&b}, st, 0.1, 0.0, 0.9, 0.999, 1e-8), ShapeError);
  EXPECT_THROW(optimizer_step<double>({&a, &b}, st, 0.1, 0.0, 0.9, 0.999, 1e-8), ShapeError);
}
