#include <gtest/gtest.h>

#include <cmath>

#include "rrlab/gradcheck.hpp"
#include "rrlab/ops.hpp"

using namespace rrlab;

TEST(Tape, BackwardTwiceFails) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, std::vector<double>{1.0, 2.0}), true);
  auto y = ad::reduce_sum(ad::mul(x, x));
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), ad::TapeError);
}

TEST(Tape, NonScalarLossFails) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, std::vector<double>{1.0, 2.0}), true);
  EXPECT_THROW(tape.backward(ad::scale(x, 2.0)), ad::TapeError);
}

TEST(Tape, SharedInputAccumulates) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({3}, std::vector<double>{1.0, -2.0, 3.0}), true);
  tape.backward(ad::reduce_sum(ad::add(ad::mul(x, x), x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 7.0);
}

TEST(Tape, StopGradientBlocksFlow) {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, std::vector<double>{1.5, 2.0}), true);
  auto y = ad::reduce_sum(ad::mul(ad::stop_gradient(x), x));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.5);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Ops, ShapeMismatchNamesPrimitive) {
  ad::Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({3, 2}));
  try {
    ad::add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.primitive(), "add");
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  ad::Tape<double> tape;
  auto x = tape.constant(Tensor<double>({2, 3}, std::vector<double>{1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0}));
  const auto& p = ad::softmax(x).value();
  for (int r = 0; r < 2; ++r) EXPECT_NEAR(p[r * 3] + p[r * 3 + 1] + p[r * 3 + 2], 1.0, 1e-12);
  EXPECT_NEAR(p[2], 1.0 / (1.0 + std::exp(-1.0) + std::exp(-2.0)), 1e-12);
}

TEST(Ops, ConvMatchesDirectSum) {
  ad::Tape<double> tape;
  Tensor<double> x({1, 3, 3, 1}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> w({3, 3, 1, 1}, std::vector<double>{0, 1, 0, 1, -4, 1, 0, 1, 0});
  const auto& y = ad::conv2d(tape.constant(x), tape.constant(w), ad::ConvGeometry{1, 1}).value();
  // Laplacian with zero padding.
  EXPECT_DOUBLE_EQ(y[4], 2 + 4 + 6 + 8 - 20);
  EXPECT_DOUBLE_EQ(y[0], 2 + 4 - 4);
}

TEST(Ops, DropoutIsInvertedAndSeeded) {
  ad::Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1000}, 1.0));
  const auto a = ad::dropout(x, 0.5, 7).value();
  const auto b = ad::dropout(x, 0.5, 7).value();
  EXPECT_EQ(a, b);
  std::size_t kept = 0;
  for (double v : a.data) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept), 500.0, 60.0);
}

TEST(Gradcheck, EveryPrimitivePasses) {
  for (const auto& r : run_gradcheck(primitive_cases(3))) {
    EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
  }
}

TEST(Gradcheck, EveryLossTermPasses) {
  const auto results = run_gradcheck(loss_cases(5, 12));
  EXPECT_EQ(results.size(), 6u);
  for (const auto& r : results) EXPECT_LT(r.max_rel_error, 1e-3) << r.name;
}

TEST(Gradcheck, CorruptedPrimitiveIsReportedByName) {
  const auto r = check_gradient(corrupted_case());
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.name, "corrupted_scale");
  EXPECT_NEAR(r.max_rel_error, 0.2 / 2.2, 1e-6);
}
