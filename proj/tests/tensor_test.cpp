#include "pointcaps/tensor.hpp"

#include <gtest/gtest.h>

#include <random>

#include "pointcaps/ops.hpp"

using namespace pointcaps;

TEST(Tensor, FactoriesProduceExpectedValues) {
  Tensor z = Tensor::zeros({2, 3});
  EXPECT_EQ(z.size(), 6);
  EXPECT_EQ(z.rank(), 2);
  for (real v : z.values()) EXPECT_EQ(v, 0);

  Tensor f = Tensor::full({4}, real(2.5));
  for (real v : f.values()) EXPECT_EQ(v, 2.5);

  Tensor s = Tensor::scalar(real(7));
  EXPECT_TRUE(s.is_scalar());
  EXPECT_EQ(s.item(), 7);

  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(m.extent(0), 2);
  EXPECT_EQ(m.extent(-1), 2);
  EXPECT_EQ(m.values()[3], 4);
}

TEST(Tensor, FactoryRejectsBadShapes) {
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
  EXPECT_THROW(Tensor::zeros({-1}), ShapeError);
  EXPECT_THROW(Tensor::from({3}, {1, 2}), ShapeError);
}

TEST(Tensor, UniformStaysInRangeAndIsDeterministic) {
  std::mt19937_64 a(42), b(42);
  Tensor t1 = Tensor::uniform({100}, real(-0.25), real(0.25), a);
  Tensor t2 = Tensor::uniform({100}, real(-0.25), real(0.25), b);
  EXPECT_EQ(t1.values(), t2.values());
  for (real v : t1.values()) {
    EXPECT_GE(v, -0.25);
    EXPECT_LT(v, 0.25);
  }
}

TEST(Tensor, UndefinedUseThrows) {
  Tensor t;
  EXPECT_FALSE(t.defined());
  EXPECT_THROW(t.shape(), ContractError);
  EXPECT_THROW(t.values(), ContractError);
}

TEST(Tensor, ItemRequiresScalar) {
  EXPECT_THROW(Tensor::zeros({2}).item(), ContractError);
}

TEST(Tensor, ExtentRejectsBadAxis) {
  Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.extent(1), 3);
  EXPECT_THROW(t.extent(2), ShapeError);
  EXPECT_THROW(t.extent(-3), ShapeError);
}

TEST(Tensor, ValuesMutAllowedOnLeavesOnly) {
  Tensor leaf = Tensor::zeros({2}, true);
  leaf.values_mut()[0] = 5;
  EXPECT_EQ(leaf.values()[0], 5);

  Tape tape;
  TapeScope scope(tape);
  Tensor out = add(leaf, leaf);
  EXPECT_THROW(out.values_mut(), ContractError);
}

TEST(Tensor, NoGradOutputsStayMutable) {
  Tensor leaf = Tensor::full({2}, real(1), true);
  Tape tape;
  TapeScope scope(tape);
  NoGradScope ng;
  Tensor out = add(leaf, leaf);
  EXPECT_NO_THROW(out.values_mut());
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, CloneIsDeep) {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor b = a.clone();
  b.values_mut()[0] = 9;
  EXPECT_EQ(a.values()[0], 1);
}

TEST(Tensor, DetachSharesValuesButStopsGrad) {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor d = a.detached();
  EXPECT_FALSE(d.requires_grad());
  EXPECT_EQ(d.values(), a.values());
}

TEST(Tape, BackwardAccumulatesThroughChain) {
  Tensor a = Tensor::from({3}, {1, 2, 3}, true);
  Tensor b = Tensor::from({3}, {4, 5, 6}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(mul(a, b));
    tape.backward(loss);
  }
  ASSERT_TRUE(a.has_grad());
  ASSERT_TRUE(b.has_grad());
  EXPECT_EQ(a.grad(), (std::vector<real>{4, 5, 6}));
  EXPECT_EQ(b.grad(), (std::vector<real>{1, 2, 3}));
}

TEST(Tape, GradAccumulatesAcrossUses) {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(add(a, a));
    tape.backward(loss);
  }
  EXPECT_EQ(a.grad(), (std::vector<real>{2, 2}));
}

TEST(Tape, BackwardRequiresScalar) {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor out = add(a, a);
  EXPECT_THROW(tape.backward(out), ContractError);
}

TEST(Tape, BackwardRejectsForeignValue) {
  Tensor a = Tensor::from({}, {3}, true);
  Tape t1, t2;
  Tensor loss;
  {
    TapeScope scope(t1);
    loss = add(a, a);
  }
  EXPECT_THROW(t2.backward(loss), TapeError);
}

TEST(Tape, DetachCutsTheChain) {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(mul(detach(a), a));
    tape.backward(loss);
  }
  // only the still-attached factor contributes
  EXPECT_EQ(a.grad(), (std::vector<real>{1, 2}));
}

TEST(Tape, CurrentReflectsScopes) {
  EXPECT_EQ(Tape::current(), nullptr);
  Tape tape;
  {
    TapeScope scope(tape);
    EXPECT_EQ(Tape::current(), &tape);
    {
      NoGradScope ng;
      EXPECT_EQ(Tape::current(), nullptr);
    }
    EXPECT_EQ(Tape::current(), &tape);
  }
  EXPECT_EQ(Tape::current(), nullptr);
}

TEST(Tape, GradBeforeBackwardThrows) {
  Tensor a = Tensor::zeros({2}, true);
  EXPECT_FALSE(a.has_grad());
  EXPECT_THROW(a.grad(), ContractError);
}

TEST(Tape, ZeroGradClears) {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(a));
  }
  ASSERT_TRUE(a.has_grad());
  a.zero_grad();
  EXPECT_FALSE(a.has_grad());
  EXPECT_THROW(a.grad(), ContractError);
}

TEST(Numerics, NonFiniteResultThrows) {
  Tensor big = Tensor::full({2}, real(1e308));
  EXPECT_THROW(add(big, big), NumericError);
  Tensor bad = Tensor::full({2}, real(1e200));
  EXPECT_THROW(mul(bad, bad), NumericError);
}
