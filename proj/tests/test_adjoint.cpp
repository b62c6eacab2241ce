#include <gtest/gtest.h>

#include "spreg/adjoint.hpp"
#include "spreg/energy.hpp"
#include "spreg/gradcheck.hpp"
#include "spreg/smoothproper.hpp"
#include "support.hpp"

namespace spreg {
namespace {

using V = std::vector<ad::Var>;

TEST(Tape, SquareOfScalarThree) {
  ad::Tape t;
  const ad::Var x = t.input(Field(1, 1, 1, 3.0));
  const ad::Var y = ad::square(x);
  EXPECT_EQ(y.scalar(), 9.0);
  t.backward(y);
  EXPECT_EQ(t.gradient(x)[0], 6.0);
}

TEST(Tape, SumGivesOnesAndZeroScaleGivesZero) {
  ad::Tape t;
  const ad::Var x = t.input(testing::random_field(4, 3, 2, 1));
  t.backward(ad::sum(x));
  const Field gx = t.gradient(x);
  for (double g : gx.data()) EXPECT_EQ(g, 1.0);

  ad::Tape t2;
  const ad::Var z = t2.input(testing::random_field(4, 3, 2, 2));
  t2.backward(ad::sum(ad::scale(z, 0.0)));
  const Field gz = t2.gradient(z);
  for (double g : gz.data()) EXPECT_EQ(g, 0.0);
}

TEST(Tape, UnreachableInputGetsZeroGradient) {
  ad::Tape t;
  const ad::Var a = t.input(Field(2, 2, 1, 1.0));
  const ad::Var b = t.input(Field(2, 2, 1, 5.0));
  t.backward(ad::mean(a));
  const Field gb = t.gradient(b);
  EXPECT_TRUE(gb.same_shape(b.value()));
  for (double g : gb.data()) EXPECT_EQ(g, 0.0);
  const Field ga = t.gradient(a);
  for (double g : ga.data()) EXPECT_EQ(g, 0.25);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  ad::Tape t;
  const ad::Var a = t.input(Field(2, 2, 1, 2.0));
  const ad::Var c = t.constant(Field(2, 2, 1, 3.0));
  t.backward(ad::add(ad::sum(ad::mul(a, c)), ad::sum(ad::square(c))));
  const Field ga = t.gradient(a), gc = t.gradient(c);
  for (double g : ga.data()) EXPECT_EQ(g, 3.0);
  for (double g : gc.data()) EXPECT_EQ(g, 0.0);
  EXPECT_FALSE(t.requires_grad(c.id()));
}

TEST(Tape, NonScalarLossAndUnknownPrimitiveAreErrors) {
  ad::Tape t;
  const ad::Var x = t.input(Field(2, 2, 1));
  EXPECT_THROW(t.backward(x), ValidationError);
  EXPECT_THROW(t.record("fft", Field(1, 1, 1), {x.id()}, nullptr), ValidationError);
  EXPECT_NO_THROW(t.record("sum", Field(1, 1, 1), {x.id()}, nullptr));
  EXPECT_THROW(ad::primitive_from_name("input_typo"), ValidationError);
  for (const auto& [prim, name] : ad::kPrimitiveNames) EXPECT_EQ(ad::primitive_from_name(name), prim);
}

TEST(Tape, ClampSubgradientIsZeroAtKink) {
  ad::Tape t;
  Field v(3, 1, 1);
  v[0] = -1.0;
  v[1] = 0.0;
  v[2] = 2.0;
  const ad::Var x = t.input(v);
  t.backward(ad::sum(ad::clamp_min(x, 0.0)));
  const Field g = t.gradient(x);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 1.0);
}

TEST(Tape, BlurAdjointIsTheSameBlur) {
  const Field f = testing::random_field(9, 7, 2, 3);
  const Field cot = testing::random_field(9, 7, 2, 4);
  ad::Tape t;
  const ad::Var x = t.input(f);
  t.backward_from(ad::gaussian_blur(x, 1.3), cot);
  EXPECT_LT(testing::max_abs_diff(t.gradient(x), gaussian_blur(cot, 1.3)), 1e-15);
}

TEST(Tape, BackwardIsDeterministic) {
  const Field p = testing::random_field(8, 8, 9, 5, 0.0, 1.0);
  const BasisMatrix B = init_basis(9, {1.0});
  SPConfig cfg;
  cfg.m = 9;
  cfg.basis_scales = {1.0};
  auto run = [&] {
    ad::Tape t;
    const ad::Var pv = t.input(p);
    const ad::Var bv = t.input(B);
    t.backward(ad::diffusive_reg(ad::sp_forward(pv, bv, cfg.schedule(), cfg)));
    return std::make_pair(t.gradient(pv), t.gradient(bv));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_TRUE(a.first == b.first);
  EXPECT_TRUE(a.second == b.second);
}

TEST(GradCheck, LinearFunctionIsRoundOffExact) {
  const Field w = testing::random_field(6, 6, 2, 6);
  const ad::TracedFunction fn = [w](ad::Tape& t, const V& v) {
    return ad::sum(ad::mul(ad::add(ad::scale(v[0], 3.0), v[1]), t.constant(w)));
  };
  EXPECT_LT(ad::grad_check(fn, {testing::random_field(6, 6, 2, 7), testing::random_field(6, 6, 2, 8)}, 1e-4), 1e-9);
}

TEST(GradCheck, EpsilonRangeEnforced) {
  const ad::TracedFunction fn = [](ad::Tape&, const V& v) { return ad::sum(v[0]); };
  const std::vector<Field> in{Field(2, 2, 1)};
  EXPECT_THROW(ad::grad_check(fn, in, 1e-7), ValidationError);
  EXPECT_THROW(ad::grad_check(fn, in, 1e-2), ValidationError);
  EXPECT_NO_THROW(ad::grad_check(fn, in, 1e-6));
}

TEST(GradCheck, SamplesAtLeast64Coordinates) {
  const ad::TracedFunction fn = [](ad::Tape&, const V& v) { return ad::sum(ad::square(v[0])); };
  const auto small = ad::grad_check_report(fn, {testing::random_field(3, 3, 1, 9)}, 1e-4);
  EXPECT_EQ(small.coordinates, 9u);
  const auto big = ad::grad_check_report(fn, {testing::random_field(10, 10, 2, 9)}, 1e-4);
  EXPECT_EQ(big.coordinates, 64u);
}

TEST(GradCheck, LnccOfPerturbedIdenticalImages) {
  const Image2D a = testing::random_image(12, 12, 10);
  Field b = a;
  const Field noise = testing::random_field(12, 12, 1, 11, -0.05, 0.05);
  b += noise;
  const ad::TracedFunction fn = [](ad::Tape&, const V& v) { return ad::lncc(v[0], v[1], 3, 1e-5); };
  EXPECT_LT(ad::grad_check(fn, {a, b}, 1e-4), 1e-4);
}

TEST(GradCheck, CoefficientSolveAsFunctionOfP) {
  const BasisMatrix B = init_basis(9, {1.0});
  const Field v = testing::random_flow(6, 6, 12, 1.0);
  const Field w = testing::random_field(6, 6, 9, 13);
  const ad::TracedFunction fn = [&](ad::Tape& t, const V& in) {
    const ad::Var q = ad::coefficient_solve(in[0], t.constant(v), t.constant(B), 1.5);
    return ad::sum(ad::mul(q, t.constant(w)));
  };
  EXPECT_LT(ad::grad_check(fn, {testing::random_field(6, 6, 9, 14, 0.0, 1.0)}, 1e-4), 1e-4);
}

TEST(GradCheck, CompositeLayerK2M4) {
  const BasisMatrix B({{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.5}, {0.0, 0.0}});
  SPConfig cfg;
  cfg.K = 2;
  cfg.m = 4;
  cfg.basis_scales = {};  // not used: the basis is given explicitly
  const AlphaSchedule schedule({5.0, 0.5});
  const Field w = testing::random_field(8, 8, 2, 15);
  const ad::TracedFunction fn = [&](ad::Tape& t, const V& in) {
    return ad::sum(ad::mul(ad::sp_forward(in[0], t.constant(B), schedule, cfg), t.constant(w)));
  };
  EXPECT_LT(ad::grad_check(fn, {testing::random_field(8, 8, 4, 16, 0.0, 1.0)}, 1e-4), 1e-4);
}

TEST(GradCheck, EveryPrimitivePassesDotProductTest) {
  for (const auto& row : run_gradcheck(GradCheckOptions{})) {
    EXPECT_LT(row.dot_error, 1e-8) << row.name;
    EXPECT_LT(row.fd_error, 1e-4) << row.name;
  }
}

TEST(GradCheck, SuiteCoversTheRegisteredPrimitives) {
  const auto names = gradcheck_names();
  for (const auto& [prim, name] : ad::kPrimitiveNames) {
    if (prim == ad::Primitive::kInput) continue;
    EXPECT_NE(std::find(names.begin(), names.end(), std::string(name)), names.end()) << name;
  }
}

TEST(GradCheck, CorruptedAdjointIsDetected) {
  GradCheckOptions opt;
  opt.adjoint_scale = 1.5;
  for (const auto& row : run_gradcheck(opt, "warp")) {
    EXPECT_GT(row.dot_error, 1e-2);
    EXPECT_GT(row.fd_error, 1e-2);
  }
  EXPECT_THROW(run_gradcheck(GradCheckOptions{}, "nonexistent"), ValidationError);
}

}  // namespace
}  // namespace spreg
