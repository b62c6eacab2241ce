#include <gtest/gtest.h>

#include <cmath>

#include "spreg/bench.hpp"
#include "spreg/registrar.hpp"
#include "support.hpp"

namespace spreg {
namespace {

struct Pipeline {
  PyramidConfig pyramid;
  SPConfig sp;
  LossConfig loss;
  OptimConfig opt;

  RegistrationResult operator()(const Image2D& f, const Image2D& m) const {
    return register_images(f, m, pyramid, sp, loss, opt);
  }
};

Pipeline small_run() {
  Pipeline r;
  r.opt.iterations = 8;
  return r;
}

TEST(Pyramid, SizesAndConstancy) {
  const Image2D img = testing::random_image(64, 64, 1);
  PyramidConfig one;
  one.levels = 1;
  const auto single = build_pyramid(img, one);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0], img);

  const auto three = build_pyramid(img, PyramidConfig{});
  ASSERT_EQ(three.size(), 3u);
  EXPECT_EQ(three[1].width(), 32);
  EXPECT_EQ(three[2].width(), 16);
  EXPECT_EQ(three[2].height(), 16);

  for (const auto& level : build_pyramid(Image2D(64, 80, 0.42), PyramidConfig{})) {
    for (double v : level.data()) EXPECT_NEAR(v, 0.42, 1e-14);
  }
  EXPECT_THROW(build_pyramid(testing::random_image(60, 32, 2), PyramidConfig{}), ValidationError);
}

TEST(Pyramid, OddSizesFloor) {
  const auto levels = build_pyramid(testing::random_image(71, 67, 3), PyramidConfig{});
  EXPECT_EQ(levels[1].width(), 35);
  EXPECT_EQ(levels[1].height(), 33);
  EXPECT_EQ(levels[2].width(), 17);
  EXPECT_EQ(levels[2].height(), 16);
}

TEST(UpsampleFlow, ZeroConstantAndOracle) {
  EXPECT_EQ(upsample_flow(VectorField2D(5, 4)), VectorField2D(10, 8));
  const VectorField2D up = upsample_flow(VectorField2D(6, 6, 1.0, 0.0));
  for (std::size_t px = 0; px < up.pixels(); ++px) {
    EXPECT_DOUBLE_EQ(up[2 * px], 2.0);
    EXPECT_DOUBLE_EQ(up[2 * px + 1], 0.0);
  }

  const VectorField2D u = testing::random_flow(7, 5, 4, 2.0);
  const VectorField2D big = upsample_flow(u, 15, 11);
  for (int y = 0; y < 11; ++y) {
    for (int x = 0; x < 15; ++x) {
      // Pixel centers line up: fine (x + 0.5) maps to coarse (x + 0.5) / 2.
      double cx = std::clamp((x + 0.5) / 2.0 - 0.5, 0.0, 6.0), cy = std::clamp((y + 0.5) / 2.0 - 0.5, 0.0, 4.0);
      const int x0 = std::min(static_cast<int>(cx), 5), y0 = std::min(static_cast<int>(cy), 3);
      const double fx = cx - x0, fy = cy - y0;
      for (int c = 0; c < 2; ++c) {
        const double ref = (1 - fx) * (1 - fy) * u(x0, y0, c) + fx * (1 - fy) * u(x0 + 1, y0, c) +
                           (1 - fx) * fy * u(x0, y0 + 1, c) + fx * fy * u(x0 + 1, y0 + 1, c);
        EXPECT_NEAR(big(x, y, c), 2.0 * ref, 1e-13);
      }
    }
  }
}

TEST(Optimizer, DecayScheduleAndBudget) {
  OptimConfig cfg;
  cfg.step_size = 0.2;
  EXPECT_DOUBLE_EQ(decayed_step(cfg, 0, 50), 0.2);
  EXPECT_NEAR(decayed_step(cfg, 49, 50), 0.02, 1e-15);
  for (int t = 1; t < 50; ++t) EXPECT_LT(decayed_step(cfg, t, 50), decayed_step(cfg, t - 1, 50));

  EXPECT_EQ(cfg.iterations_at(2, 3), 80);
  EXPECT_EQ(cfg.iterations_at(1, 3), 40);
  EXPECT_EQ(cfg.iterations_at(0, 3), 20);
  cfg.iterations = 2;
  EXPECT_EQ(cfg.iterations_at(0, 3), 1);
  cfg.iterations_per_level = {5, 6, 7};
  EXPECT_EQ(cfg.iterations_at(0, 3), 5);
  EXPECT_EQ(cfg.iterations_at(2, 3), 7);
  EXPECT_THROW(cfg.validate(2), ValidationError);
  EXPECT_NO_THROW(cfg.validate(3));
}

TEST(Optimizer, FirstAdamStepIsSignedStep) {
  OptimConfig cfg;
  Adam adam(3, cfg);
  std::vector<double> x{1.0, 1.0, 1.0};
  const std::vector<double> g{0.5, -2.0, 0.0};
  adam.step(x, g, 0.1);
  EXPECT_NEAR(x[0], 1.0 - 0.1 * 0.5 / (0.5 + cfg.epsilon), 1e-15);
  EXPECT_NEAR(x[1], 1.0 + 0.1 * 2.0 / (2.0 + cfg.epsilon), 1e-15);
  EXPECT_EQ(x[2], 1.0);
}

// Textured image: every LNCC window is well above the variance floor, so zero flow is stationary.
TEST(Register, IdenticalImagesStayPut) {
  const Image2D img = testing::random_image(64, 64, 3);
  const auto r = Pipeline{}(img, img);
  double mean_norm = 0.0;
  for (std::size_t px = 0; px < r.u.pixels(); ++px) mean_norm += std::hypot(r.u[2 * px], r.u[2 * px + 1]);
  mean_norm /= static_cast<double>(r.u.pixels());
  EXPECT_LT(mean_norm, 0.1);
  EXPECT_NEAR(r.levels.back().final_loss, -1.0, 1e-3);
}

TEST(Register, TraceShapeAndEnvelope) {
  SynthSpec spec;
  spec.size = 64;
  spec.tx = 2.0;
  const auto pair = synth_pair(spec);
  Pipeline run = small_run();
  run.opt.iterations_per_level = {3, 4, 5};
  const auto r = run(pair.fixed, pair.moving);
  ASSERT_EQ(r.trace.size(), 12u);
  ASSERT_EQ(r.levels.size(), 3u);
  EXPECT_EQ(r.levels.front().level, 2);
  EXPECT_EQ(r.levels.back().width, 64);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < r.trace.size(); ++i) {
    EXPECT_TRUE(std::isfinite(r.trace[i].loss));
    EXPECT_EQ(r.trace[i].iteration, static_cast<int>(i));
    const double next = std::min(best, r.trace[i].loss);
    EXPECT_LE(next, best);
    best = next;
  }
  EXPECT_EQ(r.trace.front().level, 2);
  EXPECT_EQ(r.trace.back().level, 0);
}

TEST(Register, Deterministic) {
  SynthSpec spec;
  spec.size = 64;
  spec.deformation = DeformationKind::kSmooth;
  spec.max_magnitude = 4.0;
  spec.seed = 3;
  const auto pair = synth_pair(spec);
  const Pipeline run = small_run();
  const auto a = run(pair.fixed, pair.moving);
  const auto b = run(pair.fixed, pair.moving);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.phi, b.phi);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
}

TEST(Register, OptimizedBasisMoves) {
  SynthSpec spec;
  spec.size = 64;
  spec.tx = 3.0;
  const auto pair = synth_pair(spec);
  Pipeline run = small_run();
  run.opt.optimize_basis = true;
  const auto r = run(pair.fixed, pair.moving);
  EXPECT_NE(r.basis, init_basis(36, {1, 2, 4, 8}));
  EXPECT_TRUE(r.basis.all_finite());
}

// Vessel grid shifted by (6, -3) px; full defaults against the K = 0 ablation.
TEST(Register, TranslationRecoveredAndLayerHelps) {
  SynthSpec spec;
  spec.size = 128;
  spec.tx = 6.0;
  spec.ty = -3.0;
  const auto pair = synth_pair(spec);
  const Image2D mask = vessel_mask(pair.vessels, spec.size, 10.0);

  const Pipeline full;
  const auto r = full(pair.fixed, pair.moving);
  const double epe = endpoint_error(r.phi, pair.gt_flow, &mask);
  EXPECT_LT(epe, 1.0);
  EXPECT_GT(r.jacobian.min_det, 0.0);
  EXPECT_FALSE(r.sp_disabled);

  Pipeline ablated;
  ablated.sp.K = 0;
  const auto r0 = ablated(pair.fixed, pair.moving);
  EXPECT_TRUE(r0.sp_disabled);
  EXPECT_GT(endpoint_error(r0.phi, pair.gt_flow, &mask), epe);
  EXPECT_GE(diffusive_reg(r0.u), diffusive_reg(r.u));
}

TEST(Register, RejectsBadInput) {
  const Image2D a = testing::random_image(64, 64, 5);
  const Pipeline run = small_run();
  EXPECT_THROW(run(a, testing::random_image(64, 60, 6)), ValidationError);
  Image2D bad = a;
  bad.at(3, 3) = std::nan("");
  EXPECT_THROW(run(a, bad), ValidationError);
  EXPECT_THROW(run(testing::random_image(40, 40, 7), testing::random_image(40, 40, 8)), ValidationError);
  Pipeline exact = small_run();
  exact.sp.v_solver = VSolver::kExact;
  EXPECT_THROW(exact(a, a), ValidationError);
}

}  // namespace
}  // namespace spreg
