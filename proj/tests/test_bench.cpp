#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "spreg/bench.hpp"
#include "support.hpp"

namespace spreg {
namespace {

SynthSpec small_spec(std::uint64_t seed) {
  SynthSpec s;
  s.size = 64;
  s.seed = seed;
  return s;
}

TEST(Synth, DeterministicPerSeed) {
  SynthSpec s = small_spec(4);
  s.deformation = DeformationKind::kSmooth;
  s.max_magnitude = 5.0;
  s.noise_std = 0.02;
  const auto a = synth_pair(s), b = synth_pair(s);
  EXPECT_EQ(a.fixed, b.fixed);
  EXPECT_EQ(a.moving, b.moving);
  EXPECT_EQ(a.gt_flow, b.gt_flow);
  ASSERT_EQ(a.landmarks.size(), b.landmarks.size());
  for (std::size_t i = 0; i < a.landmarks.size(); ++i) EXPECT_EQ(a.landmarks[i].xm, b.landmarks[i].xm);
  s.seed = 5;
  EXPECT_NE(synth_pair(s).fixed, a.fixed);
}

TEST(Synth, ZeroDeformationIsBitIdentical) {
  const auto p = synth_pair(small_spec(1));
  EXPECT_EQ(p.fixed, p.moving);
  EXPECT_EQ(p.gt_flow, VectorField2D(64, 64));
  for (const auto& lm : p.landmarks) {
    EXPECT_EQ(lm.xf, lm.xm);
    EXPECT_EQ(lm.yf, lm.ym);
  }
}

TEST(Synth, TranslationGroundTruth) {
  SynthSpec s = small_spec(2);
  s.tx = 6.0;
  s.ty = -3.0;
  const auto p = synth_pair(s);
  EXPECT_EQ(p.gt_flow, VectorField2D(64, 64, 6.0, -3.0));
  ASSERT_EQ(p.landmarks.size(), 10u);
  for (const auto& lm : p.landmarks) {
    EXPECT_NEAR(lm.xm - lm.xf, 6.0, 1e-12);
    EXPECT_NEAR(lm.ym - lm.yf, -3.0, 1e-12);
    EXPECT_GE(std::min({lm.xf, lm.yf, lm.xm, lm.ym}), 0.0);
    EXPECT_LE(std::max({lm.xf, lm.yf, lm.xm, lm.ym}), 63.0);
  }
}

// Pulling the moving image back through the ground truth recovers the fixed image.
// Residual is bilinear error on vessel edges, so it scales with vessel coverage;
// these run at the default 256 px where 10 vessels cover about a fifth of the image.
TEST(Synth, GroundTruthWarpReproducesFixed) {
  std::vector<SynthSpec> specs;
  for (std::uint64_t seed : {3, 4, 5}) {
    SynthSpec t;
    t.seed = seed;
    t.tx = -4.5 - 2.0 * static_cast<double>(seed);
    t.ty = 2.25 + 0.5 * static_cast<double>(seed);
    specs.push_back(t);
    SynthSpec s;
    s.seed = seed;
    s.deformation = DeformationKind::kSmooth;
    s.max_magnitude = 12.0;
    specs.push_back(s);
  }
  for (const auto& s : specs) {
    const auto p = synth_pair(s);
    const Image2D back = warp(p.moving, p.gt_flow);
    double diff = 0.0;
    int n = 0;
    for (int y = 2; y < s.size - 2; ++y) {
      for (int x = 2; x < s.size - 2; ++x, ++n) diff += std::abs(back.at(x, y) - p.fixed.at(x, y));
    }
    EXPECT_LT(diff / n, 0.02) << to_string(s.deformation) << " seed " << s.seed;
  }
}

TEST(Synth, SmoothFieldPeakAndValidation) {
  SynthSpec s = small_spec(9);
  s.deformation = DeformationKind::kSmooth;
  s.max_magnitude = 7.0;
  const auto p = synth_pair(s);
  double peak = 0.0;
  for (std::size_t px = 0; px < p.gt_flow.pixels(); ++px) {
    peak = std::max(peak, std::hypot(p.gt_flow[2 * px], p.gt_flow[2 * px + 1]));
  }
  EXPECT_NEAR(peak, 7.0, 1e-9);

  SynthSpec bad = small_spec(0);
  bad.vessel_width = 0.5;
  EXPECT_THROW(synth_pair(bad), ValidationError);
  bad = small_spec(0);
  bad.size = 8;
  EXPECT_THROW(synth_pair(bad), ValidationError);
  EXPECT_EQ(deformation_from_string(to_string(DeformationKind::kSmooth)), DeformationKind::kSmooth);
  EXPECT_THROW(deformation_from_string("affine"), ValidationError);
}

TEST(VesselMask, CoversCenterlinesOnly) {
  const auto p = synth_pair(small_spec(10));
  const Image2D mask = vessel_mask(p.vessels, 64, 3.0);
  for (const auto& lm : p.landmarks) EXPECT_EQ(mask.at(static_cast<int>(lm.xf + 0.5), static_cast<int>(lm.yf + 0.5)), 1.0);
  double covered = 0.0;
  for (double v : mask.data()) covered += v;
  EXPECT_GT(covered, 0.0);
  EXPECT_LT(covered, 64.0 * 64.0);
}

TEST(Tre, IdentityEqualsRawMisalignmentBitExact) {
  const LandmarkSet lms{{3, 4, 6, 8}, {10, 10, 10, 10}, {0, 0, 5, 12}};
  const TreResult r = tre(lms, VectorField2D(16, 16));
  ASSERT_EQ(r.errors.size(), 3u);
  EXPECT_EQ(r.errors[0], 5.0);
  EXPECT_EQ(r.errors[1], 0.0);
  EXPECT_EQ(r.errors[2], 13.0);
  EXPECT_EQ(r.mean, 6.0);
}

TEST(Tre, HandPlacedWithConstantField) {
  // phi = (1, 2): (2,2)->(3,4) vs (3,4): 0; (5,1)->(6,3) vs (9,7): 5; (0,9)->(1,11) vs (1,10): 1.
  const LandmarkSet lms{{2, 2, 3, 4}, {5, 1, 9, 7}, {0, 9, 1, 10}};
  const TreResult r = tre(lms, VectorField2D(12, 12, 1.0, 2.0));
  EXPECT_EQ(r.errors[0], 0.0);
  EXPECT_EQ(r.errors[1], 5.0);
  EXPECT_EQ(r.errors[2], 1.0);
  EXPECT_EQ(r.mean, 2.0);
}

TEST(Tre, GroundTruthFieldGivesZero) {
  SynthSpec s = small_spec(11);
  s.deformation = DeformationKind::kSmooth;
  s.max_magnitude = 6.0;
  const auto p = synth_pair(s);
  for (double e : tre(p.landmarks, p.gt_flow).errors) EXPECT_LT(e, 1e-12);
}

TEST(Tre, Errors) {
  EXPECT_THROW(tre({}, VectorField2D(4, 4)), ValidationError);
  EXPECT_THROW(tre({{5, 1, 1, 1}}, VectorField2D(4, 4)), ValidationError);
}

TEST(AucAt, AnalyticCases) {
  EXPECT_EQ(auc_at({0.0, 0.0, 0.0}, 25), 1.0);
  EXPECT_EQ(auc_at({30.0, 26.0}, 25), 0.0);
  EXPECT_EQ(auc_at({0.5, 100.0}, 25), 0.5);
  // TRE 2.5 first succeeds at t = 3, so 13 of 15 thresholds.
  EXPECT_NEAR(auc_at({2.5}, 15), 13.0 / 15.0, 1e-15);
  EXPECT_THROW(auc_at({}, 5), ValidationError);
  EXPECT_THROW(auc_at({1.0}, 0), ValidationError);
}

TEST(AucAt, MonotoneAndPermutationInvariant) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> d(0.0, 60.0);
  std::vector<double> tres(40);
  for (double& t : tres) t = d(rng);
  double prev = 0.0;
  for (int T = 1; T <= 60; ++T) {
    const double a = auc_at(tres, T);
    EXPECT_GE(a, prev);
    EXPECT_LE(a, 1.0);
    prev = a;
  }
  std::vector<double> shuffled = tres;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  for (int T : {15, 25, 50}) EXPECT_EQ(auc_at(shuffled, T), auc_at(tres, T));
}

TEST(EndpointError, ExamplesAndLoopOracle) {
  const VectorField2D gt = testing::random_flow(10, 8, 13, 3.0);
  EXPECT_EQ(endpoint_error(gt, gt), 0.0);
  VectorField2D off = gt;
  for (std::size_t px = 0; px < off.pixels(); ++px) off[2 * px] += 1.0;
  EXPECT_NEAR(endpoint_error(off, gt), 1.0, 1e-14);

  const VectorField2D u = testing::random_flow(10, 8, 14, 3.0);
  Image2D mask(10, 8);
  double s = 0.0;
  int n = 0;
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 10; ++x) {
      if ((x + 2 * y) % 3 != 0) continue;
      mask.at(x, y) = 1.0;
      s += std::hypot(u.dx(x, y) - gt.dx(x, y), u.dy(x, y) - gt.dy(x, y));
      ++n;
    }
  }
  EXPECT_NEAR(endpoint_error(u, gt, &mask), s / n, 1e-13);
  EXPECT_THROW(endpoint_error(u, VectorField2D(9, 8)), ValidationError);
  const Image2D empty(10, 8);
  EXPECT_THROW(endpoint_error(u, gt, &empty), ValidationError);
}

TEST(Landmarks, CsvRoundTripIsExact) {
  const auto p = synth_pair(small_spec(15));
  const auto path = std::filesystem::temp_directory_path() / "spreg_landmarks_test.csv";
  save_landmarks(path, p.landmarks);
  const LandmarkSet back = load_landmarks(path);
  ASSERT_EQ(back.size(), p.landmarks.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].xf, p.landmarks[i].xf);
    EXPECT_EQ(back[i].yf, p.landmarks[i].yf);
    EXPECT_EQ(back[i].xm, p.landmarks[i].xm);
    EXPECT_EQ(back[i].ym, p.landmarks[i].ym);
  }
  std::ofstream(path) << "a,b\n1,2\n";
  EXPECT_THROW(load_landmarks(path), IoError);
  std::ofstream(path) << "xf,yf,xm,ym\n1,2,x,4\n";
  EXPECT_THROW(load_landmarks(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_landmarks(path), IoError);
}

TEST(BenchConfig, AlternatingPresets) {
  BenchConfig cfg;
  const auto specs = cfg.specs();
  ASSERT_EQ(specs.size(), 8u);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    EXPECT_EQ(specs[i].seed, i);
    EXPECT_EQ(specs[i].size, 256);
    if (i % 2 == 0) {
      EXPECT_EQ(specs[i].deformation, DeformationKind::kTranslation);
      const double mag = std::hypot(specs[i].tx, specs[i].ty);
      EXPECT_GE(mag, 6.0 - 1e-12);
      EXPECT_LE(mag, 12.0 + 1e-12);
    } else {
      EXPECT_EQ(specs[i].deformation, DeformationKind::kSmooth);
      EXPECT_EQ(specs[i].max_magnitude, 12.0);
    }
  }
  cfg.pairs = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

}  // namespace
}  // namespace spreg
