// Coarse-to-fine instance optimization: per pyramid level, a coefficient
// field p (and optionally the basis) is optimized with Adam through the
// smoothing layer, scaling-and-squaring, and the LNCC + diffusion loss.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "spreg/adjoint.hpp"
#include "spreg/diffeo.hpp"
#include "spreg/energy.hpp"
#include "spreg/errors.hpp"
#include "spreg/grid.hpp"
#include "spreg/smoothproper.hpp"

namespace spreg {

struct PyramidConfig {
  int levels = 3;
  double pre_blur_sigma = 1.0;
  static constexpr int kDownsample = 2;
  static constexpr int kMinCoarsestSide = 16;

  void validate() const {
    if (levels < 1) throw ValidationError("pyramid.levels must be >= 1");
    if (!(pre_blur_sigma >= 0.0)) throw ValidationError("pyramid.pre_blur_sigma must be >= 0");
  }
};

struct OptimConfig {
  /// Budget at the coarsest level; each finer level gets half of the next
  /// coarser one (at least 1) unless iterations_per_level is given.
  int iterations = 80;
  /// Optional per-level override, finest level first; must have one entry per
  /// pyramid level when non-empty.
  std::vector<int> iterations_per_level;
  double step_size = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double final_step_fraction = 0.1;
  double decay_power = 0.9;
  std::uint64_t seed = 0;
  bool optimize_basis = false;
  int integration_steps = 7;

  int iterations_at(int level, int levels) const {
    if (!iterations_per_level.empty()) return iterations_per_level.at(static_cast<std::size_t>(level));
    return std::max(1, iterations >> (levels - 1 - level));
  }

  void validate(int levels) const {
    if (iterations < 1) throw ValidationError("optim.iterations must be >= 1");
    if (!iterations_per_level.empty()) {
      if (static_cast<int>(iterations_per_level.size()) != levels) {
        throw ValidationError("optim.iterations_per_level needs one entry per pyramid level");
      }
      for (int it : iterations_per_level) {
        if (it < 1) throw ValidationError("optim.iterations_per_level entries must be >= 1");
      }
    }
    if (!(step_size > 0.0)) throw ValidationError("optim.step_size must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ValidationError("optim.beta1/beta2 must be in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ValidationError("optim.epsilon must be > 0");
    if (!(final_step_fraction > 0.0 && final_step_fraction <= 1.0)) {
      throw ValidationError("optim.final_step_fraction must be in (0, 1]");
    }
    if (integration_steps < 0) throw ValidationError("optim.integration_steps must be >= 0");
  }
};

/// Adam with bias correction; one instance per optimized array.
class Adam {
 public:
  Adam(std::size_t n, const OptimConfig& cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> x, std::span<const double> grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < x.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      x[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.epsilon);
    }
  }

 private:
  OptimConfig cfg_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

/// Polynomially decayed step: step_size at t = 0, final_step_fraction * step_size at t = total - 1.
inline double decayed_step(const OptimConfig& cfg, int t, int total) {
  const double progress = total > 1 ? static_cast<double>(t) / (total - 1) : 1.0;
  const double f = cfg.final_step_fraction;
  return cfg.step_size * (f + (1.0 - f) * std::pow(1.0 - progress, cfg.decay_power));
}

/// 2x downsample by bilinear sampling at (2i + 0.5, 2j + 0.5).
inline Image2D downsample2(const Image2D& img) {
  Image2D out(img.width() / 2, img.height() / 2);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) out.at(x, y) = bilinear_sample(img, 2.0 * x + 0.5, 2.0 * y + 0.5);
  }
  return out;
}

/// Level 0 is the input; each further level is blurred then 2x downsampled.
/// Ordering is fine-first, coarsest last.
inline std::vector<Image2D> build_pyramid(const Image2D& img, const PyramidConfig& cfg) {
  cfg.validate();
  int w = img.width(), h = img.height();
  for (int l = 1; l < cfg.levels; ++l) {
    w /= 2;
    h /= 2;
  }
  if (w < PyramidConfig::kMinCoarsestSide || h < PyramidConfig::kMinCoarsestSide) {
    throw ValidationError("build_pyramid: image too small for " + std::to_string(cfg.levels) +
                          " levels (coarsest side must be >= 16 px)");
  }
  std::vector<Image2D> levels{img};
  for (int l = 1; l < cfg.levels; ++l) levels.push_back(downsample2(gaussian_blur(levels.back(), cfg.pre_blur_sigma)));
  return levels;
}

/// Bilinear 2x upsampling of a flow onto a (width x height) grid, with
/// magnitudes doubled to stay in pixel units of the finer grid.
inline VectorField2D upsample_flow(const VectorField2D& u, int width, int height) {
  VectorField2D out(width, height);
  const double f = PyramidConfig::kDownsample;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double cx = (x + 0.5) / f - 0.5;
      const double cy = (y + 0.5) / f - 0.5;
      out.dx(x, y) = f * bilinear_sample(u, cx, cy, 0);
      out.dy(x, y) = f * bilinear_sample(u, cx, cy, 1);
    }
  }
  return out;
}

inline VectorField2D upsample_flow(const VectorField2D& u) {
  return upsample_flow(u, 2 * u.width(), 2 * u.height());
}

struct TraceEntry {
  int iteration = 0;
  int level = 0;
  double loss = 0.0;
  double lncc = 0.0;
  double reg = 0.0;
};

struct LevelSummary {
  int level = 0;
  int width = 0;
  int height = 0;
  int lncc_window = 0;
  double final_loss = 0.0;
  double final_lncc = 0.0;
  double final_reg = 0.0;
  double sp_energy = 0.0;
};

struct RegistrationResult {
  VectorField2D u;    // full-resolution pre-integration flow (sum of upsampled level flows)
  VectorField2D phi;  // full-resolution composed deformation
  std::vector<TraceEntry> trace;
  std::vector<LevelSummary> levels;
  JacobianSummary jacobian;
  BasisMatrix basis;  // finest-level basis after optimization
  bool sp_disabled = false;
  double runtime_seconds = 0.0;
};

inline RegistrationResult register_images(const Image2D& fixed, const Image2D& moving, const PyramidConfig& pyramid,
                                          const SPConfig& sp, const LossConfig& loss, const OptimConfig& opt) {
  const auto start = std::chrono::steady_clock::now();
  if (!fixed.same_shape(moving)) throw ValidationError("register: fixed and moving dimensions differ");
  if (!fixed.all_finite() || !moving.all_finite()) throw ValidationError("register: images contain non-finite values");
  pyramid.validate();
  sp.validate();
  loss.validate();
  opt.validate(pyramid.levels);
  if (sp.v_solver != VSolver::kBlur) throw ValidationError("register: only the blur v-solver is differentiable");

  const auto fixed_pyr = build_pyramid(fixed, pyramid);
  const auto moving_pyr = build_pyramid(moving, pyramid);
  const AlphaSchedule schedule = sp.schedule();
  const IntegrationConfig integration{opt.integration_steps};

  RegistrationResult result;
  result.sp_disabled = sp.K == 0;
  VectorField2D acc;       // composed deformation at the current level's resolution
  VectorField2D velocity;  // accumulated pre-integration flow
  BasisMatrix basis = init_basis(sp.m, sp.basis_scales);
  int global_iter = 0;

  for (int level = pyramid.levels - 1; level >= 0; --level) {
    const Image2D& fl = fixed_pyr[static_cast<std::size_t>(level)];
    const Image2D& ml = moving_pyr[static_cast<std::size_t>(level)];
    const int w = fl.width(), h = fl.height();
    if (acc.empty()) {
      acc = VectorField2D(w, h);
      velocity = VectorField2D(w, h);
    } else {
      acc = upsample_flow(acc, w, h);
      velocity = upsample_flow(velocity, w, h);
    }
    LossConfig level_loss = loss;
    level_loss.lncc_window = lncc_window_for_level(loss.lncc_window, level);

    CoefficientField p(w, h, sp.m, 0.0);
    if (!opt.optimize_basis) basis = init_basis(sp.m, sp.basis_scales);
    Adam adam_p(p.size(), opt);
    Adam adam_b(basis.size(), opt);
    const int iters = opt.iterations_at(level, pyramid.levels);

    auto evaluate = [&](ad::Tape& tape, ad::Var& p_var, ad::Var& b_var, ad::Var& u_var) {
      p_var = tape.input(p);
      b_var = opt.optimize_basis ? tape.input(basis) : tape.constant(basis);
      const ad::Var f_var = tape.constant(fl);
      const ad::Var m_var = tape.constant(ml);
      const ad::Var acc_var = tape.constant(acc);
      u_var = ad::sp_forward(p_var, b_var, schedule, sp);
      const ad::Var phi = ad::scaling_squaring(u_var, integration);
      const ad::Var total = ad::compose(phi, acc_var);
      const ad::Var sim = ad::lncc(f_var, ad::warp(m_var, total), level_loss.lncc_window, level_loss.variance_floor);
      const ad::Var reg = ad::diffusive_reg(u_var);
      const ad::Var l = ad::add(ad::scale(sim, -1.0), ad::scale(reg, level_loss.lambda));
      return std::make_tuple(l, sim.scalar(), reg.scalar());
    };

    for (int it = 0; it < iters; ++it, ++global_iter) {
      ad::Tape tape;
      ad::Var p_var, b_var, u_var;
      const auto [l, sim, reg] = evaluate(tape, p_var, b_var, u_var);
      const double value = l.scalar();
      if (!std::isfinite(value)) {
        throw NumericError("register: non-finite loss at level " + std::to_string(level) + ", iteration " +
                           std::to_string(it) + " (lncc=" + std::to_string(sim) + ", reg=" + std::to_string(reg) + ")");
      }
      result.trace.push_back({global_iter, level, value, sim, reg});
      tape.backward(l);
      const double lr = decayed_step(opt, it, iters);
      const Field gp = tape.gradient(p_var);
      adam_p.step(p.data(), gp.data(), lr);
      p.clamp_nonnegative();
      if (opt.optimize_basis) {
        const Field gb = tape.gradient(b_var);
        adam_b.step(basis.data(), gb.data(), lr);
      }
    }

    const SPResult layer = sp_forward(p, basis, schedule, sp, true);
    const VectorField2D phi = scaling_squaring(layer.u, integration);
    const VectorField2D total = compose(phi, acc);
    LevelSummary summary;
    summary.level = level;
    summary.width = w;
    summary.height = h;
    summary.lncc_window = level_loss.lncc_window;
    summary.final_lncc = lncc(fl, warp(ml, total), level_loss.lncc_window, level_loss.variance_floor);
    summary.final_reg = diffusive_reg(layer.u);
    summary.final_loss = -summary.final_lncc + level_loss.lambda * summary.final_reg;
    summary.sp_energy = layer.trace.empty() ? 0.0 : layer.trace.back();
    result.levels.push_back(summary);
    acc = total;
    velocity += layer.u;
  }

  result.u = std::move(velocity);
  result.phi = std::move(acc);
  result.basis = basis;
  result.jacobian = summarize_jacobian(jacobian_det(result.phi));
  result.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace spreg
