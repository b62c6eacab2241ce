// Outer-loop registration loss: negative local normalized cross-correlation
// of the warped moving image plus a diffusive penalty on the flow.
#pragma once

#include <cmath>
#include <vector>

#include "spreg/adjoint.hpp"
#include "spreg/errors.hpp"
#include "spreg/grid.hpp"

namespace spreg {

struct LossConfig {
  int lncc_window = 9;
  double lambda = 1.0;
  double variance_floor = 1e-5;

  void validate() const {
    if (lncc_window < 3 || lncc_window % 2 == 0) {
      throw ValidationError("loss.lncc_window must be odd and >= 3");
    }
    if (!(lambda >= 0.0)) throw ValidationError("loss.lambda must be >= 0");
    if (!(variance_floor > 0.0)) throw ValidationError("loss.variance_floor must be > 0");
  }
};

/// Window for pyramid level `level` (0 = full resolution): halved per level,
/// rounded to the nearest odd size, never below 3.
inline int lncc_window_for_level(int full_res_window, int level) {
  int w = full_res_window;
  for (int l = 0; l < level; ++l) {
    w = static_cast<int>(std::lround(w / 2.0));
    if (w % 2 == 0) ++w;
    w = std::max(w, 3);
  }
  return w;
}

namespace detail {

// Windowed moments shared by the forward value and the adjoint.
struct LnccMoments {
  Field mean_a, mean_b, var_a, var_b, cov, cc;
};

inline LnccMoments lncc_moments(const Field& a, const Field& b, int window, double variance_floor) {
  const int w = a.width();
  const int h = a.height();
  Field aa(w, h, 1), bb(w, h, 1), ab(w, h, 1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const double inv_n = 1.0 / (static_cast<double>(window) * window);
  LnccMoments m{box_sum(a, window), box_sum(b, window), box_sum(aa, window),
                box_sum(bb, window), box_sum(ab, window), Field(w, h, 1)};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ma = m.mean_a[i] * inv_n;
    const double mb = m.mean_b[i] * inv_n;
    m.mean_a[i] = ma;
    m.mean_b[i] = mb;
    m.var_a[i] = m.var_a[i] * inv_n - ma * ma;
    m.var_b[i] = m.var_b[i] * inv_n - mb * mb;
    m.cov[i] = m.cov[i] * inv_n - ma * mb;
    const double va = std::max(m.var_a[i], variance_floor);
    const double vb = std::max(m.var_b[i], variance_floor);
    m.cc[i] = m.cov[i] / std::sqrt(va * vb);
  }
  return m;
}

inline void require_lncc_args(const Field& a, const Field& b, int window) {
  if (!a.same_shape(b) || a.channels() != 1) throw ValidationError("lncc: image dimensions differ");
  if (window < 1 || window % 2 == 0) throw ValidationError("lncc: window must be odd");
}

}  // namespace detail

/// Mean over pixels of the windowed Pearson correlation between a and b.
/// Window variances are floored at `variance_floor`, so the value is in [-1, 1].
inline double lncc(const Image2D& a, const Image2D& b, int window, double variance_floor) {
  detail::require_lncc_args(a, b, window);
  const auto m = detail::lncc_moments(a, b, window, variance_floor);
  double s = 0.0;
  for (double v : m.cc.data()) s += v;
  return s / static_cast<double>(a.size());
}

/// Mean over pixels of |grad dx|^2 + |grad dy|^2.
inline double diffusive_reg(const VectorField2D& u) {
  const auto g = spatial_gradient(u);
  return (squared_norm(g.along_x) + squared_norm(g.along_y)) / static_cast<double>(u.pixels());
}

inline double total_loss(const Image2D& fixed, const Image2D& moving, const VectorField2D& phi,
                         const VectorField2D& u, const LossConfig& cfg) {
  if (!fixed.same_grid(moving) || !fixed.same_grid(phi) || !fixed.same_grid(u)) {
    throw ValidationError("total_loss: dimensions differ");
  }
  return -lncc(fixed, warp(moving, phi), cfg.lncc_window, cfg.variance_floor) + cfg.lambda * diffusive_reg(u);
}

namespace ad {

inline Var lncc(const Var& a, const Var& b, int window, double variance_floor) {
  spreg::detail::require_lncc_args(a.value(), b.value(), window);
  auto m = spreg::detail::lncc_moments(a.value(), b.value(), window, variance_floor);
  double s = 0.0;
  for (double v : m.cc.data()) s += v;
  const double inv_pixels = 1.0 / static_cast<double>(m.cc.size());
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record(
      Primitive::kLncc, Field(1, 1, 1, s * inv_pixels), {ia, ib},
      [ia, ib, window, variance_floor, inv_pixels, m = std::move(m)](Tape& t, const Field& g) {
        const Field& av = t.value(ia);
        const Field& bv = t.value(ib);
        const int w = av.width();
        const int h = av.height();
        const double inv_n = 1.0 / (static_cast<double>(window) * window);
        Field g_sa(w, h, 1), g_sb(w, h, 1), g_saa(w, h, 1), g_sbb(w, h, 1), g_sab(w, h, 1);
        for (std::size_t i = 0; i < av.size(); ++i) {
          const double gi = g[0] * inv_pixels;
          const double va = std::max(m.var_a[i], variance_floor);
          const double vb = std::max(m.var_b[i], variance_floor);
          const double d_cov = 1.0 / std::sqrt(va * vb);
          const double d_va = m.var_a[i] > variance_floor ? -0.5 * m.cc[i] / va : 0.0;
          const double d_vb = m.var_b[i] > variance_floor ? -0.5 * m.cc[i] / vb : 0.0;
          g_sab[i] = gi * d_cov * inv_n;
          g_saa[i] = gi * d_va * inv_n;
          g_sbb[i] = gi * d_vb * inv_n;
          g_sa[i] = gi * (-d_cov * m.mean_b[i] - 2.0 * d_va * m.mean_a[i]) * inv_n;
          g_sb[i] = gi * (-d_cov * m.mean_a[i] - 2.0 * d_vb * m.mean_b[i]) * inv_n;
        }
        const Field ga = box_sum(g_sa, window);
        const Field gb = box_sum(g_sb, window);
        const Field gaa = box_sum(g_saa, window);
        const Field gbb = box_sum(g_sbb, window);
        const Field gab = box_sum(g_sab, window);
        if (t.requires_grad(ia)) {
          Field& ca = t.cotangent(ia);
          for (std::size_t i = 0; i < av.size(); ++i) ca[i] += ga[i] + 2.0 * av[i] * gaa[i] + bv[i] * gab[i];
        }
        if (t.requires_grad(ib)) {
          Field& cb = t.cotangent(ib);
          for (std::size_t i = 0; i < av.size(); ++i) cb[i] += gb[i] + 2.0 * bv[i] * gbb[i] + av[i] * gab[i];
        }
      });
}

inline Var diffusive_reg(const Var& u) {
  const double inv_pixels = 1.0 / static_cast<double>(u.value().pixels());
  return scale(sum(square(spatial_gradient(u))), inv_pixels);
}

/// -lncc(fixed, warp(moving, phi)) + lambda * diffusive_reg(u).
inline Var total_loss(const Var& fixed, const Var& moving, const Var& phi, const Var& u, const LossConfig& cfg) {
  const Var similarity = lncc(fixed, warp(moving, phi), cfg.lncc_window, cfg.variance_floor);
  return add(scale(similarity, -1.0), scale(diffusive_reg(u), cfg.lambda));
}

}  // namespace ad
}  // namespace spreg
