// Stationary-velocity integration by scaling and squaring, displacement
// composition, and Jacobian determinant diagnostics.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "spreg/adjoint.hpp"
#include "spreg/errors.hpp"
#include "spreg/grid.hpp"

namespace spreg {

struct IntegrationConfig {
  int steps = 7;

  void validate() const {
    if (steps < 0) throw ValidationError("integration steps must be >= 0");
  }
};

/// out(x) = inner(x) + outer(x + inner(x)): apply inner first, then outer.
inline VectorField2D compose(const VectorField2D& inner, const VectorField2D& outer) {
  if (!inner.same_shape(outer)) throw ValidationError("compose: dimensions differ");
  VectorField2D out(warp_field(outer, inner));
  out += inner;
  return out;
}

/// phi = exp(velocity) as a displacement: velocity / 2^steps composed with
/// itself `steps` times.
inline VectorField2D scaling_squaring(const VectorField2D& velocity, const IntegrationConfig& cfg = {}) {
  cfg.validate();
  VectorField2D u = velocity;
  u *= std::ldexp(1.0, -cfg.steps);
  for (int s = 0; s < cfg.steps; ++s) u = compose(u, u);
  return u;
}

/// det(I + grad phi) per pixel with central differences (one-sided on the border).
inline Image2D jacobian_det(const VectorField2D& phi) {
  const auto g = spatial_gradient(phi);
  Image2D det(phi.width(), phi.height());
  for (std::size_t px = 0; px < phi.pixels(); ++px) {
    const double a = 1.0 + g.along_x[2 * px];
    const double b = g.along_y[2 * px];
    const double c = g.along_x[2 * px + 1];
    const double d = 1.0 + g.along_y[2 * px + 1];
    det[px] = a * d - b * c;
  }
  return det;
}

struct JacobianSummary {
  double min_det = std::numeric_limits<double>::infinity();
  double percent_nonpositive = 0.0;
};

/// Statistics over pixels at least `margin` away from the border.
inline JacobianSummary summarize_jacobian(const Image2D& det, int margin = 1) {
  JacobianSummary s;
  std::size_t count = 0, bad = 0;
  for (int y = margin; y < det.height() - margin; ++y) {
    for (int x = margin; x < det.width() - margin; ++x) {
      const double v = det.at(x, y);
      s.min_det = std::min(s.min_det, v);
      ++count;
      if (v <= 0.0) ++bad;
    }
  }
  if (count > 0) s.percent_nonpositive = 100.0 * static_cast<double>(bad) / static_cast<double>(count);
  return s;
}

namespace ad {

inline Var compose(const Var& inner, const Var& outer) {
  Field out = spreg::compose(VectorField2D(inner.value()), VectorField2D(outer.value()));
  const std::size_t ii = inner.id(), io = outer.id();
  return inner.tape().record(Primitive::kCompose, std::move(out), {ii, io}, [ii, io](Tape& t, const Field& g) {
    const Field& in = t.value(ii);
    const Field& ou = t.value(io);
    const bool want_outer = t.requires_grad(io);
    if (!t.requires_grad(ii) && !want_outer) return;
    Field& ci = t.cotangent(ii);
    for (int y = 0; y < in.height(); ++y) {
      for (int x = 0; x < in.width(); ++x) {
        const auto s = spreg::detail::bilinear_stencil(in.width(), in.height(), x + in(x, y, 0), y + in(x, y, 1));
        for (int c = 0; c < 2; ++c) {
          const double gc = g(x, y, c);
          ci(x, y, c) += gc;
          if (gc == 0.0) continue;
          if (want_outer) spreg::detail::bilinear_scatter(t.cotangent(io), s, c, gc);
          const auto [px, py] = spreg::detail::bilinear_partials(ou, s, c);
          ci(x, y, 0) += gc * px;
          ci(x, y, 1) += gc * py;
        }
      }
    }
  });
}

inline Var scaling_squaring(const Var& velocity, const IntegrationConfig& cfg = {}) {
  cfg.validate();
  Var u = scale(velocity, std::ldexp(1.0, -cfg.steps));
  for (int s = 0; s < cfg.steps; ++s) u = compose(u, u);
  return u;
}

}  // namespace ad
}  // namespace spreg
