// Unrolled smoothing layer over basis-coefficient fields.
//
// The layer minimizes, over a coefficient field q and an auxiliary flow v,
//
//   E(q, v) = sum_x |p - q|^2
//           + sum_x (1/2a) sum_i q_i |v - b_i|^2
//           + sum_x (1/2a) |q^T B - v|^2
//           + beta * sum_edges |v(x') - v(x)|^2
//
// by alternating an exact per-pixel q-solve with a smoothing v-update while
// the coupling weight a (alpha) is annealed. The result is u = q_K^T B.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "spreg/adjoint.hpp"
#include "spreg/errors.hpp"
#include "spreg/grid.hpp"

namespace spreg {

/// m displacement atoms b_i (pixel units), stored as an m x 1 two-channel field
/// so that it can live on a tape like any other parameter.
class BasisMatrix : public Field {
 public:
  BasisMatrix() = default;
  explicit BasisMatrix(int m) : Field(m, 1, 2) {
    if (m < 1) throw ValidationError("BasisMatrix: m must be >= 1");
  }
  explicit BasisMatrix(const std::vector<std::array<double, 2>>& vectors)
      : BasisMatrix(static_cast<int>(vectors.size())) {
    for (int i = 0; i < m(); ++i) set(i, vectors[static_cast<std::size_t>(i)][0], vectors[static_cast<std::size_t>(i)][1]);
  }
  explicit BasisMatrix(Field f) : Field(std::move(f)) {
    if (channels() != 2 || height() != 1 || width() < 1) {
      throw ValidationError("BasisMatrix: expected an m x 1 two-channel field");
    }
  }

  int m() const { return width(); }
  double bx(int i) const { return (*this)(i, 0, 0); }
  double by(int i) const { return (*this)(i, 0, 1); }
  void set(int i, double x, double y) {
    (*this)(i, 0, 0) = x;
    (*this)(i, 0, 1) = y;
  }
  double max_norm() const {
    double r = 0.0;
    for (int i = 0; i < m(); ++i) r = std::max(r, std::hypot(bx(i), by(i)));
    return r;
  }
};

/// The nine offsets {-1,0,1}^2 (row-major, x fastest) scaled by each entry of
/// `scales` (outer loop). m must equal 9 * scales.size().
inline BasisMatrix init_basis(int m, const std::vector<double>& scales) {
  if (scales.empty() || m != 9 * static_cast<int>(scales.size())) {
    throw ValidationError("init_basis: m must be 9 x number of scales (got m=" + std::to_string(m) + ")");
  }
  BasisMatrix b(m);
  int i = 0;
  for (double s : scales) {
    for (int oy = -1; oy <= 1; ++oy) {
      for (int ox = -1; ox <= 1; ++ox) b.set(i++, ox * s, oy * s);
    }
  }
  return b;
}

class AlphaSchedule {
 public:
  explicit AlphaSchedule(std::vector<double> values) : values_(std::move(values)) {
    for (std::size_t k = 0; k < values_.size(); ++k) {
      if (!(values_[k] > 0.0) || !std::isfinite(values_[k])) {
        throw ValidationError("alpha schedule values must be positive and finite");
      }
      if (k > 0 && !(values_[k] < values_[k - 1])) {
        throw ValidationError("alpha schedule must be strictly decreasing");
      }
    }
  }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t k) const { return values_[k]; }
  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> values_;
};

/// {150, 50, 15, 5, 1.5, 0.5} for K = 6; otherwise K values geometrically
/// spaced from 150 down to 0.5 (K = 1 gives {0.5}).
inline AlphaSchedule default_alpha_schedule(int K) {
  if (K < 0) throw ValidationError("K must be >= 0");
  if (K == 6) return AlphaSchedule({150.0, 50.0, 15.0, 5.0, 1.5, 0.5});
  if (K == 0) return AlphaSchedule({});
  if (K == 1) return AlphaSchedule({0.5});
  std::vector<double> v(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) v[static_cast<std::size_t>(k)] = 150.0 * std::pow(0.5 / 150.0, k / (K - 1.0));
  return AlphaSchedule(std::move(v));
}

enum class VSolver { kBlur, kExact };

inline std::string to_string(VSolver s) { return s == VSolver::kBlur ? "blur" : "exact"; }
inline VSolver vsolver_from_string(const std::string& s) {
  if (s == "blur") return VSolver::kBlur;
  if (s == "exact") return VSolver::kExact;
  throw ValidationError("smoothproper.v_solver must be \"blur\" or \"exact\"");
}

/// Diffusion weight for the exact v-solver that minimizes the relative L2
/// mismatch against a sigma_v = 1.5 blur on the reference impulse instance
/// (alpha = 1, 65 x 65, see README). The residual mismatch there is about 0.39.
inline constexpr double kCalibratedBeta = 3.47;

struct SPConfig {
  int m = 36;
  int K = 6;
  double sigma_v = 1.5;
  double beta = kCalibratedBeta;
  bool nonneg_q = false;
  VSolver v_solver = VSolver::kBlur;
  std::vector<double> basis_scales{1.0, 2.0, 4.0, 8.0};
  std::vector<double> alpha_schedule;  // empty: default_alpha_schedule(K)
  double exact_tol = 1e-10;
  int exact_max_iters = 10000;

  AlphaSchedule schedule() const {
    if (alpha_schedule.empty()) return default_alpha_schedule(K);
    AlphaSchedule s(alpha_schedule);
    if (static_cast<int>(s.size()) != K) throw ValidationError("smoothproper.alpha_schedule length must equal K");
    return s;
  }

  void validate() const {
    if (m < 1) throw ValidationError("smoothproper.m must be >= 1");
    if (K < 0) throw ValidationError("smoothproper.K must be >= 0");
    if (!(sigma_v >= 0.0)) throw ValidationError("smoothproper.sigma_v must be >= 0");
    if (!(beta >= 0.0)) throw ValidationError("smoothproper.beta must be >= 0");
    if (m != 9 * static_cast<int>(basis_scales.size())) {
      throw ValidationError("smoothproper.m must equal 9 x len(basis_scales)");
    }
    if (!(exact_tol > 0.0) || exact_max_iters < 1) throw ValidationError("smoothproper exact solver settings invalid");
    (void)schedule();
  }
};

/// d_i = |v - b_i|^2.
inline std::vector<double> distance_vector(std::array<double, 2> v, const BasisMatrix& B) {
  std::vector<double> d(static_cast<std::size_t>(B.m()));
  for (int i = 0; i < B.m(); ++i) {
    const double ex = v[0] - B.bx(i);
    const double ey = v[1] - B.by(i);
    d[static_cast<std::size_t>(i)] = ex * ex + ey * ey;
  }
  return d;
}

/// Solver for the per-pixel q system (2I + (1/a) B B^T) q = r. The matrix is
/// identical at every pixel and has rank-2 structure, so it is inverted once
/// per alpha through the 2x2 capacitance matrix S = 2a I + B^T B:
///   A^-1 r = (r - B S^-1 B^T r) / 2.
class CoefficientSystem {
 public:
  CoefficientSystem(const Field& B, double alpha) : alpha_(alpha) {
    if (!(alpha > 0.0)) throw ValidationError("coefficient solve: alpha must be > 0");
    const int m = B.width();
    bx_.resize(static_cast<std::size_t>(m));
    by_.resize(static_cast<std::size_t>(m));
    double sxx = 2.0 * alpha, sxy = 0.0, syy = 2.0 * alpha;
    for (int i = 0; i < m; ++i) {
      bx_[i] = B(i, 0, 0);
      by_[i] = B(i, 0, 1);
      sxx += bx_[i] * bx_[i];
      sxy += bx_[i] * by_[i];
      syy += by_[i] * by_[i];
    }
    const double det = sxx * syy - sxy * sxy;
    if (!(det > 0.0)) throw NumericError("coefficient solve: capacitance matrix is not positive definite");
    s_inv_ = {syy / det, -sxy / det, sxx / det};
  }

  double alpha() const { return alpha_; }
  int m() const { return static_cast<int>(bx_.size()); }
  double bx(int i) const { return bx_[static_cast<std::size_t>(i)]; }
  double by(int i) const { return by_[static_cast<std::size_t>(i)]; }

  /// out = A^-1 rhs. rhs and out may alias.
  void solve(const double* rhs, double* out) const {
    const std::size_t m = bx_.size();
    double tx = 0.0, ty = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      tx += bx_[i] * rhs[i];
      ty += by_[i] * rhs[i];
    }
    const double wx = s_inv_[0] * tx + s_inv_[1] * ty;
    const double wy = s_inv_[1] * tx + s_inv_[2] * ty;
    for (std::size_t i = 0; i < m; ++i) out[i] = 0.5 * (rhs[i] - bx_[i] * wx - by_[i] * wy);
  }

  /// Right-hand side 2p + (1/a) B v - (1/2a) d for one pixel.
  void rhs(const double* p, double vx, double vy, double* out) const {
    const double inv_a = 1.0 / alpha_;
    const double vv = vx * vx + vy * vy;
    for (std::size_t i = 0; i < bx_.size(); ++i) {
      const double bv = bx_[i] * vx + by_[i] * vy;
      const double d = vv - 2.0 * bv + bx_[i] * bx_[i] + by_[i] * by_[i];
      out[i] = 2.0 * p[i] + inv_a * bv - 0.5 * inv_a * d;
    }
  }

 private:
  double alpha_;
  std::vector<double> bx_, by_;
  std::array<double, 3> s_inv_{};  // xx, xy, yy
};

namespace detail {

inline Field q_update_kernel(const Field& p, const Field& v, const Field& B, double alpha) {
  const CoefficientSystem sys(B, alpha);
  const int m = p.channels();
  Field q(p.width(), p.height(), m);
  const double* pd = p.data().data();
  double* qd = q.data().data();
  for (std::size_t px = 0; px < p.pixels(); ++px) {
    double* out = qd + px * m;
    sys.rhs(pd + px * m, v[2 * px], v[2 * px + 1], out);
    sys.solve(out, out);
  }
  return q;
}

inline Field basis_product_kernel(const Field& q, const Field& B) {
  const int m = q.channels();
  std::vector<double> bx(static_cast<std::size_t>(m)), by(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    bx[i] = B(i, 0, 0);
    by[i] = B(i, 0, 1);
  }
  Field u(q.width(), q.height(), 2);
  const double* qd = q.data().data();
  for (std::size_t px = 0; px < q.pixels(); ++px) {
    const double* c = qd + px * m;
    double ux = 0.0, uy = 0.0;
    for (int i = 0; i < m; ++i) {
      ux += c[i] * bx[i];
      uy += c[i] * by[i];
    }
    u[2 * px] = ux;
    u[2 * px + 1] = uy;
  }
  return u;
}

}  // namespace detail

/// Exact minimizer over q of E(q, v) at fixed v, solved independently per pixel.
inline CoefficientField q_update(const CoefficientField& p, const VectorField2D& v, const BasisMatrix& B,
                                 double alpha, bool nonneg_q = false) {
  if (!p.same_grid(v)) throw ValidationError("q_update: p and v dimensions differ");
  if (p.m() != B.m()) throw ValidationError("q_update: coefficient count differs from basis size");
  CoefficientField q(detail::q_update_kernel(p, v, B, alpha));
  if (nonneg_q) q.clamp_nonnegative();
  return q;
}

/// Per-pixel displacement sum_i q_i(x) b_i.
inline VectorField2D basis_product(const CoefficientField& q, const BasisMatrix& B) {
  if (q.m() != B.m()) throw ValidationError("basis_product: coefficient count differs from basis size");
  return VectorField2D(detail::basis_product_kernel(q, B));
}

inline VectorField2D v_update_blur(const CoefficientField& q, const BasisMatrix& B, double sigma_v) {
  return gaussian_blur(basis_product(q, B), sigma_v);
}

namespace detail {

// (L v)(x) = sum over in-grid 4-neighbors n of (v(x) - v(n)), per channel.
// Gradient of sum_edges |v(n) - v(x)|^2 is 2 L v.
inline void graph_laplacian_apply(const Field& v, Field& out) {
  const int w = v.width(), h = v.height(), ch = v.channels();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        const double center = v(x, y, c);
        double acc = 0.0;
        if (x > 0) acc += center - v(x - 1, y, c);
        if (x + 1 < w) acc += center - v(x + 1, y, c);
        if (y > 0) acc += center - v(x, y - 1, c);
        if (y + 1 < h) acc += center - v(x, y + 1, c);
        out(x, y, c) = acc;
      }
    }
  }
}

inline double edge_energy(const Field& v) {
  const int w = v.width(), h = v.height(), ch = v.channels();
  double e = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        if (x + 1 < w) {
          const double d = v(x + 1, y, c) - v(x, y, c);
          e += d * d;
        }
        if (y + 1 < h) {
          const double d = v(x, y + 1, c) - v(x, y, c);
          e += d * d;
        }
      }
    }
  }
  return e;
}

}  // namespace detail

/// Exact minimizer over v of (1/2a) C(q, v, B) + beta * sum_edges |dv|^2.
/// Stationarity per pixel: ((s + 1)/a) v + 2 beta L v = (2/a) q^T B with
/// s = sum_i q_i. The system is symmetric positive definite whenever s > -1
/// everywhere and is solved by conjugate gradients until the max-norm residual
/// drops below tol.
inline VectorField2D v_update_exact(const CoefficientField& q, const BasisMatrix& B, double alpha, double beta,
                                    double tol, int max_iters) {
  if (!(alpha > 0.0)) throw ValidationError("v_update_exact: alpha must be > 0");
  if (!(beta >= 0.0)) throw ValidationError("v_update_exact: beta must be >= 0");
  if (!(tol > 0.0)) throw ValidationError("v_update_exact: tol must be > 0");
  const VectorField2D target = basis_product(q, B);
  const int w = q.width(), h = q.height();
  const int m = q.m();
  Field diag(w, h, 1);
  for (std::size_t px = 0; px < q.pixels(); ++px) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += q[px * m + i];
    diag[px] = (s + 1.0) / alpha;
    if (!(diag[px] > 0.0)) {
      throw NumericError("v_update_exact: coefficient sum <= -1 makes the v-subproblem non-convex");
    }
  }
  VectorField2D rhs = target;
  rhs *= 2.0 / alpha;
  VectorField2D v(w, h);
  for (std::size_t px = 0; px < q.pixels(); ++px) {
    v[2 * px] = rhs[2 * px] / diag[px];
    v[2 * px + 1] = rhs[2 * px + 1] / diag[px];
  }
  if (beta == 0.0) return v;

  auto apply = [&](const Field& x, Field& out) {
    detail::graph_laplacian_apply(x, out);
    for (std::size_t px = 0; px < x.pixels(); ++px) {
      for (int c = 0; c < 2; ++c) out[2 * px + c] = diag[px] * x[2 * px + c] + 2.0 * beta * out[2 * px + c];
    }
  };
  auto max_abs = [](const Field& f) {
    double r = 0.0;
    for (double x : f.data()) r = std::max(r, std::abs(x));
    return r;
  };

  Field ax(w, h, 2);
  apply(v, ax);
  Field r(w, h, 2);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = rhs[i] - ax[i];
  Field dir = r;
  double rr = squared_norm(r);
  double residual = max_abs(r);
  for (int it = 0; it < max_iters && residual >= tol; ++it) {
    apply(dir, ax);
    const double step = rr / dot(dir, ax);
    for (std::size_t i = 0; i < r.size(); ++i) {
      v[i] += step * dir[i];
      r[i] -= step * ax[i];
    }
    const double rr_next = squared_norm(r);
    for (std::size_t i = 0; i < r.size(); ++i) dir[i] = r[i] + (rr_next / rr) * dir[i];
    rr = rr_next;
    residual = max_abs(r);
    if (it % 50 == 49) {
      // Periodically recompute the true residual to stop drift.
      apply(v, ax);
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = rhs[i] - ax[i];
      residual = max_abs(r);
    }
  }
  if (residual >= tol) {
    apply(v, ax);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = rhs[i] - ax[i];
    residual = max_abs(r);
    if (residual >= tol) {
      throw NumericError("v_update_exact: no convergence in " + std::to_string(max_iters) +
                         " iterations, residual " + std::to_string(residual));
    }
  }
  return v;
}

/// Value of E(q, v) above, sum-reduced over pixels; the smoothness term sums
/// squared forward differences over grid edges.
inline double layer_energy(const CoefficientField& p, const CoefficientField& q, const VectorField2D& v,
                         const BasisMatrix& B, double alpha, double beta) {
  if (!p.same_shape(q) || !p.same_grid(v) || p.m() != B.m()) throw ValidationError("layer_energy: shape mismatch");
  const int m = p.m();
  const double inv2a = 0.5 / alpha;
  double fidelity = 0.0, bias = 0.0, coupling = 0.0;
  for (std::size_t px = 0; px < p.pixels(); ++px) {
    const double vx = v[2 * px], vy = v[2 * px + 1];
    double ux = 0.0, uy = 0.0;
    for (int i = 0; i < m; ++i) {
      const double qi = q[px * m + i];
      const double diff = p[px * m + i] - qi;
      fidelity += diff * diff;
      const double ex = vx - B.bx(i), ey = vy - B.by(i);
      bias += inv2a * qi * (ex * ex + ey * ey);
      ux += qi * B.bx(i);
      uy += qi * B.by(i);
    }
    coupling += inv2a * ((ux - vx) * (ux - vx) + (uy - vy) * (uy - vy));
  }
  return fidelity + bias + coupling + beta * detail::edge_energy(v);
}

struct SPResult {
  CoefficientField q;
  VectorField2D v;
  VectorField2D u;
  /// layer_energy after every half-step (v0, then q_k and v_k for each k);
  /// empty unless requested.
  std::vector<double> trace;
};

inline VectorField2D v_update(const CoefficientField& q, const BasisMatrix& B, double alpha, const SPConfig& cfg) {
  if (cfg.v_solver == VSolver::kBlur) return v_update_blur(q, B, cfg.sigma_v);
  return v_update_exact(q, B, alpha, cfg.beta, cfg.exact_tol, cfg.exact_max_iters);
}

/// q0 = p; v0 = v_update(q0); then K rounds of q_update / v_update over the
/// schedule. u = q_K^T B. With K = 0 the layer reduces to u = p^T B.
inline SPResult sp_forward(const CoefficientField& p, const BasisMatrix& B, const AlphaSchedule& schedule,
                           const SPConfig& cfg, bool record_trace = false) {
  if (static_cast<int>(schedule.size()) != cfg.K) throw ValidationError("sp_forward: schedule length must equal K");
  if (p.m() != B.m()) throw ValidationError("sp_forward: coefficient count differs from basis size");
  SPResult r;
  r.q = p;
  if (cfg.K == 0) {
    r.u = basis_product(p, B);
    r.v = r.u;
    return r;
  }
  r.v = v_update(r.q, B, schedule[0], cfg);
  if (record_trace) r.trace.push_back(layer_energy(p, r.q, r.v, B, schedule[0], cfg.beta));
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    r.q = q_update(p, r.v, B, schedule[k], cfg.nonneg_q);
    if (record_trace) r.trace.push_back(layer_energy(p, r.q, r.v, B, schedule[k], cfg.beta));
    r.v = v_update(r.q, B, schedule[k], cfg);
    if (record_trace) r.trace.push_back(layer_energy(p, r.q, r.v, B, schedule[k], cfg.beta));
  }
  r.u = basis_product(r.q, B);
  return r;
}

namespace ad {

/// Traced q_update without the optional clamp (apply clamp_min for that).
inline Var coefficient_solve(const Var& p, const Var& v, const Var& B, double alpha) {
  const Field& pf = p.value();
  if (!pf.same_grid(v.value()) || v.value().channels() != 2 || pf.channels() != B.value().width()) {
    throw ValidationError("coefficient_solve: shape mismatch");
  }
  Field q = spreg::detail::q_update_kernel(pf, v.value(), B.value(), alpha);
  const std::size_t ip = p.id(), iv = v.id(), ib = B.id();
  const std::size_t self = p.tape().next_id();
  return p.tape().record(Primitive::kCoefficientSolve, std::move(q), {ip, iv, ib},
                         [ip, iv, ib, self, alpha](Tape& t, const Field& g) {
    const CoefficientSystem sys(t.value(ib), alpha);
    const Field& vf = t.value(iv);
    const Field& qf = t.value(self);
    const int m = sys.m();
    const double inv_a = 1.0 / alpha;
    Field* cp = t.requires_grad(ip) ? &t.cotangent(ip) : nullptr;
    Field* cv = t.requires_grad(iv) ? &t.cotangent(iv) : nullptr;
    const bool want_b = t.requires_grad(ib);
    std::vector<double> gbx(static_cast<std::size_t>(m), 0.0), gby(static_cast<std::size_t>(m), 0.0);
    std::vector<double> lambda(static_cast<std::size_t>(m));
    for (std::size_t px = 0; px < qf.pixels(); ++px) {
      const double vx = vf[2 * px], vy = vf[2 * px + 1];
      const double* q = qf.data().data() + px * m;
      sys.solve(g.data().data() + px * m, lambda.data());
      double lx = 0.0, ly = 0.0, lsum = 0.0;
      for (int i = 0; i < m; ++i) {
        lx += lambda[i] * sys.bx(i);
        ly += lambda[i] * sys.by(i);
        lsum += lambda[i];
      }
      if (cp) {
        double* c = cp->data().data() + px * m;
        for (int i = 0; i < m; ++i) c[i] += 2.0 * lambda[i];
      }
      if (cv) {
        (*cv)[2 * px] += inv_a * (2.0 * lx - lsum * vx);
        (*cv)[2 * px + 1] += inv_a * (2.0 * ly - lsum * vy);
      }
      if (want_b) {
        double qx = 0.0, qy = 0.0;
        for (int i = 0; i < m; ++i) {
          qx += q[i] * sys.bx(i);
          qy += q[i] * sys.by(i);
        }
        for (int i = 0; i < m; ++i) {
          const double li = lambda[i];
          gbx[i] += li * (2.0 * vx - sys.bx(i) - qx) - q[i] * lx;
          gby[i] += li * (2.0 * vy - sys.by(i) - qy) - q[i] * ly;
        }
      }
    }
    if (want_b) {
      Field& cb = t.cotangent(ib);
      for (int i = 0; i < m; ++i) {
        cb(i, 0, 0) += inv_a * gbx[i];
        cb(i, 0, 1) += inv_a * gby[i];
      }
    }
  });
}

inline Var basis_product(const Var& q, const Var& B) {
  if (q.value().channels() != B.value().width()) throw ValidationError("basis_product: shape mismatch");
  Field u = spreg::detail::basis_product_kernel(q.value(), B.value());
  const std::size_t iq = q.id(), ib = B.id();
  return q.tape().record(Primitive::kBasisProduct, std::move(u), {iq, ib}, [iq, ib](Tape& t, const Field& g) {
    const Field& qf = t.value(iq);
    const Field& bf = t.value(ib);
    const int m = qf.channels();
    if (t.requires_grad(iq)) {
      Field& cq = t.cotangent(iq);
      for (std::size_t px = 0; px < qf.pixels(); ++px) {
        const double gx = g[2 * px], gy = g[2 * px + 1];
        double* c = cq.data().data() + px * m;
        for (int i = 0; i < m; ++i) c[i] += bf(i, 0, 0) * gx + bf(i, 0, 1) * gy;
      }
    }
    if (t.requires_grad(ib)) {
      std::vector<double> gbx(static_cast<std::size_t>(m), 0.0), gby(static_cast<std::size_t>(m), 0.0);
      for (std::size_t px = 0; px < qf.pixels(); ++px) {
        const double gx = g[2 * px], gy = g[2 * px + 1];
        const double* qv = qf.data().data() + px * m;
        for (int i = 0; i < m; ++i) {
          gbx[i] += qv[i] * gx;
          gby[i] += qv[i] * gy;
        }
      }
      Field& cb = t.cotangent(ib);
      for (int i = 0; i < m; ++i) {
        cb(i, 0, 0) += gbx[i];
        cb(i, 0, 1) += gby[i];
      }
    }
  });
}

/// Traced layer; returns u = q_K^T B. Only the blur v-update is differentiable.
inline Var sp_forward(const Var& p, const Var& B, const AlphaSchedule& schedule, const SPConfig& cfg) {
  if (static_cast<int>(schedule.size()) != cfg.K) throw ValidationError("sp_forward: schedule length must equal K");
  if (cfg.v_solver != VSolver::kBlur) {
    throw ValidationError("sp_forward: only the blur v-update is differentiable");
  }
  if (cfg.K == 0) return basis_product(p, B);
  Var v = gaussian_blur(basis_product(p, B), cfg.sigma_v);
  Var q = p;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    q = coefficient_solve(p, v, B, schedule[k]);
    if (cfg.nonneg_q) q = clamp_min(q, 0.0);
    if (k + 1 < schedule.size()) v = gaussian_blur(basis_product(q, B), cfg.sigma_v);
  }
  return basis_product(q, B);
}

}  // namespace ad
}  // namespace spreg
