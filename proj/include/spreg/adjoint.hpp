// Reverse-mode differentiation over a fixed set of field primitives.
//
// A Tape records primitives in execution order; each record stores the
// forward value and a closure that maps the node's cotangent onto its
// parents. backward() walks the tape in reverse, so gradients of a scalar
// loss with respect to every declared input come out of one sweep.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spreg/errors.hpp"
#include "spreg/grid.hpp"

namespace spreg::ad {

enum class Primitive {
  kInput,
  kWarp,
  kGaussianBlur,
  kSpatialGradient,
  kCoefficientSolve,
  kBasisProduct,
  kAdd,
  kMul,
  kScale,
  kSquare,
  kClamp,
  kLncc,
  kSum,
  kMean,
  kCompose,
};

inline constexpr std::array<std::pair<Primitive, std::string_view>, 15> kPrimitiveNames{{
    {Primitive::kInput, "input"},
    {Primitive::kWarp, "warp"},
    {Primitive::kGaussianBlur, "blur"},
    {Primitive::kSpatialGradient, "gradient"},
    {Primitive::kCoefficientSolve, "coeff_solve"},
    {Primitive::kBasisProduct, "basis_product"},
    {Primitive::kAdd, "add"},
    {Primitive::kMul, "mul"},
    {Primitive::kScale, "scale"},
    {Primitive::kSquare, "square"},
    {Primitive::kClamp, "clamp"},
    {Primitive::kLncc, "lncc"},
    {Primitive::kSum, "sum"},
    {Primitive::kMean, "mean"},
    {Primitive::kCompose, "compose"},
}};

inline std::string_view primitive_name(Primitive p) {
  for (const auto& [prim, name] : kPrimitiveNames) {
    if (prim == p) return name;
  }
  return "unknown";
}

/// Throws ValidationError for names outside the registered set.
inline Primitive primitive_from_name(std::string_view name) {
  for (const auto& [prim, n] : kPrimitiveNames) {
    if (n == name) return prim;
  }
  throw ValidationError("unregistered primitive: " + std::string(name));
}

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Field& value() const;
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Field& cotangent)>;

  /// Declares a differentiable input.
  Var input(Field value) {
    nodes_.push_back(Node{Primitive::kInput, std::move(value), {}, nullptr, std::nullopt, true});
    return Var(this, nodes_.size() - 1);
  }

  /// Declares an input that never receives a gradient.
  Var constant(Field value) {
    nodes_.push_back(Node{Primitive::kInput, std::move(value), {}, nullptr, std::nullopt, false});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Primitive prim, Field value, std::vector<std::size_t> parents, Backward backward) {
    if (prim == Primitive::kInput) throw ValidationError("record: inputs are declared with input()");
    bool needs_grad = false;
    for (std::size_t p : parents) {
      if (p >= nodes_.size()) throw std::logic_error("record: parent not yet on tape");
      needs_grad = needs_grad || nodes_[p].requires_grad;
    }
    nodes_.push_back(Node{prim, std::move(value), std::move(parents), std::move(backward), std::nullopt, needs_grad});
    return Var(this, nodes_.size() - 1);
  }

  /// Id the next recorded node will receive.
  std::size_t next_id() const { return nodes_.size(); }

  Var record(std::string_view prim, Field value, std::vector<std::size_t> parents, Backward backward) {
    return record(primitive_from_name(prim), std::move(value), std::move(parents), std::move(backward));
  }

  std::size_t size() const { return nodes_.size(); }
  const Field& value(std::size_t id) const { return nodes_.at(id).value; }
  Primitive primitive(std::size_t id) const { return nodes_.at(id).primitive; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Cotangent buffer of a node, allocated as zeros on first touch.
  Field& cotangent(std::size_t id) {
    auto& n = nodes_.at(id);
    if (!n.cotangent) {
      n.cotangent.emplace(n.value.width(), n.value.height(), n.value.channels());
    }
    return *n.cotangent;
  }

  void accumulate(std::size_t id, const Field& contribution) {
    if (requires_grad(id)) cotangent(id) += contribution;
  }

  /// Reverse sweep from a scalar loss node.
  void backward(const Var& loss) {
    if (value(loss.id()).size() != 1) throw ValidationError("backward: loss node is not scalar");
    Field seed(1, 1, 1, 1.0);
    backward_from(loss, seed);
  }

  /// Reverse sweep from an arbitrary node with a caller-provided cotangent.
  void backward_from(const Var& out, const Field& seed) {
    clear_cotangents();
    value(out.id()).require_same_shape(seed, "backward_from");
    cotangent(out.id()) = seed;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.cotangent || !n.backward || !n.requires_grad) continue;
      if (adjoint_scale_ != 1.0) {
        Field scaled = *n.cotangent;
        scaled *= adjoint_scale_;
        n.backward(*this, scaled);
      } else {
        n.backward(*this, *n.cotangent);
      }
    }
  }

  /// Gradient of the last backward sweep with respect to a node; zeros if
  /// the node was not reachable from the loss or is a constant.
  Field gradient(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.cotangent && n.requires_grad) return *n.cotangent;
    return Field(n.value.width(), n.value.height(), n.value.channels());
  }

  /// Test hook: scales every propagated cotangent, which breaks the adjoint
  /// identities. Used as a negative control for the gradient checks.
  void set_adjoint_scale(double s) { adjoint_scale_ = s; }

 private:
  struct Node {
    Primitive primitive;
    Field value;
    std::vector<std::size_t> parents;
    Backward backward;
    std::optional<Field> cotangent;
    bool requires_grad = true;
  };

  void clear_cotangents() {
    for (auto& n : nodes_) n.cotangent.reset();
  }

  std::vector<Node> nodes_;
  double adjoint_scale_ = 1.0;
};

inline const Field& Var::value() const { return tape_->value(id_); }
inline double Var::scalar() const {
  const Field& f = value();
  if (f.size() != 1) throw ValidationError("Var::scalar: not a scalar node");
  return f[0];
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives

inline Var add(const Var& a, const Var& b) {
  Field out = a.value();
  out += b.value();
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record(Primitive::kAdd, std::move(out), {ia, ib}, [ia, ib](Tape& t, const Field& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var scale(const Var& a, double s) {
  Field out = a.value();
  out *= s;
  const std::size_t ia = a.id();
  return a.tape().record(Primitive::kScale, std::move(out), {ia}, [ia, s](Tape& t, const Field& g) {
    Field c = g;
    c *= s;
    t.accumulate(ia, c);
  });
}

inline Var mul(const Var& a, const Var& b) {
  const Field& av = a.value();
  const Field& bv = b.value();
  av.require_same_shape(bv, "ad::mul");
  Field out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record(Primitive::kMul, std::move(out), {ia, ib}, [ia, ib](Tape& t, const Field& g) {
    const Field& x = t.value(ia);
    const Field& y = t.value(ib);
    if (t.requires_grad(ia)) {
      Field& ca = t.cotangent(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ca[i] += g[i] * y[i];
    }
    if (t.requires_grad(ib)) {
      Field& cb = t.cotangent(ib);
      for (std::size_t i = 0; i < g.size(); ++i) cb[i] += g[i] * x[i];
    }
  });
}

inline Var square(const Var& a) {
  Field out = a.value();
  for (double& v : out.storage()) v *= v;
  const std::size_t ia = a.id();
  return a.tape().record(Primitive::kSquare, std::move(out), {ia}, [ia](Tape& t, const Field& g) {
    const Field& x = t.value(ia);
    Field& c = t.cotangent(ia);
    for (std::size_t i = 0; i < g.size(); ++i) c[i] += 2.0 * x[i] * g[i];
  });
}

/// max(a, lower); the subgradient at the kink is 0.
inline Var clamp_min(const Var& a, double lower) {
  Field out = a.value();
  for (double& v : out.storage()) v = std::max(v, lower);
  const std::size_t ia = a.id();
  return a.tape().record(Primitive::kClamp, std::move(out), {ia}, [ia, lower](Tape& t, const Field& g) {
    const Field& x = t.value(ia);
    Field& c = t.cotangent(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > lower) c[i] += g[i];
    }
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Primitive::kSum, Field(1, 1, 1, s), {ia}, [ia](Tape& t, const Field& g) {
    Field& c = t.cotangent(ia);
    for (double& v : c.storage()) v += g[0];
  });
}

inline Var mean(const Var& a) {
  const Field& av = a.value();
  if (av.empty()) throw ValidationError("ad::mean: empty field");
  double s = 0.0;
  for (double v : av.data()) s += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  const std::size_t ia = a.id();
  return a.tape().record(Primitive::kMean, Field(1, 1, 1, s * inv), {ia}, [ia, inv](Tape& t, const Field& g) {
    Field& c = t.cotangent(ia);
    for (double& v : c.storage()) v += g[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Grid primitives

/// Pull warp of every channel of `img` by displacement `u`.
inline Var warp(const Var& img, const Var& u) {
  const VectorField2D disp(u.value());
  Field out = warp_field(img.value(), disp);
  const std::size_t ii = img.id();
  const std::size_t iu = u.id();
  return img.tape().record(Primitive::kWarp, std::move(out), {ii, iu}, [ii, iu](Tape& t, const Field& g) {
    const Field& f = t.value(ii);
    const Field& d = t.value(iu);
    const bool want_f = t.requires_grad(ii);
    const bool want_u = t.requires_grad(iu);
    Field* cf = want_f ? &t.cotangent(ii) : nullptr;
    Field* cu = want_u ? &t.cotangent(iu) : nullptr;
    for (int y = 0; y < f.height(); ++y) {
      for (int x = 0; x < f.width(); ++x) {
        const auto s = spreg::detail::bilinear_stencil(f.width(), f.height(), x + d(x, y, 0), y + d(x, y, 1));
        for (int c = 0; c < f.channels(); ++c) {
          const double gc = g(x, y, c);
          if (gc == 0.0) continue;
          if (cf) spreg::detail::bilinear_scatter(*cf, s, c, gc);
          if (cu) {
            const auto [px, py] = spreg::detail::bilinear_partials(f, s, c);
            (*cu)(x, y, 0) += gc * px;
            (*cu)(x, y, 1) += gc * py;
          }
        }
      }
    }
  });
}

/// Separable Gaussian smoothing; the adjoint is the same (symmetric) blur.
inline Var gaussian_blur(const Var& a, double sigma) {
  Field out = spreg::gaussian_blur(a.value(), sigma);
  const std::size_t ia = a.id();
  return a.tape().record(Primitive::kGaussianBlur, std::move(out), {ia}, [ia, sigma](Tape& t, const Field& g) {
    t.accumulate(ia, spreg::gaussian_blur(g, sigma));
  });
}

/// Output has 2C channels per pixel: the C x-derivatives followed by the C
/// y-derivatives.
inline Var spatial_gradient(const Var& a) {
  const Field& f = a.value();
  const int ch = f.channels();
  auto grad = spreg::spatial_gradient(f);
  Field out(f.width(), f.height(), 2 * ch);
  for (std::size_t p = 0; p < f.pixels(); ++p) {
    for (int c = 0; c < ch; ++c) {
      out[p * 2 * ch + c] = grad.along_x[p * ch + c];
      out[p * 2 * ch + ch + c] = grad.along_y[p * ch + c];
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(Primitive::kSpatialGradient, std::move(out), {ia}, [ia, ch](Tape& t, const Field& g) {
    Field gx(g.width(), g.height(), ch);
    Field gy(g.width(), g.height(), ch);
    for (std::size_t p = 0; p < g.pixels(); ++p) {
      for (int c = 0; c < ch; ++c) {
        gx[p * ch + c] = g[p * 2 * ch + c];
        gy[p * ch + c] = g[p * 2 * ch + ch + c];
      }
    }
    if (t.requires_grad(ia)) spreg::spatial_gradient_transpose(gx, gy, t.cotangent(ia));
  });
}

// ---------------------------------------------------------------------------
// Validation harnesses

using TracedFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

namespace detail {

inline Field random_like(const Field& f, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Field out(f.width(), f.height(), f.channels());
  for (double& v : out.storage()) v = dist(rng);
  return out;
}

inline Field evaluate(const TracedFunction& fn, const std::vector<Field>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.input(in));
  return fn(tape, vars).value();
}

}  // namespace detail

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences on a random subsample of at least `min_coordinates` input
/// coordinates (all of them when fewer exist). Relative error uses
/// max(|a|, |b|, 1e-8) as the denominator.
inline GradCheckReport grad_check_report(const TracedFunction& fn, const std::vector<Field>& inputs,
                                         double epsilon, std::uint64_t seed = 0,
                                         std::size_t min_coordinates = 64, double adjoint_scale = 1.0) {
  if (epsilon < 1e-6 || epsilon > 1e-3) throw ValidationError("grad_check: epsilon must be in [1e-6, 1e-3]");
  Tape tape;
  tape.set_adjoint_scale(adjoint_scale);
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(tape.input(in));
  const Var loss = fn(tape, vars);
  tape.backward(loss);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) coords.emplace_back(k, i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > min_coordinates) coords.resize(min_coordinates);

  GradCheckReport report;
  std::vector<Field> grads;
  for (const auto& v : vars) grads.push_back(tape.gradient(v));
  std::vector<Field> probe = inputs;
  for (const auto& [k, i] : coords) {
    const double x0 = probe[k][i];
    probe[k][i] = x0 + epsilon;
    const double fp = detail::evaluate(fn, probe)[0];
    probe[k][i] = x0 - epsilon;
    const double fm = detail::evaluate(fn, probe)[0];
    probe[k][i] = x0;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double analytic = grads[k][i];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    report.max_relative_error = std::max(report.max_relative_error, std::abs(numeric - analytic) / denom);
  }
  report.coordinates = coords.size();
  return report;
}

inline double grad_check(const TracedFunction& fn, const std::vector<Field>& inputs, double epsilon,
                         std::uint64_t seed = 0) {
  return grad_check_report(fn, inputs, epsilon, seed).max_relative_error;
}

/// Dot-product test <J dx, dy> == <dx, J^T dy> for a field-valued function.
/// J dx is a central difference at step epsilon along a random tangent.
/// Returns |lhs - rhs| / max(|lhs|, |rhs|).
inline double dot_product_test(const TracedFunction& fn, const std::vector<Field>& inputs,
                               std::uint64_t seed = 0, double epsilon = 1e-5, double adjoint_scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::vector<Field> dx;
  for (const auto& in : inputs) dx.push_back(detail::random_like(in, rng));

  Tape tape;
  tape.set_adjoint_scale(adjoint_scale);
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(tape.input(in));
  const Var out = fn(tape, vars);
  const Field dy = detail::random_like(out.value(), rng);
  tape.backward_from(out, dy);

  double rhs = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) rhs += dot(dx[k], tape.gradient(vars[k]));

  auto shifted = [&](double h) {
    std::vector<Field> probe = inputs;
    for (std::size_t k = 0; k < probe.size(); ++k) {
      for (std::size_t i = 0; i < probe[k].size(); ++i) probe[k][i] += h * dx[k][i];
    }
    return detail::evaluate(fn, probe);
  };
  const Field fp = shifted(epsilon);
  const Field fm = shifted(-epsilon);
  double lhs = 0.0;
  for (std::size_t i = 0; i < dy.size(); ++i) lhs += (fp[i] - fm[i]) / (2.0 * epsilon) * dy[i];
  const double denom = std::max({std::abs(lhs), std::abs(rhs), 1e-300});
  return std::abs(lhs - rhs) / denom;
}

}  // namespace spreg::ad
