// Self-validation suite: adjoint dot-product and finite-difference checks for
// every registered primitive, plus end-to-end checks through the unrolled
// smoothing layer and the full registration loss.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "spreg/adjoint.hpp"
#include "spreg/diffeo.hpp"
#include "spreg/energy.hpp"
#include "spreg/smoothproper.hpp"

namespace spreg {

struct GradCheckRow {
  std::string name;
  double dot_error = 0.0;  // relative
  double fd_error = 0.0;   // max relative over sampled coordinates
};

struct GradCheckOptions {
  int size = 8;
  double epsilon = 1e-4;
  std::uint64_t seed = 7;
  /// Multiplies every propagated cotangent; anything but 1 breaks the adjoint.
  double adjoint_scale = 1.0;
};

namespace detail {

struct GradCheckCase {
  std::string name;
  ad::TracedFunction fn;
  std::vector<Field> inputs;
  bool scalar = false;
};

inline Field uniform_field(int w, int h, int c, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Field f(w, h, c);
  for (double& v : f.storage()) v = dist(rng);
  return f;
}

// Smooth-ish image so LNCC windows carry structure.
inline Field test_image(int n, double phase, std::mt19937_64& rng) {
  Field f = uniform_field(n, n, 1, -0.05, 0.05, rng);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) f(x, y, 0) += 0.5 + 0.4 * std::sin(0.9 * x + phase) * std::cos(0.7 * y - phase);
  }
  return f;
}

inline std::vector<GradCheckCase> gradcheck_cases(const GradCheckOptions& o) {
  std::mt19937_64 rng(o.seed);
  const int n = o.size;
  const Field a = uniform_field(n, n, 2, -1.0, 1.0, rng);
  const Field b = uniform_field(n, n, 2, -1.0, 1.0, rng);
  const Field flow = uniform_field(n, n, 2, -1.3, 1.3, rng);
  const Field img_f = test_image(n, 0.3, rng);
  const Field img_m = test_image(n, 0.8, rng);
  const BasisMatrix basis = init_basis(9, {1.0});
  const Field p = uniform_field(n, n, 9, 0.0, 1.0, rng);
  SPConfig sp;
  sp.m = 9;
  sp.basis_scales = {1.0};
  const AlphaSchedule schedule = default_alpha_schedule(sp.K);
  using V = std::vector<ad::Var>;

  std::vector<GradCheckCase> cases;
  cases.push_back({"warp", [](ad::Tape&, const V& v) { return ad::warp(v[0], v[1]); }, {img_m, flow}});
  cases.push_back({"blur", [](ad::Tape&, const V& v) { return ad::gaussian_blur(v[0], 1.5); }, {a}});
  cases.push_back({"gradient", [](ad::Tape&, const V& v) { return ad::spatial_gradient(v[0]); }, {a}});
  cases.push_back({"coeff_solve",
                   [](ad::Tape&, const V& v) { return ad::coefficient_solve(v[0], v[1], v[2], 1.5); },
                   {p, a, basis}});
  cases.push_back({"basis_product", [](ad::Tape&, const V& v) { return ad::basis_product(v[0], v[1]); }, {p, basis}});
  cases.push_back({"add", [](ad::Tape&, const V& v) { return ad::add(v[0], v[1]); }, {a, b}});
  cases.push_back({"mul", [](ad::Tape&, const V& v) { return ad::mul(v[0], v[1]); }, {a, b}});
  cases.push_back({"scale", [](ad::Tape&, const V& v) { return ad::scale(v[0], -2.5); }, {a}});
  cases.push_back({"square", [](ad::Tape&, const V& v) { return ad::square(v[0]); }, {a}});
  cases.push_back({"clamp", [](ad::Tape&, const V& v) { return ad::clamp_min(v[0], 0.0); }, {a}});
  cases.push_back({"lncc", [](ad::Tape&, const V& v) { return ad::lncc(v[0], v[1], 3, 1e-5); }, {img_f, img_m}, true});
  cases.push_back({"sum", [](ad::Tape&, const V& v) { return ad::sum(v[0]); }, {a}, true});
  cases.push_back({"mean", [](ad::Tape&, const V& v) { return ad::mean(v[0]); }, {a}, true});
  cases.push_back({"compose", [](ad::Tape&, const V& v) { return ad::compose(v[0], v[1]); }, {flow, a}});
  cases.push_back({"sp_forward",
                   [sp, schedule](ad::Tape&, const V& v) { return ad::sp_forward(v[0], v[1], schedule, sp); },
                   {p, basis}});
  LossConfig loss;
  loss.lncc_window = 3;
  cases.push_back({"pipeline",
                   [sp, schedule, loss](ad::Tape&, const V& v) {
                     const ad::Var u = ad::sp_forward(v[0], v[1], schedule, sp);
                     return ad::total_loss(v[2], v[3], ad::scaling_squaring(u), u, loss);
                   },
                   {p, basis, img_f, img_m},
                   true});
  return cases;
}

}  // namespace detail

/// Names accepted by run_gradcheck's filter, in report order.
inline std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& c : detail::gradcheck_cases(GradCheckOptions{})) names.push_back(c.name);
  return names;
}

/// Runs the suite, or a single row when `only` is non-empty.
inline std::vector<GradCheckRow> run_gradcheck(const GradCheckOptions& opt, const std::string& only = "") {
  auto cases = detail::gradcheck_cases(opt);
  if (!only.empty()) {
    std::erase_if(cases, [&](const detail::GradCheckCase& c) { return c.name != only; });
    if (cases.empty()) throw ValidationError("gradcheck: unknown primitive " + only);
  }
  std::vector<GradCheckRow> rows;
  std::uint64_t salt = opt.seed;
  for (const auto& c : cases) {
    GradCheckRow row;
    row.name = c.name;
    ++salt;
    row.dot_error = ad::dot_product_test(c.fn, c.inputs, salt, 1e-5, opt.adjoint_scale);
    ad::TracedFunction scalar_fn = c.fn;
    if (!c.scalar) {
      std::mt19937_64 rng(salt * 31 + 1);
      Field probe = ad::detail::evaluate(c.fn, c.inputs);
      Field weights = ad::detail::random_like(probe, rng);
      scalar_fn = [fn = c.fn, weights](ad::Tape& t, const std::vector<ad::Var>& v) {
        return ad::sum(ad::mul(fn(t, v), t.constant(weights)));
      };
    }
    row.fd_error = ad::grad_check_report(scalar_fn, c.inputs, opt.epsilon, salt, 64, opt.adjoint_scale).max_relative_error;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace spreg
