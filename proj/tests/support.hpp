// Shared helpers for the test suite.
#pragma once

#include <cmath>
#include <random>

#include "spreg/grid.hpp"

namespace spreg::testing {

inline Field random_field(int w, int h, int c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Field f(w, h, c);
  for (double& v : f.storage()) v = dist(rng);
  return f;
}

inline Image2D random_image(int w, int h, std::uint64_t seed) { return Image2D(random_field(w, h, 1, seed, 0.0, 1.0)); }

inline VectorField2D random_flow(int w, int h, std::uint64_t seed, double amp) {
  return VectorField2D(random_field(w, h, 2, seed, -amp, amp));
}

/// Sum of a few random low-frequency sinusoids per channel, peak |value| <= amp.
inline VectorField2D smooth_flow(int w, int h, std::uint64_t seed, double amp) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VectorField2D f(w, h);
  for (int c = 0; c < 2; ++c) {
    for (int term = 0; term < 3; ++term) {
      const double kx = 2.0 * M_PI * (0.5 + u(rng)) / w;
      const double ky = 2.0 * M_PI * (0.5 + u(rng)) / h;
      const double ph = 2.0 * M_PI * u(rng);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) f(x, y, c) += amp / 3.0 * std::sin(kx * x + ky * y + ph);
      }
    }
  }
  return f;
}

/// Smooth intensity pattern in (0.1, 0.9).
inline Image2D smooth_image(int w, int h, std::uint64_t seed) {
  const VectorField2D f = smooth_flow(w, h, seed, 0.4);
  Image2D img(w, h);
  for (std::size_t i = 0; i < img.pixels(); ++i) img[i] = 0.5 + f[2 * i];
  return img;
}

inline double max_abs_diff(const Field& a, const Field& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const Field& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace spreg::testing
