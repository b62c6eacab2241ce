// Synthetic vessel-image benchmark in the large-displacement / aperture
// regime, and landmark / dense evaluation metrics.
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "spreg/errors.hpp"
#include "spreg/grid.hpp"

namespace spreg {

enum class DeformationKind { kTranslation, kSmooth };

inline std::string to_string(DeformationKind k) { return k == DeformationKind::kTranslation ? "translation" : "smooth"; }
inline DeformationKind deformation_from_string(const std::string& s) {
  if (s == "translation") return DeformationKind::kTranslation;
  if (s == "smooth") return DeformationKind::kSmooth;
  throw ValidationError("bench.deformation must be \"translation\" or \"smooth\"");
}

struct SynthSpec {
  int size = 256;
  int vessel_count = 10;
  double vessel_width = 4.0;
  double background_level = 0.05;
  double vessel_level = 0.9;
  DeformationKind deformation = DeformationKind::kTranslation;
  double tx = 0.0;
  double ty = 0.0;
  double max_magnitude = 12.0;  // smooth fields only
  double smoothness_sigma = 32.0;
  double noise_std = 0.0;
  int landmark_count = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (size < 16) throw ValidationError("bench.size must be >= 16");
    if (vessel_count < 1) throw ValidationError("bench.vessel_count must be >= 1");
    if (!(vessel_width >= 1.0)) throw ValidationError("bench.vessel_width must be >= 1");
    if (!(background_level >= 0.0 && background_level <= 1.0)) throw ValidationError("bench.background_level must be in [0,1]");
    if (!(vessel_level >= 0.0 && vessel_level <= 1.0)) throw ValidationError("bench.vessel_level must be in [0,1]");
    if (!(max_magnitude >= 0.0)) throw ValidationError("bench.max_magnitude must be >= 0");
    if (!(smoothness_sigma > 0.0)) throw ValidationError("bench.smoothness_sigma must be > 0");
    if (!(noise_std >= 0.0)) throw ValidationError("bench.noise_std must be >= 0");
    if (landmark_count < 1) throw ValidationError("bench.landmark_count must be >= 1");
    if (!std::isfinite(tx) || !std::isfinite(ty)) throw ValidationError("bench.tx/ty must be finite");
  }
};

struct Landmark {
  double xf, yf, xm, ym;
};
using LandmarkSet = std::vector<Landmark>;

/// Vessel centerlines as polylines in fixed-image coordinates.
struct VesselGeometry {
  std::vector<std::vector<std::array<double, 2>>> polylines;
  double width = 4.0;

  /// Distance from (x, y) to the nearest centerline.
  double distance(double x, double y) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& line : polylines) {
      for (std::size_t i = 0; i + 1 < line.size(); ++i) {
        const double ax = line[i][0], ay = line[i][1];
        const double dx = line[i + 1][0] - ax, dy = line[i + 1][1] - ay;
        const double len2 = dx * dx + dy * dy;
        double t = len2 > 0.0 ? ((x - ax) * dx + (y - ay) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double ex = x - (ax + t * dx), ey = y - (ay + t * dy);
        best = std::min(best, ex * ex + ey * ey);
      }
    }
    return std::sqrt(best);
  }

  /// Anti-aliased vessel coverage in [0, 1] at a continuous location.
  double coverage(double x, double y) const {
    return std::clamp(0.5 * width + 0.5 - distance(x, y), 0.0, 1.0);
  }
};

struct SynthPair {
  Image2D fixed;
  Image2D moving;
  VectorField2D gt_flow;
  LandmarkSet landmarks;
  VesselGeometry vessels;
};

namespace detail {

inline VesselGeometry random_vessels(const SynthSpec& spec, std::mt19937_64& rng) {
  VesselGeometry g;
  g.width = spec.vessel_width;
  const double n = spec.size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto border_point = [&](int side) -> std::array<double, 2> {
    const double t = (0.05 + 0.9 * unit(rng)) * (n - 1);
    switch (side) {
      case 0: return {t, 0.0};
      case 1: return {n - 1, t};
      case 2: return {t, n - 1};
      default: return {0.0, t};
    }
  };
  constexpr int kSegments = 48;
  for (int v = 0; v < spec.vessel_count; ++v) {
    const int s0 = static_cast<int>(unit(rng) * 4) % 4;
    const int s1 = (s0 + 1 + static_cast<int>(unit(rng) * 3) % 3) % 4;
    const auto p0 = border_point(s0);
    const auto p3 = border_point(s1);
    const std::array<double, 2> p1{(0.15 + 0.7 * unit(rng)) * (n - 1), (0.15 + 0.7 * unit(rng)) * (n - 1)};
    const std::array<double, 2> p2{(0.15 + 0.7 * unit(rng)) * (n - 1), (0.15 + 0.7 * unit(rng)) * (n - 1)};
    std::vector<std::array<double, 2>> line;
    for (int k = 0; k <= kSegments; ++k) {
      const double t = static_cast<double>(k) / kSegments;
      const double a = (1 - t) * (1 - t) * (1 - t), b = 3 * (1 - t) * (1 - t) * t, c = 3 * (1 - t) * t * t,
                   d = t * t * t;
      line.push_back({a * p0[0] + b * p1[0] + c * p2[0] + d * p3[0], a * p0[1] + b * p1[1] + c * p2[1] + d * p3[1]});
    }
    g.polylines.push_back(std::move(line));
  }
  return g;
}

inline VectorField2D random_smooth_field(int size, double max_magnitude, double sigma, std::mt19937_64& rng) {
  VectorField2D f(size, size);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : f.storage()) v = normal(rng);
  f = gaussian_blur(f, sigma);
  double peak = 0.0;
  for (std::size_t px = 0; px < f.pixels(); ++px) peak = std::max(peak, std::hypot(f[2 * px], f[2 * px + 1]));
  if (peak > 0.0) f *= max_magnitude / peak;
  return f;
}

// Solves y = x + gt(x) for x by fixed-point iteration x <- y - gt(x).
inline std::array<double, 2> invert_displacement(const VectorField2D& gt, double yx, double yy) {
  double x = yx, y = yy;
  for (int it = 0; it < 50; ++it) {
    const double nx = yx - bilinear_sample(gt, x, y, 0);
    const double ny = yy - bilinear_sample(gt, x, y, 1);
    const bool done = std::abs(nx - x) + std::abs(ny - y) < 1e-12;
    x = nx;
    y = ny;
    if (done) break;
  }
  return {x, y};
}

inline void write_double(std::ostream& os, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  os.write(buf, res.ptr - buf);
}

}  // namespace detail

/// Renders a fixed image of random anti-aliased vessels, a ground-truth pull
/// flow gt with warp(moving, gt) ~= fixed, and landmarks on the centerlines.
inline SynthPair synth_pair(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SynthPair out;
  out.vessels = detail::random_vessels(spec, rng);
  const int n = spec.size;
  if (spec.deformation == DeformationKind::kTranslation) {
    out.gt_flow = VectorField2D(n, n, spec.tx, spec.ty);
  } else {
    out.gt_flow = detail::random_smooth_field(n, spec.max_magnitude, spec.smoothness_sigma, rng);
  }

  const double contrast = spec.vessel_level - spec.background_level;
  out.fixed = Image2D(n, n);
  out.moving = Image2D(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      out.fixed.at(x, y) = spec.background_level + contrast * out.vessels.coverage(x, y);
      std::array<double, 2> src;
      if (spec.deformation == DeformationKind::kTranslation) {
        src = {x - spec.tx, y - spec.ty};
      } else {
        src = detail::invert_displacement(out.gt_flow, x, y);
      }
      out.moving.at(x, y) = spec.background_level + contrast * out.vessels.coverage(src[0], src[1]);
    }
  }

  // Landmarks: centerline points whose correspondence stays inside the image.
  std::uniform_int_distribution<std::size_t> pick_line(0, out.vessels.polylines.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double margin = 2.0;
  auto inside = [&](double x, double y) { return x >= margin && y >= margin && x <= n - 1 - margin && y <= n - 1 - margin; };
  for (int attempts = 0; static_cast<int>(out.landmarks.size()) < spec.landmark_count && attempts < 100000; ++attempts) {
    const auto& line = out.vessels.polylines[pick_line(rng)];
    const double s = unit(rng) * (line.size() - 1);
    const std::size_t i = std::min(static_cast<std::size_t>(s), line.size() - 2);
    const double f = s - i;
    const double xf = line[i][0] + f * (line[i + 1][0] - line[i][0]);
    const double yf = line[i][1] + f * (line[i + 1][1] - line[i][1]);
    if (!inside(xf, yf)) continue;
    const double xm = xf + bilinear_sample(out.gt_flow, xf, yf, 0);
    const double ym = yf + bilinear_sample(out.gt_flow, xf, yf, 1);
    if (!inside(xm, ym)) continue;
    out.landmarks.push_back({xf, yf, xm, ym});
  }
  if (static_cast<int>(out.landmarks.size()) < spec.landmark_count) {
    throw ValidationError("synth_pair: could not place landmarks inside the image");
  }

  if (spec.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (double& v : out.fixed.storage()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    for (double& v : out.moving.storage()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  }
  return out;
}

/// 1 where the fixed-image centerline distance is <= width/2 + dilation.
inline Image2D vessel_mask(const VesselGeometry& vessels, int size, double dilation) {
  Image2D mask(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      mask.at(x, y) = vessels.distance(x, y) <= 0.5 * vessels.width + dilation ? 1.0 : 0.0;
    }
  }
  return mask;
}

struct TreResult {
  std::vector<double> errors;
  double mean = 0.0;
};

/// |(x_f + phi(x_f)) - x_m| per landmark, phi sampled bilinearly.
inline TreResult tre(const LandmarkSet& landmarks, const VectorField2D& phi) {
  if (landmarks.empty()) throw ValidationError("tre: empty landmark set");
  TreResult r;
  for (const auto& lm : landmarks) {
    if (lm.xf < 0 || lm.yf < 0 || lm.xf > phi.width() - 1 || lm.yf > phi.height() - 1) {
      throw ValidationError("tre: landmark outside the field");
    }
    const double wx = lm.xf + bilinear_sample(phi, lm.xf, lm.yf, 0);
    const double wy = lm.yf + bilinear_sample(phi, lm.xf, lm.yf, 1);
    r.errors.push_back(std::hypot(wx - lm.xm, wy - lm.ym));
  }
  double s = 0.0;
  for (double e : r.errors) s += e;
  r.mean = s / static_cast<double>(r.errors.size());
  return r;
}

/// (1/T) sum_{t=1..T} fraction(tres <= t).
inline double auc_at(const std::vector<double>& tres, int threshold) {
  if (tres.empty()) throw ValidationError("auc_at: empty TRE list");
  if (threshold <= 0) throw ValidationError("auc_at: threshold must be > 0");
  double acc = 0.0;
  for (int t = 1; t <= threshold; ++t) {
    const auto hits = std::count_if(tres.begin(), tres.end(), [t](double e) { return e <= t; });
    acc += static_cast<double>(hits) / static_cast<double>(tres.size());
  }
  return acc / threshold;
}

/// Mean |u - gt| over pixels where mask > 0.5 (all pixels without a mask).
inline double endpoint_error(const VectorField2D& u, const VectorField2D& gt, const Image2D* mask = nullptr) {
  if (!u.same_shape(gt)) throw ValidationError("endpoint_error: dimensions differ");
  if (mask && !mask->same_grid(u)) throw ValidationError("endpoint_error: mask dimensions differ");
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t px = 0; px < u.pixels(); ++px) {
    if (mask && (*mask)[px] <= 0.5) continue;
    s += std::hypot(u[2 * px] - gt[2 * px], u[2 * px + 1] - gt[2 * px + 1]);
    ++count;
  }
  if (count == 0) throw ValidationError("endpoint_error: empty mask");
  return s / static_cast<double>(count);
}

inline void save_landmarks(const std::filesystem::path& path, const LandmarkSet& lms) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "xf,yf,xm,ym\n";
  for (const auto& lm : lms) {
    detail::write_double(os, lm.xf);
    os << ',';
    detail::write_double(os, lm.yf);
    os << ',';
    detail::write_double(os, lm.xm);
    os << ',';
    detail::write_double(os, lm.ym);
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path.string());
}

inline LandmarkSet load_landmarks(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line.rfind("xf,yf,xm,ym", 0) != 0) {
    throw IoError(path.string() + ": expected header xf,yf,xm,ym");
  }
  LandmarkSet out;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    std::array<double, 4> v{};
    std::size_t pos = 0;
    for (int k = 0; k < 4; ++k) {
      const std::size_t end = line.find(k < 3 ? ',' : '\n', pos);
      const std::string tok = line.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
      try {
        std::size_t used = 0;
        v[static_cast<std::size_t>(k)] = std::stod(tok, &used);
      } catch (const std::exception&) {
        throw IoError(path.string() + ": malformed landmark line: " + line);
      }
      if (k < 3 && end == std::string::npos) throw IoError(path.string() + ": malformed landmark line: " + line);
      pos = end + 1;
    }
    out.push_back({v[0], v[1], v[2], v[3]});
  }
  return out;
}

/// Benchmark preset: `pairs` seeds starting at `seed`; even pairs are pure
/// translations with magnitude in [6, max_displacement], odd pairs smooth
/// random fields of peak magnitude max_displacement.
struct BenchConfig {
  int pairs = 8;
  int size = 256;
  int vessel_count = 10;
  double vessel_width = 4.0;
  double background_level = 0.05;
  double vessel_level = 0.9;
  double max_displacement = 12.0;
  double smoothness_sigma = 32.0;
  double noise_std = 0.01;
  int landmark_count = 10;
  double mask_dilation = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (pairs < 1) throw ValidationError("bench.pairs must be >= 1");
    if (!(max_displacement >= 0.0)) throw ValidationError("bench.max_displacement must be >= 0");
    if (!(mask_dilation >= 0.0)) throw ValidationError("bench.mask_dilation must be >= 0");
    (void)specs();
  }

  std::vector<SynthSpec> specs() const {
    std::vector<SynthSpec> out;
    for (int i = 0; i < pairs; ++i) {
      SynthSpec s;
      s.size = size;
      s.vessel_count = vessel_count;
      s.vessel_width = vessel_width;
      s.background_level = background_level;
      s.vessel_level = vessel_level;
      s.noise_std = noise_std;
      s.landmark_count = landmark_count;
      s.smoothness_sigma = smoothness_sigma;
      s.seed = seed + static_cast<std::uint64_t>(i);
      std::mt19937_64 rng(s.seed ^ 0x9E3779B97F4A7C15ULL);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      if (i % 2 == 0) {
        s.deformation = DeformationKind::kTranslation;
        const double lo = std::min(6.0, max_displacement);
        const double mag = lo + (max_displacement - lo) * unit(rng);
        const double angle = 2.0 * M_PI * unit(rng);
        s.tx = mag * std::cos(angle);
        s.ty = mag * std::sin(angle);
      } else {
        s.deformation = DeformationKind::kSmooth;
        s.max_magnitude = max_displacement;
      }
      s.validate();
      out.push_back(s);
    }
    return out;
  }
};

}  // namespace spreg
