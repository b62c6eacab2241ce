// Dense 2D grids: scalar images, displacement fields, per-pixel coefficient
// vectors, plus the sampling / warping / differencing / smoothing kernels
// that operate on them.
//
// Conventions used everywhere in spreg:
//   x = column index, y = row index, origin at the top-left pixel center.
//   Displacements are added to the sampling location (pull warp).
//   Sampling clamps to the nearest edge pixel; smoothing and box sums use
//   half-sample symmetric reflection (... a1 a0 | a0 a1 ...).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace spreg {

/// Row-major, channel-interleaved grid of doubles. Element (x, y, c) lives at
/// ((y * width + x) * channels + c).
class Field {
 public:
  Field() = default;
  Field(int width, int height, int channels, double fill = 0.0)
      : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || channels < 0) {
      throw std::invalid_argument("Field: negative dimension");
    }
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }
  Field(int width, int height, int channels, std::vector<double> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    if (width < 0 || height < 0 || channels < 0 ||
        data_.size() != static_cast<std::size_t>(width) * height * channels) {
      throw std::invalid_argument("Field: data length does not match width*height*channels");
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t pixels() const { return static_cast<std::size_t>(width_) * height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  double& operator()(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  double operator()(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  bool same_grid(const Field& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }
  bool same_shape(const Field& other) const {
    return same_grid(other) && channels_ == other.channels_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Field& operator+=(const Field& other) {
    require_same_shape(other, "Field::operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  Field& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const Field& other, const char* where) const {
    if (!same_shape(other)) {
      throw std::invalid_argument(std::string(where) + ": shape mismatch");
    }
  }

  friend bool operator==(const Field& a, const Field& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

namespace detail {
inline Field checked_channels(Field f, int channels, const char* type) {
  if (f.channels() != channels) {
    throw std::invalid_argument(std::string(type) + ": expected " + std::to_string(channels) +
                                " channels, got " + std::to_string(f.channels()));
  }
  return f;
}
}  // namespace detail

/// Single-channel intensity image.
class Image2D : public Field {
 public:
  Image2D() = default;
  Image2D(int width, int height, double fill = 0.0) : Field(width, height, 1, fill) {}
  Image2D(int width, int height, std::vector<double> data)
      : Field(width, height, 1, std::move(data)) {}
  explicit Image2D(Field f) : Field(detail::checked_channels(std::move(f), 1, "Image2D")) {}

  double& at(int x, int y) { return (*this)(x, y, 0); }
  double at(int x, int y) const { return (*this)(x, y, 0); }
};

/// Per-pixel displacement (dx along columns, dy along rows) in pixel units.
class VectorField2D : public Field {
 public:
  VectorField2D() = default;
  VectorField2D(int width, int height, double fill_dx = 0.0, double fill_dy = 0.0)
      : Field(width, height, 2) {
    auto d = data();
    for (std::size_t i = 0; i < pixels(); ++i) {
      d[2 * i] = fill_dx;
      d[2 * i + 1] = fill_dy;
    }
  }
  explicit VectorField2D(Field f)
      : Field(detail::checked_channels(std::move(f), 2, "VectorField2D")) {}

  double& dx(int x, int y) { return (*this)(x, y, 0); }
  double& dy(int x, int y) { return (*this)(x, y, 1); }
  double dx(int x, int y) const { return (*this)(x, y, 0); }
  double dy(int x, int y) const { return (*this)(x, y, 1); }
};

/// Per-pixel m-vector of basis weights.
class CoefficientField : public Field {
 public:
  CoefficientField() = default;
  CoefficientField(int width, int height, int m, double fill = 0.0)
      : Field(width, height, m, fill) {
    if (m < 1) throw std::invalid_argument("CoefficientField: m must be >= 1");
  }
  explicit CoefficientField(Field f) : Field(std::move(f)) {
    if (channels() < 1) throw std::invalid_argument("CoefficientField: m must be >= 1");
  }

  int m() const { return channels(); }
  std::span<double> at(int x, int y) { return data().subspan(index(x, y), channels()); }
  std::span<const double> at(int x, int y) const {
    return data().subspan(index(x, y), channels());
  }

  /// Clamp every coefficient at zero from below.
  void clamp_nonnegative() {
    for (double& v : storage()) v = std::max(v, 0.0);
  }
};

struct GaussianKernel1D {
  double sigma = 0.0;
  int radius = 0;
  std::vector<double> weights;  // 2 * radius + 1 taps, centered

  double tap(int offset) const { return weights[static_cast<std::size_t>(offset + radius)]; }
};

/// Gaussian taps truncated at ceil(3 sigma) and renormalized to sum to one.
inline GaussianKernel1D make_gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("make_gaussian_kernel: sigma must be > 0");
  GaussianKernel1D k;
  k.sigma = sigma;
  k.radius = static_cast<int>(std::ceil(3.0 * sigma));
  k.weights.resize(static_cast<std::size_t>(2 * k.radius + 1));
  double total = 0.0;
  for (int i = -k.radius; i <= k.radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    k.weights[static_cast<std::size_t>(i + k.radius)] = w;
    total += w;
  }
  for (double& w : k.weights) w /= total;
  return k;
}

/// Half-sample symmetric reflection of index i into [0, n).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int r = i % period;
  if (r < 0) r += period;
  return r < n ? r : period - 1 - r;
}

namespace detail {

// Bilinear lookup with clamp-to-edge. Returns weights/indices so adjoints can
// reuse them. Partial derivatives are zero along an axis whose coordinate was
// clamped.
struct BilinearStencil {
  int x0, y0, x1, y1;
  double fx, fy;
  bool inside_x, inside_y;
};

inline BilinearStencil bilinear_stencil(int width, int height, double x, double y) {
  BilinearStencil s{};
  const double max_x = width - 1;
  const double max_y = height - 1;
  s.inside_x = x >= 0.0 && x <= max_x;
  s.inside_y = y >= 0.0 && y <= max_y;
  const double cx = std::clamp(x, 0.0, max_x);
  const double cy = std::clamp(y, 0.0, max_y);
  s.x0 = std::min(static_cast<int>(std::floor(cx)), std::max(width - 2, 0));
  s.y0 = std::min(static_cast<int>(std::floor(cy)), std::max(height - 2, 0));
  s.x1 = std::min(s.x0 + 1, width - 1);
  s.y1 = std::min(s.y0 + 1, height - 1);
  s.fx = width > 1 ? cx - s.x0 : 0.0;
  s.fy = height > 1 ? cy - s.y0 : 0.0;
  if (width == 1) s.inside_x = false;
  if (height == 1) s.inside_y = false;
  return s;
}

inline double bilinear_eval(const Field& f, const BilinearStencil& s, int c) {
  const double v00 = f(s.x0, s.y0, c);
  const double v10 = f(s.x1, s.y0, c);
  const double v01 = f(s.x0, s.y1, c);
  const double v11 = f(s.x1, s.y1, c);
  return (1.0 - s.fy) * ((1.0 - s.fx) * v00 + s.fx * v10) + s.fy * ((1.0 - s.fx) * v01 + s.fx * v11);
}

// d/dx and d/dy of the bilinear interpolant at the stencil location.
inline std::array<double, 2> bilinear_partials(const Field& f, const BilinearStencil& s, int c) {
  const double v00 = f(s.x0, s.y0, c);
  const double v10 = f(s.x1, s.y0, c);
  const double v01 = f(s.x0, s.y1, c);
  const double v11 = f(s.x1, s.y1, c);
  const double ddx = s.inside_x ? (1.0 - s.fy) * (v10 - v00) + s.fy * (v11 - v01) : 0.0;
  const double ddy = s.inside_y ? (1.0 - s.fx) * (v01 - v00) + s.fx * (v11 - v10) : 0.0;
  return {ddx, ddy};
}

// Transpose of bilinear_eval: spreads `value` onto the four neighbors.
inline void bilinear_scatter(Field& f, const BilinearStencil& s, int c, double value) {
  f(s.x0, s.y0, c) += value * (1.0 - s.fx) * (1.0 - s.fy);
  f(s.x1, s.y0, c) += value * s.fx * (1.0 - s.fy);
  f(s.x0, s.y1, c) += value * (1.0 - s.fx) * s.fy;
  f(s.x1, s.y1, c) += value * s.fx * s.fy;
}

// Generic separable correlation of every channel along one axis with the
// given taps (centered, length 2r+1), reflect boundaries.
inline Field correlate_axis(const Field& in, std::span<const double> taps, int axis) {
  const int r = static_cast<int>(taps.size() / 2);
  const int w = in.width();
  const int h = in.height();
  const int ch = in.channels();
  Field out(w, h, ch);
  const int n = axis == 0 ? w : h;
  std::vector<int> map(static_cast<std::size_t>(n + 2 * r));
  for (int i = -r; i < n + r; ++i) map[static_cast<std::size_t>(i + r)] = reflect_index(i, n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int pos = axis == 0 ? x : y;
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) {
          const int j = map[static_cast<std::size_t>(pos + k + r)];
          acc += taps[static_cast<std::size_t>(k + r)] * (axis == 0 ? in(j, y, c) : in(x, j, c));
        }
        out(x, y, c) = acc;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Bilinear interpolation of channel c at continuous (x, y); out-of-grid
/// coordinates are clamped to the nearest edge.
inline double bilinear_sample(const Field& f, double x, double y, int c = 0) {
  if (f.empty()) throw std::invalid_argument("bilinear_sample: empty field");
  return detail::bilinear_eval(f, detail::bilinear_stencil(f.width(), f.height(), x, y), c);
}

/// Pull warp of every channel of `f`: out(x) = f(x + u(x)).
inline Field warp_field(const Field& f, const VectorField2D& u) {
  if (!f.same_grid(u)) throw std::invalid_argument("warp: image and displacement dimensions differ");
  Field out(f.width(), f.height(), f.channels());
  for (int y = 0; y < f.height(); ++y) {
    for (int x = 0; x < f.width(); ++x) {
      const auto s = detail::bilinear_stencil(f.width(), f.height(), x + u.dx(x, y), y + u.dy(x, y));
      for (int c = 0; c < f.channels(); ++c) out(x, y, c) = detail::bilinear_eval(f, s, c);
    }
  }
  return out;
}

inline Image2D warp(const Image2D& img, const VectorField2D& u) {
  return Image2D(warp_field(img, u));
}

/// Per-pixel spatial derivatives of every channel.
struct Gradient2D {
  Field along_x;
  Field along_y;
};

/// Central differences in the interior, one-sided differences on the border.
inline Gradient2D spatial_gradient(const Field& f) {
  const int w = f.width();
  const int h = f.height();
  if (w < 2 || h < 2) throw std::invalid_argument("spatial_gradient: width and height must be >= 2");
  Gradient2D g{Field(w, h, f.channels()), Field(w, h, f.channels())};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int xl = x == 0 ? 0 : x - 1;
      const int xr = x == w - 1 ? w - 1 : x + 1;
      const int yu = y == 0 ? 0 : y - 1;
      const int yd = y == h - 1 ? h - 1 : y + 1;
      const double sx = 1.0 / (xr - xl);
      const double sy = 1.0 / (yd - yu);
      for (int c = 0; c < f.channels(); ++c) {
        g.along_x(x, y, c) = (f(xr, y, c) - f(xl, y, c)) * sx;
        g.along_y(x, y, c) = (f(x, yd, c) - f(x, yu, c)) * sy;
      }
    }
  }
  return g;
}

/// Transpose of spatial_gradient: accumulates gx^T gbar_x + gy^T gbar_y into out.
inline void spatial_gradient_transpose(const Field& gbar_x, const Field& gbar_y, Field& out) {
  const int w = out.width();
  const int h = out.height();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int xl = x == 0 ? 0 : x - 1;
      const int xr = x == w - 1 ? w - 1 : x + 1;
      const int yu = y == 0 ? 0 : y - 1;
      const int yd = y == h - 1 ? h - 1 : y + 1;
      const double sx = 1.0 / (xr - xl);
      const double sy = 1.0 / (yd - yu);
      for (int c = 0; c < out.channels(); ++c) {
        const double bx = gbar_x(x, y, c) * sx;
        const double by = gbar_y(x, y, c) * sy;
        out(xr, y, c) += bx;
        out(xl, y, c) -= bx;
        out(x, yd, c) += by;
        out(x, yu, c) -= by;
      }
    }
  }
}

/// Separable Gaussian smoothing of every channel; sigma == 0 is the identity.
template <class F>
F gaussian_blur(const F& f, double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0 || f.empty()) return f;
  const auto k = make_gaussian_kernel(sigma);
  Field rows = detail::correlate_axis(f, k.weights, 0);
  return F(detail::correlate_axis(rows, k.weights, 1));
}

/// Unnormalized sum over a window x window neighborhood (window odd), reflect
/// boundaries. Symmetric operator, so it is its own transpose.
inline Field box_sum(const Field& f, int window) {
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("box_sum: window must be odd");
  const std::vector<double> ones(static_cast<std::size_t>(window), 1.0);
  return detail::correlate_axis(detail::correlate_axis(f, ones, 0), ones, 1);
}

/// Sum of squares of all entries.
inline double squared_norm(const Field& f) {
  double s = 0.0;
  for (double v : f.data()) s += v * v;
  return s;
}

inline double dot(const Field& a, const Field& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace spreg
