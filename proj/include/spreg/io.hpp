// Image and flow file formats.
//
// Images: 8/16-bit grayscale PNG and binary PGM (P5). Intensities are divided
// by the maximum representable value on load and quantized on save.
// Flows: Middlebury .flo ("PIEH", int32 width, int32 height, interleaved
// float32 dx/dy), little-endian.
#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "spreg/errors.hpp"
#include "spreg/grid.hpp"

namespace spreg::io {

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline bool has_extension(const std::filesystem::path& p, const char* ext) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ext;
}

template <class T>
void put_le(std::vector<unsigned char>& buf, T value) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu));
}

template <class T>
T get_le(const unsigned char* p) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  T value;
  std::memcpy(&value, &bits, 4);
  return value;
}

inline unsigned quantize(double v, unsigned maxval) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned>(std::lround(c * maxval));
}

struct PngReadDeleter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadDeleter() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};
struct PngWriteDeleter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteDeleter() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline Image2D read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());
  std::string error;
  PngReadDeleter h;
  h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, nullptr);
  if (!h.png) throw IoError("png: out of memory");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw IoError("png: out of memory");

  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int depth = 0;
  std::vector<unsigned char> raw;
  std::size_t rowbytes = 0;
  if (setjmp(png_jmpbuf(h.png))) {
    throw IoError("png decode failed for " + path.string() + ": " + error);
  }
  png_init_io(h.png, fp.get());
  png_read_info(h.png, h.info);
  int color = 0;
  png_get_IHDR(h.png, h.info, &width, &height, &depth, &color, nullptr, nullptr, nullptr);
  if (color == PNG_COLOR_TYPE_PALETTE || (color & PNG_COLOR_MASK_COLOR)) {
    error = "only grayscale images are supported";
    png_longjmp(h.png, 2);
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(h.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(h.png);
  if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(h.png);
  png_read_update_info(h.png, h.info);
  depth = png_get_bit_depth(h.png, h.info);
  rowbytes = png_get_rowbytes(h.png, h.info);
  raw.resize(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(h.png, rows.data());
  png_read_end(h.png, nullptr);

  Image2D img(static_cast<int>(width), static_cast<int>(height));
  for (png_uint_32 y = 0; y < height; ++y) {
    for (png_uint_32 x = 0; x < width; ++x) {
      double v;
      if (depth == 16) {
        std::uint16_t s;
        std::memcpy(&s, raw.data() + y * rowbytes + 2 * x, 2);
        v = s / 65535.0;
      } else {
        v = raw[y * rowbytes + x] / 255.0;
      }
      img.at(static_cast<int>(x), static_cast<int>(y)) = v;
    }
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image2D& img, int depth) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path.string());
  std::string error;
  PngWriteDeleter h;
  h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, nullptr);
  if (!h.png) throw IoError("png: out of memory");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw IoError("png: out of memory");

  const int bytes = depth / 8;
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.width()) * img.height() * bytes);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * img.width() + x) * bytes;
      if (depth == 16) {
        const unsigned q = quantize(img.at(x, y), 65535);
        raw[o] = static_cast<unsigned char>(q >> 8);
        raw[o + 1] = static_cast<unsigned char>(q & 0xFF);
      } else {
        raw[o] = static_cast<unsigned char>(quantize(img.at(x, y), 255));
      }
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y) {
    rows[static_cast<std::size_t>(y)] = raw.data() + static_cast<std::size_t>(y) * img.width() * bytes;
  }
  if (setjmp(png_jmpbuf(h.png))) {
    throw IoError("png encode failed for " + path.string() + ": " + error);
  }
  png_init_io(h.png, fp.get());
  png_set_IHDR(h.png, h.info, static_cast<png_uint_32>(img.width()),
               static_cast<png_uint_32>(img.height()), depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(h.png, h.info);
  png_write_image(h.png, rows.data());
  png_write_end(h.png, nullptr);
}

inline Image2D read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
      any = true;
    }
    if (!any) throw IoError("malformed PGM header in " + path.string());
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw IoError("not a binary PGM (P5): " + path.string());
  }
  pos = 2;
  const long w = read_int();
  const long h = read_int();
  const long maxval = read_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    throw IoError("unsupported PGM header in " + path.string());
  }
  ++pos;  // single whitespace before raster
  const int bps = maxval > 255 ? 2 : 1;
  if (bytes.size() < pos + static_cast<std::size_t>(w * h * bps)) {
    throw IoError("truncated PGM raster in " + path.string());
  }
  Image2D img(static_cast<int>(w), static_cast<int>(h));
  for (long i = 0; i < w * h; ++i) {
    unsigned v = bps == 2 ? (static_cast<unsigned>(bytes[pos + 2 * i]) << 8) | bytes[pos + 2 * i + 1]
                          : bytes[pos + i];
    img.storage()[static_cast<std::size_t>(i)] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const Image2D& img, int depth) {
  const unsigned maxval = depth == 16 ? 65535 : 255;
  const std::string header =
      "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n" + std::to_string(maxval) + "\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  for (double v : img.data()) {
    const unsigned q = quantize(v, maxval);
    if (depth == 16) bytes.push_back(static_cast<unsigned char>(q >> 8));
    bytes.push_back(static_cast<unsigned char>(q & 0xFF));
  }
  write_bytes(path, bytes);
}

}  // namespace detail

/// Loads a grayscale PNG or PGM, normalized to [0, 1].
inline Image2D load_image(const std::filesystem::path& path) {
  if (detail::has_extension(path, ".pgm")) return detail::read_pgm(path);
  if (detail::has_extension(path, ".png")) return detail::read_png(path);
  throw IoError("unsupported image extension: " + path.string());
}

/// Saves as PNG or PGM by extension; depth is 8 or 16 bits.
inline void save_image(const std::filesystem::path& path, const Image2D& img, int depth = 16) {
  if (depth != 8 && depth != 16) throw ValidationError("save_image: depth must be 8 or 16");
  if (detail::has_extension(path, ".pgm")) return detail::write_pgm(path, img, depth);
  if (detail::has_extension(path, ".png")) return detail::write_png(path, img, depth);
  throw IoError("unsupported image extension: " + path.string());
}

inline constexpr char kFloMagic[4] = {'P', 'I', 'E', 'H'};

inline std::vector<unsigned char> encode_flo(const VectorField2D& u) {
  std::vector<unsigned char> buf(kFloMagic, kFloMagic + 4);
  buf.reserve(12 + u.size() * 4);
  detail::put_le<std::int32_t>(buf, u.width());
  detail::put_le<std::int32_t>(buf, u.height());
  for (double v : u.data()) detail::put_le<float>(buf, static_cast<float>(v));
  return buf;
}

inline VectorField2D decode_flo(const std::vector<unsigned char>& buf) {
  if (buf.size() < 12 || std::memcmp(buf.data(), kFloMagic, 4) != 0) {
    throw IoError("flo: bad magic");
  }
  const auto w = detail::get_le<std::int32_t>(buf.data() + 4);
  const auto h = detail::get_le<std::int32_t>(buf.data() + 8);
  if (w <= 0 || h <= 0) throw IoError("flo: bad dimensions");
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 2;
  if (buf.size() != 12 + 4 * n) throw IoError("flo: payload length mismatch");
  VectorField2D u(w, h);
  for (std::size_t i = 0; i < n; ++i) u[i] = detail::get_le<float>(buf.data() + 12 + 4 * i);
  return u;
}

inline void save_flo(const std::filesystem::path& path, const VectorField2D& u) {
  detail::write_bytes(path, encode_flo(u));
}

inline VectorField2D load_flo(const std::filesystem::path& path) {
  try {
    return decode_flo(detail::read_bytes(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace spreg::io
