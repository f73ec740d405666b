// Grayscale image files: binary PGM (P5) and PNG, 8 or 16 bits per sample.
#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepbirads/tensor.hpp"

namespace deepbirads {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raw samples plus the largest representable value (255 or 65535).
struct GrayImage {
  std::size_t height = 0, width = 0;
  std::uint32_t max_value = 255;
  std::vector<std::uint16_t> pixels;

  Tensor to_tensor() const {
    std::vector<double> v(pixels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(pixels[i]) / max_value;
    return Tensor::from({1, height, width}, std::move(v));
  }

  static GrayImage from_tensor(const Tensor& t, std::uint32_t max_value = 255) {
    if (t.rank() != 3 || t.dim(0) != 1) throw DimensionError("expected a [1 x H x W] image, got " + shape_string(t.shape()));
    GrayImage img{t.dim(1), t.dim(2), max_value, std::vector<std::uint16_t>(t.numel())};
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double v = std::clamp(t[i], 0.0, 1.0);
      img.pixels[i] = static_cast<std::uint16_t>(std::lround(v * max_value));
    }
    return img;
  }
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline GrayImage decode_pgm(const std::string& bytes, const std::string& label = "PGM data") {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_ws();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw IoError(label + ": malformed PGM header");
    return std::stoull(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw IoError(label + ": unsupported image format (expected binary PGM 'P5')");
  pos = 2;
  GrayImage img;
  img.width = number();
  img.height = number();
  const std::size_t maxval = number();
  if (img.width == 0 || img.height == 0) throw IoError(label + ": empty image");
  if (maxval != 255 && maxval != 65535)
    throw IoError(label + ": unsupported PGM bit depth (maxval " + std::to_string(maxval) + ")");
  img.max_value = static_cast<std::uint32_t>(maxval);
  ++pos;  // single whitespace byte before the raster
  const std::size_t bps = maxval == 255 ? 1 : 2;
  const std::size_t n = img.width * img.height;
  if (bytes.size() < pos + n * bps) throw IoError(label + ": truncated PGM raster");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * bps);
    img.pixels[i] = bps == 1 ? p[0] : static_cast<std::uint16_t>((p[0] << 8) | p[1]);
  }
  return img;
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                    std::to_string(img.max_value) + "\n";
  const bool wide = img.max_value > 255;
  for (auto px : img.pixels) {
    if (wide) out.push_back(static_cast<char>(px >> 8));
    out.push_back(static_cast<char>(px & 0xff));
  }
  return out;
}

namespace detail {

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};
struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline void png_error_fn(png_structp, png_const_charp msg) { throw IoError(std::string("PNG: ") + msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline GrayImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError(path.string() + ": not a PNG file");
  detail::PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn, detail::png_warning_fn);
  if (!g.png) throw IoError("PNG: cannot allocate reader");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("PNG: cannot allocate info");
  png_init_io(g.png, fp.get());
  png_set_sig_bytes(g.png, 8);
  png_read_info(g.png, g.info);
  const auto color = png_get_color_type(g.png, g.info);
  const auto depth = png_get_bit_depth(g.png, g.info);
  if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16))
    throw IoError(path.string() + ": unsupported PNG (need 8- or 16-bit grayscale, got color type " +
                  std::to_string(color) + ", depth " + std::to_string(depth) + ")");
  GrayImage img;
  img.width = png_get_image_width(g.png, g.info);
  img.height = png_get_image_height(g.png, g.info);
  img.max_value = depth == 8 ? 255 : 65535;
  const std::size_t bps = depth / 8;
  std::vector<unsigned char> row(img.width * bps);
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_read_row(g.png, row.data(), nullptr);
    for (std::size_t x = 0; x < img.width; ++x)
      img.pixels[y * img.width + x] =
          bps == 1 ? row[x] : static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1]);
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot create " + path.string());
  detail::PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn, detail::png_warning_fn);
  g.info = png_create_info_struct(g.png);
  png_init_io(g.png, fp.get());
  const int depth = img.max_value > 255 ? 16 : 8;
  png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(g.png, g.info);
  const std::size_t bps = static_cast<std::size_t>(depth / 8);
  std::vector<unsigned char> row(img.width * bps);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto px = img.pixels[y * img.width + x];
      if (bps == 1) {
        row[x] = static_cast<unsigned char>(px);
      } else {
        row[2 * x] = static_cast<unsigned char>(px >> 8);
        row[2 * x + 1] = static_cast<unsigned char>(px & 0xff);
      }
    }
    png_write_row(g.png, row.data());
  }
  png_write_end(g.png, nullptr);
}

/// Loads a PGM or PNG (chosen by content) as a [1 x H x W] tensor in [0, 1].
inline Tensor load_image(const std::filesystem::path& path) {
  std::string bytes = detail::read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0)
    return read_png(path).to_tensor();
  return decode_pgm(bytes, path.string()).to_tensor();
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  auto bytes = encode_pgm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace deepbirads
