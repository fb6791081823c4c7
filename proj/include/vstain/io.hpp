// Lossless image files: PNG (8-bit RGB, 8/16-bit gray) through libpng and
// 16-bit gray TIFF through libtiff. Samples round-trip bit-exactly.
#pragma once

#include <png.h>
#include <tiffio.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "vstain/error.hpp"
#include "vstain/image.hpp"

namespace vstain {

/// Interleaved integer samples as stored in the file.
struct RasterImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 (gray) or 3 (RGB)
  int bit_depth = 8;         // 8 or 16
  std::vector<std::uint16_t> samples;

  bool operator==(const RasterImage&) const = default;
};

namespace detail {

inline std::string lower_extension(const std::filesystem::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void check_raster(const RasterImage& img) {
  if ((img.channels != 1 && img.channels != 3) || (img.bit_depth != 8 && img.bit_depth != 16) ||
      img.samples.size() != img.width * img.height * img.channels || img.width == 0 || img.height == 0) {
    throw InvalidArgument("raster image has inconsistent layout");
  }
}

[[noreturn]] inline void png_error_handler(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  std::longjmp(png_jmpbuf(png), 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace detail

inline RasterImage read_png(const std::filesystem::path& path) {
  detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw DataError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw DataError(path.string() + " is not a PNG file");

  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_error_handler,
                                           detail::png_warning_handler);
  if (!png) throw DataError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  RasterImage img;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("failed to decode " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // rows come back little-endian
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (img.channels != 1 && img.channels != 3) throw DataError(path.string() + ": unsupported channel count");
  const std::size_t n = img.width * img.height * img.channels;
  img.samples.resize(n);
  for (std::size_t y = 0; y < img.height; ++y) {
    const unsigned char* row = rows[y];
    for (std::size_t i = 0; i < img.width * img.channels; ++i) {
      img.samples[y * img.width * img.channels + i] =
          img.bit_depth == 16 ? static_cast<std::uint16_t>(row[2 * i] | (row[2 * i + 1] << 8)) : row[i];
    }
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const RasterImage& img) {
  detail::check_raster(img);
  detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw DataError("cannot write " + path.string());
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_error_handler,
                                            detail::png_warning_handler);
  if (!png) throw DataError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  const std::size_t bps = img.bit_depth == 16 ? 2 : 1;
  const std::size_t rowbytes = img.width * img.channels * bps;
  std::vector<unsigned char> buffer(rowbytes * img.height);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (bps == 2) {
      buffer[2 * i] = static_cast<unsigned char>(img.samples[i] >> 8);  // PNG is big-endian
      buffer[2 * i + 1] = static_cast<unsigned char>(img.samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<unsigned char>(std::min<std::uint16_t>(img.samples[i], 255));
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed to encode " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline RasterImage read_tiff(const std::filesystem::path& path) {
  TIFFSetWarningHandler(nullptr);
  TIFFSetErrorHandler(nullptr);
  std::unique_ptr<TIFF, void (*)(TIFF*)> tif(TIFFOpen(path.string().c_str(), "r"), TIFFClose);
  if (!tif) throw DataError("cannot open TIFF " + path.string());
  std::uint32_t w = 0, h = 0;
  std::uint16_t bps = 0, spp = 1, fmt = SAMPLEFORMAT_UINT, planar = PLANARCONFIG_CONTIG;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &fmt);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
  if ((bps != 8 && bps != 16) || spp != 1 || fmt != SAMPLEFORMAT_UINT || w == 0 || h == 0) {
    throw DataError(path.string() + ": only 8/16-bit unsigned grayscale TIFF is supported");
  }
  RasterImage img;
  img.width = w;
  img.height = h;
  img.channels = 1;
  img.bit_depth = bps;
  img.samples.resize(static_cast<std::size_t>(w) * h);
  std::vector<unsigned char> line(static_cast<std::size_t>(TIFFScanlineSize(tif.get())));
  for (std::uint32_t y = 0; y < h; ++y) {
    if (TIFFReadScanline(tif.get(), line.data(), y, 0) < 0) throw DataError(path.string() + ": truncated TIFF data");
    for (std::uint32_t x = 0; x < w; ++x) {
      std::uint16_t v = line[x];
      if (bps == 16) std::memcpy(&v, line.data() + 2 * x, 2);  // libtiff returns host order
      img.samples[static_cast<std::size_t>(y) * w + x] = v;
    }
  }
  return img;
}

inline void write_tiff(const std::filesystem::path& path, const RasterImage& img) {
  detail::check_raster(img);
  if (img.channels != 1) throw InvalidArgument("TIFF output supports grayscale only");
  TIFFSetWarningHandler(nullptr);
  TIFFSetErrorHandler(nullptr);
  std::unique_ptr<TIFF, void (*)(TIFF*)> tif(TIFFOpen(path.string().c_str(), "w"), TIFFClose);
  if (!tif) throw DataError("cannot write TIFF " + path.string());
  TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(img.width));
  TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(img.height));
  TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, static_cast<std::uint16_t>(img.bit_depth));
  TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, static_cast<std::uint16_t>(1));
  TIFFSetField(tif.get(), TIFFTAG_SAMPLEFORMAT, static_cast<std::uint16_t>(SAMPLEFORMAT_UINT));
  TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, static_cast<std::uint16_t>(PHOTOMETRIC_MINISBLACK));
  TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, static_cast<std::uint16_t>(PLANARCONFIG_CONTIG));
  const std::uint16_t codec = TIFFIsCODECConfigured(COMPRESSION_ADOBE_DEFLATE) ? COMPRESSION_ADOBE_DEFLATE : COMPRESSION_NONE;
  TIFFSetField(tif.get(), TIFFTAG_COMPRESSION, codec);
  TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, TIFFDefaultStripSize(tif.get(), 0));
  const std::size_t bps = img.bit_depth == 16 ? 2 : 1;
  std::vector<unsigned char> line(img.width * bps);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::uint16_t v = img.samples[y * img.width + x];
      if (bps == 2) {
        std::memcpy(line.data() + 2 * x, &v, 2);
      } else {
        line[x] = static_cast<unsigned char>(std::min<std::uint16_t>(v, 255));
      }
    }
    if (TIFFWriteScanline(tif.get(), line.data(), static_cast<std::uint32_t>(y), 0) < 0) {
      throw DataError("failed to write " + path.string());
    }
  }
}

/// Dispatches on the extension: .png, .tif or .tiff.
inline RasterImage read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path.string());
  const auto e = detail::lower_extension(path);
  if (e == ".png") return read_png(path);
  if (e == ".tif" || e == ".tiff") return read_tiff(path);
  throw DataError("unsupported image format: " + path.string());
}

inline void write_image(const std::filesystem::path& path, const RasterImage& img) {
  const auto e = detail::lower_extension(path);
  if (e == ".png") return write_png(path, img);
  if (e == ".tif" || e == ".tiff") return write_tiff(path, img);
  throw DataError("unsupported image format: " + path.string());
}

// ---------------------------------------------------------------------------
// Raster <-> tensor

/// Gray (H,W) with raw sample values; RGB input is averaged.
inline Image to_gray(const RasterImage& r) {
  Image out({r.height, r.width});
  for (std::size_t i = 0; i < r.width * r.height; ++i) {
    if (r.channels == 1) {
      out[i] = r.samples[i];
    } else {
      out[i] = static_cast<float>((static_cast<double>(r.samples[3 * i]) + r.samples[3 * i + 1] + r.samples[3 * i + 2]) / 3.0);
    }
  }
  return out;
}

/// Planar (3,H,W) RGB with raw sample values; gray input is replicated.
inline Image to_rgb_planes(const RasterImage& r) {
  const std::size_t n = r.width * r.height;
  Image out({3, r.height, r.width});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = r.samples[r.channels == 3 ? 3 * i + c : i];
  return out;
}

/// Rounds and clamps (3,H,W) or (H,W) values into an 8- or 16-bit raster.
inline RasterImage from_planes(const Image& img, int bit_depth = 8) {
  const std::size_t channels = img.rank() == 3 ? img.dim(0) : 1;
  if ((img.rank() != 2 && img.rank() != 3) || (channels != 1 && channels != 3)) {
    throw ShapeError("from_planes expects (H,W) or (3,H,W), got " + shape_str(img.shape()));
  }
  const double top = bit_depth == 16 ? 65535.0 : 255.0;
  RasterImage r;
  r.height = height(img);
  r.width = width(img);
  r.channels = channels;
  r.bit_depth = bit_depth;
  const std::size_t n = r.width * r.height;
  r.samples.resize(n * channels);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      r.samples[i * channels + c] = static_cast<std::uint16_t>(std::clamp(std::round(static_cast<double>(img[c * n + i])), 0.0, top));
  return r;
}

}  // namespace vstain
