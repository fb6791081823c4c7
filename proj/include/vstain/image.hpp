// Grayscale image helpers on (H,W) tensors: sampling, resizing, percentile
// stretches and normalized correlation.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vstain/error.hpp"
#include "vstain/tensor.hpp"

namespace vstain {

using Image = Tensor<float>;

inline constexpr double kDefaultDownsampleRatio = 2048.0 / 1351.0;

namespace detail {

inline void require_gray(const Image& img, const char* op) {
  if (img.rank() != 2 || img.empty()) {
    throw ShapeError(std::string(op) + " expects a nonempty (H,W) image, got " + shape_str(img.shape()));
  }
}

}  // namespace detail

inline std::size_t height(const Image& img) { return img.dim(img.rank() - 2); }
inline std::size_t width(const Image& img) { return img.dim(img.rank() - 1); }

/// Bilinear sample of plane `c` at (x, y); coordinates outside the image are
/// clamped to the nearest edge pixel.
inline double sample_bilinear(const Image& img, double x, double y, std::size_t c = 0) {
  const std::size_t h = height(img), w = width(img);
  const float* p = img.data().data() + c * h * w;
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
  const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const double top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
  const double bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
  return top * (1.0 - fy) + bot * fy;
}

/// Copies the window [y, y+h) x [x, x+w) of every plane.
inline Image crop(const Image& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  const std::size_t ih = height(img), iw = width(img);
  if (x + w > iw || y + h > ih) {
    throw ShapeError("crop window exceeds image " + shape_str(img.shape()));
  }
  const std::size_t planes = img.size() / (ih * iw);
  Shape s = img.shape();
  s[s.size() - 2] = h;
  s[s.size() - 1] = w;
  Image out(s);
  for (std::size_t c = 0; c < planes; ++c)
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(img.data().begin() + (c * ih + y + r) * iw + x, w, out.data().begin() + (c * h + r) * w);
  return out;
}

namespace detail {

/// Area-overlap weights of each output cell of width `ratio` with input cells.
struct AxisWeights {
  std::vector<std::size_t> begin;
  std::vector<std::vector<double>> w;
};

inline AxisWeights area_weights(std::size_t in, std::size_t out, double ratio) {
  AxisWeights a;
  for (std::size_t o = 0; o < out; ++o) {
    const double lo = static_cast<double>(o) * ratio;
    const double hi = std::min(static_cast<double>(o + 1) * ratio, static_cast<double>(in));
    const auto first = static_cast<std::size_t>(std::floor(lo));
    std::vector<double> ws;
    for (std::size_t i = first; i < in && static_cast<double>(i) < hi; ++i) {
      const double ov = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
      ws.push_back(std::max(0.0, ov));
    }
    double total = 0.0;
    for (double v : ws) total += v;
    for (double& v : ws) v /= total;
    a.begin.push_back(first);
    a.w.push_back(std::move(ws));
  }
  return a;
}

}  // namespace detail

/// Area-weighted downsampling by `ratio` (input pixels per output pixel);
/// the output extent is round(extent / ratio).
inline Image downsample_area(const Image& img, double ratio) {
  detail::require_gray(img, "downsample_area");
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw InvalidArgument("downsample ratio must be > 0");
  const std::size_t h = img.dim(0), w = img.dim(1);
  const auto oh = static_cast<std::size_t>(std::llround(static_cast<double>(h) / ratio));
  const auto ow = static_cast<std::size_t>(std::llround(static_cast<double>(w) / ratio));
  if (oh == 0 || ow == 0) throw InvalidArgument("downsample ratio leaves an empty image");
  const auto ay = detail::area_weights(h, oh, ratio), ax = detail::area_weights(w, ow, ratio);
  // Separable: rows first, then columns.
  std::vector<double> tmp(h * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t o = 0; o < ow; ++o) {
      double acc = 0.0;
      for (std::size_t k = 0; k < ax.w[o].size(); ++k) acc += ax.w[o][k] * img[y * w + ax.begin[o] + k];
      tmp[y * ow + o] = acc;
    }
  Image out({oh, ow});
  for (std::size_t o = 0; o < oh; ++o)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < ay.w[o].size(); ++k) acc += ay.w[o][k] * tmp[(ay.begin[o] + k) * ow + x];
      out[o * ow + x] = static_cast<float>(acc);
    }
  return out;
}

/// Percentile with linear interpolation between order statistics, p in [0,100].
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw InvalidArgument("percentile of empty sample");
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(hi), v.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

struct PercentileRange {
  double lo = 0.0;  // 1st percentile
  double hi = 0.0;  // 99th percentile
};

inline PercentileRange percentile_range(const Image& img, double lo_pct = 1.0, double hi_pct = 99.0) {
  std::vector<double> v(img.data().begin(), img.data().end());
  return {percentile(v, lo_pct), percentile(std::move(v), hi_pct)};
}

/// Maps the 1st percentile to 0 and the 99th to 1, clamped. A constant image
/// maps to 0.5 everywhere.
inline Image percentile_normalize(const Image& img, const PercentileRange& r) {
  Image out(img.shape());
  const double span = r.hi - r.lo;
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = span > 0.0 ? static_cast<float>(std::clamp((img[i] - r.lo) / span, 0.0, 1.0)) : 0.5f;
  }
  return out;
}

inline Image percentile_normalize(const Image& img) { return percentile_normalize(img, percentile_range(img)); }

/// Saturates the bottom and top 1% and reverses contrast: the 1st percentile
/// maps to 1 and the 99th to 0. A constant image maps to 0.5 everywhere.
/// Not idempotent: the clipped tails are lost.
inline Image contrast_stretch_invert(const Image& img) {
  if (img.empty()) throw InvalidArgument("contrast_stretch_invert of an empty image");
  auto out = percentile_normalize(img);
  for (auto& v : out.data()) v = 1.0f - v;
  return out;
}

/// Separable Gaussian blur of a (H,W) image with edge clamping; radius 3σ.
inline Image gaussian_blur(const Image& img, double sigma) {
  detail::require_gray(img, "gaussian_blur");
  if (!(sigma > 0.0)) return img;
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  const auto h = static_cast<std::ptrdiff_t>(img.dim(0)), w = static_cast<std::ptrdiff_t>(img.dim(1));
  std::vector<double> tmp(img.size());
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * img[static_cast<std::size_t>(y * w + std::clamp(x + i, std::ptrdiff_t{0}, w - 1))];
      tmp[static_cast<std::size_t>(y * w + x)] = acc;
    }
  Image out(img.shape());
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(std::clamp(y + i, std::ptrdiff_t{0}, h - 1) * w + x)];
      out[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
    }
  return out;
}

/// Pearson correlation of two equally sized arrays; 0 if either is constant.
inline double normalized_correlation(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("normalized_correlation: size mismatch");
  if (a.empty()) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace vstain
