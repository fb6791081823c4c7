// BT.601 studio-swing color conversion, SSIM, and per-channel YCbCr
// percent differences aggregated into a report.
#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "vstain/error.hpp"
#include "vstain/image.hpp"

namespace vstain {

// Rows map (R,G,B) in [0,255] to (Y,Cb,Cr) offsets from (16,128,128).
inline const Eigen::Matrix3d& bt601_forward() {
  static const Eigen::Matrix3d m = (Eigen::Matrix3d() << 65.481, 128.553, 24.966,  //
                                    -37.797, -74.203, 112.0,                        //
                                    112.0, -93.786, -18.214)
                                       .finished() /
                                   255.0;
  return m;
}

inline const Eigen::Matrix3d& bt601_inverse() {
  static const Eigen::Matrix3d m = bt601_forward().inverse();
  return m;
}

inline constexpr std::array<double, 3> kYCbCrOffset{16.0, 128.0, 128.0};
inline constexpr std::array<double, 3> kYCbCrFloor{16.0, 16.0, 16.0};
inline constexpr std::array<double, 3> kYCbCrRange{219.0, 224.0, 224.0};

inline std::array<double, 3> rgb_to_ycbcr(double r, double g, double b) {
  const Eigen::Vector3d v = bt601_forward() * Eigen::Vector3d(r, g, b);
  return {v[0] + kYCbCrOffset[0], v[1] + kYCbCrOffset[1], v[2] + kYCbCrOffset[2]};
}

/// Real-valued inverse; callers quantize.
inline std::array<double, 3> ycbcr_to_rgb(double y, double cb, double cr) {
  const Eigen::Vector3d v =
      bt601_inverse() * Eigen::Vector3d(y - kYCbCrOffset[0], cb - kYCbCrOffset[1], cr - kYCbCrOffset[2]);
  return {v[0], v[1], v[2]};
}

inline std::uint8_t quantize8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

namespace detail {

inline void require_planes3(const Image& img, const char* op) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError(std::string(op) + " expects a (3,H,W) image, got " + shape_str(img.shape()));
  }
}

}  // namespace detail

/// (3,H,W) RGB levels -> (3,H,W) YCbCr levels, unquantized.
inline Image rgb_to_ycbcr(const Image& rgb) {
  detail::require_planes3(rgb, "rgb_to_ycbcr");
  const std::size_t n = rgb.size() / 3;
  Image out(rgb.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = rgb_to_ycbcr(rgb[i], rgb[n + i], rgb[2 * n + i]);
    for (std::size_t k = 0; k < 3; ++k) out[k * n + i] = static_cast<float>(c[k]);
  }
  return out;
}

/// (3,H,W) YCbCr levels -> (3,H,W) RGB, rounded and clamped to 8-bit levels.
inline Image ycbcr_to_rgb(const Image& ycc) {
  detail::require_planes3(ycc, "ycbcr_to_rgb");
  const std::size_t n = ycc.size() / 3;
  Image out(ycc.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = ycbcr_to_rgb(ycc[i], ycc[n + i], ycc[2 * n + i]);
    for (std::size_t k = 0; k < 3; ++k) out[k * n + i] = quantize8(c[k]);
  }
  return out;
}

/// YCbCr levels <-> the network's [0,1] scaling of each channel's nominal range.
inline Image ycbcr_to_unit(const Image& ycc) {
  detail::require_planes3(ycc, "ycbcr_to_unit");
  const std::size_t n = ycc.size() / 3;
  Image out(ycc.shape());
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < n; ++i)
      out[k * n + i] = static_cast<float>((ycc[k * n + i] - kYCbCrFloor[k]) / kYCbCrRange[k]);
  return out;
}

inline Image unit_to_ycbcr(const Image& unit) {
  detail::require_planes3(unit, "unit_to_ycbcr");
  const std::size_t n = unit.size() / 3;
  Image out(unit.shape());
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < n; ++i)
      out[k * n + i] = static_cast<float>(unit[k * n + i] * kYCbCrRange[k] + kYCbCrFloor[k]);
  return out;
}

// ---------------------------------------------------------------------------
// SSIM

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double dynamic_range = 255.0;
  double k1 = 0.01;
  double k2 = 0.03;
};

inline std::vector<double> gaussian_window_1d(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    total += g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (auto& v : g) v /= total;
  return g;
}

/// Mean SSIM over every window position fully inside the image (no padding).
/// Local statistics use the separable Gaussian window.
inline double ssim(const Image& a, const Image& b, const SsimOptions& opt = {}) {
  detail::require_gray(a, "ssim");
  if (a.shape() != b.shape()) throw ShapeError("ssim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t h = a.dim(0), w = a.dim(1), k = opt.window;
  if (h < k || w < k) throw ShapeError("ssim: image " + shape_str(a.shape()) + " is smaller than the window");
  const auto g = gaussian_window_1d(k, opt.sigma);
  const std::size_t oh = h - k + 1, ow = w - k + 1;

  // Five moments filtered horizontally, then vertically.
  std::array<std::vector<double>, 5> rows;
  for (auto& r : rows) r.assign(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double m[5] = {0, 0, 0, 0, 0};
      for (std::size_t i = 0; i < k; ++i) {
        const double p = a[y * w + x + i], q = b[y * w + x + i];
        m[0] += g[i] * p;
        m[1] += g[i] * q;
        m[2] += g[i] * p * p;
        m[3] += g[i] * q * q;
        m[4] += g[i] * p * q;
      }
      for (int c = 0; c < 5; ++c) rows[c][y * ow + x] = m[c];
    }
  const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2), c2 = std::pow(opt.k2 * opt.dynamic_range, 2);
  double total = 0.0;
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double m[5] = {0, 0, 0, 0, 0};
      for (std::size_t i = 0; i < k; ++i)
        for (int c = 0; c < 5; ++c) m[c] += g[i] * rows[c][(y + i) * ow + x];
      const double va = m[2] - m[0] * m[0], vb = m[3] - m[1] * m[1], cov = m[4] - m[0] * m[1];
      total += ((2 * m[0] * m[1] + c1) * (2 * cov + c2)) / ((m[0] * m[0] + m[1] * m[1] + c1) * (va + vb + c2));
    }
  return total / static_cast<double>(oh * ow);
}

// ---------------------------------------------------------------------------
// Percent differences

enum class Channel { y = 0, cb = 1, cr = 2 };

inline Channel parse_channel(const std::string& s) {
  if (s == "Y" || s == "y") return Channel::y;
  if (s == "Cb" || s == "cb") return Channel::cb;
  if (s == "Cr" || s == "cr") return Channel::cr;
  throw InvalidArgument("unknown channel '" + s + "' (expected Y, Cb or Cr)");
}

/// 100 * mean|a - b| / range on one channel of two (3,H,W) YCbCr-level images;
/// the range is 219 for Y and 224 for Cb and Cr.
inline double channel_percent_diff(const Image& a, const Image& b, Channel ch) {
  detail::require_planes3(a, "channel_percent_diff");
  if (a.shape() != b.shape()) {
    throw ShapeError("channel_percent_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto k = static_cast<std::size_t>(ch);
  if (k > 2) throw InvalidArgument("unknown channel index " + std::to_string(k));
  const std::size_t n = a.size() / 3;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(a[k * n + i]) - b[k * n + i]);
  return 100.0 * s / static_cast<double>(n) / kYCbCrRange[k];
}

inline Image luma_plane(const Image& ycc) {
  detail::require_planes3(ycc, "luma_plane");
  const auto n = static_cast<std::ptrdiff_t>(ycc.size() / 3);
  return Image({height(ycc), width(ycc)}, std::vector<float>(ycc.data().begin(), ycc.data().begin() + n));
}

// ---------------------------------------------------------------------------
// Report

struct ImageMetrics {
  std::string name;
  double ssim = 0.0;
  double y_diff = 0.0;
  double cb_diff = 0.0;
  double cr_diff = 0.0;
};

struct ColumnStats {
  double mean = 0.0;
  double std = 0.0;  // population (divide by n)
};

struct MetricsReport {
  std::vector<ImageMetrics> images;
  ColumnStats ssim, y_diff, cb_diff, cr_diff;

  std::size_t count() const { return images.size(); }
};

inline ColumnStats column_stats(const std::vector<double>& v) {
  ColumnStats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / static_cast<double>(v.size()));
  return s;
}

/// Metrics of one (3,H,W) RGB output against its RGB label. SSIM is on luma.
inline ImageMetrics evaluate_pair(const Image& output_rgb, const Image& label_rgb, std::string name = {}) {
  const auto a = rgb_to_ycbcr(output_rgb), b = rgb_to_ycbcr(label_rgb);
  ImageMetrics m;
  m.name = std::move(name);
  m.ssim = ssim(luma_plane(a), luma_plane(b));
  m.y_diff = channel_percent_diff(a, b, Channel::y);
  m.cb_diff = channel_percent_diff(a, b, Channel::cb);
  m.cr_diff = channel_percent_diff(a, b, Channel::cr);
  return m;
}

inline MetricsReport summarize(std::vector<ImageMetrics> rows) {
  MetricsReport r;
  r.images = std::move(rows);
  std::vector<double> s, y, cb, cr;
  for (const auto& m : r.images) {
    s.push_back(m.ssim);
    y.push_back(m.y_diff);
    cb.push_back(m.cb_diff);
    cr.push_back(m.cr_diff);
  }
  r.ssim = column_stats(s);
  r.y_diff = column_stats(y);
  r.cb_diff = column_stats(cb);
  r.cr_diff = column_stats(cr);
  return r;
}

inline MetricsReport evaluate_report(const std::vector<Image>& outputs, const std::vector<Image>& labels,
                                     const std::vector<std::string>& names = {}) {
  if (outputs.size() != labels.size()) {
    throw InvalidArgument("evaluate_report: " + std::to_string(outputs.size()) + " outputs vs " +
                          std::to_string(labels.size()) + " labels");
  }
  if (outputs.empty()) throw InvalidArgument("evaluate_report: no image pairs");
  std::vector<ImageMetrics> rows(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i)
    rows[i] = evaluate_pair(outputs[i], labels[i], i < names.size() ? names[i] : std::to_string(i));
  return summarize(std::move(rows));
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["count"] = r.count();
  auto col = [](const ColumnStats& s) { return nlohmann::ordered_json{{"mean", s.mean}, {"std", s.std}}; };
  j["aggregate"] = {{"ssim", col(r.ssim)}, {"y_diff_percent", col(r.y_diff)}, {"cb_diff_percent", col(r.cb_diff)},
                    {"cr_diff_percent", col(r.cr_diff)}};
  j["images"] = nlohmann::ordered_json::array();
  for (const auto& m : r.images) {
    j["images"].push_back({{"name", m.name},
                           {"ssim", m.ssim},
                           {"y_diff_percent", m.y_diff},
                           {"cb_diff_percent", m.cb_diff},
                           {"cr_diff_percent", m.cr_diff}});
  }
  return j;
}

/// Aggregate table with one row per statistic, as in a results table.
inline std::string format_table(const MetricsReport& r) {
  char buf[256];
  std::string out = "Number of test images: " + std::to_string(r.count()) + "\n";
  std::snprintf(buf, sizeof buf, "%-6s %12s %18s %19s %19s\n", "", "SSIM", "Y difference (%)", "Cb difference (%)",
                "Cr difference (%)");
  out += buf;
  std::snprintf(buf, sizeof buf, "%-6s %12.4f %18.4f %19.4f %19.4f\n", "mean", r.ssim.mean, r.y_diff.mean,
                r.cb_diff.mean, r.cr_diff.mean);
  out += buf;
  std::snprintf(buf, sizeof buf, "%-6s %12.4f %18.4f %19.4f %19.4f\n", "std", r.ssim.std, r.y_diff.std, r.cb_diff.std,
                r.cr_diff.std);
  out += buf;
  return out;
}

}  // namespace vstain
