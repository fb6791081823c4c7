// Registration of auto-fluorescence tiles to bright-field slides: FOV search
// by normalized correlation, corner features with MSAC similarity fitting,
// pyramid block matching for the elastic residual, and score-based cleaning.
#pragma once

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <mutex>
#include <numbers>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "vstain/error.hpp"
#include "vstain/image.hpp"
#include "vstain/parallel.hpp"

namespace vstain {

// ---------------------------------------------------------------------------
// FOV localization

struct FovMatch {
  std::size_t x = 0;
  std::size_t y = 0;
  double score = 0.0;
};

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex mu;
  return mu;
}

/// Tile minus its mean, in double, with its L2 norm.
struct CenteredTile {
  std::vector<double> v;
  double norm = 0.0;
};

inline CenteredTile center_tile(const Image& tile) {
  CenteredTile c;
  c.v.assign(tile.data().begin(), tile.data().end());
  double mean = 0.0;
  for (double x : c.v) mean += x;
  mean /= static_cast<double>(c.v.size());
  for (double& x : c.v) {
    x -= mean;
    c.norm += x * x;
  }
  c.norm = std::sqrt(c.norm);
  return c;
}

/// Exact normalized correlation of the tile with the slide window at (x, y).
inline double window_ncc(const CenteredTile& t, std::size_t th, std::size_t tw, const Image& slide, std::size_t x,
                         std::size_t y) {
  const std::size_t sw = slide.dim(1);
  const double n = static_cast<double>(th * tw);
  double mean = 0.0;
  for (std::size_t i = 0; i < th; ++i)
    for (std::size_t j = 0; j < tw; ++j) mean += slide[(y + i) * sw + x + j];
  mean /= n;
  double num = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < th; ++i)
    for (std::size_t j = 0; j < tw; ++j) {
      const double d = slide[(y + i) * sw + x + j] - mean;
      num += t.v[i * tw + j] * d;
      ss += d * d;
    }
  if (t.norm <= 0.0 || ss <= 1e-12 * n) return 0.0;
  return std::clamp(num / (t.norm * std::sqrt(ss)), -1.0, 1.0);
}

}  // namespace detail

/// Normalized cross-correlation of `tile` against every valid placement in
/// `slide`; returns the best top-left offset and its score. Scores are first
/// computed for all offsets by FFT, then the `refine` best are recomputed
/// exactly and the exact maximum wins (ties go to the first in raster order).
inline FovMatch fov_match(const Image& tile, const Image& slide, std::size_t refine = 16) {
  detail::require_gray(tile, "fov_match");
  detail::require_gray(slide, "fov_match");
  const std::size_t th = tile.dim(0), tw = tile.dim(1), sh = slide.dim(0), sw = slide.dim(1);
  if (th > sh || tw > sw) {
    throw ShapeError("fov_match: tile " + shape_str(tile.shape()) + " is larger than slide " + shape_str(slide.shape()));
  }
  const auto t = detail::center_tile(tile);
  const std::size_t oh = sh - th + 1, ow = sw - tw + 1;

  // Correlation numerator sum_ij t'(i,j) s(y+i, x+j) for every offset.
  const std::size_t fw = sw / 2 + 1;
  std::vector<double> approx(oh * ow, 0.0);
  {
    auto* sin = fftw_alloc_real(sh * sw);
    auto* tin = fftw_alloc_real(sh * sw);
    auto* sf = fftw_alloc_complex(sh * fw);
    auto* tf = fftw_alloc_complex(sh * fw);
    fftw_plan fs, ft, back;
    {
      std::lock_guard lock(detail::fftw_planner_mutex());
      fs = fftw_plan_dft_r2c_2d(static_cast<int>(sh), static_cast<int>(sw), sin, sf, FFTW_ESTIMATE);
      ft = fftw_plan_dft_r2c_2d(static_cast<int>(sh), static_cast<int>(sw), tin, tf, FFTW_ESTIMATE);
      back = fftw_plan_dft_c2r_2d(static_cast<int>(sh), static_cast<int>(sw), sf, sin, FFTW_ESTIMATE);
    }
    for (std::size_t i = 0; i < sh * sw; ++i) sin[i] = slide[i];
    std::fill(tin, tin + sh * sw, 0.0);
    for (std::size_t i = 0; i < th; ++i)
      for (std::size_t j = 0; j < tw; ++j) tin[i * sw + j] = t.v[i * tw + j];
    fftw_execute(fs);
    fftw_execute(ft);
    for (std::size_t k = 0; k < sh * fw; ++k) {
      // S * conj(T)
      const double re = sf[k][0] * tf[k][0] + sf[k][1] * tf[k][1];
      const double im = sf[k][1] * tf[k][0] - sf[k][0] * tf[k][1];
      sf[k][0] = re;
      sf[k][1] = im;
    }
    fftw_execute(back);
    const double scale = 1.0 / static_cast<double>(sh * sw);

    // Window sums of s and s^2 from integral images.
    std::vector<double> i1((sh + 1) * (sw + 1), 0.0), i2((sh + 1) * (sw + 1), 0.0);
    for (std::size_t y = 0; y < sh; ++y)
      for (std::size_t x = 0; x < sw; ++x) {
        const double v = slide[y * sw + x];
        i1[(y + 1) * (sw + 1) + x + 1] = v + i1[y * (sw + 1) + x + 1] + i1[(y + 1) * (sw + 1) + x] - i1[y * (sw + 1) + x];
        i2[(y + 1) * (sw + 1) + x + 1] =
            v * v + i2[y * (sw + 1) + x + 1] + i2[(y + 1) * (sw + 1) + x] - i2[y * (sw + 1) + x];
      }
    auto box = [&](const std::vector<double>& ii, std::size_t x, std::size_t y) {
      return ii[(y + th) * (sw + 1) + x + tw] - ii[y * (sw + 1) + x + tw] - ii[(y + th) * (sw + 1) + x] +
             ii[y * (sw + 1) + x];
    };
    const double n = static_cast<double>(th * tw);
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const double s1 = box(i1, x, y), s2 = box(i2, x, y);
        const double var = s2 - s1 * s1 / n;
        const double den = t.norm * std::sqrt(std::max(var, 0.0));
        approx[y * ow + x] = den > 0.0 ? sin[y * sw + x] * scale / den : 0.0;
      }

    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fs);
    fftw_destroy_plan(ft);
    fftw_destroy_plan(back);
    fftw_free(sin);
    fftw_free(tin);
    fftw_free(sf);
    fftw_free(tf);
  }

  std::vector<std::size_t> order(oh * ow);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t k = std::min(std::max<std::size_t>(refine, 1), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return approx[a] > approx[b] || (approx[a] == approx[b] && a < b); });
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  FovMatch best{0, 0, -std::numeric_limits<double>::infinity()};
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t x = order[r] % ow, y = order[r] / ow;
    const double s = detail::window_ncc(t, th, tw, slide, x, y);
    if (s > best.score) best = {x, y, s};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Similarity transforms and features

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// p' = scale * R(angle) * p + (tx, ty); angle in degrees.
struct SimilarityTransform {
  double angle_deg = 0.0;
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;

  static SimilarityTransform identity() { return {}; }

  /// Rotation by `angle_deg` and scaling about `center`.
  static SimilarityTransform about(Point2 center, double angle_deg, double scale = 1.0) {
    SimilarityTransform r{angle_deg, scale, 0.0, 0.0};
    const Point2 c = r.apply(center);
    r.tx = center.x - c.x;
    r.ty = center.y - c.y;
    return r;
  }

  std::complex<double> linear() const { return std::polar(scale, angle_deg * std::numbers::pi / 180.0); }

  Point2 apply(Point2 p) const {
    const auto z = linear() * std::complex<double>(p.x, p.y) + std::complex<double>(tx, ty);
    return {z.real(), z.imag()};
  }

  SimilarityTransform inverse() const {
    if (!(scale > 0.0)) throw DegenerateGeometry("similarity transform with non-positive scale");
    const auto inv = 1.0 / linear();
    const auto t = -inv * std::complex<double>(tx, ty);
    return {-angle_deg, 1.0 / scale, t.real(), t.imag()};
  }

  /// (this ∘ other)(p) = this(other(p)).
  SimilarityTransform compose(const SimilarityTransform& other) const {
    const auto t = linear() * std::complex<double>(other.tx, other.ty) + std::complex<double>(tx, ty);
    return {angle_deg + other.angle_deg, scale * other.scale, t.real(), t.imag()};
  }

  static SimilarityTransform from_linear(std::complex<double> c, std::complex<double> t) {
    return {std::arg(c) * 180.0 / std::numbers::pi, std::abs(c), t.real(), t.imag()};
  }
};

/// A correspondence: `a` in the moving image, `b` in the fixed image.
struct Match {
  Point2 a;
  Point2 b;
  double score = 0.0;
};

struct FeatureOptions {
  std::size_t levels = 3;
  std::size_t max_per_level = 400;
  double ratio = 0.8;           // nearest / second-nearest descriptor distance
  double min_correlation = 0.5;
  double harris_k = 0.04;
  double relative_threshold = 1e-3;  // of the level's max response
};

inline constexpr std::size_t kDescriptorSide = 15;

struct Keypoint {
  double x = 0.0;  // level-0 pixel coordinates
  double y = 0.0;
  std::size_t level = 0;
  double response = 0.0;
  std::array<float, kDescriptorSide * kDescriptorSide> descriptor{};
};

namespace detail {

inline Image harris_response(const Image& img, double k) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  Image ixx({h, w}), iyy({h, w}), ixy({h, w});
  auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return static_cast<double>(img[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]);
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto sy = static_cast<std::ptrdiff_t>(y), sx = static_cast<std::ptrdiff_t>(x);
      // Sobel
      const double gx = (px(sy - 1, sx + 1) + 2 * px(sy, sx + 1) + px(sy + 1, sx + 1)) -
                        (px(sy - 1, sx - 1) + 2 * px(sy, sx - 1) + px(sy + 1, sx - 1));
      const double gy = (px(sy + 1, sx - 1) + 2 * px(sy + 1, sx) + px(sy + 1, sx + 1)) -
                        (px(sy - 1, sx - 1) + 2 * px(sy - 1, sx) + px(sy - 1, sx + 1));
      ixx[y * w + x] = static_cast<float>(gx * gx / 64.0);
      iyy[y * w + x] = static_cast<float>(gy * gy / 64.0);
      ixy[y * w + x] = static_cast<float>(gx * gy / 64.0);
    }
  ixx = gaussian_blur(ixx, 1.5);
  iyy = gaussian_blur(iyy, 1.5);
  ixy = gaussian_blur(ixy, 1.5);
  Image r({h, w});
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double a = ixx[i], b = iyy[i], c = ixy[i];
    r[i] = static_cast<float>(a * b - c * c - k * (a + b) * (a + b));
  }
  return r;
}

/// Zero-mean, unit-norm patch centered at integer (x, y); false if flat.
inline bool describe(const Image& img, std::size_t x, std::size_t y, std::array<float, kDescriptorSide * kDescriptorSide>& d) {
  constexpr std::size_t half = kDescriptorSide / 2;
  const std::size_t w = img.dim(1);
  double mean = 0.0;
  for (std::size_t i = 0; i < kDescriptorSide; ++i)
    for (std::size_t j = 0; j < kDescriptorSide; ++j) mean += img[(y - half + i) * w + x - half + j];
  mean /= static_cast<double>(d.size());
  double norm = 0.0;
  std::array<double, kDescriptorSide * kDescriptorSide> tmp{};
  for (std::size_t i = 0; i < kDescriptorSide; ++i)
    for (std::size_t j = 0; j < kDescriptorSide; ++j) {
      const double v = img[(y - half + i) * w + x - half + j] - mean;
      tmp[i * kDescriptorSide + j] = v;
      norm += v * v;
    }
  norm = std::sqrt(norm);
  if (norm < 1e-9) return false;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(tmp[i] / norm);
  return true;
}

}  // namespace detail

/// Harris corners over a 2x area pyramid, strongest first per level.
inline std::vector<Keypoint> detect_features(const Image& img, const FeatureOptions& opt = {}) {
  detail::require_gray(img, "detect_features");
  constexpr std::size_t margin = kDescriptorSide / 2 + 1;
  std::vector<Keypoint> out;
  Image level = img;
  for (std::size_t l = 0; l < opt.levels; ++l) {
    if (l > 0) {
      if (level.dim(0) < 4 * margin || level.dim(1) < 4 * margin) break;
      level = downsample_area(level, 2.0);
    }
    const std::size_t h = level.dim(0), w = level.dim(1);
    if (h <= 2 * margin || w <= 2 * margin) break;
    const Image r = detail::harris_response(level, opt.harris_k);
    double rmax = 0.0;
    for (float v : r.data()) rmax = std::max(rmax, static_cast<double>(v));
    if (rmax <= 0.0) continue;
    const double floor = opt.relative_threshold * rmax;
    std::vector<Keypoint> found;
    for (std::size_t y = margin; y + margin < h; ++y)
      for (std::size_t x = margin; x + margin < w; ++x) {
        const float v = r[y * w + x];
        if (v <= floor) continue;
        bool peak = true;
        for (std::size_t dy = 0; dy < 3 && peak; ++dy)
          for (std::size_t dx = 0; dx < 3 && peak; ++dx) {
            if (dy == 1 && dx == 1) continue;
            const float u = r[(y + dy - 1) * w + x + dx - 1];
            // Plateaus keep only their first pixel in raster order.
            peak = (dy * 3 + dx < 4) ? v > u : v >= u;
          }
        if (!peak) continue;
        Keypoint kp;
        const double f = std::ldexp(1.0, static_cast<int>(l));
        kp.x = (static_cast<double>(x) + 0.5) * f - 0.5;
        kp.y = (static_cast<double>(y) + 0.5) * f - 0.5;
        kp.level = l;
        kp.response = v;
        if (detail::describe(level, x, y, kp.descriptor)) found.push_back(kp);
      }
    std::stable_sort(found.begin(), found.end(), [](const Keypoint& a, const Keypoint& b) { return a.response > b.response; });
    if (found.size() > opt.max_per_level) found.resize(opt.max_per_level);
    out.insert(out.end(), found.begin(), found.end());
  }
  return out;
}

/// Mutual-best descriptor matches between same-level keypoints that pass the
/// ratio test. Throws InsufficientFeatures below 3 matches.
inline std::vector<Match> match_features(const std::vector<Keypoint>& ka, const std::vector<Keypoint>& kb,
                                         const FeatureOptions& opt = {}) {
  std::vector<Match> out;
  for (std::size_t l = 0; l < opt.levels; ++l) {
    std::vector<const Keypoint*> a, b;
    for (const auto& k : ka)
      if (k.level == l) a.push_back(&k);
    for (const auto& k : kb)
      if (k.level == l) b.push_back(&k);
    if (a.empty() || b.empty()) continue;
    std::vector<double> corr(a.size() * b.size());
    parallel_for(a.size(), [&](std::size_t i) {
      for (std::size_t j = 0; j < b.size(); ++j) {
        double s = 0.0;
        for (std::size_t q = 0; q < a[i]->descriptor.size(); ++q) s += a[i]->descriptor[q] * b[j]->descriptor[q];
        corr[i * b.size() + j] = s;
      }
    });
    auto dist = [](double c) { return std::sqrt(std::max(0.0, 2.0 - 2.0 * c)); };
    for (std::size_t i = 0; i < a.size(); ++i) {
      std::size_t best = 0;
      double c1 = -2.0, c2 = -2.0;
      for (std::size_t j = 0; j < b.size(); ++j) {
        const double c = corr[i * b.size() + j];
        if (c > c1) {
          c2 = c1;
          c1 = c;
          best = j;
        } else if (c > c2) {
          c2 = c;
        }
      }
      if (c1 < opt.min_correlation) continue;
      if (b.size() > 1 && !(dist(c1) < opt.ratio * dist(c2))) continue;
      bool mutual = true;
      for (std::size_t i2 = 0; i2 < a.size() && mutual; ++i2)
        if (i2 != i && corr[i2 * b.size() + best] > c1) mutual = false;
      if (!mutual) continue;
      out.push_back({{a[i]->x, a[i]->y}, {b[best]->x, b[best]->y}, c1});
    }
  }
  if (out.size() < 3) {
    throw InsufficientFeatures("feature matching found " + std::to_string(out.size()) + " matches; need at least 3");
  }
  return out;
}

inline std::vector<Match> detect_and_match_features(const Image& a, const Image& b, const FeatureOptions& opt = {}) {
  return match_features(detect_features(a, opt), detect_features(b, opt), opt);
}

// ---------------------------------------------------------------------------
// MSAC

struct MsacOptions {
  double threshold = 2.0;  // residual cap, px
  std::size_t max_iterations = 2000;
  double confidence = 0.99;
  std::uint64_t seed = 0;
  double min_scale = 0.5;
  double max_scale = 2.0;
};

struct MsacResult {
  SimilarityTransform transform;
  std::size_t inliers = 0;
  std::size_t iterations = 0;
};

namespace detail {

inline double residual2(const SimilarityTransform& t, const Match& m) {
  const Point2 p = t.apply(m.a);
  return (p.x - m.b.x) * (p.x - m.b.x) + (p.y - m.b.y) * (p.y - m.b.y);
}

/// Least-squares similarity over the given matches.
inline SimilarityTransform fit_similarity(const std::vector<Match>& ms, const std::vector<std::size_t>& idx) {
  std::complex<double> ca, cb;
  for (auto i : idx) {
    ca += std::complex<double>(ms[i].a.x, ms[i].a.y);
    cb += std::complex<double>(ms[i].b.x, ms[i].b.y);
  }
  ca /= static_cast<double>(idx.size());
  cb /= static_cast<double>(idx.size());
  std::complex<double> num;
  double den = 0.0;
  for (auto i : idx) {
    const auto a = std::complex<double>(ms[i].a.x, ms[i].a.y) - ca;
    const auto b = std::complex<double>(ms[i].b.x, ms[i].b.y) - cb;
    num += std::conj(a) * b;
    den += std::norm(a);
  }
  if (den <= 0.0) throw DegenerateGeometry("inlier points are coincident");
  const auto c = num / den;
  return SimilarityTransform::from_linear(c, cb - c * ca);
}

}  // namespace detail

/// Robust similarity b ≈ T(a). Matches are sorted into a canonical order
/// before seeded sampling, so the result does not depend on input order.
inline MsacResult estimate_transform_msac(std::vector<Match> ms, const MsacOptions& opt = {}) {
  if (ms.size() < 3) throw DegenerateGeometry("MSAC needs at least 3 matches, got " + std::to_string(ms.size()));
  std::sort(ms.begin(), ms.end(), [](const Match& p, const Match& q) {
    return std::tie(p.a.x, p.a.y, p.b.x, p.b.y) < std::tie(q.a.x, q.a.y, q.b.x, q.b.y);
  });
  const std::size_t n = ms.size();
  const double tau2 = opt.threshold * opt.threshold;
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> first(0, n - 1), second(0, n - 2);

  auto score = [&](const SimilarityTransform& t, std::size_t& inliers) {
    double cost = 0.0;
    inliers = 0;
    for (const auto& m : ms) {
      const double r2 = detail::residual2(t, m);
      if (r2 < tau2) ++inliers;
      cost += std::min(r2, tau2);
    }
    return cost;
  };

  MsacResult res;
  double best_cost = std::numeric_limits<double>::infinity();
  std::size_t needed = opt.max_iterations;
  std::size_t it = 0;
  for (; it < needed; ++it) {
    const std::size_t i = first(rng);
    std::size_t j = second(rng);
    if (j >= i) ++j;
    const std::complex<double> ai(ms[i].a.x, ms[i].a.y), aj(ms[j].a.x, ms[j].a.y);
    const std::complex<double> bi(ms[i].b.x, ms[i].b.y), bj(ms[j].b.x, ms[j].b.y);
    if (std::abs(ai - aj) < 1e-9) continue;
    const auto c = (bi - bj) / (ai - aj);
    if (std::abs(c) < opt.min_scale || std::abs(c) > opt.max_scale) continue;
    const auto h = SimilarityTransform::from_linear(c, bi - c * ai);
    std::size_t inl = 0;
    const double cost = score(h, inl);
    if (cost < best_cost) {
      best_cost = cost;
      res.transform = h;
      res.inliers = inl;
      const double w = static_cast<double>(inl) / static_cast<double>(n);
      if (w >= 1.0) {
        needed = std::min(needed, it + 1);
      } else if (w > 0.0) {
        const double k = std::log(1.0 - opt.confidence) / std::log(1.0 - w * w);
        if (std::isfinite(k)) needed = std::min<std::size_t>(opt.max_iterations, static_cast<std::size_t>(std::ceil(k)));
      }
    }
  }
  res.iterations = it;
  if (res.inliers < 3) {
    throw DegenerateGeometry("no similarity hypothesis has at least 3 inliers (best " + std::to_string(res.inliers) + ")");
  }
  // Refit on inliers until the inlier set stops growing.
  for (int pass = 0; pass < 5; ++pass) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < n; ++k)
      if (detail::residual2(res.transform, ms[k]) < tau2) idx.push_back(k);
    if (idx.size() < 3) break;
    const auto refit = detail::fit_similarity(ms, idx);
    std::size_t inl = 0;
    score(refit, inl);
    if (inl < idx.size()) break;
    res.transform = refit;
    const bool stable = inl == res.inliers && pass > 0;
    res.inliers = inl;
    if (stable) break;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Resampling

/// out(p) = img(T(p)) for every plane, bilinear with edge clamping.
inline Image warp_similarity(const Image& img, const SimilarityTransform& t) {
  const std::size_t h = height(img), w = width(img), planes = img.size() / (h * w);
  Image out(img.shape());
  parallel_for(h, [&](std::size_t y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Point2 p = t.apply({static_cast<double>(x), static_cast<double>(y)});
      for (std::size_t c = 0; c < planes; ++c) out[(c * h + y) * w + x] = static_cast<float>(sample_bilinear(img, p.x, p.y, c));
    }
  });
  return out;
}

inline constexpr std::size_t kGlobalCrop = 50;

/// Resamples under `t` and drops 50 px on every side.
inline Image apply_global_and_crop(const Image& img, const SimilarityTransform& t) {
  if (img.rank() < 2 || height(img) < 2 * kGlobalCrop + 1 || width(img) < 2 * kGlobalCrop + 1) {
    throw ShapeError("apply_global_and_crop needs at least 101 px per axis, got " + shape_str(img.shape()));
  }
  return crop(warp_similarity(img, t), kGlobalCrop, kGlobalCrop, width(img) - 2 * kGlobalCrop,
              height(img) - 2 * kGlobalCrop);
}

/// Node displacements on a regular grid with bilinear interpolation between
/// nodes; node (i, j) sits at pixel (i*spacing, j*spacing).
struct DisplacementField {
  std::size_t spacing = 16;
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::vector<double> dx;
  std::vector<double> dy;

  static DisplacementField zeros(std::size_t h, std::size_t w, std::size_t spacing) {
    if (spacing == 0) throw InvalidArgument("displacement field spacing must be positive");
    DisplacementField f;
    f.spacing = spacing;
    // Enough nodes that the last one reaches the far edge.
    f.nx = (std::max<std::size_t>(w, 1) + spacing - 2) / spacing + 1;
    f.ny = (std::max<std::size_t>(h, 1) + spacing - 2) / spacing + 1;
    f.dx.assign(f.nx * f.ny, 0.0);
    f.dy.assign(f.nx * f.ny, 0.0);
    return f;
  }

  Point2 node(std::size_t i, std::size_t j) const {
    return {static_cast<double>(i * spacing), static_cast<double>(j * spacing)};
  }

  Point2 at(double x, double y) const {
    const double gx = std::clamp(x / static_cast<double>(spacing), 0.0, static_cast<double>(nx - 1));
    const double gy = std::clamp(y / static_cast<double>(spacing), 0.0, static_cast<double>(ny - 1));
    const auto i0 = static_cast<std::size_t>(gx), j0 = static_cast<std::size_t>(gy);
    const std::size_t i1 = std::min(i0 + 1, nx - 1), j1 = std::min(j0 + 1, ny - 1);
    const double fx = gx - static_cast<double>(i0), fy = gy - static_cast<double>(j0);
    auto lerp = [&](const std::vector<double>& v) {
      const double top = v[j0 * nx + i0] * (1 - fx) + v[j0 * nx + i1] * fx;
      const double bot = v[j1 * nx + i0] * (1 - fx) + v[j1 * nx + i1] * fx;
      return top * (1 - fy) + bot * fy;
    };
    return {lerp(dx), lerp(dy)};
  }

  bool finite() const {
    for (std::size_t k = 0; k < dx.size(); ++k)
      if (!std::isfinite(dx[k]) || !std::isfinite(dy[k])) return false;
    return true;
  }

  /// Largest absolute node component.
  double max_component() const {
    double m = 0.0;
    for (std::size_t k = 0; k < dx.size(); ++k) m = std::max({m, std::abs(dx[k]), std::abs(dy[k])});
    return m;
  }

  /// Node-wise fixed point v(q) = -u(q + v(q)), so that warping by `inverse()`
  /// undoes warping by this field.
  DisplacementField inverse(int iterations = 20) const {
    DisplacementField v = *this;
    for (std::size_t k = 0; k < dx.size(); ++k) {
      v.dx[k] = -dx[k];
      v.dy[k] = -dy[k];
    }
    for (int it = 0; it < iterations; ++it)
      for (std::size_t j = 0; j < ny; ++j)
        for (std::size_t i = 0; i < nx; ++i) {
          const auto q = node(i, j);
          const std::size_t k = j * nx + i;
          const auto u = at(q.x + v.dx[k], q.y + v.dy[k]);
          v.dx[k] = -u.x;
          v.dy[k] = -u.y;
        }
    return v;
  }
};

/// Backward warp: out(p) = img(p + u(p)) on every plane, edge-clamped.
inline Image warp_with_field(const Image& img, const DisplacementField& f) {
  const std::size_t h = height(img), w = width(img), planes = img.size() / (h * w);
  Image out(img.shape());
  parallel_for(h, [&](std::size_t y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto u = f.at(static_cast<double>(x), static_cast<double>(y));
      for (std::size_t c = 0; c < planes; ++c)
        out[(c * h + y) * w + x] = static_cast<float>(sample_bilinear(img, x + u.x, y + u.y, c));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elastic block matching

struct ElasticOptions {
  std::vector<std::size_t> blocks{256, 128, 64, 32};
  int search = 8;
  double min_correlation = 0.2;
};

namespace detail {

/// NCC of the input block [x0,x1)x[y0,y1) against the target block shifted by
/// (ox, oy), over the part of the window where both lie inside the image.
inline double block_ncc(const Image& in, const Image& tg, std::ptrdiff_t x0, std::ptrdiff_t y0, std::ptrdiff_t x1,
                        std::ptrdiff_t y1, std::ptrdiff_t ox, std::ptrdiff_t oy, std::size_t min_pixels) {
  const auto h = static_cast<std::ptrdiff_t>(in.dim(0)), w = static_cast<std::ptrdiff_t>(in.dim(1));
  const std::ptrdiff_t ax0 = std::max({x0, -ox, std::ptrdiff_t{0}}), ax1 = std::min({x1, w - ox, w});
  const std::ptrdiff_t ay0 = std::max({y0, -oy, std::ptrdiff_t{0}}), ay1 = std::min({y1, h - oy, h});
  if (ax1 <= ax0 || ay1 <= ay0) return -2.0;
  const auto n = static_cast<std::size_t>((ax1 - ax0) * (ay1 - ay0));
  if (n < min_pixels) return -2.0;
  double si = 0, st = 0, sii = 0, stt = 0, sit = 0;
  for (std::ptrdiff_t y = ay0; y < ay1; ++y) {
    const float* pi = in.data().data() + y * w;
    const float* pt = tg.data().data() + (y + oy) * w + ox;
    for (std::ptrdiff_t x = ax0; x < ax1; ++x) {
      const double a = pi[x], b = pt[x];
      si += a;
      st += b;
      sii += a * a;
      stt += b * b;
      sit += a * b;
    }
  }
  const double dn = static_cast<double>(n);
  const double vi = sii - si * si / dn, vt = stt - st * st / dn;
  if (vi <= 1e-9 * dn || vt <= 1e-9 * dn) return 0.0;
  return (sit - si * st / dn) / std::sqrt(vi * vt);
}

inline double parabolic_offset(double sm, double s0, double sp) {
  const double den = sm - 2.0 * s0 + sp;
  if (den >= 0.0) return 0.0;
  return std::clamp(0.5 * (sm - sp) / den, -0.5, 0.5);
}

/// 3x3 median over the available neighbours, per component.
inline void median_smooth(DisplacementField& f) {
  for (auto* comp : {&f.dx, &f.dy}) {
    const auto src = *comp;
    for (std::size_t j = 0; j < f.ny; ++j)
      for (std::size_t i = 0; i < f.nx; ++i) {
        std::vector<double> v;
        for (std::size_t jj = j > 0 ? j - 1 : 0; jj <= std::min(j + 1, f.ny - 1); ++jj)
          for (std::size_t ii = i > 0 ? i - 1 : 0; ii <= std::min(i + 1, f.nx - 1); ++ii) v.push_back(src[jj * f.nx + ii]);
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
        (*comp)[j * f.nx + i] = v[v.size() / 2];
      }
  }
}

}  // namespace detail

/// Coarse-to-fine block matching. The returned field u satisfies
/// input(p) ≈ target(p + u(p)), so warp_with_field(target, u) aligns the
/// target to the input. Node spacing is half the block size at each level.
inline DisplacementField elastic_register(const Image& input, const Image& target, const ElasticOptions& opt = {}) {
  detail::require_gray(input, "elastic_register");
  detail::require_gray(target, "elastic_register");
  if (input.shape() != target.shape()) {
    throw ShapeError("elastic_register: " + shape_str(input.shape()) + " vs " + shape_str(target.shape()));
  }
  if (opt.blocks.empty() || opt.search < 0) throw InvalidArgument("elastic_register: empty block schedule");
  const std::size_t h = input.dim(0), w = input.dim(1);
  const int r = opt.search;
  const auto side = static_cast<std::size_t>(2 * r + 1);
  DisplacementField prev;
  bool have_prev = false;
  for (std::size_t block : opt.blocks) {
    if (block < 2) throw InvalidArgument("elastic_register: block size must be >= 2");
    auto f = DisplacementField::zeros(h, w, block / 2);
    const auto half = static_cast<std::ptrdiff_t>(block / 2);
    parallel_for(f.nx * f.ny, [&](std::size_t k) {
      const std::size_t i = k % f.nx, j = k / f.nx;
      const auto c = f.node(i, j);
      const Point2 d0 = have_prev ? prev.at(c.x, c.y) : Point2{};
      const auto rx = static_cast<std::ptrdiff_t>(std::lround(d0.x)), ry = static_cast<std::ptrdiff_t>(std::lround(d0.y));
      const auto cx = static_cast<std::ptrdiff_t>(c.x), cy = static_cast<std::ptrdiff_t>(c.y);
      std::vector<double> s(side * side);
      std::size_t arg = 0;
      for (int oy = -r; oy <= r; ++oy)
        for (int ox = -r; ox <= r; ++ox) {
          const std::size_t q = static_cast<std::size_t>(oy + r) * side + static_cast<std::size_t>(ox + r);
          s[q] = detail::block_ncc(input, target, cx - half, cy - half, cx + half, cy + half, rx + ox, ry + oy,
                                   block * block / 8);
          if (s[q] > s[arg]) arg = q;
        }
      double ux = d0.x, uy = d0.y;
      if (s[arg] >= opt.min_correlation) {
        const auto ax = static_cast<int>(arg % side), ay = static_cast<int>(arg / side);
        double sx = 0.0, sy = 0.0;
        // A perfect correlation is an exact integer shift; the parabola would
        // only add the bias of an asymmetric peak.
        const bool exact = s[arg] > 1.0 - 1e-9;
        if (!exact && ax > 0 && ax < 2 * r) sx = detail::parabolic_offset(s[arg - 1], s[arg], s[arg + 1]);
        if (!exact && ay > 0 && ay < 2 * r) sy = detail::parabolic_offset(s[arg - side], s[arg], s[arg + side]);
        const double ex = static_cast<double>(rx + ax - r) + sx, ey = static_cast<double>(ry + ay - r) + sy;
        ux = d0.x + std::clamp(ex - d0.x, -static_cast<double>(r), static_cast<double>(r));
        uy = d0.y + std::clamp(ey - d0.y, -static_cast<double>(r), static_cast<double>(r));
      }
      f.dx[k] = ux;
      f.dy[k] = uy;
    });
    detail::median_smooth(f);
    prev = std::move(f);
    have_prev = true;
  }
  return prev;
}

// ---------------------------------------------------------------------------
// Cleaning

inline constexpr double kDefaultCleanThreshold = 0.7;

/// Alignment score of a pair: NCC between the normalized input and the
/// inverted target luma. `target` is (3,H,W) YCbCr in [0,1].
inline double pair_score(const Image& input, const Image& target) {
  const std::size_t h = height(target), w = width(target);
  if (target.rank() != 3 || target.dim(0) != 3 || input.size() != h * w) {
    throw ShapeError("pair_score: input " + shape_str(input.shape()) + " vs target " + shape_str(target.shape()));
  }
  std::vector<float> inv(h * w);
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0f - target[i];
  return normalized_correlation(input.data(), inv);
}

struct CleaningItem {
  double score = 0.0;
  bool accepted = true;
  std::string reason;  // set when rejected
};

struct CleaningRound {
  double threshold = 0.0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;  // by this round
};

/// Rejects accepted items whose score is below `threshold`. Rejections are
/// final: an item is never re-accepted.
inline CleaningRound clean_round(std::vector<CleaningItem>& items, double threshold) {
  if (!(threshold >= -1.0 && threshold <= 1.0)) {
    throw InvalidArgument("cleaning threshold must be in [-1, 1], got " + std::to_string(threshold));
  }
  CleaningRound r{threshold, 0, 0};
  for (auto& it : items) {
    if (!it.accepted) continue;
    if (it.score < threshold) {
      it.accepted = false;
      char buf[96];
      std::snprintf(buf, sizeof buf, "score %.4f below threshold %.4f", it.score, threshold);
      it.reason = buf;
      ++r.rejected;
    } else {
      ++r.accepted;
    }
  }
  return r;
}

/// Round 0 uses the stored scores; each later round first re-scores the
/// still-accepted items with `rescore(index)`.
template <class Rescore>
std::vector<CleaningRound> clean_dataset(std::vector<CleaningItem>& items, double threshold, std::size_t rounds,
                                         Rescore&& rescore) {
  std::vector<CleaningRound> log;
  log.push_back(clean_round(items, threshold));
  for (std::size_t k = 1; k < rounds; ++k) {
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].accepted) items[i].score = rescore(i);
    log.push_back(clean_round(items, threshold));
  }
  return log;
}

inline std::vector<CleaningRound> clean_dataset(std::vector<CleaningItem>& items, double threshold) {
  return clean_dataset(items, threshold, 1, [](std::size_t) { return 0.0; });
}

}  // namespace vstain
