// Procedural stand-in for tissue data: grayscale scenes of overlapping
// shapes and two fixed colormaps that play the role of two stains. Each
// colormap is a smooth, strictly monotone (hence invertible) map from gray
// level to YCbCr scaled to [0,1], so the pixelwise target is exactly
// learnable by the generator.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "vstain/error.hpp"
#include "vstain/tensor.hpp"

namespace vstain {

enum class SyntheticStain { a, b };

/// YCbCr in [0,1] for gray level g in [0,1].
inline std::array<double, 3> synthetic_stain(SyntheticStain stain, double g) {
  g = std::clamp(g, 0.0, 1.0);
  if (stain == SyntheticStain::a) return {0.85 - 0.60 * g, 0.55 + 0.15 * g, 0.50 + 0.20 * g * (2.0 - g)};
  return {0.80 - 0.50 * g, 0.60 - 0.20 * g * g, 0.45 + 0.10 * g};
}

/// Inverse of the luminance channel, which is strictly decreasing in g.
inline double synthetic_gray_from_luma(SyntheticStain stain, double y) {
  return stain == SyntheticStain::a ? (0.85 - y) / 0.60 : (0.80 - y) / 0.50;
}

/// Grayscale scene in [0,1]: a smooth background ramp with 4 to 9 filled
/// ellipses and rectangles at random gray levels.
inline Tensor<float> synthetic_scene(std::size_t height, std::size_t width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<float> img({height, width});
  const double b0 = 0.1 + 0.2 * u(rng), gy = 0.2 * (u(rng) - 0.5), gx = 0.2 * (u(rng) - 0.5);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      img[y * width + x] = static_cast<float>(b0 + gy * static_cast<double>(y) / static_cast<double>(height) +
                                              gx * static_cast<double>(x) / static_cast<double>(width));
  const int shapes = 4 + static_cast<int>(u(rng) * 6.0);
  for (int s = 0; s < shapes; ++s) {
    const double cy = u(rng) * static_cast<double>(height), cx = u(rng) * static_cast<double>(width);
    const double ry = (0.08 + 0.3 * u(rng)) * static_cast<double>(height);
    const double rx = (0.08 + 0.3 * u(rng)) * static_cast<double>(width);
    const double level = u(rng);
    const bool ellipse = u(rng) < 0.6;
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = (static_cast<double>(y) - cy) / ry, dx = (static_cast<double>(x) - cx) / rx;
        const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (inside) img[y * width + x] = static_cast<float>(level);
      }
  }
  for (auto& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

/// (3,H,W) target for a (H,W) or (1,H,W) grayscale image.
inline Tensor<float> apply_synthetic_stain(const Tensor<float>& gray, SyntheticStain stain) {
  const std::size_t n = gray.size();
  const std::size_t h = gray.dim(gray.rank() - 2), w = gray.dim(gray.rank() - 1);
  Tensor<float> out({3, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = synthetic_stain(stain, gray[i]);
    for (std::size_t k = 0; k < 3; ++k) out[k * n + i] = static_cast<float>(c[k]);
  }
  return out;
}

}  // namespace vstain
