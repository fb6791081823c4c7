#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vstain/metrics.hpp"

using namespace vstain;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed, double lo = 0.0, double hi = 255.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Image img({h, w});
  for (auto& v : img.data()) v = static_cast<float>(u(rng));
  return img;
}

/// Direct-formula SSIM: explicit 2D Gaussian weights over every valid window.
double ssim_oracle(const Image& a, const Image& b) {
  const int k = 11;
  const double sigma = 1.5, c1 = (0.01 * 255) * (0.01 * 255), c2 = (0.03 * 255) * (0.03 * 255);
  double wsum = 0.0;
  double wts[11][11];
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) wsum += wts[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
  const int h = static_cast<int>(a.dim(0)), w = static_cast<int>(a.dim(1));
  double total = 0.0;
  int count = 0;
  for (int y = 0; y + k <= h; ++y)
    for (int x = 0; x + k <= w; ++x) {
      double mu_a = 0, mu_b = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          mu_a += wts[i][j] / wsum * a[(y + i) * w + x + j];
          mu_b += wts[i][j] / wsum * b[(y + i) * w + x + j];
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double da = a[(y + i) * w + x + j] - mu_a, db = b[(y + i) * w + x + j] - mu_b;
          va += wts[i][j] / wsum * da * da;
          vb += wts[i][j] / wsum * db * db;
          cov += wts[i][j] / wsum * da * db;
        }
      total += (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

Image rgb_fill(std::size_t h, std::size_t w, float r, float g, float b) {
  Image img({3, h, w});
  const std::size_t n = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    img[i] = r;
    img[n + i] = g;
    img[2 * n + i] = b;
  }
  return img;
}

}  // namespace

TEST(Color, Bt601Endpoints) {
  const auto white = rgb_to_ycbcr(255, 255, 255);
  EXPECT_NEAR(white[0], 235.0, 1e-9);
  EXPECT_NEAR(white[1], 128.0, 1e-9);
  EXPECT_NEAR(white[2], 128.0, 1e-9);
  const auto black = rgb_to_ycbcr(0, 0, 0);
  EXPECT_NEAR(black[0], 16.0, 1e-12);
  EXPECT_NEAR(black[1], 128.0, 1e-12);
  EXPECT_NEAR(black[2], 128.0, 1e-12);
  // Pure red hits the top of Cr.
  EXPECT_NEAR(rgb_to_ycbcr(255, 0, 0)[2], 240.0, 1e-9);
  EXPECT_NEAR(rgb_to_ycbcr(0, 0, 255)[1], 240.0, 1e-9);
}

TEST(Color, InverseRecoversRgbOnStrideSweep) {
  int worst = 0;
  for (int r = 0; r < 256; r += 7)
    for (int g = 0; g < 256; g += 7)
      for (int b = 0; b < 256; b += 7) {
        const auto y = rgb_to_ycbcr(r, g, b);
        const auto back = ycbcr_to_rgb(y[0], y[1], y[2]);
        worst = std::max({worst, std::abs(quantize8(back[0]) - r), std::abs(quantize8(back[1]) - g),
                          std::abs(quantize8(back[2]) - b)});
      }
  EXPECT_LE(worst, 1);
  const Eigen::Matrix3d eye = bt601_forward() * bt601_inverse();
  EXPECT_TRUE(eye.isIdentity(1e-12));
}

TEST(Color, PlanarConversionAndUnitScaling) {
  auto rgb = rgb_fill(4, 5, 255, 255, 255);
  auto ycc = rgb_to_ycbcr(rgb);
  auto unit = ycbcr_to_unit(ycc);
  EXPECT_NEAR(unit[0], 1.0, 1e-6);
  EXPECT_NEAR(unit[20], (128.0 - 16.0) / 224.0, 1e-6);
  EXPECT_EQ(ycbcr_to_rgb(unit_to_ycbcr(unit)), rgb);
  EXPECT_THROW(rgb_to_ycbcr(Image({2, 4, 4})), ShapeError);
}

TEST(Ssim, IdenticalImagesScoreOne) {
  auto a = random_image(40, 37, 1);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, MatchesDirectFormulaOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto a = random_image(32, 32, 10 + s), b = random_image(32, 32, 20 + s);
    // Correlate b with a so the score is not near zero.
    for (std::size_t i = 0; i < a.size(); ++i) b[i] = 0.6f * a[i] + 0.4f * b[i];
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-9) << s;
  }
}

TEST(Ssim, SymmetricAndPenalizesShift) {
  auto a = random_image(32, 48, 3), b = random_image(32, 48, 4);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  const double s = ssim(a, b);
  EXPECT_GE(s, -1.0);
  EXPECT_LE(s, 1.0);
  for (float c : {-20.0f, 0.5f, 3.0f}) {
    auto shifted = a;
    for (auto& v : shifted.data()) v += c;
    EXPECT_LT(ssim(a, shifted), 1.0) << c;
  }
}

TEST(Ssim, TooSmallImageThrows) {
  EXPECT_THROW(ssim(Image({10, 40}), Image({10, 40})), ShapeError);
  EXPECT_THROW(ssim(Image({20, 20}), Image({20, 21})), ShapeError);
}

TEST(PercentDiff, UniformLumaShift) {
  auto a = rgb_to_ycbcr(rgb_fill(8, 8, 90, 120, 60));
  auto b = a;
  for (std::size_t i = 0; i < 64; ++i) b[i] += 21.9f;
  // Float storage of the shifted level limits this to ~1e-6.
  EXPECT_NEAR(channel_percent_diff(a, b, Channel::y), 10.0, 1e-5);
  EXPECT_EQ(channel_percent_diff(a, b, Channel::cb), 0.0);
  EXPECT_EQ(channel_percent_diff(a, b, Channel::y), channel_percent_diff(b, a, Channel::y));
  for (std::size_t i = 64; i < 128; ++i) b[i] += 11.2f;
  EXPECT_NEAR(channel_percent_diff(a, b, Channel::cb), 5.0, 1e-5);
}

TEST(PercentDiff, ChannelParsing) {
  EXPECT_EQ(parse_channel("Y"), Channel::y);
  EXPECT_EQ(parse_channel("Cb"), Channel::cb);
  EXPECT_EQ(parse_channel("cr"), Channel::cr);
  EXPECT_THROW(parse_channel("G"), InvalidArgument);
  EXPECT_THROW(channel_percent_diff(Image({3, 2, 2}), Image({3, 2, 2}), static_cast<Channel>(5)), InvalidArgument);
}

TEST(Report, SingleIdenticalPair) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> u(0, 255);
  Image rgb({3, 24, 24});
  for (auto& v : rgb.data()) v = static_cast<float>(u(rng));
  auto r = evaluate_report({rgb}, {rgb}, {"a"});
  EXPECT_EQ(r.count(), 1u);
  EXPECT_NEAR(r.ssim.mean, 1.0, 1e-12);
  EXPECT_EQ(r.ssim.std, 0.0);
  EXPECT_EQ(r.y_diff.mean, 0.0);
  EXPECT_EQ(r.cb_diff.mean, 0.0);
  EXPECT_EQ(r.cr_diff.mean, 0.0);
}

TEST(Report, PopulationStd) {
  std::vector<ImageMetrics> rows(2);
  rows[0].ssim = 0.8;
  rows[1].ssim = 0.9;
  rows[0].y_diff = 2.0;
  rows[1].y_diff = 6.0;
  auto r = summarize(rows);
  EXPECT_NEAR(r.ssim.mean, 0.85, 1e-15);
  EXPECT_NEAR(r.ssim.std, 0.05, 1e-15);
  EXPECT_EQ(r.y_diff.std, 2.0);
}

TEST(Report, OutputsAndErrors) {
  auto a = rgb_fill(16, 16, 200, 100, 50), b = rgb_fill(16, 16, 200, 100, 50);
  EXPECT_THROW(evaluate_report({a, b}, {a}), InvalidArgument);
  EXPECT_THROW(evaluate_report({}, {}), InvalidArgument);
  auto r = evaluate_report({a, b}, {a, b}, {"x", "y"});
  const auto j = to_json(r);
  EXPECT_EQ(j["count"], 2);
  EXPECT_EQ(j["images"].size(), 2u);
  EXPECT_EQ(j["images"][1]["name"], "y");
  const auto table = format_table(r);
  for (const char* col : {"SSIM", "Y difference (%)", "Cb difference (%)", "Cr difference (%)", "mean", "std",
                          "Number of test images: 2"})
    EXPECT_NE(table.find(col), std::string::npos) << col;
}
