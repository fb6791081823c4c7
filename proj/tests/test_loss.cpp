#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "vstain/loss.hpp"

using namespace vstain;
using vstain::testing::random_tensor;

namespace {

Var<double> var(const Shape& s, std::vector<double> v) { return Var<double>(Tensor<double>(s, std::move(v))); }

// Plain double loop over interior indices, no shared code with the library.
double tv_oracle(const Tensor<double>& z) {
  double acc = 0.0;
  for (std::size_t n = 0; n < z.dim(0); ++n)
    for (std::size_t c = 0; c < z.dim(1); ++c)
      for (std::size_t p = 0; p + 1 < z.dim(2); ++p)
        for (std::size_t q = 0; q + 1 < z.dim(3); ++q) {
          const double dv = z.at(n, c, p + 1, q) - z.at(n, c, p, q);
          const double dh = z.at(n, c, p, q + 1) - z.at(n, c, p, q);
          acc += std::sqrt(dv * dv + dh * dh + 1e-8);
        }
  return acc;
}

}  // namespace

TEST(Mse, HandExamples) {
  auto a = Var<double>(random_tensor({2, 3, 4, 4}, 1));
  EXPECT_EQ(mse_loss(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(mse_loss(var({2}, {0, 1}), var({2}, {1, 1})).item(), 0.5);
  EXPECT_THROW(mse_loss(var({2}, {0, 1}), var({3}, {1, 1, 1})), ShapeError);
}

TEST(Mse, MatchesDirectSum) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto a = random_tensor({2, 3, 7, 5}, s), b = random_tensor({2, 3, 7, 5}, s + 100);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    const double expect = acc / static_cast<double>(a.size());
    EXPECT_NEAR(mse_loss(Var<double>(a), Var<double>(b)).item(), expect, 1e-6 * expect);
  }
}

TEST(TotalVariation, ColumnRamp) {
  auto z = var({1, 1, 3, 3}, {0, 1, 2, 0, 1, 2, 0, 1, 2});
  EXPECT_NEAR(total_variation(z).item(), 4.0, 1e-7);
}

TEST(TotalVariation, ConstantImageNearZero) {
  Var<double> z(Tensor<double>({1, 1, 4, 4}, 0.7));
  EXPECT_LE(total_variation(z).item(), 1e-3);
  EXPECT_THROW(total_variation(Var<double>(Tensor<double>({1, 1, 1, 4}))), ShapeError);
}

TEST(TotalVariation, PositiveHomogeneity) {
  auto z = random_tensor({1, 3, 16, 16}, 5);
  const double base = total_variation(Var<double>(z)).item();
  for (double c : {-3.0, 0.5, 2.0}) {
    auto zc = z;
    for (auto& v : zc.data()) v *= c;
    EXPECT_NEAR(total_variation(Var<double>(zc)).item(), std::abs(c) * base, 1e-4 * base);
  }
}

TEST(TotalVariation, MatchesBruteForce) {
  std::uint64_t seed = 0;
  for (Shape s : {Shape{1, 1, 2, 2}, Shape{2, 3, 5, 9}, Shape{1, 3, 64, 64}, Shape{3, 1, 64, 17}}) {
    auto z = random_tensor(s, seed++);
    const double expect = tv_oracle(z);
    EXPECT_NEAR(total_variation(Var<double>(z)).item(), expect, 1e-6 * expect);
  }
}

TEST(GeneratorLossTest, HandExamples) {
  // MSE = 1 and TV = 0 via a constant 2x2 output with zero-weighted TV.
  auto out = var({1, 1, 2, 2}, {1, 1, 1, 1});
  auto lab = var({1, 1, 2, 2}, {0, 0, 0, 0});
  auto r = generator_loss(out, lab, var({1, 1}, {0.5}), LossWeights{0.0, 1.0});
  EXPECT_DOUBLE_EQ(r.total.item(), 1.25);
  EXPECT_DOUBLE_EQ(r.mse, 1.0);
  EXPECT_DOUBLE_EQ(r.adv_term, 0.25);

  auto perfect = generator_loss(lab, lab, var({1, 1}, {1.0}), LossWeights{0.0, 1.0});
  EXPECT_EQ(perfect.total.item(), 0.0);
}

TEST(GeneratorLossTest, ZeroWeightsReduceToMse) {
  auto out = Var<double>(random_tensor({2, 3, 8, 8}, 1)), lab = Var<double>(random_tensor({2, 3, 8, 8}, 2));
  auto d = var({2, 1}, {0.3, 0.6});
  EXPECT_EQ(generator_loss(out, lab, d, LossWeights{0.0, 0.0}).total.item(), mse_loss(out, lab).item());
}

TEST(GeneratorLossTest, TermsReportedPerItem) {
  auto out = random_tensor({3, 3, 8, 8}, 3);
  auto lab = random_tensor({3, 3, 8, 8}, 4);
  const LossWeights w{0.01, 0.5};
  auto r = generator_loss(Var<double>(out), Var<double>(lab), var({3, 1}, {0.2, 0.4, 0.9}), w);
  EXPECT_NEAR(r.tv_term, w.lambda * tv_oracle(out) / 3.0, 1e-9);
  const double adv = (0.64 + 0.36 + 0.01) / 3.0;
  EXPECT_NEAR(r.adv_term, w.alpha * adv, 1e-12);
  EXPECT_NEAR(r.total.item(), r.mse + r.tv_term + r.adv_term, 1e-12);
}

TEST(GeneratorLossTest, DecreasingInDiscriminatorScore) {
  auto out = Var<double>(random_tensor({1, 3, 4, 4}, 1)), lab = Var<double>(random_tensor({1, 3, 4, 4}, 2));
  double prev = INFINITY;
  for (double d = 0.05; d < 1.0; d += 0.05) {
    const double l = generator_loss(out, lab, var({1, 1}, {d}), LossWeights{0.01, 0.3}).total.item();
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(DiscriminatorLossTest, HandExamplesAndBounds) {
  EXPECT_EQ(discriminator_loss(var({1, 1}, {0.0}), var({1, 1}, {1.0})).item(), 0.0);
  EXPECT_DOUBLE_EQ(discriminator_loss(var({1, 1}, {0.5}), var({1, 1}, {0.5})).item(), 0.5);
  for (double a = 0.01; a < 1.0; a += 0.07)
    for (double b = 0.01; b < 1.0; b += 0.07) {
      const double l = discriminator_loss(var({1, 1}, {a}), var({1, 1}, {b})).item();
      EXPECT_GE(l, 0.0);
      EXPECT_LE(l, 2.0);
      EXPECT_LT(l, discriminator_loss(var({1, 1}, {a + 0.005}), var({1, 1}, {b})).item());
      EXPECT_GT(l, discriminator_loss(var({1, 1}, {a}), var({1, 1}, {b + 0.005})).item());
    }
}

TEST(Calibration, SolvesTvRatio) {
  auto w = calibrate_from_terms({0.04}, {200.0}, {0.25});
  EXPECT_NEAR(w.lambda, 4e-6, 1e-18);
  // alpha*0.25 / (0.04 + 0.0008 + alpha*0.25) = 0.2
  const double alpha = 0.2 * 0.0408 / (0.8 * 0.25);
  EXPECT_NEAR(w.alpha, alpha, 1e-9 * alpha);
  EXPECT_GT(w.lambda, 0.0);
  EXPECT_GT(w.alpha, 0.0);
}

TEST(Calibration, MediansAreRobustToOutliers) {
  auto w = calibrate_from_terms({0.04, 0.04, 9.0}, {200.0, 200.0, 1.0}, {0.25, 0.25, 0.25});
  EXPECT_NEAR(w.lambda, 0.02 * 0.04 / 200.0, 1e-15);
}

TEST(Calibration, RatiosHitTargetsOnImageSample) {
  const std::size_t n = 9;
  auto out = random_tensor({n, 3, 16, 16}, 7, 0.0, 1.0);
  auto lab = random_tensor({n, 3, 16, 16}, 8, 0.0, 1.0);
  auto terms = [&](double gain) {
    std::vector<double> mse, tv, adv;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor<double> o({1, 3, 16, 16}), l({1, 3, 16, 16});
      for (std::size_t k = 0; k < o.size(); ++k) {
        o[k] = gain * out[i * o.size() + k];
        l[k] = gain * lab[i * o.size() + k];
      }
      mse.push_back(mse_loss(Var<double>(o), Var<double>(l)).item());
      tv.push_back(total_variation(Var<double>(o)).item());
      adv.push_back(0.25 + 0.001 * static_cast<double>(i));
    }
    return std::tuple{mse, tv, adv};
  };
  auto check = [](const auto& t, const LossWeights& w) {
    const auto& [mse, tv, adv] = t;
    std::vector<double> ltv, lad, total;
    for (std::size_t i = 0; i < mse.size(); ++i) {
      ltv.push_back(w.lambda * tv[i]);
      lad.push_back(w.alpha * adv[i]);
      total.push_back(mse[i] + ltv.back() + lad.back());
    }
    EXPECT_NEAR(median(ltv) / median(mse), 0.02, 1e-9);
    EXPECT_NEAR(median(lad) / median(total), 0.20, 1e-6);
  };
  auto t1 = terms(1.0), t2 = terms(2.0);
  auto w1 = std::apply([](auto&... v) { return calibrate_from_terms(v...); }, t1);
  auto w2 = std::apply([](auto&... v) { return calibrate_from_terms(v...); }, t2);
  check(t1, w1);
  check(t2, w2);
  // MSE scales by 4 and TV by 2, so lambda must double (up to the TV epsilon).
  EXPECT_NEAR(w2.lambda / w1.lambda, 2.0, 1e-6);
}

TEST(Calibration, Errors) {
  EXPECT_THROW(calibrate_from_terms({}, {}, {}), InvalidArgument);
  EXPECT_THROW(calibrate_from_terms({0.1}, {1.0, 2.0}, {0.2}), InvalidArgument);
  EXPECT_THROW(calibrate_from_terms({0.0}, {1.0}, {0.2}), NumericError);
  EXPECT_THROW((LossWeights{0.0, 1.0}.validate()), InvalidArgument);
  EXPECT_THROW((LossWeights{1.0, NAN}.validate()), InvalidArgument);
}
