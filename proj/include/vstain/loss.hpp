// Adversarial objective, total-variation regularizer, and weight calibration.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vstain/autodiff.hpp"
#include "vstain/error.hpp"
#include "vstain/ops.hpp"

namespace vstain {

/// Smoothing added under the TV square root so the gradient exists at zero.
inline constexpr double kTvEpsilon = 1e-8;

struct LossWeights {
  double lambda = 0.0;  // TV weight
  double alpha = 0.0;   // adversarial weight

  void validate() const {
    if (!(lambda > 0.0) || !(alpha > 0.0) || !std::isfinite(lambda) || !std::isfinite(alpha)) {
      throw InvalidArgument("loss weights must be strictly positive and finite");
    }
  }
};

/// Mean of squared differences over all elements.
template <class T>
Var<T> mse_loss(const Var<T>& output, const Var<T>& label) {
  if (output.shape() != label.shape()) {
    throw ShapeError("mse_loss: " + shape_str(output.shape()) + " vs " + shape_str(label.shape()));
  }
  return mean(square(sub(output, label)));
}

/// Sum over batch, channels and interior pixels (p < H-1, q < W-1) of
/// sqrt((z[p+1,q]-z[p,q])^2 + (z[p,q+1]-z[p,q])^2 + eps).
template <class T>
Var<T> total_variation(const Var<T>& z, double eps = kTvEpsilon) {
  detail::require_rank(z.shape(), 4, "total_variation");
  const std::size_t planes = z.dim(0) * z.dim(1), h = z.dim(2), w = z.dim(3);
  if (h < 2 || w < 2) throw ShapeError("total_variation needs H, W >= 2, got " + shape_str(z.shape()));
  const T e = static_cast<T>(eps);
  const auto& v = z.value();
  T acc{0};
  for (std::size_t p = 0; p < planes; ++p) {
    const T* a = v.data().data() + p * h * w;
    for (std::size_t y = 0; y + 1 < h; ++y) {
      for (std::size_t x = 0; x + 1 < w; ++x) {
        const T dv = a[(y + 1) * w + x] - a[y * w + x];
        const T dh = a[y * w + x + 1] - a[y * w + x];
        acc += std::sqrt(dv * dv + dh * dh + e);
      }
    }
  }
  auto zn = z.node_ptr();
  return make_result<T>(Tensor<T>({1}, acc), "total_variation", {z}, [zn, planes, h, w, e](Node<T>& self) {
    Tensor<T> g(zn->value.shape());
    const T up = self.grad[0];
    for (std::size_t p = 0; p < planes; ++p) {
      const T* a = zn->value.data().data() + p * h * w;
      T* d = g.data().data() + p * h * w;
      for (std::size_t y = 0; y + 1 < h; ++y) {
        for (std::size_t x = 0; x + 1 < w; ++x) {
          const std::size_t i = y * w + x;
          const T dv = a[i + w] - a[i];
          const T dh = a[i + 1] - a[i];
          const T r = up / std::sqrt(dv * dv + dh * dh + e);
          d[i + w] += r * dv;
          d[i + 1] += r * dh;
          d[i] -= r * (dv + dh);
        }
      }
    }
    accumulate_grad(*zn, g);
  });
}

template <class T>
struct GeneratorLoss {
  Var<T> total;
  double mse = 0.0;
  double tv_term = 0.0;   // lambda * TV per batch item
  double adv_term = 0.0;  // alpha * mean (1 - D)^2
};

/// mse + lambda * tv + alpha * mean((1 - d)^2) from already-computed terms.
template <class T>
Var<T> combine_generator_loss(const Var<T>& mse, const Var<T>& tv, const Var<T>& d_on_output, const LossWeights& w) {
  auto adv = mean(square(affine(d_on_output, T{-1}, T{1})));
  return add(add(mse, scale(tv, static_cast<T>(w.lambda))), scale(adv, static_cast<T>(w.alpha)));
}

/// Generator objective on a batch. TV is averaged over batch items so the
/// weights calibrated per item apply at any batch size.
template <class T>
GeneratorLoss<T> generator_loss(const Var<T>& output, const Var<T>& label, const Var<T>& d_on_output,
                                 const LossWeights& w) {
  const auto n = static_cast<T>(output.dim(0));
  auto mse = mse_loss(output, label);
  auto tv = scale(total_variation(output), T{1} / n);
  GeneratorLoss<T> out;
  out.mse = static_cast<double>(mse.item());
  out.tv_term = w.lambda * static_cast<double>(tv.item());
  double adv = 0.0;
  for (T d : d_on_output.value().data()) adv += static_cast<double>((1 - d) * (1 - d));
  out.adv_term = w.alpha * adv / static_cast<double>(d_on_output.size());
  out.total = combine_generator_loss(mse, tv, d_on_output, w);
  return out;
}

/// mean(D(output)^2) + mean((1 - D(label))^2).
template <class T>
Var<T> discriminator_loss(const Var<T>& d_on_output, const Var<T>& d_on_label) {
  return add(mean(square(d_on_output)), mean(square(affine(d_on_label, T{-1}, T{1}))));
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct CalibrationTargets {
  double tv_fraction_of_mse = 0.02;
  double adv_fraction_of_total = 0.20;
};

/// Chooses lambda so median(lambda*TV)/median(MSE) hits the TV target, then
/// alpha so median(alpha*adv)/median(generator loss) hits the adversarial
/// target. Inputs are per-item term values.
inline LossWeights calibrate_from_terms(const std::vector<double>& mse, const std::vector<double>& tv,
                                        const std::vector<double>& adv, const CalibrationTargets& targets = {}) {
  if (mse.empty()) throw InvalidArgument("calibration needs at least one sample");
  if (mse.size() != tv.size() || mse.size() != adv.size()) throw InvalidArgument("calibration term lists differ in length");
  const double med_mse = median(mse), med_tv = median(tv), med_adv = median(adv);
  if (!(med_mse > 0.0) || !(med_tv > 0.0) || !(med_adv > 0.0)) {
    throw NumericError("calibration needs positive median MSE, TV and adversarial terms");
  }
  LossWeights w;
  w.lambda = targets.tv_fraction_of_mse * med_mse / med_tv;

  // ratio(alpha) = alpha*med(adv) / med(mse + lambda*tv + alpha*adv) is increasing in alpha.
  auto ratio = [&](double alpha) {
    std::vector<double> total(mse.size());
    for (std::size_t i = 0; i < mse.size(); ++i) total[i] = mse[i] + w.lambda * tv[i] + alpha * adv[i];
    return alpha * med_adv / median(total);
  };
  double lo = -30.0, hi = 30.0;  // log10 bounds
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ratio(std::pow(10.0, mid)) < targets.adv_fraction_of_total ? lo : hi) = mid;
  }
  w.alpha = std::pow(10.0, 0.5 * (lo + hi));
  w.validate();
  return w;
}

}  // namespace vstain
