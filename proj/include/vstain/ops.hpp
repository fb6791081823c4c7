// Differentiable tensor operations used by the generator and discriminator.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vstain/autodiff.hpp"
#include "vstain/error.hpp"
#include "vstain/tensor.hpp"

namespace vstain {

/// Border handling of 3x3 convolutions. Networks use zero padding; periodic
/// padding exists so translation covariance can be tested exactly.
enum class Padding { zero, periodic };

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

inline std::ptrdiff_t wrap(std::ptrdiff_t i, std::ptrdiff_t n) {
  i %= n;
  return i < 0 ? i + n : i;
}

// cols has shape (channels*9, height*width); row (c*9 + ky*3 + kx) holds the
// input shifted by (ky-1, kx-1).
template <class T>
void im2col3x3(const T* in, std::size_t channels, std::size_t height, std::size_t width, Padding pad, T* cols) {
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = in + c * plane;
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        T* dst = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * plane;
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          std::ptrdiff_t sy = y + ky - 1;
          T* row = dst + y * w;
          if (sy < 0 || sy >= h) {
            if (pad == Padding::zero) {
              std::fill(row, row + w, T{0});
              continue;
            }
            sy = wrap(sy, h);
          }
          const T* srow = src + sy * w;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            std::ptrdiff_t sx = x + kx - 1;
            if (sx < 0 || sx >= w) {
              row[x] = pad == Padding::zero ? T{0} : srow[wrap(sx, w)];
            } else {
              row[x] = srow[sx];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im3x3(const T* cols, std::size_t channels, std::size_t height, std::size_t width, Padding pad, T* out) {
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = out + c * plane;
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        const T* src = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * plane;
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          std::ptrdiff_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) {
            if (pad == Padding::zero) continue;
            sy = wrap(sy, h);
          }
          const T* row = src + y * w;
          T* drow = dst + sy * w;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            std::ptrdiff_t sx = x + kx - 1;
            if (sx < 0 || sx >= w) {
              if (pad == Padding::zero) continue;
              sx = wrap(sx, w);
            }
            drow[sx] += row[x];
          }
        }
      }
    }
  }
}

template <class T, class F, class G>
Var<T> unary_elementwise(const Var<T>& x, const char* op, F forward, G derivative) {
  Tensor<T> out(x.shape());
  const auto& in = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out), op, {x}, [xn, derivative](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * derivative(xn->value[i], self.value[i]);
    accumulate_grad(*xn, g);
  });
}

}  // namespace detail

/// 3x3 "same" convolution (cross-correlation) with per-channel bias.
/// input (N,Cin,H,W), weight (Cout,Cin,3,3), bias (Cout) -> (N,Cout,H,W).
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, Padding pad = Padding::zero) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0);
  if (weight.dim(2) != 3 || weight.dim(3) != 3) throw ShapeError("conv2d: kernel must be 3x3, got " + shape_str(weight.shape()));
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.shape() != Shape{cout}) throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  if (h == 0 || w == 0) throw ShapeError("conv2d: empty spatial extent");

  using Mat = detail::RowMat<T>;
  const std::size_t k = cin * 9, plane = h * w;
  Tensor<T> out({n, cout, h, w});
  AlignedVector<T> cols(k * plane);
  Eigen::Map<const Mat> wm(weight.value().data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
  const T* bptr = bias.value().data().data();
  for (std::size_t b = 0; b < n; ++b) {
    detail::im2col3x3(input.value().data().data() + b * cin * plane, cin, h, w, pad, cols.data());
    Eigen::Map<const Mat> cm(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    Eigen::Map<Mat> om(out.data().data() + b * cout * plane, static_cast<Eigen::Index>(cout),
                       static_cast<Eigen::Index>(plane));
    om.noalias() = wm * cm;
    for (std::size_t co = 0; co < cout; ++co) om.row(static_cast<Eigen::Index>(co)).array() += bptr[co];
  }

  auto xn = input.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr();
  return make_result<T>(std::move(out), "conv2d", {input, weight, bias}, [=](Node<T>& self) {
    const auto ki = static_cast<Eigen::Index>(k), pi = static_cast<Eigen::Index>(plane),
               co = static_cast<Eigen::Index>(cout);
    Eigen::Map<const Mat> wmap(wn->value.data().data(), co, ki);
    AlignedVector<T> colbuf(k * plane);
    Mat dw = Mat::Zero(co, ki);
    std::vector<T> db(cout, T{0});
    Tensor<T> dx;
    if (xn->requires_grad) dx = Tensor<T>(xn->value.shape());
    for (std::size_t b = 0; b < n; ++b) {
      Eigen::Map<const Mat> g(self.grad.data().data() + b * cout * plane, co, pi);
      if (wn->requires_grad) {
        detail::im2col3x3(xn->value.data().data() + b * cin * plane, cin, h, w, pad, colbuf.data());
        Eigen::Map<const Mat> cm(colbuf.data(), ki, pi);
        dw.noalias() += g * cm.transpose();
      }
      if (bn->requires_grad) {
        for (std::size_t c = 0; c < cout; ++c) db[c] += g.row(static_cast<Eigen::Index>(c)).sum();
      }
      if (xn->requires_grad) {
        Eigen::Map<Mat> dc(colbuf.data(), ki, pi);
        dc.noalias() = wmap.transpose() * g;
        detail::col2im3x3(colbuf.data(), cin, h, w, pad, dx.data().data() + b * cin * plane);
      }
    }
    if (wn->requires_grad) accumulate_grad(*wn, Tensor<T>(wn->value.shape(), AlignedVector<T>(dw.data(), dw.data() + dw.size())));
    if (bn->requires_grad) accumulate_grad(*bn, Tensor<T>(bn->value.shape(), std::move(db)));
    if (xn->requires_grad) accumulate_grad(*xn, dx);
  });
}

/// Leaky ReLU: x for x > 0, slope * x otherwise (derivative at 0 is `slope`).
template <class T>
Var<T> lrelu(const Var<T>& x, T slope = T(0.1)) {
  return detail::unary_elementwise(
      x, "lrelu", [slope](T v) { return v > T{0} ? v : slope * v; },
      [slope](T v, T) { return v > T{0} ? T{1} : slope; });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary_elementwise(
      x, "sigmoid",
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary_elementwise(x, "square", [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

/// a * x + c, elementwise.
template <class T>
Var<T> affine(const Var<T>& x, T a, T c) {
  return detail::unary_elementwise(x, "affine", [a, c](T v) { return a * v + c; }, [a](T, T) { return a; });
}

template <class T>
Var<T> scale(const Var<T>& x, T a) {
  return affine(x, a, T{0});
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(std::move(out), "add", {a, b}, [an, bn](Node<T>& self) {
    accumulate_grad(*an, self.grad);
    accumulate_grad(*bn, self.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(std::move(out), "sub", {a, b}, [an, bn](Node<T>& self) {
    accumulate_grad(*an, self.grad);
    if (bn->requires_grad) {
      Tensor<T> g(self.grad.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
      accumulate_grad(*bn, g);
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(std::move(out), "mul", {a, b}, [an, bn](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    if (an->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * bn->value[i];
      accumulate_grad(*an, g);
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * an->value[i];
      accumulate_grad(*bn, g);
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  auto xn = x.node_ptr();
  return make_result<T>(Tensor<T>({1}, acc), "sum", {x}, [xn](Node<T>& self) {
    accumulate_grad(*xn, Tensor<T>(xn->value.shape(), self.grad[0]));
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

/// 2x2 average pooling with stride 2.
template <class T>
Var<T> avg_pool_2x2(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "avg_pool_2x2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("avg_pool_2x2: odd spatial extent " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  const auto& in = x.value();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = in.data().data() + p * h * w;
    T* dst = out.data().data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const T* a = src + 2 * y * w + 2 * xx;
        dst[y * ow + xx] = (a[0] + a[1] + a[w] + a[w + 1]) * T(0.25);
      }
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out), "avg_pool_2x2", {x}, [xn, n, c, h, w, oh, ow](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    for (std::size_t p = 0; p < n * c; ++p) {
      const T* src = self.grad.data().data() + p * oh * ow;
      T* dst = g.data().data() + p * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * T(0.25);
      }
    }
    accumulate_grad(*xn, g);
  });
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
template <class T>
Var<T> upsample_2x(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "upsample_2x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  Tensor<T> out({n, c, oh, ow});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.value().data().data() + p * h * w;
    T* dst = out.data().data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out), "upsample_2x", {x}, [xn, n, c, h, w, ow](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    for (std::size_t p = 0; p < n * c; ++p) {
      const T* src = self.grad.data().data() + p * 4 * h * w;
      T* dst = g.data().data() + p * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          const T* a = src + 2 * y * ow + 2 * xx;
          dst[y * w + xx] = a[0] + a[1] + a[ow] + a[ow + 1];
        }
      }
    }
    accumulate_grad(*xn, g);
  });
}

/// Channel concatenation; channels of `a` come first.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 4, "concat_channels");
  detail::require_rank(b.shape(), 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data().data() + i * ca * plane, ca * plane, out.data().data() + i * (ca + cb) * plane);
    std::copy_n(b.value().data().data() + i * cb * plane, cb * plane,
                out.data().data() + (i * (ca + cb) + ca) * plane);
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(std::move(out), "concat_channels", {a, b}, [=](Node<T>& self) {
    if (an->requires_grad) {
      Tensor<T> g(an->value.shape());
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(self.grad.data().data() + i * (ca + cb) * plane, ca * plane, g.data().data() + i * ca * plane);
      accumulate_grad(*an, g);
    }
    if (bn->requires_grad) {
      Tensor<T> g(bn->value.shape());
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(self.grad.data().data() + (i * (ca + cb) + ca) * plane, cb * plane,
                    g.data().data() + i * cb * plane);
      accumulate_grad(*bn, g);
    }
  });
}

/// Channels [begin, begin+count) of x.
template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x.shape(), 4, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (begin + count > c) throw ShapeError("slice_channels: range exceeds " + std::to_string(c) + " channels");
  Tensor<T> out({n, count, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().data().data() + (i * c + begin) * plane, count * plane, out.data().data() + i * count * plane);
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out), "slice_channels", {x}, [=](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(self.grad.data().data() + i * count * plane, count * plane, g.data().data() + (i * c + begin) * plane);
    accumulate_grad(*xn, g);
  });
}

/// Appends zero channels so x has `target_channels` channels.
template <class T>
Var<T> zero_pad_channels(const Var<T>& x, std::size_t target_channels) {
  detail::require_rank(x.shape(), 4, "zero_pad_channels");
  const std::size_t c = x.dim(1);
  if (target_channels < c) {
    throw InvalidArgument("zero_pad_channels: target " + std::to_string(target_channels) + " < input channels " +
                          std::to_string(c));
  }
  if (target_channels == c) return x;
  const std::size_t n = x.dim(0), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, target_channels, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().data().data() + i * c * plane, c * plane, out.data().data() + i * target_channels * plane);
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out), "zero_pad_channels", {x}, [=](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(self.grad.data().data() + i * target_channels * plane, c * plane, g.data().data() + i * c * plane);
    accumulate_grad(*xn, g);
  });
}

/// Mean over the full spatial extent: (N,C,H,W) -> (N,C).
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc{0};
    const T* src = x.value().data().data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    out[p] = acc / static_cast<T>(plane);
  }
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out), "global_avg_pool", {x}, [=](Node<T>& self) {
    Tensor<T> g(xn->value.shape());
    for (std::size_t p = 0; p < n * c; ++p) {
      const T v = self.grad[p] / static_cast<T>(plane);
      std::fill_n(g.data().data() + p * plane, plane, v);
    }
    accumulate_grad(*xn, g);
  });
}

/// Affine map x (N,Din) -> x * weight^T + bias, weight (Dout,Din), bias (Dout).
template <class T>
Var<T> fully_connected(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::require_rank(x.shape(), 2, "fully_connected input");
  detail::require_rank(weight.shape(), 2, "fully_connected weight");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw ShapeError("fully_connected: input width " + std::to_string(din) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.shape() != Shape{dout}) throw ShapeError("fully_connected: bias shape " + shape_str(bias.shape()));
  using Mat = detail::RowMat<T>;
  const auto ni = static_cast<Eigen::Index>(n), di = static_cast<Eigen::Index>(din), oi = static_cast<Eigen::Index>(dout);
  Tensor<T> out({n, dout});
  Eigen::Map<const Mat> xm(x.value().data().data(), ni, di);
  Eigen::Map<const Mat> wm(weight.value().data().data(), oi, di);
  Eigen::Map<Mat> om(out.data().data(), ni, oi);
  om.noalias() = xm * wm.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dout; ++j) out[i * dout + j] += bias.value()[j];
  auto xn = x.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr();
  return make_result<T>(std::move(out), "fully_connected", {x, weight, bias}, [=](Node<T>& self) {
    Eigen::Map<const Mat> g(self.grad.data().data(), ni, oi);
    if (xn->requires_grad) {
      Tensor<T> dx(xn->value.shape());
      Eigen::Map<Mat>(dx.data().data(), ni, di).noalias() = g * Eigen::Map<const Mat>(wn->value.data().data(), oi, di);
      accumulate_grad(*xn, dx);
    }
    if (wn->requires_grad) {
      Tensor<T> dw(wn->value.shape());
      Eigen::Map<Mat>(dw.data().data(), oi, di).noalias() =
          g.transpose() * Eigen::Map<const Mat>(xn->value.data().data(), ni, di);
      accumulate_grad(*wn, dw);
    }
    if (bn->requires_grad) {
      Tensor<T> db(bn->value.shape());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dout; ++j) db[j] += self.grad[i * dout + j];
      accumulate_grad(*bn, db);
    }
  });
}

}  // namespace vstain
