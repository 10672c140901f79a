#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "surfseg/tensor.hpp"

namespace surfseg {

enum class Padding { same_zero, valid };
enum class Mode { train, eval };

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // [out, in, 3, 3]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;         // [channels], trainable
  Tensor<T> beta;          // [channels], trainable
  Tensor<T> running_mean;  // [channels], updated by train-mode forward
  Tensor<T> running_var;   // [channels]
  T eps = T(1e-5);
  T momentum = T(0.1);
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct ConvBnUnit {
  Conv2dParams<T> conv;
  BatchNormParams<T> bn;
};

// He-normal initialization; biases zero.
template <typename T>
Conv2dParams<T> make_conv3x3(int in_channels, int out_channels, SplitMix64& rng) {
  if (in_channels < 1 || out_channels < 1) {
    throw std::invalid_argument("make_conv3x3: channel counts must be >= 1");
  }
  const T stddev = std::sqrt(T(2) / static_cast<T>(in_channels * 9));
  Conv2dParams<T> p;
  p.weight = Tensor<T>::random_normal({out_channels, in_channels, 3, 3}, rng, T(0), stddev);
  p.bias = Tensor<T>::zeros({out_channels});
  p.weight.set_requires_grad();
  p.bias.set_requires_grad();
  return p;
}

template <typename T>
BatchNormParams<T> make_batch_norm(int channels) {
  if (channels < 1) throw std::invalid_argument("make_batch_norm: channels must be >= 1");
  BatchNormParams<T> p;
  p.gamma = Tensor<T>::full({channels}, T(1));
  p.beta = Tensor<T>::zeros({channels});
  p.running_mean = Tensor<T>::zeros({channels});
  p.running_var = Tensor<T>::full({channels}, T(1));
  p.gamma.set_requires_grad();
  p.beta.set_requires_grad();
  return p;
}

template <typename T>
LinearParams<T> make_linear(int in_features, int out_features, SplitMix64& rng) {
  if (in_features < 1 || out_features < 1) {
    throw std::invalid_argument("make_linear: feature counts must be >= 1");
  }
  const T stddev = std::sqrt(T(2) / static_cast<T>(in_features));
  LinearParams<T> p;
  p.weight = Tensor<T>::random_normal({out_features, in_features}, rng, T(0), stddev);
  p.bias = Tensor<T>::zeros({out_features});
  p.weight.set_requires_grad();
  p.bias.set_requires_grad();
  return p;
}

namespace detail {

template <typename T>
inline void require_featuremap(const Tensor<T>& x, const char* op) {
  if (!x.defined() || x.rank() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected a [batch, channels, h, w] tensor");
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Conv2dParams<T>& p,
                  Padding padding = Padding::same_zero) {
  detail::require_featuremap(x, "conv3x3");
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (p.weight.rank() != 4 || p.weight.dim(2) != 3 || p.weight.dim(3) != 3) {
    throw std::invalid_argument("conv3x3: kernel must be [out, in, 3, 3]");
  }
  const int Cout = p.weight.dim(0);
  if (p.weight.dim(1) != Cin) {
    throw std::invalid_argument("conv3x3: input channel count does not match kernel");
  }
  if (p.bias.size() != static_cast<std::size_t>(Cout)) {
    throw std::invalid_argument("conv3x3: bias size does not match output channels");
  }
  const int off = padding == Padding::same_zero ? -1 : 0;
  const int Ho = padding == Padding::same_zero ? H : H - 2;
  const int Wo = padding == Padding::same_zero ? W : W - 2;
  if (Ho < 1 || Wo < 1) {
    throw std::invalid_argument("conv3x3: valid padding needs spatial dims >= 3");
  }

  const std::vector<T>& xv = x.values();
  const std::vector<T>& wv = p.weight.values();
  const std::vector<T>& bv = p.bias.values();
  std::vector<T> ov(static_cast<std::size_t>(B) * Cout * Ho * Wo);

  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < Cout; ++oc) {
      T* out_plane = ov.data() + (static_cast<std::size_t>(b) * Cout + oc) * Ho * Wo;
      for (int i = 0; i < Ho * Wo; ++i) out_plane[i] = bv[oc];
      for (int ic = 0; ic < Cin; ++ic) {
        const T* in_plane = xv.data() + (static_cast<std::size_t>(b) * Cin + ic) * H * W;
        for (int ky = 0; ky < 3; ++ky) {
          const int y_lo = std::max(0, -ky - off);
          const int y_hi = std::min(Ho, H - ky - off);
          for (int kx = 0; kx < 3; ++kx) {
            const T w = wv[((static_cast<std::size_t>(oc) * Cin + ic) * 3 + ky) * 3 + kx];
            const int x_lo = std::max(0, -kx - off);
            const int x_hi = std::min(Wo, W - kx - off);
            for (int yo = y_lo; yo < y_hi; ++yo) {
              const T* in_row = in_plane + (yo + ky + off) * W + kx + off;
              T* out_row = out_plane + yo * Wo;
              for (int xo = x_lo; xo < x_hi; ++xo) {
                out_row[xo] += w * in_row[xo];
              }
            }
          }
        }
      }
    }
  }

  Tensor<T> out = Tensor<T>::from_values({B, Cout, Ho, Wo}, std::move(ov));
  detail::check_finite(out.values(), "conv3x3");
  auto xn = x.handle(), wn = p.weight.handle(), bn = p.bias.handle(), on = out.handle();
  detail::record_if_tracked({x, p.weight, p.bias}, out,
                            [xn, wn, bn, on, B, Cin, Cout, H, W, Ho, Wo, off]() {
    const std::vector<T>& g = on->grad;
    if (bn->requires_grad) {
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
          const T* gp = g.data() + (static_cast<std::size_t>(b) * Cout + oc) * Ho * Wo;
          T acc = T(0);
          for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
          bn->grad[oc] += acc;
        }
      }
    }
    if (wn->requires_grad) {
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
          const T* gp = g.data() + (static_cast<std::size_t>(b) * Cout + oc) * Ho * Wo;
          for (int ic = 0; ic < Cin; ++ic) {
            const T* in_plane =
                xn->value.data() + (static_cast<std::size_t>(b) * Cin + ic) * H * W;
            for (int ky = 0; ky < 3; ++ky) {
              const int y_lo = std::max(0, -ky - off);
              const int y_hi = std::min(Ho, H - ky - off);
              for (int kx = 0; kx < 3; ++kx) {
                const int x_lo = std::max(0, -kx - off);
                const int x_hi = std::min(Wo, W - kx - off);
                T acc = T(0);
                for (int yo = y_lo; yo < y_hi; ++yo) {
                  const T* in_row = in_plane + (yo + ky + off) * W + kx + off;
                  const T* g_row = gp + yo * Wo;
                  for (int xo = x_lo; xo < x_hi; ++xo) {
                    acc += g_row[xo] * in_row[xo];
                  }
                }
                wn->grad[((static_cast<std::size_t>(oc) * Cin + ic) * 3 + ky) * 3 + kx] += acc;
              }
            }
          }
        }
      }
    }
    if (xn->requires_grad) {
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
          const T* gp = g.data() + (static_cast<std::size_t>(b) * Cout + oc) * Ho * Wo;
          for (int ic = 0; ic < Cin; ++ic) {
            T* gx_plane = xn->grad.data() + (static_cast<std::size_t>(b) * Cin + ic) * H * W;
            for (int ky = 0; ky < 3; ++ky) {
              const int y_lo = std::max(0, -ky - off);
              const int y_hi = std::min(Ho, H - ky - off);
              for (int kx = 0; kx < 3; ++kx) {
                const T w =
                    wn->value[((static_cast<std::size_t>(oc) * Cin + ic) * 3 + ky) * 3 + kx];
                const int x_lo = std::max(0, -kx - off);
                const int x_hi = std::min(Wo, W - kx - off);
                for (int yo = y_lo; yo < y_hi; ++yo) {
                  T* gx_row = gx_plane + (yo + ky + off) * W + kx + off;
                  const T* g_row = gp + yo * Wo;
                  for (int xo = x_lo; xo < x_hi; ++xo) {
                    gx_row[xo] += w * g_row[xo];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

// Per-channel statistics over (batch, h, w) in train mode; running statistics
// in eval mode. Running buffers are updated in place when `update_running`.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode,
                     bool update_running = true) {
  detail::require_featuremap(x, "batch_norm");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t n_per_c = static_cast<std::size_t>(B) * plane;
  if (p.gamma.size() != static_cast<std::size_t>(C) ||
      p.beta.size() != static_cast<std::size_t>(C) ||
      p.running_mean.size() != static_cast<std::size_t>(C) ||
      p.running_var.size() != static_cast<std::size_t>(C)) {
    throw std::invalid_argument("batch_norm: parameter size does not match channels");
  }
  if (!(p.eps > T(0))) throw std::invalid_argument("batch_norm: eps must be > 0");
  if (mode == Mode::train && n_per_c < 2) {
    throw std::invalid_argument("batch_norm: train mode needs >= 2 elements per channel");
  }

  const std::vector<T>& xv = x.values();
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(C);
  std::vector<T> ov(xv.size());

  if (mode == Mode::train) {
    std::vector<T> mu(C), var(C);
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int b = 0; b < B; ++b) {
        const T* px = xv.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += px[i];
      }
      mu[c] = acc / static_cast<T>(n_per_c);
      T vacc = T(0);
      for (int b = 0; b < B; ++b) {
        const T* px = xv.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = px[i] - mu[c];
          vacc += d * d;
        }
      }
      var[c] = vacc / static_cast<T>(n_per_c);
      inv_std[c] = T(1) / std::sqrt(var[c] + p.eps);
    }
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        const T g = p.gamma.values()[c], be = p.beta.values()[c];
        for (std::size_t i = 0; i < plane; ++i) {
          const T xh = (xv[base + i] - mu[c]) * inv_std[c];
          xhat[base + i] = xh;
          ov[base + i] = g * xh + be;
        }
      }
    }
    if (update_running) {
      for (int c = 0; c < C; ++c) {
        p.running_mean.values()[c] =
            (T(1) - p.momentum) * p.running_mean.values()[c] + p.momentum * mu[c];
        p.running_var.values()[c] =
            (T(1) - p.momentum) * p.running_var.values()[c] + p.momentum * var[c];
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      inv_std[c] = T(1) / std::sqrt(p.running_var.values()[c] + p.eps);
    }
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        const T rm = p.running_mean.values()[c];
        const T g = p.gamma.values()[c], be = p.beta.values()[c];
        for (std::size_t i = 0; i < plane; ++i) {
          const T xh = (xv[base + i] - rm) * inv_std[c];
          xhat[base + i] = xh;
          ov[base + i] = g * xh + be;
        }
      }
    }
  }

  Tensor<T> out = Tensor<T>::from_values(x.shape(), std::move(ov));
  detail::check_finite(out.values(), "batch_norm");
  auto xn = x.handle(), gn = p.gamma.handle(), bn = p.beta.handle(), on = out.handle();
  const bool train = mode == Mode::train;
  detail::record_if_tracked(
      {x, p.gamma, p.beta}, out,
      [xn, gn, bn, on, B, C, plane, n_per_c, xhat = std::move(xhat),
       inv_std = std::move(inv_std), train]() {
        const std::vector<T>& g = on->grad;
        for (int c = 0; c < C; ++c) {
          T s1 = T(0), s2 = T(0);
          for (int b = 0; b < B; ++b) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              s1 += g[base + i];
              s2 += g[base + i] * xhat[base + i];
            }
          }
          if (gn->requires_grad) gn->grad[c] += s2;
          if (bn->requires_grad) bn->grad[c] += s1;
          if (xn->requires_grad) {
            const T coef = gn->value[c] * inv_std[c];
            if (train) {
              const T inv_n = T(1) / static_cast<T>(n_per_c);
              for (int b = 0; b < B; ++b) {
                const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                  xn->grad[base + i] +=
                      coef * (g[base + i] - s1 * inv_n - xhat[base + i] * s2 * inv_n);
                }
              }
            } else {
              for (int b = 0; b < B; ++b) {
                const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                  xn->grad[base + i] += coef * g[base + i];
                }
              }
            }
          }
        }
      });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] > T(0) ? x.values()[i] : T(0);
  Tensor<T> out = Tensor<T>::from_values(x.shape(), std::move(v));
  detail::check_finite(out.values(), "relu");
  auto xn = x.handle(), on = out.handle();
  detail::record_if_tracked({x}, out, [xn, on]() {
    if (!xn->requires_grad) return;
    const std::vector<T>& g = on->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xn->value[i] > T(0)) xn->grad[i] += g[i];
    }
  });
  return out;
}

// 2x2 max pooling; the gradient routes to the first maximum in row-major
// window order on ties.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  detail::require_featuremap(x, "maxpool2x2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw std::invalid_argument("maxpool2x2: spatial dimensions must be even");
  }
  const int Ho = H / 2, Wo = W / 2;
  const std::vector<T>& xv = x.values();
  std::vector<T> ov(static_cast<std::size_t>(B) * C * Ho * Wo);
  std::vector<std::size_t> argmax(ov.size());
  std::size_t o = 0;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(b) * C + c) * H * W;
      for (int yo = 0; yo < Ho; ++yo) {
        for (int xo = 0; xo < Wo; ++xo) {
          const std::size_t i00 = base + static_cast<std::size_t>(2 * yo) * W + 2 * xo;
          std::size_t best = i00;
          T best_v = xv[i00];
          const std::size_t cand[3] = {i00 + 1, i00 + W, i00 + W + 1};
          for (std::size_t k = 0; k < 3; ++k) {
            if (xv[cand[k]] > best_v) {
              best_v = xv[cand[k]];
              best = cand[k];
            }
          }
          ov[o] = best_v;
          argmax[o] = best;
          ++o;
        }
      }
    }
  }
  Tensor<T> out = Tensor<T>::from_values({B, C, Ho, Wo}, std::move(ov));
  detail::check_finite(out.values(), "maxpool2x2");
  auto xn = x.handle(), on = out.handle();
  detail::record_if_tracked({x}, out, [xn, on, argmax = std::move(argmax)]() {
    if (!xn->requires_grad) return;
    const std::vector<T>& g = on->grad;
    for (std::size_t i = 0; i < g.size(); ++i) xn->grad[argmax[i]] += g[i];
  });
  return out;
}

namespace detail {

// Align-corners source positions: output j samples input j*(L-1)/(2L-1).
struct UpsampleAxis {
  std::vector<int> i0, i1;
  std::vector<double> t;
};

inline UpsampleAxis upsample_axis(int in_len) {
  UpsampleAxis ax;
  const int out_len = 2 * in_len;
  ax.i0.resize(out_len);
  ax.i1.resize(out_len);
  ax.t.resize(out_len);
  for (int j = 0; j < out_len; ++j) {
    const double s = static_cast<double>(j) * (in_len - 1) / (out_len - 1);
    int lo = static_cast<int>(std::floor(s));
    if (lo > in_len - 2) lo = in_len - 2;
    ax.i0[j] = lo;
    ax.i1[j] = lo + 1;
    ax.t[j] = s - lo;
  }
  return ax;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_upsample_x2(const Tensor<T>& x) {
  detail::require_featuremap(x, "bilinear_upsample_x2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) {
    throw std::invalid_argument("bilinear_upsample_x2: spatial dimensions must be >= 2");
  }
  const int Ho = 2 * H, Wo = 2 * W;
  const detail::UpsampleAxis ay = detail::upsample_axis(H);
  const detail::UpsampleAxis axx = detail::upsample_axis(W);
  const std::vector<T>& xv = x.values();
  std::vector<T> ov(static_cast<std::size_t>(B) * C * Ho * Wo);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* in_plane = xv.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
      T* out_plane = ov.data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
      for (int yo = 0; yo < Ho; ++yo) {
        const int y0 = ay.i0[yo], y1 = ay.i1[yo];
        const T ty = static_cast<T>(ay.t[yo]);
        for (int xo = 0; xo < Wo; ++xo) {
          const int x0 = axx.i0[xo], x1 = axx.i1[xo];
          const T tx = static_cast<T>(axx.t[xo]);
          const T v00 = in_plane[y0 * W + x0], v01 = in_plane[y0 * W + x1];
          const T v10 = in_plane[y1 * W + x0], v11 = in_plane[y1 * W + x1];
          out_plane[yo * Wo + xo] = (T(1) - ty) * ((T(1) - tx) * v00 + tx * v01) +
                                    ty * ((T(1) - tx) * v10 + tx * v11);
        }
      }
    }
  }
  Tensor<T> out = Tensor<T>::from_values({B, C, Ho, Wo}, std::move(ov));
  detail::check_finite(out.values(), "bilinear_upsample_x2");
  auto xn = x.handle(), on = out.handle();
  detail::record_if_tracked({x}, out, [xn, on, B, C, H, W, Ho, Wo, ay, axx]() {
    if (!xn->requires_grad) return;
    const std::vector<T>& g = on->grad;
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        T* gx_plane = xn->grad.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
        const T* g_plane = g.data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
        for (int yo = 0; yo < Ho; ++yo) {
          const int y0 = ay.i0[yo], y1 = ay.i1[yo];
          const T ty = static_cast<T>(ay.t[yo]);
          for (int xo = 0; xo < Wo; ++xo) {
            const int x0 = axx.i0[xo], x1 = axx.i1[xo];
            const T tx = static_cast<T>(axx.t[xo]);
            const T gv = g_plane[yo * Wo + xo];
            gx_plane[y0 * W + x0] += (T(1) - ty) * (T(1) - tx) * gv;
            gx_plane[y0 * W + x1] += (T(1) - ty) * tx * gv;
            gx_plane[y1 * W + x0] += ty * (T(1) - tx) * gv;
            gx_plane[y1 * W + x1] += ty * tx * gv;
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_featuremap(x, "global_avg_pool");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const T inv = T(1) / static_cast<T>(plane);
  std::vector<T> ov(static_cast<std::size_t>(B) * C);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* px = x.values().data() + (static_cast<std::size_t>(b) * C + c) * plane;
      T acc = T(0);
      for (std::size_t i = 0; i < plane; ++i) acc += px[i];
      ov[static_cast<std::size_t>(b) * C + c] = acc * inv;
    }
  }
  Tensor<T> out = Tensor<T>::from_values({B, C}, std::move(ov));
  detail::check_finite(out.values(), "global_avg_pool");
  auto xn = x.handle(), on = out.handle();
  detail::record_if_tracked({x}, out, [xn, on, B, C, plane, inv]() {
    if (!xn->requires_grad) return;
    const std::vector<T>& g = on->grad;
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const T gv = g[static_cast<std::size_t>(b) * C + c] * inv;
        T* gx = xn->grad.data() + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) gx[i] += gv;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  if (x.rank() != 2) throw std::invalid_argument("linear: expected a [batch, features] tensor");
  const int B = x.dim(0), F = x.dim(1);
  if (p.weight.rank() != 2 || p.weight.dim(1) != F) {
    throw std::invalid_argument("linear: feature dimension does not match weights");
  }
  const int O = p.weight.dim(0);
  if (p.bias.size() != static_cast<std::size_t>(O)) {
    throw std::invalid_argument("linear: bias size does not match output features");
  }
  std::vector<T> ov(static_cast<std::size_t>(B) * O);
  for (int b = 0; b < B; ++b) {
    const T* xr = x.values().data() + static_cast<std::size_t>(b) * F;
    for (int o = 0; o < O; ++o) {
      const T* wr = p.weight.values().data() + static_cast<std::size_t>(o) * F;
      T acc = p.bias.values()[o];
      for (int f = 0; f < F; ++f) acc += wr[f] * xr[f];
      ov[static_cast<std::size_t>(b) * O + o] = acc;
    }
  }
  Tensor<T> out = Tensor<T>::from_values({B, O}, std::move(ov));
  detail::check_finite(out.values(), "linear");
  auto xn = x.handle(), wn = p.weight.handle(), bn = p.bias.handle(), on = out.handle();
  detail::record_if_tracked({x, p.weight, p.bias}, out, [xn, wn, bn, on, B, F, O]() {
    const std::vector<T>& g = on->grad;
    for (int b = 0; b < B; ++b) {
      const T* gr = g.data() + static_cast<std::size_t>(b) * O;
      const T* xr = xn->value.data() + static_cast<std::size_t>(b) * F;
      for (int o = 0; o < O; ++o) {
        const T gv = gr[o];
        if (bn->requires_grad) bn->grad[o] += gv;
        if (wn->requires_grad) {
          T* gw = wn->grad.data() + static_cast<std::size_t>(o) * F;
          for (int f = 0; f < F; ++f) gw[f] += gv * xr[f];
        }
        if (xn->requires_grad) {
          const T* wr = wn->value.data() + static_cast<std::size_t>(o) * F;
          T* gx = xn->grad.data() + static_cast<std::size_t>(b) * F;
          for (int f = 0; f < F; ++f) gx[f] += gv * wr[f];
        }
      }
    }
  });
  return out;
}

// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() != 2) throw std::invalid_argument("softmax: expected a [batch, classes] tensor");
  const int B = x.dim(0), K = x.dim(1);
  std::vector<T> ov(x.size());
  for (int b = 0; b < B; ++b) {
    const T* xr = x.values().data() + static_cast<std::size_t>(b) * K;
    T* pr = ov.data() + static_cast<std::size_t>(b) * K;
    T m = xr[0];
    for (int k = 1; k < K; ++k) m = std::max(m, xr[k]);
    T s = T(0);
    for (int k = 0; k < K; ++k) {
      pr[k] = std::exp(xr[k] - m);
      s += pr[k];
    }
    const T inv = T(1) / s;
    for (int k = 0; k < K; ++k) pr[k] *= inv;
  }
  Tensor<T> out = Tensor<T>::from_values(x.shape(), std::move(ov));
  detail::check_finite(out.values(), "softmax");
  auto xn = x.handle(), on = out.handle();
  detail::record_if_tracked({x}, out, [xn, on, B, K]() {
    if (!xn->requires_grad) return;
    const std::vector<T>& g = on->grad;
    for (int b = 0; b < B; ++b) {
      const T* pr = on->value.data() + static_cast<std::size_t>(b) * K;
      const T* gr = g.data() + static_cast<std::size_t>(b) * K;
      T dot = T(0);
      for (int k = 0; k < K; ++k) dot += gr[k] * pr[k];
      T* gx = xn->grad.data() + static_cast<std::size_t>(b) * K;
      for (int k = 0; k < K; ++k) gx[k] += pr[k] * (gr[k] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear_softmax(const Tensor<T>& x, const LinearParams<T>& p) {
  return softmax(linear(x, p));
}

// Numerically stable logistic; outputs clamped into the open interval (0, 1).
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const T lowest = std::numeric_limits<T>::denorm_min();
  const T highest = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  std::vector<T> ov(x.size());
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const T v = x.values()[i];
    T y;
    if (v >= T(0)) {
      const T e = std::exp(-v);
      y = T(1) / (T(1) + e);
    } else {
      const T e = std::exp(v);
      y = e / (T(1) + e);
    }
    ov[i] = std::min(std::max(y, lowest), highest);
  }
  Tensor<T> out = Tensor<T>::from_values(x.shape(), std::move(ov));
  detail::check_finite(out.values(), "sigmoid");
  auto xn = x.handle(), on = out.handle();
  detail::record_if_tracked({x}, out, [xn, on]() {
    if (!xn->requires_grad) return;
    const std::vector<T>& g = on->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = on->value[i];
      xn->grad[i] += g[i] * y * (T(1) - y);
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv_bn_relu(const Tensor<T>& x, ConvBnUnit<T>& unit, Mode mode,
                       bool update_running = true) {
  return relu(batch_norm(conv3x3(x, unit.conv, Padding::same_zero), unit.bn, mode,
                         update_running));
}

// n consecutive conv-bn-relu stages plus an additive skip connection.
// Same-zero padding keeps the branch shape-compatible with the skip sum.
template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, std::vector<ConvBnUnit<T>>& stages, Mode mode,
                         bool update_running = true) {
  if (stages.empty()) throw std::invalid_argument("residual_block: needs >= 1 stage");
  Tensor<T> h = x;
  for (ConvBnUnit<T>& unit : stages) {
    h = conv_bn_relu(h, unit, mode, update_running);
  }
  if (h.shape() != x.shape()) {
    throw std::invalid_argument("residual_block: channel mismatch inside block");
  }
  return add(x, h);
}

}  // namespace surfseg
