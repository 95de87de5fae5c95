#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "oucopula/nd/tape.hpp"

namespace oucopula::nd {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

enum class Mode { train, eval };

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

inline void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t pixels() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

// Output columns [lo, hi) whose input column ow*stride + kj - pad lies inside the image.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding), s = static_cast<std::ptrdiff_t>(g.stride);
  const auto k = static_cast<std::ptrdiff_t>(kj), w = static_cast<std::ptrdiff_t>(g.width);
  const std::ptrdiff_t lo = pad > k ? (pad - k + s - 1) / s : 0;
  const std::ptrdiff_t hi = w - 1 + pad - k < 0 ? 0 : (w - 1 + pad - k) / s + 1;
  const auto out_w = static_cast<std::ptrdiff_t>(g.out_w);
  const std::ptrdiff_t l = std::min(lo, out_w), h = std::clamp(hi, l, out_w);
  return {static_cast<std::size_t>(l), static_cast<std::size_t>(h)};
}

// Unfolds one sample (C x H x W) into the (C*k*k) x (Ho*Wo) block of a row-major
// matrix whose rows are `ld` apart.
inline void im2col(const double* image, const ConvGeometry& g, double* cols, std::size_t ld) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld;
        const auto [lo, hi] = valid_columns(g, kj);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          std::fill(dst, dst + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + static_cast<std::ptrdiff_t>(lo) + shift, src + static_cast<std::ptrdiff_t>(hi) + shift, dst + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[static_cast<std::ptrdiff_t>(ow * g.stride) + shift];
          }
          std::fill(dst + hi, dst + g.out_w, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image gradient.
inline void col2im(const double* cols, const ConvGeometry& g, double* image, std::size_t ld) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld;
        const auto [lo, hi] = valid_columns(g, kj);
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const double* src = row + oh * g.out_w;
          for (std::size_t ow = lo; ow < hi; ++ow) dst[static_cast<std::ptrdiff_t>(ow * g.stride) + shift] += src[ow];
        }
      }
    }
  }
}

// Samples per GEMM so the unfolded chunk stays around 16 MB.
inline std::size_t conv_chunk(const ConvGeometry& g, std::size_t batch) {
  const std::size_t per_sample = std::max<std::size_t>(1, g.patch() * g.pixels());
  return std::clamp<std::size_t>((std::size_t{1} << 21) / per_sample, 1, std::max<std::size_t>(batch, 1));
}

// Unfolds samples [n0, n0 + m) side by side: column n*P + p holds pixel p of sample n0 + n.
inline void im2col_chunk(const double* x, const ConvGeometry& g, std::size_t n0, std::size_t m, double* cols) {
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t n = 0; n < m; ++n) im2col(x + (n0 + n) * in_stride, g, cols + n * g.pixels(), m * g.pixels());
}

}  // namespace detail

/// 2-D convolution, NCHW input and OIkk weight, square kernel.
///
/// Samples are unfolded in chunks into one wide column matrix so each chunk is a
/// single GEMM: (O x Ckk) * (Ckk x m*Ho*Wo).
inline Var conv2d(Var input, Var weight, std::optional<Var> bias, std::size_t stride, std::size_t padding) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  detail::require(x.rank() == 4, "conv2d: input must be 4-D, got " + x.shape().str());
  detail::require(w.rank() == 4 && w.dim(2) == w.dim(3), "conv2d: weight must be O x C x k x k, got " + w.shape().str());
  detail::require(x.dim(1) == w.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                            " channels but weight expects " + std::to_string(w.dim(1)));
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t k = w.dim(2);
  detail::require(x.dim(2) + 2 * padding >= k && x.dim(3) + 2 * padding >= k,
                  "conv2d: kernel larger than padded input " + x.shape().str());
  if (bias) {
    detail::require(bias->value().size() == w.dim(0), "conv2d: bias length must equal output channels");
  }

  const std::size_t batch = x.dim(0);
  const std::size_t out_c = w.dim(0);
  const detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), k, stride, padding,
                               (x.dim(2) + 2 * padding - k) / stride + 1, (x.dim(3) + 2 * padding - k) / stride + 1};
  const std::size_t pixels = g.pixels();
  const std::size_t out_stride = out_c * pixels;
  const std::size_t chunk = detail::conv_chunk(g, batch);
  const auto rows = static_cast<Eigen::Index>(out_c);
  const auto patch = static_cast<Eigen::Index>(g.patch());

  GradTape& tape = *input.tape;
  const bool need_x = tape.requires_grad(input);
  const bool need_w = tape.requires_grad(weight);
  const bool need_b = bias && tape.requires_grad(*bias);
  // Small unfoldings are kept for the weight gradient instead of being recomputed.
  const std::size_t sample_cols = g.patch() * pixels;
  const bool keep = need_w && sample_cols * batch <= (std::size_t{1} << 22);
  auto saved = std::make_shared<std::vector<double>>(keep ? sample_cols * batch : 0);

  Tensor y(Shape{batch, out_c, g.out_h, g.out_w});
  ConstMatrixMap wm(w.data(), rows, patch);
  std::vector<double> scratch(keep ? 0 : sample_cols * std::min(chunk, batch));
  RowMatrix prod;
  for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
    const std::size_t m = std::min(chunk, batch - n0);
    const auto width = static_cast<Eigen::Index>(m * pixels);
    double* cols = keep ? saved->data() + n0 * sample_cols : scratch.data();
    detail::im2col_chunk(x.data(), g, n0, m, cols);
    prod.noalias() = wm * ConstMatrixMap(cols, patch, width);
    for (std::size_t n = 0; n < m; ++n) {
      MatrixMap ym(y.data() + (n0 + n) * out_stride, rows, static_cast<Eigen::Index>(pixels));
      ym = prod.middleCols(static_cast<Eigen::Index>(n * pixels), static_cast<Eigen::Index>(pixels));
      if (bias) {
        const Tensor& b = bias->value();
        for (std::size_t o = 0; o < out_c; ++o) ym.row(static_cast<Eigen::Index>(o)).array() += b[o];
      }
    }
  }

  const std::size_t xid = input.id, wid = weight.id, bid = bias ? bias->id : 0;
  return tape.record(std::move(y), need_x || need_w || need_b, [=](GradTape& t, const Tensor& gy) {
    const Tensor& xv = t.value(xid);
    ConstMatrixMap wmat(t.value(wid).data(), rows, patch);
    std::vector<double> buf(need_w && !keep ? sample_cols * std::min(chunk, batch) : 0);
    RowMatrix gcat, dcols;
    for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
      const std::size_t m = std::min(chunk, batch - n0);
      const auto width = static_cast<Eigen::Index>(m * pixels);
      gcat.resize(rows, width);
      for (std::size_t n = 0; n < m; ++n) {
        gcat.middleCols(static_cast<Eigen::Index>(n * pixels), static_cast<Eigen::Index>(pixels)) =
            ConstMatrixMap(gy.data() + (n0 + n) * out_stride, rows, static_cast<Eigen::Index>(pixels));
      }
      if (need_w) {
        const double* cols = buf.data();
        if (keep) {
          cols = saved->data() + n0 * sample_cols;
        } else {
          detail::im2col_chunk(xv.data(), g, n0, m, buf.data());
        }
        MatrixMap dw(t.grad(wid).data(), rows, patch);
        dw.noalias() += gcat * ConstMatrixMap(cols, patch, width).transpose();
      }
      if (need_x) {
        dcols.noalias() = wmat.transpose() * gcat;
        const std::size_t in_stride = g.channels * g.height * g.width;
        double* dx = t.grad(xid).data();
        for (std::size_t n = 0; n < m; ++n) {
          detail::col2im(dcols.data() + n * pixels, g, dx + (n0 + n) * in_stride, m * pixels);
        }
      }
      if (need_b) {
        Tensor& db = t.grad(bid);
        for (std::size_t o = 0; o < out_c; ++o) db[o] += gcat.row(static_cast<Eigen::Index>(o)).sum();
      }
    }
  });
}

/// Running statistics owned by a batch-norm site.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}
};

/// Per-channel batch normalization over (N, H, W). Train mode uses batch statistics
/// and updates `state`; eval mode normalizes with the running statistics.
inline Var batchnorm2d(Var input, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  const Tensor& x = input.value();
  detail::require(x.rank() == 4, "batchnorm2d: input must be 4-D, got " + x.shape().str());
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(gamma.value().size() == channels && beta.value().size() == channels,
                  "batchnorm2d: gamma/beta length must equal channel count " + std::to_string(channels));
  detail::require(state.running_mean.size() == channels, "batchnorm2d: running stats have wrong length");
  if (mode == Mode::train) {
    detail::require(batch >= 2, "batchnorm2d: train mode needs batch size >= 2 (got " + std::to_string(batch) + ")");
  }

  const std::size_t count = batch * plane;
  Tensor xhat(x.shape());
  Tensor y(x.shape());
  std::vector<double> inv_std(channels);
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  for (std::size_t c = 0; c < channels; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = x.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = x.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / static_cast<double>(count);
      const double unbiased = ss / static_cast<double>(count - 1);
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (x[off + i] - mean) * inv_std[c];
        xhat[off + i] = h;
        y[off + i] = gm[c] * h + bt[c];
      }
    }
  }

  GradTape& tape = *input.tape;
  const bool need_x = tape.requires_grad(input);
  const bool need_g = tape.requires_grad(gamma);
  const bool need_b = tape.requires_grad(beta);
  const std::size_t xid = input.id, gid = gamma.id, bid = beta.id;
  const bool training = mode == Mode::train;
  if (!(tape.recording() && (need_x || need_g || need_b))) xhat = Tensor();
  return tape.record(std::move(y), need_x || need_g || need_b,
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](GradTape& t, const Tensor& gy) {
                       const Tensor& gv = t.value(gid);
                       for (std::size_t c = 0; c < channels; ++c) {
                         double sum_g = 0.0, sum_gx = 0.0;
                         for (std::size_t n = 0; n < batch; ++n) {
                           const std::size_t off = (n * channels + c) * plane;
                           for (std::size_t i = 0; i < plane; ++i) {
                             sum_g += gy[off + i];
                             sum_gx += gy[off + i] * xhat[off + i];
                           }
                         }
                         if (need_g) t.grad(gid)[c] += sum_gx;
                         if (need_b) t.grad(bid)[c] += sum_g;
                         if (!need_x) continue;
                         Tensor& dx = t.grad(xid);
                         const double scale = gv[c] * inv_std[c];
                         if (training) {
                           const double mg = sum_g / static_cast<double>(count);
                           const double mgx = sum_gx / static_cast<double>(count);
                           for (std::size_t n = 0; n < batch; ++n) {
                             const std::size_t off = (n * channels + c) * plane;
                             for (std::size_t i = 0; i < plane; ++i) {
                               dx[off + i] += scale * (gy[off + i] - mg - xhat[off + i] * mgx);
                             }
                           }
                         } else {
                           for (std::size_t n = 0; n < batch; ++n) {
                             const std::size_t off = (n * channels + c) * plane;
                             for (std::size_t i = 0; i < plane; ++i) dx[off + i] += scale * gy[off + i];
                           }
                         }
                       }
                     });
}

inline Var relu(Var input) {
  const Tensor& x = input.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  const std::size_t xid = input.id;
  GradTape& tape = *input.tape;
  if (tape.tracking_kinks()) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) tape.mix_kink(i);
    }
  }
  return tape.record(std::move(y), tape.requires_grad(input), [xid](GradTape& t, const Tensor& gy) {
    const Tensor& xv = t.value(xid);
    Tensor& dx = t.grad(xid);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += gy[i];
    }
  });
}

/// Mean over the spatial axes: N x C x H x W -> N x C.
inline Var global_avg_pool(Var input) {
  const Tensor& x = input.value();
  detail::require(x.rank() == 4, "global_avg_pool: input must be 4-D, got " + x.shape().str());
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y(Shape{x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < plane; ++j) s += x[i * plane + j];
    y[i] = s / static_cast<double>(plane);
  }
  const std::size_t xid = input.id;
  GradTape& tape = *input.tape;
  return tape.record(std::move(y), tape.requires_grad(input), [xid, nc, plane](GradTape& t, const Tensor& gy) {
    Tensor& dx = t.grad(xid);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < nc; ++i) {
      for (std::size_t j = 0; j < plane; ++j) dx[i * plane + j] += gy[i] * inv;
    }
  });
}

/// Max pooling with implicit -inf padding.
inline Var max_pool2d(Var input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const Tensor& x = input.value();
  detail::require(x.rank() == 4, "max_pool2d: input must be 4-D");
  detail::require(kernel >= 1 && stride >= 1 && 2 * padding <= kernel, "max_pool2d: invalid geometry");
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(h + 2 * padding >= kernel && w + 2 * padding >= kernel, "max_pool2d: kernel larger than input");
  const std::size_t oh = (h + 2 * padding - kernel) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kernel) / stride + 1;
  Tensor y(Shape{batch, ch, oh, ow});
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t p = 0; p < batch * ch; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * stride + ki) - static_cast<std::ptrdiff_t>(padding);
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(j * stride + kj) - static_cast<std::ptrdiff_t>(padding);
            if (c < 0 || c >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = (p * h + static_cast<std::size_t>(r)) * w + static_cast<std::size_t>(c);
            if (x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        y[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  const std::size_t xid = input.id;
  GradTape& tape = *input.tape;
  if (tape.tracking_kinks()) {
    for (std::size_t o = 0; o < argmax.size(); ++o) tape.mix_kink(o * 0x100000001b3ULL + argmax[o]);
  }
  return tape.record(std::move(y), tape.requires_grad(input),
                     [xid, argmax = std::move(argmax)](GradTape& t, const Tensor& gy) {
                       Tensor& dx = t.grad(xid);
                       for (std::size_t o = 0; o < gy.size(); ++o) dx[argmax[o]] += gy[o];
                     });
}

/// Affine map y = x W^T + b with x: N x F, W: O x F, b: O.
inline Var linear(Var input, Var weight, Var bias) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  detail::require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
                  "linear: incompatible shapes " + x.shape().str() + " and " + w.shape().str());
  detail::require(bias.value().size() == w.dim(0), "linear: bias length must equal output features");
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto f = static_cast<Eigen::Index>(x.dim(1));
  const auto o = static_cast<Eigen::Index>(w.dim(0));
  Tensor y(Shape{x.dim(0), w.dim(0)});
  MatrixMap ym(y.data(), n, o);
  ym.noalias() = ConstMatrixMap(x.data(), n, f) * ConstMatrixMap(w.data(), o, f).transpose();
  const Tensor& b = bias.value();
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < o; ++c) ym(r, c) += b[static_cast<std::size_t>(c)];
  }
  GradTape& tape = *input.tape;
  const bool need_x = tape.requires_grad(input), need_w = tape.requires_grad(weight), need_b = tape.requires_grad(bias);
  const std::size_t xid = input.id, wid = weight.id, bid = bias.id;
  return tape.record(std::move(y), need_x || need_w || need_b, [=](GradTape& t, const Tensor& gy) {
    ConstMatrixMap gm(gy.data(), n, o);
    if (need_x) {
      MatrixMap(t.grad(xid).data(), n, f).noalias() += gm * ConstMatrixMap(t.value(wid).data(), o, f);
    }
    if (need_w) {
      MatrixMap(t.grad(wid).data(), o, f).noalias() += gm.transpose() * ConstMatrixMap(t.value(xid).data(), n, f);
    }
    if (need_b) {
      Tensor& db = t.grad(bid);
      for (Eigen::Index c = 0; c < o; ++c) db[static_cast<std::size_t>(c)] += gm.col(c).sum();
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  detail::accumulate(y, b.value());
  GradTape& tape = *a.tape;
  const bool need_a = tape.requires_grad(a), need_b = tape.requires_grad(b);
  const std::size_t aid = a.id, bid = b.id;
  return tape.record(std::move(y), need_a || need_b, [=](GradTape& t, const Tensor& gy) {
    if (need_a) detail::accumulate(t.grad(aid), gy);
    if (need_b) detail::accumulate(t.grad(bid), gy);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  GradTape& tape = *a.tape;
  const bool need_a = tape.requires_grad(a), need_b = tape.requires_grad(b);
  const std::size_t aid = a.id, bid = b.id;
  return tape.record(std::move(y), need_a || need_b, [=](GradTape& t, const Tensor& gy) {
    const Tensor& x1 = t.value(aid);
    const Tensor& x2 = t.value(bid);
    if (need_a) {
      Tensor& d = t.grad(aid);
      for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * x2[i];
    }
    if (need_b) {
      Tensor& d = t.grad(bid);
      for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i] * x1[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v *= s;
  const std::size_t aid = a.id;
  GradTape& tape = *a.tape;
  return tape.record(std::move(y), tape.requires_grad(a), [aid, s](GradTape& t, const Tensor& gy) {
    Tensor& d = t.grad(aid);
    for (std::size_t i = 0; i < gy.size(); ++i) d[i] += s * gy[i];
  });
}

/// Sum of all elements, as a one-element tensor.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t aid = a.id;
  GradTape& tape = *a.tape;
  return tape.record(scalar_tensor(s), tape.requires_grad(a), [aid](GradTape& t, const Tensor& gy) {
    Tensor& d = t.grad(aid);
    for (double& v : d.values()) v += gy[0];
  });
}

/// Column concatenation of two N x A and N x B matrices.
inline Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require(av.rank() == 2 && bv.rank() == 2 && av.dim(0) == bv.dim(0),
                  "concat_cols: incompatible shapes " + av.shape().str() + " and " + bv.shape().str());
  const std::size_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  Tensor y(Shape{n, ca + cb});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < ca; ++c) y.at(r, c) = av.at(r, c);
    for (std::size_t c = 0; c < cb; ++c) y.at(r, ca + c) = bv.at(r, c);
  }
  GradTape& tape = *a.tape;
  const bool need_a = tape.requires_grad(a), need_b = tape.requires_grad(b);
  const std::size_t aid = a.id, bid = b.id;
  return tape.record(std::move(y), need_a || need_b, [=](GradTape& t, const Tensor& gy) {
    for (std::size_t r = 0; r < n; ++r) {
      if (need_a) {
        Tensor& d = t.grad(aid);
        for (std::size_t c = 0; c < ca; ++c) d.at(r, c) += gy.at(r, c);
      }
      if (need_b) {
        Tensor& d = t.grad(bid);
        for (std::size_t c = 0; c < cb; ++c) d.at(r, c) += gy.at(r, ca + c);
      }
    }
  });
}

/// Stacks two tensors along the leading (batch) axis; trailing axes must match.
inline Var concat_batch(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  bool ok = av.rank() == bv.rank() && av.rank() >= 1;
  for (std::size_t d = 1; ok && d < av.rank(); ++d) ok = av.dim(d) == bv.dim(d);
  detail::require(ok, "concat_batch: incompatible shapes " + av.shape().str() + " and " + bv.shape().str());
  std::vector<std::size_t> dims(av.shape().dims().begin(), av.shape().dims().end());
  dims[0] += bv.dim(0);
  std::vector<double> values;
  values.reserve(av.size() + bv.size());
  values.insert(values.end(), av.values().begin(), av.values().end());
  values.insert(values.end(), bv.values().begin(), bv.values().end());
  GradTape& tape = *a.tape;
  const bool need_a = tape.requires_grad(a), need_b = tape.requires_grad(b);
  const std::size_t aid = a.id, bid = b.id, na = av.size();
  return tape.record(Tensor(Shape(std::span<const std::size_t>(dims)), std::move(values)), need_a || need_b,
                     [=](GradTape& t, const Tensor& gy) {
                       if (need_a) {
                         Tensor& d = t.grad(aid);
                         for (std::size_t i = 0; i < na; ++i) d[i] += gy[i];
                       }
                       if (need_b) {
                         Tensor& d = t.grad(bid);
                         for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[na + i];
                       }
                     });
}

/// Rows [lo, hi) of the leading (batch) axis.
inline Var slice_batch(Var x, std::size_t lo, std::size_t hi) {
  const Tensor& xv = x.value();
  detail::require(xv.rank() >= 1 && lo < hi && hi <= xv.dim(0),
                  "slice_batch: rows [" + std::to_string(lo) + ", " + std::to_string(hi) + ") out of range for " +
                      xv.shape().str());
  const std::size_t row = xv.size() / xv.dim(0);
  std::vector<std::size_t> dims(xv.shape().dims().begin(), xv.shape().dims().end());
  dims[0] = hi - lo;
  std::vector<double> values(xv.data() + lo * row, xv.data() + hi * row);
  GradTape& tape = *x.tape;
  const std::size_t xid = x.id, off = lo * row;
  return tape.record(Tensor(Shape(std::span<const std::size_t>(dims)), std::move(values)), tape.requires_grad(x),
                     [xid, off](GradTape& t, const Tensor& gy) {
                       Tensor& d = t.grad(xid);
                       for (std::size_t i = 0; i < gy.size(); ++i) d[off + i] += gy[i];
                     });
}

/// Residuals e = target - prediction; target is a constant.
inline Var residual(const Tensor& target, Var prediction) {
  const Tensor& p = prediction.value();
  detail::require_same_shape(target, p, "residual");
  Tensor y(p.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = target[i] - p[i];
  const std::size_t pid = prediction.id;
  GradTape& tape = *prediction.tape;
  return tape.record(std::move(y), tape.requires_grad(prediction), [pid](GradTape& t, const Tensor& gy) {
    Tensor& d = t.grad(pid);
    for (std::size_t i = 0; i < gy.size(); ++i) d[i] -= gy[i];
  });
}

/// Batch-mean of the per-row summed squared error: (1/N) sum_i sum_k (y_ik - p_ik)^2.
inline Var summed_squared_error(Var prediction, const Tensor& target) {
  const Tensor& p = prediction.value();
  detail::require_same_shape(p, target, "summed_squared_error");
  detail::require(p.rank() == 2 && p.dim(0) >= 1, "summed_squared_error: expected N x K predictions");
  const double inv_n = 1.0 / static_cast<double>(p.dim(0));
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - target[i]) * (p[i] - target[i]);
  const std::size_t pid = prediction.id;
  GradTape& tape = *prediction.tape;
  return tape.record(scalar_tensor(s * inv_n), tape.requires_grad(prediction),
                     [pid, target, inv_n](GradTape& t, const Tensor& gy) {
                       const Tensor& pv = t.value(pid);
                       Tensor& d = t.grad(pid);
                       for (std::size_t i = 0; i < pv.size(); ++i) d[i] += gy[0] * 2.0 * (pv[i] - target[i]) * inv_n;
                     });
}

}  // namespace oucopula::nd
