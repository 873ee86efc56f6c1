#include "downscale/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "downscale/detail/autograd.hpp"
#include "downscale/flops.hpp"

namespace downscale {

using detail::grad_of;
using detail::make_result;
using detail::require;

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ConstMatMap<T> as_matrix(const Node<T>& n, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(n.value.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  require(x.rank() == rank, std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got shape " +
                                to_string(x.shape()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  ConstVecMap<T> av(a.values().data(), a.size()), bv(b.values().data(), b.size());
  VecMap<T>(out.data(), out.size()) = av + bv;
  credit_flops(FlopCategory::other, a.size());
  return make_result<T>("add", a.shape(), std::move(out),
                        {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
                          const std::size_t n = self.value.size();
                          for (std::size_t i = 0; i < 2; ++i) {
                            if (T* g = grad_of(self, i)) {
                              for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  credit_flops(FlopCategory::other, a.size());
  return make_result<T>("sub", a.shape(), std::move(out),
                        {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
                          const std::size_t n = self.value.size();
                          if (T* g = grad_of(self, 0)) {
                            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[j];
                          }
                          if (T* g = grad_of(self, 1)) {
                            for (std::size_t j = 0; j < n; ++j) g[j] -= self.grad[j];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  credit_flops(FlopCategory::other, a.size());
  return make_result<T>("mul", a.shape(), std::move(out),
                        {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
                          const auto& av = self.inputs[0]->value;
                          const auto& bv = self.inputs[1]->value;
                          const std::size_t n = self.value.size();
                          if (T* g = grad_of(self, 0)) {
                            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[j] * bv[j];
                          }
                          if (T* g = grad_of(self, 1)) {
                            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[j] * av[j];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v *= factor;
  credit_flops(FlopCategory::other, x.size());
  return make_result<T>("scale", x.shape(), std::move(out), {x.node_ptr()},
                        [factor](Node<T>& self) {
                          if (T* g = grad_of(self, 0)) {
                            for (std::size_t j = 0; j < self.grad.size(); ++j) {
                              g[j] += self.grad[j] * factor;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
  require(y.rank() <= x.rank() &&
              std::equal(y.shape().rbegin(), y.shape().rend(), x.shape().rbegin()),
          "add_broadcast: " + to_string(y.shape()) +
              " is not a trailing shape of " + to_string(x.shape()));
  const std::size_t inner = y.size();
  const std::size_t outer = x.size() / inner;
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += y.values()[i];
  }
  credit_flops(FlopCategory::other, x.size());
  return make_result<T>("add_broadcast", x.shape(), std::move(out),
                        {x.node_ptr(), y.node_ptr()}, [inner, outer](Node<T>& self) {
                          if (T* g = grad_of(self, 0)) {
                            for (std::size_t j = 0; j < self.grad.size(); ++j) g[j] += self.grad[j];
                          }
                          if (T* g = grad_of(self, 1)) {
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.values()) total += v;
  credit_flops(FlopCategory::other, x.size());
  return make_result<T>("sum", {}, {total}, {x.node_ptr()}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions disagree " +
                             to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      as_matrix(a.node(), m, k) * as_matrix(b.node(), k, n);
  credit_flops(FlopCategory::matmul, m * n * k);
  return make_result<T>(
      "matmul", {m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
      [m, k, n](Node<T>& self) {
        ConstMatMap<T> dc(self.grad.data(), m, n);
        if (T* g = grad_of(self, 0)) {
          MatMap<T>(g, m, k).noalias() += dc * as_matrix(*self.inputs[1], k, n).transpose();
        }
        if (T* g = grad_of(self, 1)) {
          MatMap<T>(g, k, n).noalias() += as_matrix(*self.inputs[0], m, k).transpose() * dc;
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  return add_broadcast(matmul(x, w), bias);
}

template <typename T>
Tensor<T> batched_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(x, 3, "batched_linear");
  require_rank(w, 3, "batched_linear");
  require_rank(bias, 2, "batched_linear");
  const std::size_t c = x.dim(0), n = x.dim(1), k = x.dim(2), m = w.dim(2);
  require(w.dim(0) == c && w.dim(1) == k && bias.dim(0) == c && bias.dim(1) == m,
          "batched_linear: incompatible shapes " + to_string(x.shape()) + ", " +
              to_string(w.shape()) + ", " + to_string(bias.shape()));
  std::vector<T> out(c * n * m);
  for (std::size_t s = 0; s < c; ++s) {
    MatMap<T> y(out.data() + s * n * m, n, m);
    y.noalias() = ConstMatMap<T>(x.values().data() + s * n * k, n, k) *
                  ConstMatMap<T>(w.values().data() + s * k * m, k, m);
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
        bias.values().data() + s * m, m);
  }
  credit_flops(FlopCategory::matmul, c * n * k * m);
  return make_result<T>(
      "batched_linear", {c, n, m}, std::move(out),
      {x.node_ptr(), w.node_ptr(), bias.node_ptr()}, [c, n, k, m](Node<T>& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        T* gx = grad_of(self, 0);
        T* gw = grad_of(self, 1);
        T* gb = grad_of(self, 2);
        for (std::size_t s = 0; s < c; ++s) {
          ConstMatMap<T> dy(self.grad.data() + s * n * m, n, m);
          if (gx) {
            MatMap<T>(gx + s * n * k, n, k).noalias() +=
                dy * ConstMatMap<T>(wv.data() + s * k * m, k, m).transpose();
          }
          if (gw) {
            MatMap<T>(gw + s * k * m, k, m).noalias() +=
                ConstMatMap<T>(xv.data() + s * n * k, n, k).transpose() * dy;
          }
          if (gb) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb + s * m, m) +=
                dy.colwise().sum();
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto xs = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xs[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * (T(1) / std::numbers::sqrt2_v<T>)));
  }
  credit_flops(FlopCategory::other, x.size());
  return make_result<T>("gelu", x.shape(), std::move(out), {x.node_ptr()},
                        [](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          const auto& xv = self.inputs[0]->value;
                          const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> *
                                                 (T(1) / std::numbers::sqrt2_v<T>);
                          for (std::size_t i = 0; i < xv.size(); ++i) {
                            const T v = xv[i];
                            const T cdf = T(0.5) * (T(1) + std::erf(v * (T(1) / std::numbers::sqrt2_v<T>)));
                            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                            g[i] += self.grad[i] * (cdf + v * pdf);
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  require(gamma.size() == d && beta.size() == d,
          "layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  std::vector<T> out(n * d), xhat(n * d), rstd(n);
  const auto xs = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xs[r * d + j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xs[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xs[r * d + j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gamma.values()[j] + beta.values()[j];
    }
  }
  credit_flops(FlopCategory::other, 4 * n * d);
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out),
      {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const auto& gv = self.inputs[1]->value;
        T* gx = grad_of(self, 0);
        T* gg = grad_of(self, 1);
        T* gb = grad_of(self, 2);
        for (std::size_t r = 0; r < n; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          T mean_dh = T(0), mean_dh_h = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dy[j] * gv[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
            if (gg) gg[j] += dy[j] * h[j];
            if (gb) gb[j] += dy[j];
          }
          if (!gx) continue;
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += rstd[r] * (dy[j] * gv[j] - mean_dh - h[j] * mean_dh_h);
          }
        }
      });
}

namespace {
constexpr std::size_t kAttentionBlock = 128;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads) {
  require_rank(q, 2, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  require(heads >= 1 && q.dim(1) % heads == 0,
          "attention: width " + std::to_string(q.dim(1)) +
              " not divisible by heads " + std::to_string(heads));
  const std::size_t n = q.dim(0), width = q.dim(1), d = width / heads;
  require(d > 0, "attention: head width must be positive");
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(d));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
  const auto N = static_cast<Eigen::Index>(n);
  const auto D = static_cast<Eigen::Index>(d);

  std::vector<T> out(n * width);
  std::vector<T> lse(heads * n);
  RowMat<T> scores, q_block;
  for (std::size_t h = 0; h < heads; ++h) {
    ConstStridedMap<T> qh(q.values().data() + h * d, N, D, stride);
    ConstStridedMap<T> kh(k.values().data() + h * d, N, D, stride);
    ConstStridedMap<T> vh(v.values().data() + h * d, N, D, stride);
    StridedMap<T> oh(out.data() + h * d, N, D, stride);
    for (std::size_t r0 = 0; r0 < n; r0 += kAttentionBlock) {
      const auto rows = static_cast<Eigen::Index>(std::min(kAttentionBlock, n - r0));
      const auto r = static_cast<Eigen::Index>(r0);
      q_block.noalias() = qh.middleRows(r, rows) * scale_factor;
      scores.noalias() = q_block * kh.transpose();
      Eigen::Matrix<T, Eigen::Dynamic, 1> row_max = scores.rowwise().maxCoeff();
      scores = (scores.colwise() - row_max).array().exp().matrix();
      Eigen::Matrix<T, Eigen::Dynamic, 1> denom = scores.rowwise().sum();
      oh.middleRows(r, rows).noalias() = scores * vh;
      for (Eigen::Index i = 0; i < rows; ++i) {
        oh.row(r + i) /= denom(i);
        lse[h * n + r0 + i] = row_max(i) + std::log(denom(i));
      }
    }
  }
  credit_flops(FlopCategory::attention, 2 * n * n * width);

  return make_result<T>(
      "attention", q.shape(), std::move(out),
      {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [n, width, heads, d, scale_factor, lse = std::move(lse)](Node<T>& self) {
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
        const auto N = static_cast<Eigen::Index>(n);
        const auto D = static_cast<Eigen::Index>(d);
        T* gq = grad_of(self, 0);
        T* gk = grad_of(self, 1);
        T* gv = grad_of(self, 2);
        RowMat<T> p, dp, q_block;
        for (std::size_t h = 0; h < heads; ++h) {
          ConstStridedMap<T> qh(self.inputs[0]->value.data() + h * d, N, D, stride);
          ConstStridedMap<T> kh(self.inputs[1]->value.data() + h * d, N, D, stride);
          ConstStridedMap<T> vh(self.inputs[2]->value.data() + h * d, N, D, stride);
          ConstStridedMap<T> oh(self.value.data() + h * d, N, D, stride);
          ConstStridedMap<T> doh(self.grad.data() + h * d, N, D, stride);
          Eigen::Matrix<T, Eigen::Dynamic, 1> delta =
              doh.cwiseProduct(oh).rowwise().sum();
          for (std::size_t r0 = 0; r0 < n; r0 += kAttentionBlock) {
            const auto rows = static_cast<Eigen::Index>(std::min(kAttentionBlock, n - r0));
            const auto r = static_cast<Eigen::Index>(r0);
            q_block.noalias() = qh.middleRows(r, rows) * scale_factor;
            p.noalias() = q_block * kh.transpose();
            for (Eigen::Index i = 0; i < rows; ++i) {
              p.row(i) = (p.row(i).array() - lse[h * n + r0 + i]).exp().matrix();
            }
            if (gv) {
              StridedMap<T>(gv + h * d, N, D, stride).noalias() +=
                  p.transpose() * doh.middleRows(r, rows);
            }
            dp.noalias() = doh.middleRows(r, rows) * vh.transpose();
            dp = (p.array() * (dp.colwise() - delta.segment(r, rows)).array()).matrix() * scale_factor;
            if (gq) {
              StridedMap<T>(gq + h * d, N, D, stride).middleRows(r, rows).noalias() += dp * kh;
            }
            if (gk) {
              StridedMap<T>(gk + h * d, N, D, stride).noalias() += dp.transpose() * qh.middleRows(r, rows);
            }
          }
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t ci, h, w, co, kh, kw, ph, pw, ho, wo;
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, RowMat<T>& cols) {
  cols.resize(static_cast<Eigen::Index>(g.ci * g.kh * g.kw),
              static_cast<Eigen::Index>(g.ho * g.wo));
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      for (std::size_t b = 0; b < g.kw; ++b) {
        T* row = cols.data() + ((c * g.kh + a) * g.kw + b) * g.ho * g.wo;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy + a) - static_cast<long>(g.ph);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox + b) - static_cast<long>(g.pw);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0)
                                                               : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const RowMat<T>& cols, const ConvGeometry& g, T* dx) {
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      for (std::size_t b = 0; b < g.kw; ++b) {
        const T* row = cols.data() + ((c * g.kh + a) * g.kw + b) * g.ho * g.wo;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy + a) - static_cast<long>(g.ph);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox + b) - static_cast<long>(g.pw);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_impl(const Tensor<T>& x, const Tensor<T>& kernels,
                      const Tensor<T>* bias, Padding padding) {
  require_rank(x, 3, "conv2d");
  require_rank(kernels, 4, "conv2d");
  ConvGeometry g{};
  g.ci = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.co = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  require(kernels.dim(1) == g.ci, "conv2d: kernel expects " +
                                      std::to_string(kernels.dim(1)) +
                                      " input channels, got " + std::to_string(g.ci));
  require(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d: kernel extents must be odd");
  if (bias) {
    require(bias->size() == g.co, "conv2d: bias must have one entry per output channel");
  }
  g.ph = padding == Padding::same ? g.kh / 2 : 0;
  g.pw = padding == Padding::same ? g.kw / 2 : 0;
  require(g.h + 2 * g.ph >= g.kh && g.w + 2 * g.pw >= g.kw,
          "conv2d: kernel larger than padded input");
  g.ho = g.h + 2 * g.ph - g.kh + 1;
  g.wo = g.w + 2 * g.pw - g.kw + 1;
  const std::size_t patch = g.ci * g.kh * g.kw;
  const std::size_t pixels = g.ho * g.wo;

  RowMat<T> cols;
  im2col(x.values().data(), g, cols);
  std::vector<T> out(g.co * pixels);
  MatMap<T> y(out.data(), g.co, pixels);
  y.noalias() = ConstMatMap<T>(kernels.values().data(), g.co, patch) * cols;
  if (bias) {
    for (std::size_t o = 0; o < g.co; ++o) y.row(o).array() += bias->values()[o];
  }
  credit_flops(FlopCategory::conv, g.co * patch * pixels);

  std::vector<detail::NodePtr<T>> inputs{x.node_ptr(), kernels.node_ptr()};
  if (bias) inputs.push_back(bias->node_ptr());
  return make_result<T>(
      "conv2d", {g.co, g.ho, g.wo}, std::move(out), std::move(inputs),
      [g, patch, pixels](Node<T>& self) {
        ConstMatMap<T> dy(self.grad.data(), g.co, pixels);
        ConstMatMap<T> kmat(self.inputs[1]->value.data(), g.co, patch);
        if (T* gk = grad_of(self, 1)) {
          RowMat<T> cols;
          im2col(self.inputs[0]->value.data(), g, cols);
          MatMap<T>(gk, g.co, patch).noalias() += dy * cols.transpose();
        }
        if (self.inputs.size() > 2) {
          if (T* gb = grad_of(self, 2)) {
            for (std::size_t o = 0; o < g.co; ++o) gb[o] += dy.row(o).sum();
          }
        }
        if (T* gx = grad_of(self, 0)) {
          RowMat<T> dcols = kmat.transpose() * dy;
          col2im_add(dcols, g, gx);
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, Padding padding) {
  return conv2d_impl<T>(x, kernels, nullptr, padding);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels,
                 const Tensor<T>& bias, Padding padding) {
  return conv2d_impl<T>(x, kernels, &bias, padding);
}

namespace {

struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

AxisTaps bilinear_taps(std::size_t in, std::size_t factor) {
  AxisTaps taps;
  const std::size_t out = in * factor;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.frac.resize(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    const auto lo = static_cast<std::size_t>(src);
    taps.lo[i] = lo;
    taps.hi[i] = lo + (lo + 1 < in ? 1 : 0);
    taps.frac[i] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor) {
  require_rank(x, 3, "upsample_bilinear");
  if (factor == 0) throw ShapeError("upsample_bilinear: factor must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  const AxisTaps ty = bilinear_taps(h, factor), tx = bilinear_taps(w, factor);
  std::vector<T> out(c * oh * ow);
  const auto xs = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = xs.data() + ch * h * w;
    T* dst = out.data() + ch * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const T ly = static_cast<T>(ty.frac[i]);
      const T* r0 = src + ty.lo[i] * w;
      const T* r1 = src + ty.hi[i] * w;
      for (std::size_t j = 0; j < ow; ++j) {
        const T lx = static_cast<T>(tx.frac[j]);
        const T top = (T(1) - lx) * r0[tx.lo[j]] + lx * r0[tx.hi[j]];
        const T bot = (T(1) - lx) * r1[tx.lo[j]] + lx * r1[tx.hi[j]];
        dst[i * ow + j] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  credit_flops(FlopCategory::other, 4 * c * oh * ow);
  return make_result<T>(
      "upsample_bilinear", {c, oh, ow}, std::move(out), {x.node_ptr()},
      [c, h, w, oh, ow, ty, tx](Node<T>& self) {
        T* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* dst = g + ch * h * w;
          const T* dy = self.grad.data() + ch * oh * ow;
          for (std::size_t i = 0; i < oh; ++i) {
            const T ly = static_cast<T>(ty.frac[i]);
            T* r0 = dst + ty.lo[i] * w;
            T* r1 = dst + ty.hi[i] * w;
            for (std::size_t j = 0; j < ow; ++j) {
              const T lx = static_cast<T>(tx.frac[j]);
              const T gv = dy[i * ow + j];
              r0[tx.lo[j]] += (T(1) - ly) * (T(1) - lx) * gv;
              r0[tx.hi[j]] += (T(1) - ly) * lx * gv;
              r1[tx.lo[j]] += ly * (T(1) - lx) * gv;
              r1[tx.hi[j]] += ly * lx * gv;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: cannot view " + to_string(x.shape()) +
                                        " as " + to_string(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x.node_ptr()},
                        [](Node<T>& self) {
                          if (T* g = grad_of(self, 0)) {
                            for (std::size_t j = 0; j < self.grad.size(); ++j) g[j] += self.grad[j];
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank(x, 2, "transpose");
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<T> out(n * m);
  MatMap<T>(out.data(), m, n) = as_matrix(x.node(), n, m).transpose();
  return make_result<T>("transpose", {m, n}, std::move(out), {x.node_ptr()},
                        [n, m](Node<T>& self) {
                          if (T* g = grad_of(self, 0)) {
                            MatMap<T>(g, n, m) += ConstMatMap<T>(self.grad.data(), m, n).transpose();
                          }
                        });
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t row, std::size_t col,
               std::size_t height, std::size_t width) {
  require_rank(x, 3, "crop");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(row + height <= h && col + width <= w && height > 0 && width > 0,
          "crop: window exceeds " + to_string(x.shape()));
  std::vector<T> out(c * height * width);
  const auto xs = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < height; ++i) {
      const T* src = xs.data() + (ch * h + row + i) * w + col;
      std::copy(src, src + width, out.data() + (ch * height + i) * width);
    }
  }
  return make_result<T>("crop", {c, height, width}, std::move(out), {x.node_ptr()},
                        [c, h, w, row, col, height, width](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            for (std::size_t i = 0; i < height; ++i) {
                              T* dst = g + (ch * h + row + i) * w + col;
                              const T* src = self.grad.data() + (ch * height + i) * width;
                              for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> replicate_pad(const Tensor<T>& x, std::size_t top, std::size_t bottom,
                        std::size_t left, std::size_t right) {
  require_rank(x, 3, "replicate_pad");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  auto src_row = [=](std::size_t i) {
    return i < top ? 0 : std::min(i - top, h - 1);
  };
  auto src_col = [=](std::size_t j) {
    return j < left ? 0 : std::min(j - left, w - 1);
  };
  std::vector<T> out(c * oh * ow);
  const auto xs = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < oh; ++i) {
      const T* src = xs.data() + (ch * h + src_row(i)) * w;
      T* dst = out.data() + (ch * oh + i) * ow;
      for (std::size_t j = 0; j < ow; ++j) dst[j] = src[src_col(j)];
    }
  }
  return make_result<T>("replicate_pad", {c, oh, ow}, std::move(out), {x.node_ptr()},
                        [=](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            for (std::size_t i = 0; i < oh; ++i) {
                              T* dst = g + (ch * h + src_row(i)) * w;
                              const T* src = self.grad.data() + (ch * oh + i) * ow;
                              for (std::size_t j = 0; j < ow; ++j) dst[src_col(j)] += src[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> select_channels(const Tensor<T>& x, std::span<const std::size_t> index) {
  require(x.rank() >= 1, "select_channels: rank-0 input");
  const std::size_t c = x.dim(0);
  const std::size_t slab = x.size() / c;
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t i : idx) {
    require(i < c, "select_channels: index " + std::to_string(i) +
                       " out of range for " + std::to_string(c) + " channels");
  }
  Shape shape = x.shape();
  shape[0] = idx.size();
  std::vector<T> out(idx.size() * slab);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(x.values().data() + idx[k] * slab, slab, out.data() + k * slab);
  }
  return make_result<T>("select_channels", std::move(shape), std::move(out),
                        {x.node_ptr()}, [idx, slab](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          for (std::size_t k = 0; k < idx.size(); ++k) {
                            for (std::size_t j = 0; j < slab; ++j) {
                              g[idx[k] * slab + j] += self.grad[k * slab + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> index) {
  require_rank(table, 2, "gather_rows");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t i : idx) {
    require(i < rows, "gather_rows: row " + std::to_string(i) + " out of range");
  }
  std::vector<T> out(idx.size() * d);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(table.values().data() + idx[k] * d, d, out.data() + k * d);
  }
  return make_result<T>("gather_rows", {idx.size(), d}, std::move(out),
                        {table.node_ptr()}, [idx, d](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          for (std::size_t k = 0; k < idx.size(); ++k) {
                            for (std::size_t j = 0; j < d; ++j) g[idx[k] * d + j] += self.grad[k * d + j];
                          }
                        });
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch) {
  require_rank(x, 3, "patchify");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(patch > 0 && h % patch == 0 && w % patch == 0,
          "patchify: patch " + std::to_string(patch) + " does not divide " +
              to_string(x.shape()));
  const std::size_t gh = h / patch, gw = w / patch, pp = patch * patch;
  const std::size_t n = gh * gw;
  // Flat source offset for every output element; shared by forward and backward.
  std::vector<std::size_t> src(c * n * pp);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        for (std::size_t a = 0; a < patch; ++a) {
          for (std::size_t b = 0; b < patch; ++b) {
            src[((ch * n) + py * gw + px) * pp + a * patch + b] =
                (ch * h + py * patch + a) * w + px * patch + b;
          }
        }
      }
    }
  }
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.values()[src[i]];
  return make_result<T>("patchify", {c, n, pp}, std::move(out), {x.node_ptr()},
                        [src = std::move(src)](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& x, std::size_t grid_h, std::size_t grid_w,
                     std::size_t q, std::size_t channels) {
  require_rank(x, 2, "unpatchify");
  require(x.dim(0) == grid_h * grid_w && x.dim(1) == channels * q * q,
          "unpatchify: expected [" + std::to_string(grid_h * grid_w) + "," +
              std::to_string(channels * q * q) + "], got " + to_string(x.shape()));
  const std::size_t oh = grid_h * q, ow = grid_w * q;
  std::vector<std::size_t> dst(x.size());
  for (std::size_t py = 0; py < grid_h; ++py) {
    for (std::size_t px = 0; px < grid_w; ++px) {
      const std::size_t token = py * grid_w + px;
      for (std::size_t k = 0; k < channels; ++k) {
        for (std::size_t a = 0; a < q; ++a) {
          for (std::size_t b = 0; b < q; ++b) {
            dst[token * channels * q * q + (k * q + a) * q + b] =
                (k * oh + py * q + a) * ow + px * q + b;
          }
        }
      }
    }
  }
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < dst.size(); ++i) out[dst[i]] = x.values()[i];
  return make_result<T>("unpatchify", {channels, oh, ow}, std::move(out),
                        {x.node_ptr()}, [dst = std::move(dst)](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < dst.size(); ++i) g[i] += self.grad[dst[i]];
                        });
}

template <typename T>
Tensor<T> collapse_attention(const Tensor<T>& query, const Tensor<T>& keys,
                             const Tensor<T>& values) {
  require_rank(keys, 3, "collapse_attention");
  require_same_shape(keys, values, "collapse_attention");
  const std::size_t c = keys.dim(0), n = keys.dim(1), d = keys.dim(2);
  require(c >= 1, "collapse_attention: need at least one slab");
  require(query.size() == d, "collapse_attention: query width mismatch");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  const T* qv = query.values().data();
  const T* kv = keys.values().data();
  const T* vv = values.values().data();
  std::vector<T> weights(c * n);
  std::vector<T> out(n * d, T(0));
  for (std::size_t s = 0; s < n; ++s) {
    T best = -std::numeric_limits<T>::infinity();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* key = kv + (ch * n + s) * d;
      T score = T(0);
      for (std::size_t j = 0; j < d; ++j) score += qv[j] * key[j];
      score *= inv_sqrt_d;
      weights[ch * n + s] = score;
      best = std::max(best, score);
    }
    T denom = T(0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T& wgt = weights[ch * n + s];
      wgt = std::exp(wgt - best);
      denom += wgt;
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      T& wgt = weights[ch * n + s];
      wgt /= denom;
      const T* val = vv + (ch * n + s) * d;
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += wgt * val[j];
    }
  }
  credit_flops(FlopCategory::other, 2 * c * n * d);
  return make_result<T>(
      "collapse_attention", {n, d}, std::move(out),
      {query.node_ptr(), keys.node_ptr(), values.node_ptr()},
      [c, n, d, inv_sqrt_d, weights = std::move(weights)](Node<T>& self) {
        const T* qv = self.inputs[0]->value.data();
        const T* kv = self.inputs[1]->value.data();
        const T* vv = self.inputs[2]->value.data();
        T* gq = grad_of(self, 0);
        T* gk = grad_of(self, 1);
        T* gv = grad_of(self, 2);
        std::vector<T> da(c);
        for (std::size_t s = 0; s < n; ++s) {
          const T* dout = self.grad.data() + s * d;
          T weighted = T(0);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* val = vv + (ch * n + s) * d;
            T acc = T(0);
            for (std::size_t j = 0; j < d; ++j) acc += dout[j] * val[j];
            da[ch] = acc;
            weighted += weights[ch * n + s] * acc;
          }
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T a = weights[ch * n + s];
            const T dscore = a * (da[ch] - weighted) * inv_sqrt_d;
            const T* key = kv + (ch * n + s) * d;
            if (gv) {
              T* dst = gv + (ch * n + s) * d;
              for (std::size_t j = 0; j < d; ++j) dst[j] += a * dout[j];
            }
            if (gq) {
              for (std::size_t j = 0; j < d; ++j) gq[j] += dscore * key[j];
            }
            if (gk) {
              T* dst = gk + (ch * n + s) * d;
              for (std::size_t j = 0; j < d; ++j) dst[j] += dscore * qv[j];
            }
          }
        }
      });
}

#define DOWNSCALE_INSTANTIATE_OPS(T)                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                       \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> batched_linear(const Tensor<T>&, const Tensor<T>&,                \
                                    const Tensor<T>&);                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                T);                                                    \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                               std::size_t);                                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, Padding);              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                            Padding);                                                  \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t);                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                 \
  template Tensor<T> transpose(const Tensor<T>&);                                      \
  template Tensor<T> crop(const Tensor<T>&, std::size_t, std::size_t, std::size_t,     \
                          std::size_t);                                                \
  template Tensor<T> replicate_pad(const Tensor<T>&, std::size_t, std::size_t,         \
                                   std::size_t, std::size_t);                          \
  template Tensor<T> select_channels(const Tensor<T>&, std::span<const std::size_t>);  \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);      \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> unpatchify(const Tensor<T>&, std::size_t, std::size_t,            \
                                std::size_t, std::size_t);                             \
  template Tensor<T> collapse_attention(const Tensor<T>&, const Tensor<T>&,            \
                                        const Tensor<T>&);

DOWNSCALE_INSTANTIATE_OPS(float)
DOWNSCALE_INSTANTIATE_OPS(double)

}  // namespace downscale
