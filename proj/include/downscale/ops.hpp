#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "downscale/tensor.hpp"

// Differentiable primitives. Every op checks its shape contract (ShapeError),
// records a backward closure when grad mode is on, and charges the
// innermost FlopScope.
namespace downscale {

enum class Padding { same, valid };

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

// x + y where y's shape equals the trailing dimensions of x's shape
// (leading-dimension batch broadcast only).
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// [m,k] x [k,n] -> [m,n]; charged m*n*k to matmul.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x [n,k] * w [k,m] + bias [m].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Independent linear map per leading slab:
// x [C,n,k], w [C,k,m], bias [C,m] -> [C,n,m].
template <typename T>
Tensor<T> batched_linear(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>& bias);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);

// Row-wise normalization of x [n,d] with affine gamma, beta [d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

// softmax(q k^T / sqrt(d)) v per head. q, k, v are [n, heads*d]; head h uses
// columns [h*d, (h+1)*d). Charged 2*n^2*d per head to attention. Scores are
// streamed in row blocks and recomputed in backward, so memory is O(n*d).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k,
                    const Tensor<T>& v, std::size_t heads = 1);

// Cross-correlation. x [Ci,H,W], kernels [Co,Ci,kh,kw] (odd), optional
// bias [Co]; zero padding for Padding::same.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels,
                 Padding padding = Padding::same);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels,
                 const Tensor<T>& bias, Padding padding = Padding::same);

// Bilinear resize by an integer factor with half-pixel centers and edge
// clamping: [C,H,W] -> [C,fH,fW].
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor);

// Same data, new shape (element count must match).
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// [n,m] -> [m,n].
template <typename T> Tensor<T> transpose(const Tensor<T>& x);

// x [C,H,W] -> x[:, row:row+height, col:col+width].
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t row, std::size_t col,
               std::size_t height, std::size_t width);

// Edge-replicating pad of x [C,H,W].
template <typename T>
Tensor<T> replicate_pad(const Tensor<T>& x, std::size_t top,
                        std::size_t bottom, std::size_t left,
                        std::size_t right);

// Picks leading-axis slabs: x [C,...] -> [idx.size(),...].
template <typename T>
Tensor<T> select_channels(const Tensor<T>& x,
                          std::span<const std::size_t> index);

// Rows of table [L,d] -> [idx.size(), d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table,
                      std::span<const std::size_t> index);

// Non-overlapping p x p patches per channel, row-major patch order:
// x [C,H,W] -> [C, (H/p)*(W/p), p*p].
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch);

// Pixel shuffle from token rows to an image. x [gh*gw, K*q*q] with features
// ordered (channel, row-in-patch, col-in-patch) -> [K, gh*q, gw*q].
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& x, std::size_t grid_h,
                     std::size_t grid_w, std::size_t q, std::size_t channels);

// Cross-attention that collapses the leading axis: for every position s a
// single query attends over keys[c,s,:], c < C, and returns the weighted sum
// of values[c,s,:]. query [d], keys/values [C,n,d] -> [n,d].
template <typename T>
Tensor<T> collapse_attention(const Tensor<T>& query, const Tensor<T>& keys,
                             const Tensor<T>& values);

}  // namespace downscale
