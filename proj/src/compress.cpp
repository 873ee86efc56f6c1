#include "downscale/compress.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <deque>
#include <numbers>

#include <nlohmann/json.hpp>

#include "downscale/detail/autograd.hpp"
#include "downscale/error.hpp"
#include "downscale/flops.hpp"
#include "downscale/ops.hpp"

namespace downscale {

using detail::grad_of;
using detail::make_result;
using detail::require;

namespace {

using Index = Eigen::Index;

// Clamped (replicate) read.
double at_clamped(const ImageD& img, Index r, Index c) {
  r = std::clamp<Index>(r, 0, img.rows() - 1);
  c = std::clamp<Index>(c, 0, img.cols() - 1);
  return img(r, c);
}

ImageD gaussian_blur(const ImageD& img, double sigma) {
  if (sigma <= 0) return img;
  const Index radius = static_cast<Index>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (Index i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (auto& w : k) w /= total;

  ImageD tmp(img.rows(), img.cols());
  for (Index r = 0; r < img.rows(); ++r) {
    for (Index c = 0; c < img.cols(); ++c) {
      double acc = 0;
      for (Index i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * at_clamped(img, r, c + i);
      tmp(r, c) = acc;
    }
  }
  ImageD out(img.rows(), img.cols());
  for (Index r = 0; r < img.rows(); ++r) {
    for (Index c = 0; c < img.cols(); ++c) {
      double acc = 0;
      for (Index i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * at_clamped(tmp, r + i, c);
      out(r, c) = acc;
    }
  }
  return out;
}

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t log2_exact(std::size_t n) { return static_cast<std::size_t>(std::countr_zero(n)); }

}  // namespace

EdgeMap canny(const ImageD& image, const CannyParams& params) {
  if (image.rows() < 3 || image.cols() < 3) throw ShapeError("canny: image must be at least 3x3");
  if (!(params.low_frac >= 0 && params.low_frac <= params.high_frac && params.high_frac <= 1)) {
    throw ConfigError("canny: need 0 <= low_frac <= high_frac <= 1");
  }
  const Index h = image.rows(), w = image.cols();
  const ImageD blurred = gaussian_blur(image, params.sigma);

  ImageD gx(h, w), gy(h, w);
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      auto p = [&](Index dr, Index dc) { return at_clamped(blurred, r + dr, c + dc); };
      gx(r, c) = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
      gy(r, c) = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
    }
  }
  const ImageD mag = (gx.square() + gy.square()).sqrt();
  const double gmax = mag.maxCoeff();

  EdgeMap out;
  out.params = params;
  out.edges.setConstant(h, w, false);
  if (!(gmax > 0)) return out;

  auto mag_at = [&](Index r, Index c) {
    return (r < 0 || c < 0 || r >= h || c >= w) ? 0.0 : mag(r, c);
  };
  ImageD thin = ImageD::Zero(h, w);
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      const double m = mag(r, c);
      if (m == 0) continue;
      double angle = std::atan2(gy(r, c), gx(r, c)) * 180.0 / std::numbers::pi;
      if (angle < 0) angle += 180.0;
      Index dr = 0, dc = 0;
      if (angle < 22.5 || angle >= 157.5) {
        dc = 1;
      } else if (angle < 67.5) {
        dr = 1;
        dc = 1;
      } else if (angle < 112.5) {
        dr = 1;
      } else {
        dr = 1;
        dc = -1;
      }
      const double behind = mag_at(r - dr, c - dc);
      const double ahead = mag_at(r + dr, c + dc);
      if (m > behind && m >= ahead) thin(r, c) = m;
    }
  }

  const double low = params.low_frac * gmax, high = params.high_frac * gmax;
  std::deque<std::pair<Index, Index>> queue;
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      if (thin(r, c) > 0 && thin(r, c) >= high) {
        out.edges(r, c) = true;
        queue.emplace_back(r, c);
      }
    }
  }
  while (!queue.empty()) {
    const auto [r, c] = queue.front();
    queue.pop_front();
    for (Index dr = -1; dr <= 1; ++dr) {
      for (Index dc = -1; dc <= 1; ++dc) {
        const Index rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= h || cc >= w || out.edges(rr, cc)) continue;
        if (thin(rr, cc) > 0 && thin(rr, cc) >= low) {
          out.edges(rr, cc) = true;
          queue.emplace_back(rr, cc);
        }
      }
    }
  }
  return out;
}

std::size_t PatchSet::scale_levels() const { return log2_exact(max_side / min_side) + 1; }

std::size_t PatchSet::scale_index(const Patch& p) const { return log2_exact(p.side / min_side); }

PatchSet quadtree_partition(const EdgeMap& edges, std::size_t min_side,
                            std::size_t max_side, double density_threshold) {
  if (min_side == 0 || max_side < min_side || max_side % min_side != 0 || !is_pow2(max_side / min_side)) {
    throw ConfigError("quadtree: max_side must be a power-of-two multiple of min_side");
  }
  const std::size_t h = edges.height(), w = edges.width();
  if (h == 0 || w == 0 || h % max_side != 0 || w % max_side != 0) {
    throw ShapeError("quadtree: edge map " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not a multiple of max_side " + std::to_string(max_side));
  }
  // Summed-area table for O(1) block counts.
  Eigen::Array<std::size_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sat(h + 1, w + 1);
  sat.setZero();
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      sat(r + 1, c + 1) = sat(r, c + 1) + sat(r + 1, c) - sat(r, c) +
                          (edges.edges(static_cast<Index>(r), static_cast<Index>(c)) ? 1 : 0);
    }
  }
  auto count = [&](std::size_t r, std::size_t c, std::size_t s) {
    return sat(r + s, c + s) - sat(r, c + s) - sat(r + s, c) + sat(r, c);
  };

  PatchSet ps;
  ps.height = ps.orig_height = h;
  ps.width = ps.orig_width = w;
  ps.min_side = min_side;
  ps.max_side = max_side;
  ps.threshold = density_threshold;
  std::vector<Patch> stack;
  for (std::size_t r = 0; r < h; r += max_side) {
    for (std::size_t c = 0; c < w; c += max_side) stack.push_back({r, c, max_side});
  }
  while (!stack.empty()) {
    const Patch p = stack.back();
    stack.pop_back();
    const double density = static_cast<double>(count(p.row, p.col, p.side)) / static_cast<double>(p.side * p.side);
    if (p.side > min_side && density > density_threshold) {
      const std::size_t s = p.side / 2;
      stack.push_back({p.row, p.col, s});
      stack.push_back({p.row, p.col + s, s});
      stack.push_back({p.row + s, p.col, s});
      stack.push_back({p.row + s, p.col + s, s});
    } else {
      ps.patches.push_back(p);
    }
  }
  std::sort(ps.patches.begin(), ps.patches.end(), [](const Patch& a, const Patch& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  return ps;
}

PatchSet uniform_patches(std::size_t height, std::size_t width, std::size_t side) {
  if (side == 0 || height % side != 0 || width % side != 0) {
    throw ShapeError("uniform_patches: side does not divide the extent");
  }
  PatchSet ps;
  ps.height = ps.orig_height = height;
  ps.width = ps.orig_width = width;
  ps.min_side = ps.max_side = side;
  ps.threshold = 0;
  for (std::size_t r = 0; r < height; r += side) {
    for (std::size_t c = 0; c < width; c += side) ps.patches.push_back({r, c, side});
  }
  return ps;
}

double compression_ratio(const PatchSet& ps, std::size_t uniform_side) {
  if (ps.patches.empty() || uniform_side == 0) throw ShapeError("compression_ratio: empty patch set");
  const double uniform = static_cast<double>(ps.height * ps.width) /
                         static_cast<double>(uniform_side * uniform_side);
  return uniform / static_cast<double>(ps.patches.size());
}

std::size_t padded_extent(std::size_t n, std::size_t side) { return (n + side - 1) / side * side; }

PatchSet partition_image(const ImageD& image, const CompressionSettings& settings,
                         const CannyParams& canny_params) {
  const auto h = static_cast<std::size_t>(image.rows()), w = static_cast<std::size_t>(image.cols());
  const std::size_t hp = padded_extent(h, settings.max_side), wp = padded_extent(w, settings.max_side);
  ImageD padded(static_cast<Index>(hp), static_cast<Index>(wp));
  for (Index r = 0; r < padded.rows(); ++r) {
    for (Index c = 0; c < padded.cols(); ++c) padded(r, c) = at_clamped(image, r, c);
  }
  PatchSet ps = quadtree_partition(canny(padded, canny_params), settings.min_side,
                                   settings.max_side, settings.threshold);
  ps.orig_height = h;
  ps.orig_width = w;
  return ps;
}

std::string patchset_to_json(const PatchSet& ps) {
  nlohmann::json j;
  j["min_side"] = ps.min_side;
  j["max_side"] = ps.max_side;
  j["threshold"] = ps.threshold;
  j["height"] = ps.height;
  j["width"] = ps.width;
  j["orig_height"] = ps.orig_height;
  j["orig_width"] = ps.orig_width;
  auto& arr = j["patches"] = nlohmann::json::array();
  for (const auto& p : ps.patches) arr.push_back({p.row, p.col, p.side});
  return j.dump();
}

PatchSet patchset_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    PatchSet ps;
    ps.min_side = j.at("min_side");
    ps.max_side = j.at("max_side");
    ps.threshold = j.at("threshold");
    ps.height = j.at("height");
    ps.width = j.at("width");
    ps.orig_height = j.value("orig_height", ps.height);
    ps.orig_width = j.value("orig_width", ps.width);
    for (const auto& p : j.at("patches")) ps.patches.push_back({p.at(0), p.at(1), p.at(2)});
    return ps;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("patch set json: ") + e.what());
  }
}

template <typename T>
Tensor<T> patch_pool(const Tensor<T>& x, const PatchSet& ps) {
  require(x.rank() == 3 && x.dim(1) == ps.height && x.dim(2) == ps.width,
          "patch_pool: image " + to_string(x.shape()) + " does not match layout " +
              std::to_string(ps.height) + "x" + std::to_string(ps.width));
  const std::size_t C = x.dim(0), H = ps.height, W = ps.width, m = ps.min_side;
  const std::size_t feat = C * m * m, n = ps.size();
  std::vector<T> out(n * feat, T(0));
  const auto xv = x.values();
  for (std::size_t p = 0; p < n; ++p) {
    const Patch& pt = ps.patches[p];
    const std::size_t f = pt.side / m;
    const T inv = T(1) / static_cast<T>(f * f);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < pt.side; ++y) {
        const T* row = xv.data() + (c * H + pt.row + y) * W + pt.col;
        T* dst = out.data() + p * feat + c * m * m + (y / f) * m;
        for (std::size_t xx = 0; xx < pt.side; ++xx) dst[xx / f] += row[xx] * inv;
      }
    }
  }
  credit_flops(FlopCategory::other, x.size());
  const PatchSet layout = ps;
  return make_result<T>("patch_pool", {n, feat}, std::move(out), {x.node_ptr()},
                        [layout, C](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          const std::size_t H = layout.height, W = layout.width, m = layout.min_side;
                          const std::size_t feat = C * m * m;
                          for (std::size_t p = 0; p < layout.size(); ++p) {
                            const Patch& pt = layout.patches[p];
                            const std::size_t f = pt.side / m;
                            const T inv = T(1) / static_cast<T>(f * f);
                            for (std::size_t c = 0; c < C; ++c) {
                              for (std::size_t y = 0; y < pt.side; ++y) {
                                T* row = g + (c * H + pt.row + y) * W + pt.col;
                                const T* src = self.grad.data() + p * feat + c * m * m + (y / f) * m;
                                for (std::size_t xx = 0; xx < pt.side; ++xx) row[xx] += src[xx / f] * inv;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> patch_broadcast(const Tensor<T>& x, const PatchSet& ps, std::size_t channels) {
  const std::size_t m = ps.min_side, feat = channels * m * m;
  require(x.rank() == 2 && x.dim(0) == ps.size() && x.dim(1) == feat,
          "patch_broadcast: expected [" + std::to_string(ps.size()) + "," + std::to_string(feat) +
              "], got " + to_string(x.shape()));
  const std::size_t H = ps.height, W = ps.width;
  std::vector<T> out(channels * H * W, T(0));
  const auto xv = x.values();
  for (std::size_t p = 0; p < ps.size(); ++p) {
    const Patch& pt = ps.patches[p];
    const std::size_t f = pt.side / m;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < pt.side; ++y) {
        T* row = out.data() + (c * H + pt.row + y) * W + pt.col;
        const T* src = xv.data() + p * feat + c * m * m + (y / f) * m;
        for (std::size_t xx = 0; xx < pt.side; ++xx) row[xx] = src[xx / f];
      }
    }
  }
  credit_flops(FlopCategory::other, out.size());
  const PatchSet layout = ps;
  return make_result<T>("patch_broadcast", {channels, H, W}, std::move(out), {x.node_ptr()},
                        [layout, channels](Node<T>& self) {
                          T* g = grad_of(self, 0);
                          if (!g) return;
                          const std::size_t H = layout.height, W = layout.width, m = layout.min_side;
                          const std::size_t feat = channels * m * m;
                          for (std::size_t p = 0; p < layout.size(); ++p) {
                            const Patch& pt = layout.patches[p];
                            const std::size_t f = pt.side / m;
                            for (std::size_t c = 0; c < channels; ++c) {
                              for (std::size_t y = 0; y < pt.side; ++y) {
                                const T* row = self.grad.data() + (c * H + pt.row + y) * W + pt.col;
                                T* dst = g + p * feat + c * m * m + (y / f) * m;
                                for (std::size_t xx = 0; xx < pt.side; ++xx) dst[xx / f] += row[xx];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> tokenize(const Tensor<T>& feature_image, const PatchSet& ps, const TokenizerWeights<T>& w) {
  require(w.scale_embedding.rank() == 2 && w.scale_embedding.dim(0) >= ps.scale_levels(),
          "tokenize: scale embedding has too few rows for this layout");
  std::vector<std::size_t> level(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) level[i] = ps.scale_index(ps.patches[i]);
  const Tensor<T> pooled = patch_pool(feature_image, ps);
  return add(linear(pooled, w.weight, w.bias), gather_rows(w.scale_embedding, std::span<const std::size_t>(level)));
}

template <typename T>
Tensor<T> detokenize(const Tensor<T>& tokens, const PatchSet& ps,
                     const DetokenizerWeights<T>& w, std::size_t channels) {
  require(tokens.rank() == 2 && tokens.dim(0) == ps.size(),
          "detokenize: " + std::to_string(tokens.rank() == 2 ? tokens.dim(0) : 0) +
              " tokens for a layout of " + std::to_string(ps.size()) + " patches");
  const Tensor<T> image = patch_broadcast(linear(tokens, w.weight, w.bias), ps, channels);
  const Tensor<T> smoothed = conv2d(image, w.smooth, w.smooth_bias, Padding::same);
  if (ps.orig_height == ps.height && ps.orig_width == ps.width) return smoothed;
  return crop(smoothed, 0, 0, ps.orig_height, ps.orig_width);
}

#define DOWNSCALE_INSTANTIATE_COMPRESS(T)                                                   \
  template Tensor<T> patch_pool<T>(const Tensor<T>&, const PatchSet&);                      \
  template Tensor<T> patch_broadcast<T>(const Tensor<T>&, const PatchSet&, std::size_t);    \
  template Tensor<T> tokenize<T>(const Tensor<T>&, const PatchSet&, const TokenizerWeights<T>&); \
  template Tensor<T> detokenize<T>(const Tensor<T>&, const PatchSet&, const DetokenizerWeights<T>&, \
                                   std::size_t);

DOWNSCALE_INSTANTIATE_COMPRESS(float)
DOWNSCALE_INSTANTIATE_COMPRESS(double)

}  // namespace downscale
