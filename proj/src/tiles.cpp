#include "downscale/tiles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "downscale/detail/autograd.hpp"
#include "downscale/error.hpp"
#include "downscale/ops.hpp"

namespace downscale {

using detail::grad_of;
using detail::make_result;
using detail::require;

namespace {

std::vector<std::size_t> split_extent(std::size_t cells, std::size_t parts) {
  const std::size_t base = cells / parts, extra = cells % parts;
  std::vector<std::size_t> out(parts);
  for (std::size_t i = 0; i < parts; ++i) out[i] = base + (i < extra ? 1 : 0);
  return out;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

// Runs fn(worker) on `workers` threads and rethrows the first failure.
template <typename F>
void run_workers(std::size_t workers, F&& fn) {
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        fn(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

Rect TileLayout::output_core(std::size_t tile) const {
  const Rect& c = cores.at(tile);
  return {c.row * scale, c.col * scale, c.height * scale, c.width * scale};
}

TileLayout plan_tiles(std::size_t height, std::size_t width, std::size_t t_rows, std::size_t t_cols,
                      std::size_t halo, std::size_t patch, std::size_t scale) {
  if (t_rows == 0 || t_cols == 0) throw ConfigError("plan_tiles: tile grid must be at least 1x1");
  if (patch == 0 || scale == 0) throw ConfigError("plan_tiles: patch and scale must be positive");
  if (height % patch != 0 || width % patch != 0) {
    throw ShapeError("plan_tiles: patch " + std::to_string(patch) + " does not divide " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
  if (halo % patch != 0) throw ConfigError("plan_tiles: halo must be a multiple of the patch size");
  const auto rows = split_extent(height / patch, t_rows);
  const auto cols = split_extent(width / patch, t_cols);
  if (rows.back() == 0 || cols.back() == 0) throw ShapeError("plan_tiles: tile smaller than one patch");
  const std::size_t min_core = std::min(rows.back(), cols.back()) * patch;
  if (halo >= min_core) {
    throw ConfigError("plan_tiles: halo " + std::to_string(halo) + " must be smaller than the smallest core extent " +
                      std::to_string(min_core));
  }
  TileLayout layout;
  layout.height = height;
  layout.width = width;
  layout.rows = t_rows;
  layout.cols = t_cols;
  layout.halo = halo;
  layout.patch = patch;
  layout.scale = scale;
  std::size_t r0 = 0;
  for (std::size_t i = 0; i < t_rows; ++i) {
    const std::size_t h = rows[i] * patch;
    std::size_t c0 = 0;
    for (std::size_t j = 0; j < t_cols; ++j) {
      const std::size_t w = cols[j] * patch;
      layout.cores.push_back({r0, c0, h, w});
      const std::size_t pr = r0 >= halo ? r0 - halo : 0, pc = c0 >= halo ? c0 - halo : 0;
      const std::size_t pr1 = std::min(height, r0 + h + halo), pc1 = std::min(width, c0 + w + halo);
      layout.padded.push_back({pr, pc, pr1 - pr, pc1 - pc});
      c0 += w;
    }
    r0 += h;
  }
  return layout;
}

template <typename T>
Tensor<T> extract_tile(const Tensor<T>& input, const TileLayout& layout, std::size_t tile) {
  if (tile >= layout.count()) {
    throw ShapeError("extract_tile: tile " + std::to_string(tile) + " of " + std::to_string(layout.count()));
  }
  require(input.rank() == 3 && input.dim(1) == layout.height && input.dim(2) == layout.width,
          "extract_tile: input " + to_string(input.shape()) + " does not match the layout");
  const Rect& core = layout.cores[tile];
  const Rect& p = layout.padded[tile];
  const std::size_t h = layout.halo;
  const std::size_t top = h - (core.row - p.row), left = h - (core.col - p.col);
  const std::size_t bottom = h - (p.row + p.height - core.row - core.height);
  const std::size_t right = h - (p.col + p.width - core.col - core.width);
  Tensor<T> out = crop(input, p.row, p.col, p.height, p.width);
  if (top + bottom + left + right > 0) out = replicate_pad(out, top, bottom, left, right);
  return out;
}

template <typename T>
Tensor<T> stitch(const std::vector<Tensor<T>>& tile_outputs, const TileLayout& layout) {
  if (tile_outputs.size() != layout.count()) {
    throw ShapeError("stitch: " + std::to_string(tile_outputs.size()) + " outputs for " +
                     std::to_string(layout.count()) + " tiles");
  }
  const std::size_t s = layout.scale, K = tile_outputs.empty() ? 0 : tile_outputs[0].dim(0);
  const std::size_t H = layout.height * s, W = layout.width * s;
  std::vector<detail::NodePtr<T>> inputs;
  for (std::size_t t = 0; t < tile_outputs.size(); ++t) {
    const auto& y = tile_outputs[t];
    if (!y.defined()) throw ShapeError("stitch: missing output for tile " + std::to_string(t));
    require(y.rank() == 3 && y.dim(0) == K && y.dim(1) == layout.tile_height(t) * s &&
                y.dim(2) == layout.tile_width(t) * s,
            "stitch: tile " + std::to_string(t) + " output has shape " + to_string(y.shape()));
    inputs.push_back(y.node_ptr());
  }
  const std::size_t off = layout.halo * s;
  std::vector<T> out(K * H * W);
  for (std::size_t t = 0; t < tile_outputs.size(); ++t) {
    const Rect oc = layout.output_core(t);
    const std::size_t tw = tile_outputs[t].dim(2), th = tile_outputs[t].dim(1);
    const auto v = tile_outputs[t].values();
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t r = 0; r < oc.height; ++r) {
        const T* src = v.data() + (k * th + off + r) * tw + off;
        std::copy(src, src + oc.width, out.data() + (k * H + oc.row + r) * W + oc.col);
      }
    }
  }
  return make_result<T>("stitch", {K, H, W}, std::move(out), std::move(inputs), [layout, K, H, W](Node<T>& self) {
    const std::size_t s = layout.scale, off = layout.halo * s;
    for (std::size_t t = 0; t < layout.count(); ++t) {
      T* g = grad_of(self, t);
      if (!g) continue;
      const Rect oc = layout.output_core(t);
      const std::size_t th = layout.tile_height(t) * s, tw = layout.tile_width(t) * s;
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t r = 0; r < oc.height; ++r) {
          const T* src = self.grad.data() + (k * H + oc.row + r) * W + oc.col;
          T* dst = g + (k * th + off + r) * tw + off;
          for (std::size_t c = 0; c < oc.width; ++c) dst[c] += src[c];
        }
      }
    }
  });
}

template <typename T>
TiledOutput<T> tiled_forward(const Tensor<T>& input, ReslimModel<T>& model, const TileLayout& layout,
                             std::size_t workers) {
  const std::size_t n = layout.count();
  workers = std::clamp<std::size_t>(workers, 1, n);
  if (layout.scale != model.config().scale_factor) {
    throw ConfigError("tiled_forward: layout scale differs from the model scale factor");
  }
  std::vector<Tensor<T>> outputs(n);
  TiledOutput<T> result;
  result.reports.resize(n);
  const bool grad = grad_enabled();
  run_workers(workers, [&](std::size_t w) {
    GradModeGuard mode(grad);
    for (std::size_t t = w; t < n; t += workers) {
      const auto start = std::chrono::steady_clock::now();
      FlopScope scope;
      const Rect& core = layout.cores[t];
      ForwardOptions opt;
      opt.origin_row = static_cast<std::ptrdiff_t>(core.row) - static_cast<std::ptrdiff_t>(layout.halo);
      opt.origin_col = static_cast<std::ptrdiff_t>(core.col) - static_cast<std::ptrdiff_t>(layout.halo);
      ForwardResult<T> fr = reslim_forward(extract_tile(input, layout, t), model, opt);
      outputs[t] = fr.pred;
      auto& rep = result.reports[t];
      rep.tokens = fr.tokens;
      rep.worker = w;
      rep.tile = t;
      rep.flops = scope.ledger();
      rep.wall_ms = elapsed_ms(start);
    }
  });
  for (const auto& rep : result.reports) credit_flops(rep.flops);
  result.output = stitch(outputs, layout);
  return result;
}

template <typename T>
TiledStep tiled_gradients(std::span<const Sample<T>> batch, std::vector<ReslimModel<T>>& replicas,
                          const TileLayout& layout) {
  if (batch.empty()) throw ShapeError("tiled step: empty batch");
  if (replicas.empty()) throw ConfigError("tiled step: no replicas");
  const std::size_t W = replicas.size(), B = batch.size(), n_tiles = layout.count();
  const std::size_t s = layout.scale;
  const double N = static_cast<double>(layout.height * layout.width * s * s);
  const TvPrior prior = replicas[0].config().prior();
  const std::size_t items = B * n_tiles;

  TiledStep step;
  step.reports.resize(items);
  run_workers(W, [&](std::size_t w) {
    GradModeGuard mode(true);
    auto params = replicas[w].trainable();
    for (auto* p : params) p->zero_grad();
    std::vector<std::vector<T>> before(params.size());
    for (std::size_t item = w; item < items; item += W) {
      const auto start = std::chrono::steady_clock::now();
      const std::size_t b = item / n_tiles, t = item % n_tiles;
      for (std::size_t i = 0; i < params.size(); ++i) before[i].assign(params[i]->grad().begin(), params[i]->grad().end());
      FlopScope scope;
      const Rect& core = layout.cores[t];
      ForwardOptions opt;
      opt.origin_row = static_cast<std::ptrdiff_t>(core.row) - static_cast<std::ptrdiff_t>(layout.halo);
      opt.origin_col = static_cast<std::ptrdiff_t>(core.col) - static_cast<std::ptrdiff_t>(layout.halo);
      const Sample<T>& sample = batch[b];
      const ForwardResult<T> fr = reslim_forward(extract_tile(sample.input, layout, t), replicas[w], opt);
      const Rect oc = layout.output_core(t);
      const Tensor<T> pred = crop(fr.pred, layout.halo * s, layout.halo * s, oc.height, oc.width);
      const Tensor<T> truth = crop(sample.truth, oc.row, oc.col, oc.height, oc.width);
      const std::span<const double> lw(sample.lat_weights.data() + oc.row, oc.height);
      const Tensor<T> loss = bayesian_loss(pred, truth, lw, prior);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss on sample " + std::to_string(b) + ", tile " + std::to_string(t));
      }
      const double weight = static_cast<double>(W) * static_cast<double>(oc.area()) / (N * static_cast<double>(B));
      backward(scale(loss, static_cast<T>(weight)));

      double sq = 0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = params[i]->grad();
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double d = static_cast<double>(g[j]) - static_cast<double>(before[i][j]);
          sq += d * d;
        }
      }
      auto& rep = step.reports[item];
      rep.worker = w;
      rep.tile = t;
      rep.sample = b;
      rep.tokens = fr.tokens;
      rep.loss = value;
      rep.grad_norm = std::sqrt(sq);
      rep.flops = scope.ledger();
      rep.wall_ms = elapsed_ms(start);
    }
  });

  for (std::size_t item = 0; item < items; ++item) {
    const Rect oc = layout.output_core(item % n_tiles);
    step.loss += static_cast<double>(oc.area()) / (N * static_cast<double>(B)) * step.reports[item].loss;
  }

  // One averaging round: fixed worker order, then broadcast.
  std::vector<std::vector<Tensor<T>*>> params;
  for (auto& r : replicas) params.push_back(r.trainable());
  const T inv_w = T(1) / static_cast<T>(W);
  for (std::size_t i = 0; i < params[0].size(); ++i) {
    std::vector<T> avg(params[0][i]->grad().begin(), params[0][i]->grad().end());
    for (std::size_t w = 1; w < W; ++w) {
      const auto g = params[w][i]->grad();
      for (std::size_t j = 0; j < avg.size(); ++j) avg[j] += g[j];
    }
    if (W > 1) {
      for (auto& v : avg) v *= inv_w;
    }
    for (std::size_t w = 0; w < W; ++w) std::copy(avg.begin(), avg.end(), params[w][i]->mutable_grad().begin());
  }
  return step;
}

template <typename T>
TiledStep tiled_train_step(std::span<const Sample<T>> batch, std::vector<ReslimModel<T>>& replicas,
                           std::vector<AdamState<T>>& optimizers, const TileLayout& layout) {
  if (optimizers.size() != replicas.size()) throw ConfigError("tiled step: one optimizer state per replica required");
  TiledStep step = tiled_gradients(batch, replicas, layout);
  for (std::size_t w = 0; w < replicas.size(); ++w) {
    auto params = replicas[w].trainable();
    adam_step(std::span<Tensor<T>* const>(params), optimizers[w]);
  }
  const std::uint32_t h0 = parameter_hash(replicas[0]);
  for (std::size_t w = 1; w < replicas.size(); ++w) {
    if (parameter_hash(replicas[w]) != h0) {
      throw NumericalError("replica " + std::to_string(w) + " diverged from replica 0 after the update");
    }
  }
  return step;
}

template <typename T>
double seam_rmse(const Tensor<T>& tiled, const Tensor<T>& reference, const TileLayout& layout, std::size_t band) {
  require(tiled.shape() == reference.shape() && tiled.rank() == 3, "seam_rmse: shape mismatch");
  const std::size_t K = tiled.dim(0), H = tiled.dim(1), W = tiled.dim(2);
  std::vector<bool> row_seam(H, false), col_seam(W, false);
  auto mark = [band](std::vector<bool>& seam, std::size_t at) {
    const std::size_t lo = at >= band ? at - band : 0, hi = std::min(seam.size(), at + band);
    for (std::size_t i = lo; i < hi; ++i) seam[i] = true;
  };
  for (std::size_t t = 0; t < layout.count(); ++t) {
    const Rect oc = layout.output_core(t);
    if (oc.row > 0) mark(row_seam, oc.row);
    if (oc.col > 0) mark(col_seam, oc.col);
  }
  double sq = 0;
  std::size_t n = 0;
  const auto a = tiled.values(), b = reference.values();
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        if (!row_seam[r] && !col_seam[c]) continue;
        const std::size_t i = (k * H + r) * W + c;
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        sq += d * d;
        ++n;
      }
    }
  }
  return n == 0 ? 0.0 : std::sqrt(sq / static_cast<double>(n));
}

#define DOWNSCALE_INSTANTIATE_TILES(T)                                                                       \
  template Tensor<T> extract_tile<T>(const Tensor<T>&, const TileLayout&, std::size_t);                      \
  template Tensor<T> stitch<T>(const std::vector<Tensor<T>>&, const TileLayout&);                            \
  template TiledOutput<T> tiled_forward<T>(const Tensor<T>&, ReslimModel<T>&, const TileLayout&, std::size_t); \
  template TiledStep tiled_gradients<T>(std::span<const Sample<T>>, std::vector<ReslimModel<T>>&,           \
                                        const TileLayout&);                                                  \
  template TiledStep tiled_train_step<T>(std::span<const Sample<T>>, std::vector<ReslimModel<T>>&,          \
                                         std::vector<AdamState<T>>&, const TileLayout&);                     \
  template double seam_rmse<T>(const Tensor<T>&, const Tensor<T>&, const TileLayout&, std::size_t);

DOWNSCALE_INSTANTIATE_TILES(float)
DOWNSCALE_INSTANTIATE_TILES(double)

}  // namespace downscale
