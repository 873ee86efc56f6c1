#include "downscale/reslim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

#include "downscale/crc32.hpp"
#include "downscale/error.hpp"
#include "downscale/ops.hpp"

namespace downscale {

void ReslimConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("reslim config: " + m); };
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) fail("embed_dim must be a positive multiple of num_heads");
  if (embed_dim % 4 != 0) fail("embed_dim must be divisible by 4 for the 2-D position encoding");
  if (patch_size == 0) fail("patch_size must be positive");
  if (in_channels == 0 || out_channels == 0) fail("channel counts must be positive");
  if (conv_hidden == 0) fail("conv_hidden must be positive");
  scale_slot(scale_factor);
  if (residual_channel_map.size() != out_channels) {
    fail("residual_channel_map has " + std::to_string(residual_channel_map.size()) + " entries for " +
         std::to_string(out_channels) + " outputs");
  }
  for (auto c : residual_channel_map) {
    if (c >= in_channels) fail("residual_channel_map entry " + std::to_string(c) + " out of range");
  }
  if (norm.size() != in_channels) fail("norm must have one (mean, std) pair per input channel");
  for (const auto& n : norm) {
    if (!(n.std > 0) || !std::isfinite(n.mean)) fail("norm std must be positive and mean finite");
  }
  if (compression) {
    const auto& s = compression_settings;
    if (s.min_side == 0 || s.max_side < s.min_side || s.max_side % s.min_side != 0 ||
        !std::has_single_bit(s.max_side / s.min_side)) {
      fail("compression max_side must be a power-of-two multiple of min_side");
    }
    if (!(s.threshold >= 0 && s.threshold <= 1)) fail("compression threshold must lie in [0, 1]");
  }
  if (!(tv_weight >= 0)) fail("tv_weight must be >= 0");
  if (!(huber_delta > 0)) fail("huber_delta must be > 0");
}

ReslimConfig reslim_preset(const std::string& name) {
  ReslimConfig c;
  if (name == "9.5M") {
    c.embed_dim = 256, c.num_layers = 6, c.num_heads = 4;
  } else if (name == "126M") {
    c.embed_dim = 1024, c.num_layers = 8, c.num_heads = 16;
  } else if (name == "1B") {
    c.embed_dim = 3072, c.num_layers = 8, c.num_heads = 24;
  } else if (name == "10B") {
    c.embed_dim = 8192, c.num_layers = 11, c.num_heads = 32;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected 9.5M, 126M, 1B or 10B)");
  }
  return c;
}

std::size_t count_tokens(std::size_t h, std::size_t w, std::size_t c, std::size_t patch) {
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("count_tokens: patch " + std::to_string(patch) + " does not divide " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  return (h / patch) * (w / patch) * c;
}

std::size_t scale_slot(std::size_t scale) {
  for (std::size_t i = 0; i < std::size(kScales); ++i) {
    if (kScales[i] == scale) return i;
  }
  throw ConfigError("unsupported scale factor " + std::to_string(scale) + " (expected 1, 2, 4 or 8)");
}

namespace {

std::size_t scale_levels(const CompressionSettings& s) {
  return static_cast<std::size_t>(std::countr_zero(s.max_side / s.min_side)) + 1;
}

}  // namespace

std::size_t count_parameters(const ReslimConfig& cfg) {
  const std::size_t d = cfg.embed_dim, C = cfg.in_channels, K = cfg.out_channels;
  const std::size_t p = cfg.patch_size, hid = cfg.conv_hidden;
  std::size_t n = C * p * p * d + 2 * C * d;  // patch embedding, bias, variable embedding
  n += d + 2 * d * d;                          // aggregation
  n += std::size(kScales) * d;                 // resolution table
  if (cfg.compression) {
    const std::size_t m = cfg.compression_settings.min_side;
    n += d;                                                        // edge projection
    n += d * m * m * d + d + scale_levels(cfg.compression_settings) * d;
    n += d * d * m * m + d * m * m + d * d * 9 + d;
  }
  n += cfg.num_layers * (12 * d * d + 13 * d);
  n += 2 * d;
  for (auto s : kScales) {
    const std::size_t out = K * (p * s) * (p * s);
    n += d * out + out;
  }
  n += 2 * (hid * K * 9 + hid + K * hid * 9 + K);  // decoder and residual convs
  return n;
}

template <typename T>
ReslimModel<T>::ReslimModel(ReslimConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Shape shape, double sd) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(sd * normal(rng));
    return Tensor<T>::from_values(std::move(shape), std::move(v), true);
  };
  auto zeros = [](Shape shape) { return Tensor<T>::zeros(std::move(shape), true); };
  auto ones = [](Shape shape) { return Tensor<T>::full(std::move(shape), T(1), true); };

  const std::size_t d = config_.embed_dim, C = config_.in_channels, K = config_.out_channels;
  const std::size_t p = config_.patch_size, hid = config_.conv_hidden;

  embed_weight = randn({C, p * p, d}, 1.0 / static_cast<double>(p));
  embed_bias = zeros({C, d});
  var_embedding = randn({C, d}, 0.02);
  agg_query = randn({d}, 0.02);
  agg_wk = randn({d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  agg_wv = randn({d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  res_embedding = zeros({std::size(kScales), d});

  if (config_.compression) {
    const std::size_t m = config_.compression_settings.min_side, mm = m * m;
    edge_proj = Tensor<T>::full({d}, T(1) / static_cast<T>(d), false);
    // Identity-like projections: pooled block averages in, replicated blocks out.
    std::vector<T> tw(d * mm * d, T(0));
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t j = 0; j < mm; ++j) tw[(c * mm + j) * d + c] = T(1) / static_cast<T>(mm);
    }
    tokenizer.weight = Tensor<T>::from_values({d * mm, d}, std::move(tw), true);
    tokenizer.bias = zeros({d});
    tokenizer.scale_embedding = zeros({scale_levels(config_.compression_settings), d});
    std::vector<T> dw(d * d * mm, T(0));
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t j = 0; j < mm; ++j) dw[c * d * mm + c * mm + j] = T(1);
    }
    detokenizer.weight = Tensor<T>::from_values({d, d * mm}, std::move(dw), true);
    detokenizer.bias = zeros({d * mm});
    std::vector<T> sw(d * d * 9, T(0));
    for (std::size_t c = 0; c < d; ++c) sw[(c * d + c) * 9 + 4] = T(1);
    detokenizer.smooth = Tensor<T>::from_values({d, d, 3, 3}, std::move(sw), true);
    detokenizer.smooth_bias = zeros({d});
  }

  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    TransformerBlock<T> b;
    b.ln1_gamma = ones({d});
    b.ln1_beta = zeros({d});
    b.wq = randn({d, d}, sd);
    b.bq = zeros({d});
    b.wk = randn({d, d}, sd);
    b.bk = zeros({d});
    b.wv = randn({d, d}, sd);
    b.bv = zeros({d});
    b.wo = randn({d, d}, sd / std::sqrt(2.0 * static_cast<double>(config_.num_layers)));
    b.bo = zeros({d});
    b.ln2_gamma = ones({d});
    b.ln2_beta = zeros({d});
    b.w1 = randn({d, 4 * d}, sd);
    b.b1 = zeros({4 * d});
    b.w2 = randn({4 * d, d}, 0.5 * sd / std::sqrt(2.0 * static_cast<double>(config_.num_layers)));
    b.b2 = zeros({d});
    blocks.push_back(std::move(b));
  }
  final_gamma = ones({d});
  final_beta = zeros({d});
  for (auto s : kScales) {
    const std::size_t out = K * (p * s) * (p * s);
    heads.push_back({zeros({d, out}), zeros({out})});
  }
  dec_conv1 = randn({hid, K, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(K)));
  dec_bias1 = zeros({hid});
  dec_conv2 = randn({K, hid, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(hid)));
  dec_bias2 = zeros({K});
  res_conv1 = randn({hid, K, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(K)));
  res_bias1 = zeros({hid});
  res_conv2 = zeros({K, hid, 3, 3});
  res_bias2 = zeros({K});
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ReslimModel<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out = {
      {"embed.weight", &embed_weight}, {"embed.bias", &embed_bias},
      {"embed.variable", &var_embedding}, {"aggregate.query", &agg_query},
      {"aggregate.wk", &agg_wk}, {"aggregate.wv", &agg_wv},
      {"resolution.table", &res_embedding}};
  if (config_.compression) {
    out.insert(out.end(), {{"compress.edge_proj", &edge_proj},
                           {"compress.tok.weight", &tokenizer.weight},
                           {"compress.tok.bias", &tokenizer.bias},
                           {"compress.tok.scale", &tokenizer.scale_embedding},
                           {"compress.detok.weight", &detokenizer.weight},
                           {"compress.detok.bias", &detokenizer.bias},
                           {"compress.detok.smooth", &detokenizer.smooth},
                           {"compress.detok.smooth_bias", &detokenizer.smooth_bias}});
  }
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    out.insert(out.end(), {{pre + "ln1.gamma", &b.ln1_gamma}, {pre + "ln1.beta", &b.ln1_beta},
                           {pre + "wq", &b.wq}, {pre + "bq", &b.bq}, {pre + "wk", &b.wk},
                           {pre + "bk", &b.bk}, {pre + "wv", &b.wv}, {pre + "bv", &b.bv},
                           {pre + "wo", &b.wo}, {pre + "bo", &b.bo},
                           {pre + "ln2.gamma", &b.ln2_gamma}, {pre + "ln2.beta", &b.ln2_beta},
                           {pre + "w1", &b.w1}, {pre + "b1", &b.b1}, {pre + "w2", &b.w2},
                           {pre + "b2", &b.b2}});
  }
  out.insert(out.end(), {{"final.gamma", &final_gamma}, {"final.beta", &final_beta}});
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const std::string pre = "head.x" + std::to_string(kScales[i]) + ".";
    out.insert(out.end(), {{pre + "weight", &heads[i].weight}, {pre + "bias", &heads[i].bias}});
  }
  out.insert(out.end(), {{"decoder.conv1", &dec_conv1}, {"decoder.bias1", &dec_bias1},
                         {"decoder.conv2", &dec_conv2}, {"decoder.bias2", &dec_bias2},
                         {"residual.conv1", &res_conv1}, {"residual.bias1", &res_bias1},
                         {"residual.conv2", &res_conv2}, {"residual.bias2", &res_bias2}});
  return out;
}

template <typename T>
std::vector<Tensor<T>*> ReslimModel<T>::trainable() {
  std::vector<Tensor<T>*> out;
  for (auto& [name, t] : named_parameters()) {
    if (t != &edge_proj) out.push_back(t);
  }
  return out;
}

template <typename T>
std::size_t ReslimModel<T>::parameter_count() {
  std::size_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t->size();
  return n;
}

template <typename T>
ReslimModel<T> ReslimModel<T>::clone() const {
  ReslimModel out = *this;
  for (auto& [name, t] : out.named_parameters()) {
    const bool rg = t->requires_grad();
    *t = t->detach();
    t->set_requires_grad(rg);
  }
  out.layout_cache = std::make_shared<LayoutCache>();
  return out;
}

template <typename T>
std::vector<StoredTensor> ReslimModel<T>::to_stored() {
  std::vector<StoredTensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(store(name, *t));
  return out;
}

template <typename T>
void ReslimModel<T>::load_stored(const std::vector<StoredTensor>& tensors) {
  auto params = named_parameters();
  if (params.size() != tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (tensors[i].name != name || tensors[i].shape != t->shape()) {
      throw FormatError("checkpoint tensor '" + tensors[i].name + "' " + to_string(tensors[i].shape) +
                        " does not match '" + name + "' " + to_string(t->shape()));
    }
    auto dst = t->mutable_values();
    std::transform(tensors[i].values.begin(), tensors[i].values.end(), dst.begin(),
                   [](float v) { return static_cast<T>(v); });
  }
  layout_cache = std::make_shared<LayoutCache>();
}

template <typename T>
Tensor<T> position_encoding(std::size_t gh, std::size_t gw, std::size_t dim, std::ptrdiff_t row0,
                            std::ptrdiff_t col0) {
  if (dim % 4 != 0) throw ShapeError("position_encoding: dim must be divisible by 4");
  const std::size_t q = dim / 4;
  std::vector<T> pe(gh * gw * dim);
  for (std::size_t r = 0; r < gh; ++r) {
    for (std::size_t c = 0; c < gw; ++c) {
      T* row = pe.data() + (r * gw + c) * dim;
      const double y = static_cast<double>(row0) + static_cast<double>(r);
      const double x = static_cast<double>(col0) + static_cast<double>(c);
      for (std::size_t i = 0; i < q; ++i) {
        const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(q));
        row[i] = static_cast<T>(std::sin(y * omega));
        row[q + i] = static_cast<T>(std::cos(y * omega));
        row[2 * q + i] = static_cast<T>(std::sin(x * omega));
        row[3 * q + i] = static_cast<T>(std::cos(x * omega));
      }
    }
  }
  return Tensor<T>::from_values({gh * gw, dim}, std::move(pe));
}

template <typename T>
Tensor<T> embed_variables(const Tensor<T>& input, const ReslimModel<T>& model, std::ptrdiff_t origin_row,
                          std::ptrdiff_t origin_col) {
  const auto& cfg = model.config();
  if (input.rank() != 3 || input.dim(0) != cfg.in_channels) {
    throw ShapeError("embed_variables: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                     to_string(input.shape()));
  }
  const std::size_t p = cfg.patch_size;
  const Tensor<T> patches = patchify(input, p);
  const Tensor<T> emb = batched_linear(patches, model.embed_weight, add(model.embed_bias, model.var_embedding));
  const Tensor<T> pe = position_encoding<T>(input.dim(1) / p, input.dim(2) / p, cfg.embed_dim, origin_row, origin_col);
  return add_broadcast(emb, pe);
}

template <typename T>
Tensor<T> aggregate_variables(const Tensor<T>& embedded, const ReslimModel<T>& model) {
  if (embedded.rank() != 3) throw ShapeError("aggregate_variables: expected [C,n,d], got " + to_string(embedded.shape()));
  const std::size_t C = embedded.dim(0), n = embedded.dim(1), d = embedded.dim(2);
  const Tensor<T> flat = reshape(embedded, {C * n, d});
  const Tensor<T> keys = reshape(matmul(flat, model.agg_wk), {C, n, d});
  const Tensor<T> values = reshape(matmul(flat, model.agg_wv), {C, n, d});
  return collapse_attention(model.agg_query, keys, values);
}

template <typename T>
Tensor<T> add_resolution_embedding(const Tensor<T>& tokens, const ReslimModel<T>& model, std::size_t scale) {
  const std::size_t slot = scale_slot(scale);
  const Tensor<T> row = reshape(gather_rows(model.res_embedding, std::span<const std::size_t>(&slot, 1)),
                                {model.config().embed_dim});
  return add_broadcast(tokens, row);
}

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlock<T>& b, std::size_t heads) {
  const Tensor<T> h = layer_norm(x, b.ln1_gamma, b.ln1_beta);
  const Tensor<T> a = attention(linear(h, b.wq, b.bq), linear(h, b.wk, b.bk), linear(h, b.wv, b.bv), heads);
  const Tensor<T> x1 = add(x, linear(a, b.wo, b.bo));
  const Tensor<T> h2 = layer_norm(x1, b.ln2_gamma, b.ln2_beta);
  return add(x1, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
}

template <typename T>
Tensor<T> residual_path(const Tensor<T>& input, const ReslimModel<T>& model, std::size_t scale) {
  const auto& map = model.config().residual_channel_map;
  const Tensor<T> selected = select_channels(input, std::span<const std::size_t>(map));
  const Tensor<T> up = upsample_bilinear(selected, scale);
  // The correction runs on a replicate-padded copy so its zero-padded convs
  // never touch the cropped region.
  constexpr std::size_t pad = 2;
  const Tensor<T> wide = upsample_bilinear(replicate_pad(selected, pad, pad, pad, pad), scale);
  const Tensor<T> hidden = gelu(conv2d(wide, model.res_conv1, model.res_bias1));
  const Tensor<T> corr = conv2d(hidden, model.res_conv2, model.res_bias2);
  return add(up, crop(corr, pad * scale, pad * scale, up.dim(1), up.dim(2)));
}

namespace {

template <typename T>
double max_abs(const Tensor<T>& t) {
  double m = 0;
  for (const T v : t.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
std::uint64_t layout_key(const Tensor<T>& input, const ForwardOptions& o, std::size_t scale) {
  const std::uint32_t a = crc32_of(input.values());
  const std::uint64_t meta[] = {input.dim(1), input.dim(2), static_cast<std::uint64_t>(o.origin_row),
                                static_cast<std::uint64_t>(o.origin_col), scale};
  const std::uint32_t b = crc32_of(std::span<const std::uint64_t>(meta), a);
  return (static_cast<std::uint64_t>(a) << 32) | b;
}

// Edge-detection image: edge_proj-weighted channel sum of feat [d, gh, gw].
template <typename T>
ImageD edge_image(const Tensor<T>& feat, const Tensor<T>& proj) {
  const std::size_t d = feat.dim(0), gh = feat.dim(1), gw = feat.dim(2);
  ImageD img = ImageD::Zero(static_cast<Eigen::Index>(gh), static_cast<Eigen::Index>(gw));
  const auto fv = feat.values();
  const auto pv = proj.values();
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t i = 0; i < gh * gw; ++i) img.data()[i] += static_cast<double>(pv[c]) * static_cast<double>(fv[c * gh * gw + i]);
  }
  return img;
}

}  // namespace

template <typename T>
ForwardResult<T> reslim_forward(const Tensor<T>& input, ReslimModel<T>& model, const ForwardOptions& options) {
  const auto& cfg = model.config();
  const std::size_t scale = options.scale ? options.scale : cfg.scale_factor;
  const std::size_t slot = scale_slot(scale);
  const std::size_t p = cfg.patch_size, d = cfg.embed_dim, K = cfg.out_channels;
  if (input.rank() != 3 || input.dim(0) != cfg.in_channels) {
    throw ShapeError("reslim_forward: expected [" + std::to_string(cfg.in_channels) + ",H,W], got " +
                     to_string(input.shape()));
  }
  const std::size_t H = input.dim(1), W = input.dim(2);
  if (H % p != 0 || W % p != 0 || H == 0 || W == 0) {
    throw ShapeError("reslim_forward: patch " + std::to_string(p) + " does not divide " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  const auto sp = static_cast<std::ptrdiff_t>(p);
  if (options.origin_row % sp != 0 || options.origin_col % sp != 0) {
    throw ShapeError("reslim_forward: tile origin must be patch-aligned");
  }
  const std::size_t gh = H / p, gw = W / p;
  ForwardResult<T> result;
  auto note = [&](const char* stage, const Tensor<T>& t) { result.stage_max_abs.emplace_back(stage, max_abs(t)); };

  const Tensor<T> emb = embed_variables(input, model, options.origin_row / sp, options.origin_col / sp);
  note("embed", emb);
  const Tensor<T> agg = aggregate_variables(emb, model);
  note("aggregate", agg);
  Tensor<T> x = add_resolution_embedding(agg, model, scale);

  std::optional<PatchSet> layout;
  Tensor<T> feat;
  if (cfg.compression) {
    feat = reshape(transpose(x), {d, gh, gw});
    const std::uint64_t key = layout_key(input, options, scale);
    {
      std::lock_guard lock(model.layout_cache->mutex);
      auto it = model.layout_cache->layouts.find(key);
      if (it != model.layout_cache->layouts.end()) layout = it->second;
    }
    if (!layout) {
      // position-free features for edge detection
      NoGradGuard no_grad;
      const Tensor<T> plain = batched_linear(patchify(input, p), model.embed_weight, add(model.embed_bias, model.var_embedding));
      const Tensor<T> content = reshape(transpose(aggregate_variables(plain, model)), {d, gh, gw});
      layout = partition_image(edge_image(content, model.edge_proj), cfg.compression_settings);
      std::lock_guard lock(model.layout_cache->mutex);
      model.layout_cache->layouts.emplace(key, *layout);
    }
    const std::size_t hp = layout->height, wp = layout->width;
    const Tensor<T> padded = (hp == gh && wp == gw) ? feat : replicate_pad(feat, 0, hp - gh, 0, wp - gw);
    x = tokenize(padded, *layout, model.tokenizer);
    note("compress", x);
  }
  result.tokens = x.dim(0);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    x = transformer_block(x, model.blocks[l], cfg.num_heads);
    result.stage_max_abs.emplace_back("block" + std::to_string(l), max_abs(x));
  }
  x = layer_norm(x, model.final_gamma, model.final_beta);
  if (layout) {
    x = transpose(reshape(detokenize(x, *layout, model.detokenizer, d), {d, gh * gw}));
    note("decompress", x);
  }
  const std::size_t q = p * scale;
  const auto& head = model.heads[slot];
  const Tensor<T> img = unpatchify(linear(x, head.weight, head.bias), gh, gw, q, K);
  const Tensor<T> main = conv2d(gelu(conv2d(img, model.dec_conv1, model.dec_bias1)), model.dec_conv2, model.dec_bias2);
  note("decoder", main);
  const Tensor<T> res = residual_path(input, model, scale);
  note("residual", res);
  result.pred = add(main, res);
  result.layout = std::move(layout);
  return result;
}

template <typename T>
Tensor<T> normalize_input(const Tensor<T>& raw, const ReslimConfig& config) {
  if (raw.rank() != 3 || raw.dim(0) != config.norm.size()) {
    throw ShapeError("normalize_input: " + to_string(raw.shape()) + " vs " + std::to_string(config.norm.size()) +
                     " normalization entries");
  }
  const std::size_t plane = raw.dim(1) * raw.dim(2);
  std::vector<T> v(raw.values().begin(), raw.values().end());
  for (std::size_t c = 0; c < raw.dim(0); ++c) {
    const auto& n = config.norm[c];
    for (std::size_t i = 0; i < plane; ++i) {
      v[c * plane + i] = static_cast<T>((static_cast<double>(v[c * plane + i]) - n.mean) / n.std);
    }
  }
  return Tensor<T>::from_values(raw.shape(), std::move(v));
}

namespace {

template <typename T>
Tensor<T> target_affine(const Tensor<T>& x, const ReslimConfig& config, bool forward) {
  if (x.rank() != 3 || x.dim(0) != config.residual_channel_map.size()) {
    throw ShapeError("target normalization: " + to_string(x.shape()) + " vs " +
                     std::to_string(config.residual_channel_map.size()) + " outputs");
  }
  const std::size_t plane = x.dim(1) * x.dim(2);
  std::vector<T> v(x.values().begin(), x.values().end());
  for (std::size_t k = 0; k < x.dim(0); ++k) {
    const auto& n = config.norm.at(config.residual_channel_map[k]);
    for (std::size_t i = 0; i < plane; ++i) {
      const double y = static_cast<double>(v[k * plane + i]);
      v[k * plane + i] = static_cast<T>(forward ? (y - n.mean) / n.std : y * n.std + n.mean);
    }
  }
  return Tensor<T>::from_values(x.shape(), std::move(v));
}

}  // namespace

template <typename T>
Tensor<T> normalize_target(const Tensor<T>& raw, const ReslimConfig& config) {
  return target_affine(raw, config, true);
}

template <typename T>
Tensor<T> denormalize_target(const Tensor<T>& normalized, const ReslimConfig& config) {
  return target_affine(normalized, config, false);
}

template <typename T>
std::vector<ChannelNorm> channel_statistics(const std::vector<Tensor<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("channel_statistics: no inputs");
  const std::size_t C = inputs[0].dim(0);
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  std::vector<std::size_t> count(C, 0);
  for (const auto& t : inputs) {
    if (t.rank() != 3 || t.dim(0) != C) throw ShapeError("channel_statistics: inconsistent channel counts");
    const std::size_t plane = t.dim(1) * t.dim(2);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = static_cast<double>(t.values()[c * plane + i]);
        sum[c] += v;
        sq[c] += v * v;
      }
      count[c] += plane;
    }
  }
  std::vector<ChannelNorm> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double m = sum[c] / static_cast<double>(count[c]);
    const double var = std::max(0.0, sq[c] / static_cast<double>(count[c]) - m * m);
    out[c] = {m, var > 0 ? std::sqrt(var) : 1.0};
  }
  return out;
}

#define DOWNSCALE_INSTANTIATE_RESLIM(T)                                                                  \
  template class ReslimModel<T>;                                                                         \
  template Tensor<T> position_encoding<T>(std::size_t, std::size_t, std::size_t, std::ptrdiff_t, std::ptrdiff_t); \
  template Tensor<T> embed_variables<T>(const Tensor<T>&, const ReslimModel<T>&, std::ptrdiff_t, std::ptrdiff_t); \
  template Tensor<T> aggregate_variables<T>(const Tensor<T>&, const ReslimModel<T>&);                    \
  template Tensor<T> add_resolution_embedding<T>(const Tensor<T>&, const ReslimModel<T>&, std::size_t);  \
  template Tensor<T> transformer_block<T>(const Tensor<T>&, const TransformerBlock<T>&, std::size_t);    \
  template Tensor<T> residual_path<T>(const Tensor<T>&, const ReslimModel<T>&, std::size_t);             \
  template ForwardResult<T> reslim_forward<T>(const Tensor<T>&, ReslimModel<T>&, const ForwardOptions&); \
  template Tensor<T> normalize_input<T>(const Tensor<T>&, const ReslimConfig&);                          \
  template Tensor<T> normalize_target<T>(const Tensor<T>&, const ReslimConfig&);                         \
  template Tensor<T> denormalize_target<T>(const Tensor<T>&, const ReslimConfig&);                       \
  template std::vector<ChannelNorm> channel_statistics<T>(const std::vector<Tensor<T>>&);

DOWNSCALE_INSTANTIATE_RESLIM(float)
DOWNSCALE_INSTANTIATE_RESLIM(double)

}  // namespace downscale
