#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "downscale/adam.hpp"
#include "downscale/checkpoint.hpp"
#include "downscale/compress.hpp"
#include "downscale/flops.hpp"
#include "downscale/loss.hpp"
#include "downscale/tensor.hpp"

namespace downscale {

struct ChannelNorm {
  double mean = 0.0;
  double std = 1.0;
};

struct ReslimConfig {
  std::size_t embed_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t patch_size = 2;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t scale_factor = 4;
  std::size_t conv_hidden = 16;
  bool compression = false;
  CompressionSettings compression_settings{1, 4, 0.05};  // token-grid units
  std::vector<std::size_t> residual_channel_map{0};
  std::vector<ChannelNorm> norm{ChannelNorm{}};  // one per input channel
  double tv_weight = 1e-3;
  double huber_delta = 1e-3;

  void validate() const;
  TvPrior prior() const { return {tv_weight, huber_delta}; }
};

// Named sizes: "9.5M", "126M", "1B", "10B".
ReslimConfig reslim_preset(const std::string& name);

std::size_t count_tokens(std::size_t h, std::size_t w, std::size_t c, std::size_t patch);

// Analytic parameter count of ReslimModel for a config, without allocating.
std::size_t count_parameters(const ReslimConfig& config);

// Scales with a resolution embedding row and a decoder head.
inline constexpr std::size_t kScales[] = {1, 2, 4, 8};
std::size_t scale_slot(std::size_t scale);

template <typename T>
struct TransformerBlock {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct DecoderHead {
  Tensor<T> weight, bias;  // [dim, K*(p*s)^2], [K*(p*s)^2]
};

template <typename T>
class ReslimModel {
 public:
  ReslimModel() = default;
  ReslimModel(ReslimConfig config, std::uint64_t seed);

  const ReslimConfig& config() const { return config_; }

  // Every parameter with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  // The subset updated by the optimizer (the edge projection is excluded:
  // it only feeds the non-differentiable edge detector).
  std::vector<Tensor<T>*> trainable();
  std::size_t parameter_count();

  // Independent replica with copied values and an empty layout cache.
  ReslimModel clone() const;

  std::vector<StoredTensor> to_stored();
  void load_stored(const std::vector<StoredTensor>& tensors);

  // Parameters (public so tests can reach into them).
  Tensor<T> embed_weight;    // [C, p*p, dim]
  Tensor<T> embed_bias;      // [C, dim]
  Tensor<T> var_embedding;   // [C, dim]
  Tensor<T> agg_query;       // [dim]
  Tensor<T> agg_wk, agg_wv;  // [dim, dim]
  Tensor<T> res_embedding;   // [4, dim]
  Tensor<T> edge_proj;       // [dim]
  TokenizerWeights<T> tokenizer;
  DetokenizerWeights<T> detokenizer;
  std::vector<TransformerBlock<T>> blocks;
  Tensor<T> final_gamma, final_beta;
  std::vector<DecoderHead<T>> heads;  // one per kScales entry
  Tensor<T> dec_conv1, dec_bias1;     // [hidden, K, 3, 3]
  Tensor<T> dec_conv2, dec_bias2;     // [K, hidden, 3, 3]
  Tensor<T> res_conv1, res_bias1;     // [hidden, K, 3, 3]
  Tensor<T> res_conv2, res_bias2;     // [K, hidden, 3, 3], zero at init

  // Compression layouts keyed by input hash.
  struct LayoutCache {
    std::mutex mutex;
    std::map<std::uint64_t, PatchSet> layouts;
  };
  std::shared_ptr<LayoutCache> layout_cache = std::make_shared<LayoutCache>();

 private:
  ReslimConfig config_;
};

struct ForwardOptions {
  std::size_t scale = 0;  // 0 = config scale_factor
  // Offset of this input's top-left pixel inside the full image; shifts the
  // positional encoding so tiles see their global positions.
  std::ptrdiff_t origin_row = 0;
  std::ptrdiff_t origin_col = 0;
};

template <typename T>
struct ForwardResult {
  Tensor<T> pred;                                     // [K, sH, sW], normalized space
  std::optional<PatchSet> layout;                     // set when compression ran
  std::size_t tokens = 0;                             // sequence length seen by attention
  std::vector<std::pair<std::string, double>> stage_max_abs;
};

// 2-D sin-cos encoding for a gh x gw token grid starting at (row0, col0):
// first half of dim encodes the row, second half the column.
template <typename T>
Tensor<T> position_encoding(std::size_t gh, std::size_t gw, std::size_t dim,
                            std::ptrdiff_t row0 = 0, std::ptrdiff_t col0 = 0);

// input [C,H,W] -> [C, n_s, dim]
template <typename T>
Tensor<T> embed_variables(const Tensor<T>& input, const ReslimModel<T>& model,
                          std::ptrdiff_t origin_row = 0, std::ptrdiff_t origin_col = 0);
// [C, n_s, dim] -> [n_s, dim]
template <typename T>
Tensor<T> aggregate_variables(const Tensor<T>& embedded, const ReslimModel<T>& model);
// tokens [n_s, dim] + table row for scale
template <typename T>
Tensor<T> add_resolution_embedding(const Tensor<T>& tokens, const ReslimModel<T>& model,
                                   std::size_t scale);
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlock<T>& block,
                            std::size_t heads);

// Residual path: bilinear upsample of the mapped channels plus a two-conv
// correction. input [C,H,W] -> [K, sH, sW].
template <typename T>
Tensor<T> residual_path(const Tensor<T>& input, const ReslimModel<T>& model, std::size_t scale);

// Full forward on normalized input [C,H,W].
template <typename T>
ForwardResult<T> reslim_forward(const Tensor<T>& input, ReslimModel<T>& model,
                                const ForwardOptions& options = {});

// Affine normalization of raw inputs and of truth (by the mapped input
// channel's statistics).
template <typename T>
Tensor<T> normalize_input(const Tensor<T>& raw, const ReslimConfig& config);
template <typename T>
Tensor<T> normalize_target(const Tensor<T>& raw, const ReslimConfig& config);
template <typename T>
Tensor<T> denormalize_target(const Tensor<T>& normalized, const ReslimConfig& config);

// Per-channel mean/std over a set of [C,H,W] tensors.
template <typename T>
std::vector<ChannelNorm> channel_statistics(const std::vector<Tensor<T>>& inputs);

template <typename T>
struct Sample {
  Tensor<T> input;                  // normalized [C,H,W]
  Tensor<T> truth;                  // normalized [K,sH,sW]
  std::vector<double> lat_weights;  // sH entries
};

struct StepResult {
  double loss = 0;
  FlopLedger flops;
};

// Mean loss over the batch with gradients accumulated into the model's
// parameters (buffers are zeroed first). No optimizer update.
template <typename T>
StepResult compute_gradients(std::span<const Sample<T>> batch, ReslimModel<T>& model);

// compute_gradients followed by one Adam update. A non-finite loss throws
// NumericalError listing the largest activation per stage.
template <typename T>
StepResult train_step(std::span<const Sample<T>> batch, ReslimModel<T>& model,
                      AdamState<T>& optimizer);

// CRC-32 over every parameter value, for replica consistency checks.
template <typename T>
std::uint32_t parameter_hash(ReslimModel<T>& model);

}  // namespace downscale
