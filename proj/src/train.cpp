#include <cmath>
#include <sstream>

#include "downscale/crc32.hpp"
#include "downscale/error.hpp"
#include "downscale/ops.hpp"
#include "downscale/reslim.hpp"

namespace downscale {

namespace {

template <typename T>
[[noreturn]] void report_non_finite(double loss, const ForwardResult<T>& fr) {
  std::ostringstream msg;
  msg << "non-finite loss (" << loss << "); max |activation| per stage:";
  for (const auto& [stage, m] : fr.stage_max_abs) msg << ' ' << stage << '=' << m;
  throw NumericalError(msg.str());
}

}  // namespace

template <typename T>
StepResult compute_gradients(std::span<const Sample<T>> batch, ReslimModel<T>& model) {
  if (batch.empty()) throw ShapeError("train step: empty batch");
  for (auto* p : model.trainable()) p->zero_grad();
  const TvPrior prior = model.config().prior();
  const T inv_b = T(1) / static_cast<T>(batch.size());
  StepResult out;
  FlopScope scope;
  for (const auto& sample : batch) {
    const ForwardResult<T> fr = reslim_forward(sample.input, model);
    const Tensor<T> loss = bayesian_loss(fr.pred, sample.truth, sample.lat_weights, prior);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) report_non_finite(value, fr);
    backward(scale(loss, inv_b));
    out.loss += value / static_cast<double>(batch.size());
  }
  out.flops = scope.ledger();
  return out;
}

template <typename T>
StepResult train_step(std::span<const Sample<T>> batch, ReslimModel<T>& model, AdamState<T>& optimizer) {
  StepResult out = compute_gradients(batch, model);
  auto params = model.trainable();
  adam_step(std::span<Tensor<T>* const>(params), optimizer);
  return out;
}

template <typename T>
std::uint32_t parameter_hash(ReslimModel<T>& model) {
  std::uint32_t h = 0;
  for (auto& [name, t] : model.named_parameters()) h = crc32_of(t->values(), h);
  return h;
}

#define DOWNSCALE_INSTANTIATE_TRAIN(T)                                                                   \
  template StepResult compute_gradients<T>(std::span<const Sample<T>>, ReslimModel<T>&);                 \
  template StepResult train_step<T>(std::span<const Sample<T>>, ReslimModel<T>&, AdamState<T>&);         \
  template std::uint32_t parameter_hash<T>(ReslimModel<T>&);

DOWNSCALE_INSTANTIATE_TRAIN(float)
DOWNSCALE_INSTANTIATE_TRAIN(double)

}  // namespace downscale
