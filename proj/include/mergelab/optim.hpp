// SGD with momentum and decoupled weight decay, the warmup-stable-decay
// schedule, and the noise-scale quantities used to compare training
// configurations.
#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mergelab/data.hpp"
#include "mergelab/nets.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/tensor.hpp"

namespace mergelab {

// Piecewise schedule: linear warmup 0 -> eta over `warmup_steps`, constant
// eta for `stable_steps`, then eta * (1 - sqrt(u)) over `decay_steps`.
struct ScheduleSpec {
  Index warmup_steps = 0;
  Index stable_steps = 0;
  Index decay_steps = 0;

  Index total_steps() const { return warmup_steps + stable_steps + decay_steps; }
  bool operator==(const ScheduleSpec&) const = default;
};

inline double lr_at(const ScheduleSpec& schedule, double eta, Index step) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step < schedule.warmup_steps)
    return eta * static_cast<double>(step) / static_cast<double>(schedule.warmup_steps);
  step -= schedule.warmup_steps;
  if (step < schedule.stable_steps || schedule.decay_steps == 0) return eta;
  step -= schedule.stable_steps;
  if (step >= schedule.decay_steps) return 0.0;  // clamped past the end
  const double u = static_cast<double>(step) / static_cast<double>(schedule.decay_steps);
  return eta * (1.0 - std::sqrt(u));
}

struct TrainConfig {
  double eta = 0.1;
  Index batch = 64;
  double momentum = 0.0;
  double weight_decay = 0.0;
  AugmentSpec augment;
  ScheduleSpec schedule;
  Index epochs = 0;

  void validate() const {
    if (!(eta > 0)) throw std::invalid_argument("config: learning rate must be positive");
    if (batch < 1) throw std::invalid_argument("config: batch size must be >= 1");
    if (!(momentum >= 0.0) || momentum >= 1.0)
      throw std::invalid_argument("config: momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("config: weight decay must be >= 0");
  }
};

template <class S>
struct OptimizerState {
  VectorX<S> velocity;  // zero-initialized, same length as the parameters
  Index step = 0;
};

template <class S>
OptimizerState<S> make_optimizer_state(Index param_count) {
  OptimizerState<S> st;
  st.velocity = VectorX<S>::Zero(param_count);
  return st;
}

// Entries of the decay mask are 1 for weights and normalization scales,
// 0 for biases and shifts.
template <class S>
VectorX<S> decay_mask(const ArchLayout& layout) {
  VectorX<S> mask = VectorX<S>::Zero(layout.param_count);
  for (const LayoutEntry& e : layout.entries)
    if (e.decayed) mask.segment(e.offset, e.size).setConstant(S(1));
  return mask;
}

// v <- mu v + g;  theta <- theta (1 - lr lambda mask) - lr v.
// Decay acts directly on the pre-update parameters, not through the
// momentum buffer; at mu = 0 the update is exactly theta (1 - lr lambda) - lr g.
template <class S>
void sgd_step(VectorX<S>& theta, const VectorX<S>& grad, OptimizerState<S>& state, S lr, S mu,
              S lambda, const VectorX<S>& mask) {
  if (theta.size() != grad.size() || theta.size() != state.velocity.size() ||
      theta.size() != mask.size())
    throw std::invalid_argument("sgd_step: mismatched lengths");
  state.velocity = mu * state.velocity + grad;
  if (lambda != S(0)) {
    theta.array() =
        theta.array() * (S(1) - (lr * lambda) * mask.array()) - lr * state.velocity.array();
  } else {
    theta -= lr * state.velocity;
  }
  ++state.step;
}

// Normalized effective noise proxy eta / (B (1-mu)^2).
inline double effective_noise(double eta, Index batch, double momentum) {
  if (batch < 1) throw std::invalid_argument("effective_noise: batch must be >= 1");
  if (!(momentum >= 0.0) || momentum >= 1.0)
    throw std::invalid_argument("effective_noise: momentum must lie in [0,1)");
  const double one_minus = 1.0 - momentum;
  return eta / (static_cast<double>(batch) * one_minus * one_minus);
}

// eta / |theta_g|^2 for every normalized weight group. Groups whose norm is
// zero report +inf.
template <class S>
std::vector<double> effective_lr(const ParamVector<S>& params, double eta) {
  const ArchLayout layout = make_layout(params.arch);
  std::vector<double> out;
  for (const LayoutEntry& e : layout.entries) {
    if (!e.normalized) continue;
    const double sq = params.values.segment(e.offset, e.size).template cast<double>().squaredNorm();
    out.push_back(sq > 0 ? eta / sq : std::numeric_limits<double>::infinity());
  }
  return out;
}

// Loss and flat gradient of one (possibly augmented) batch. Train mode also
// folds batch statistics into the running buffers.
template <class S>
struct LossGrad {
  S loss = S(0);
  VectorX<S> grad;
};

template <class S>
LossGrad<S> loss_and_grad(ParamVector<S>& params, const ArchLayout& layout, const Tensor<S>& x,
                          const std::vector<int>& y, bool train, S bn_eps = S(kDefaultBnEps),
                          S bn_momentum = S(kDefaultBnMomentum)) {
  Tape<S> tape;
  ForwardPass<S> fp = forward_pass<S>(&tape, params.arch, layout, params.values, &params.aux, x,
                                      train, bn_eps, bn_momentum);
  Tensor<S> loss = softmax_cross_entropy(fp.logits, y);
  Gradients<S> grads = tape.backward(loss);
  LossGrad<S> out;
  out.loss = loss.item();
  out.grad = VectorX<S>::Zero(layout.param_count);
  for (std::size_t i = 0; i < layout.entries.size(); ++i) {
    const LayoutEntry& e = layout.entries[i];
    out.grad.segment(e.offset, e.size) = grads.grad(fp.leaves[i]).v.matrix();
  }
  return out;
}

// Unbiased estimate of tr Sigma from per-example gradients:
// (1/(n-1)) sum_i |g_i - gbar|^2. Augmentation, when enabled, is applied
// per example so the estimate reflects the augmented covariance.
// Normalization layers run in inference mode for the per-example passes.
template <class S>
double gradient_noise_trace(const ParamVector<S>& params, const Dataset<S>& ds, Index n_samples,
                            const AugmentSpec& augment_spec, Rng& rng,
                            S bn_eps = S(kDefaultBnEps)) {
  if (n_samples < 2) throw std::invalid_argument("gradient_noise_trace: need at least 2 samples");
  if (n_samples > ds.size())
    throw std::invalid_argument("gradient_noise_trace: " + std::to_string(n_samples) +
                                " samples requested from dataset of size " +
                                std::to_string(ds.size()));
  const ArchLayout layout = make_layout(params.arch);
  // Sample without replacement.
  std::vector<Index> pool(static_cast<std::size_t>(ds.size()));
  for (Index i = 0; i < ds.size(); ++i) pool[static_cast<std::size_t>(i)] = i;
  for (Index i = 0; i < n_samples; ++i) {
    const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(ds.size() - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  ParamVector<S> work = params;
  VectorX<double> mean = VectorX<double>::Zero(layout.param_count);
  std::vector<VectorX<double>> grads;
  grads.reserve(static_cast<std::size_t>(n_samples));
  for (Index i = 0; i < n_samples; ++i) {
    Batch<S> b = gather_batch(ds, {pool[static_cast<std::size_t>(i)]});
    Tensor<S> x = augment_spec.enabled ? augment(b.x, augment_spec, rng) : b.x;
    LossGrad<S> lg = loss_and_grad<S>(work, layout, x, b.y, /*train=*/false, bn_eps);
    grads.push_back(lg.grad.template cast<double>());
    mean += grads.back();
  }
  mean /= static_cast<double>(n_samples);
  double acc = 0.0;
  for (const auto& g : grads) acc += (g - mean).squaredNorm();
  return acc / static_cast<double>(n_samples - 1);
}

}  // namespace mergelab
