// Hessian-vector products over flat parameter vectors.
//
// Two interchangeable routes: a central difference of gradients (default,
// run in 64-bit by callers that need tight tolerances) and an exact double
// backward that differentiates grad(L) . v through the tape.
#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "mergelab/tensor.hpp"

namespace mergelab {

enum class HvpMode { kCentralDiff, kDoubleBackward };

// Gradient of a scalar loss at an arbitrary flat parameter point.
template <class S>
using GradFn = std::function<VectorX<S>(const VectorX<S>&)>;

// Rebuilds the taped loss from a flat parameter point. `leaves` receives the
// parameter leaf tensors and `offsets` their positions in the flat vector,
// in order, so gradients can be scattered back.
template <class S>
struct BuiltLoss {
  Tensor<S> loss;
  std::vector<Tensor<S>> leaves;
  std::vector<Index> offsets;
};

template <class S>
using LossBuilder = std::function<BuiltLoss<S>(Tape<S>&, const VectorX<S>&)>;

inline double hvp_step(double theta_norm, double v_norm) {
  return 1e-3 * (1.0 + theta_norm) / (1.0 + v_norm);
}

// (grad(theta + h v) - grad(theta - h v)) / (2h), h = 1e-3 (1+|theta|)/(1+|v|).
template <class S>
VectorX<S> hvp_central(const GradFn<S>& grad, const VectorX<S>& theta, const VectorX<S>& v) {
  if (theta.size() != v.size())
    throw std::invalid_argument("hvp: direction length " + std::to_string(v.size()) +
                                " does not match parameter length " + std::to_string(theta.size()));
  const S h = static_cast<S>(hvp_step(static_cast<double>(theta.norm()), static_cast<double>(v.norm())));
  if (v.norm() == S(0)) return VectorX<S>::Zero(theta.size());
  VectorX<S> plus = grad(theta + h * v);
  VectorX<S> minus = grad(theta - h * v);
  return (plus - minus) / (S(2) * h);
}

// Exact H v by differentiating grad(L) . v.
template <class S>
VectorX<S> hvp_double_backward(const LossBuilder<S>& build, const VectorX<S>& theta,
                               const VectorX<S>& v) {
  if (theta.size() != v.size())
    throw std::invalid_argument("hvp: direction length " + std::to_string(v.size()) +
                                " does not match parameter length " + std::to_string(theta.size()));
  Tape<S> tape;
  BuiltLoss<S> built = build(tape, theta);
  Gradients<S> first = tape.backward(built.loss, /*create_graph=*/true);
  Tensor<S> dot;
  bool have = false;
  for (std::size_t i = 0; i < built.leaves.size(); ++i) {
    const Tensor<S>& leaf = built.leaves[i];
    Tensor<S> vpart(leaf.shape, v.segment(built.offsets[i], leaf.size()).array());
    Tensor<S> term = sum_all(mul(first.grad(leaf), vpart));
    dot = have ? add(dot, term) : term;
    have = true;
  }
  if (!have) throw std::invalid_argument("hvp: loss builder produced no parameter leaves");
  Gradients<S> second = tape.backward(dot, /*create_graph=*/false);
  VectorX<S> out = VectorX<S>::Zero(theta.size());
  for (std::size_t i = 0; i < built.leaves.size(); ++i) {
    const Tensor<S>& leaf = built.leaves[i];
    out.segment(built.offsets[i], leaf.size()) = second.grad(leaf).v.matrix();
  }
  return out;
}

// Convenience: linear operator v -> H v at a fixed parameter point.
template <class S>
using LinOp = std::function<VectorX<S>(const VectorX<S>&)>;

template <class S>
LinOp<S> make_hvp_operator(HvpMode mode, const GradFn<S>& grad, const LossBuilder<S>& build,
                           VectorX<S> theta) {
  if (mode == HvpMode::kCentralDiff) {
    if (!grad) throw std::invalid_argument("hvp: central-difference mode needs a gradient function");
    return [grad, theta](const VectorX<S>& v) { return hvp_central<S>(grad, theta, v); };
  }
  if (!build) throw std::invalid_argument("hvp: double-backward mode needs a loss builder");
  return [build, theta](const VectorX<S>& v) { return hvp_double_backward<S>(build, theta, v); };
}

}  // namespace mergelab
