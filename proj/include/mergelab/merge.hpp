// Parameter-space merging algebra: linear interpolation, task vectors, and
// task arithmetic, plus the normalization-statistics policies.
//
// The algebra accumulates in double precision and rounds once, so endpoint
// and single-vector reconstructions of 32-bit models are bit-exact.
#pragma once

#include <stdexcept>
#include <vector>

#include "mergelab/data.hpp"
#include "mergelab/nets.hpp"

namespace mergelab {

enum class StatsPolicy { kInterpolate, kRecompute };

constexpr double kVarianceFloor = 1e-12;

namespace detail {

template <class S>
void require_compatible(const char* op, const ParamVector<S>& a, const ParamVector<S>& b) {
  if (!merge_compatible(a, b))
    throw std::invalid_argument(std::string(op) + ": incompatible architectures (" +
                                a.arch.canonical() + " vs " + b.arch.canonical() + ")");
}

template <class S>
void clamp_variances(ParamVector<S>& p) {
  const ArchLayout layout = make_layout(p.arch);
  for (const AuxEntry& a : layout.aux)
    for (Index i = 0; i < a.count; ++i)
      if (p.aux(a.var_offset + i) < S(kVarianceFloor)) p.aux(a.var_offset + i) = S(kVarianceFloor);
}

}  // namespace detail

// theta = (1-alpha) A + alpha B over trainable values; running statistics
// interpolated by the same formula with variances clamped positive.
// Endpoints are returned exactly. Probe sweeps may pass alpha outside [0,1].
template <class S>
ParamVector<S> linear_interpolate(const ParamVector<S>& a, const ParamVector<S>& b, double alpha) {
  detail::require_compatible("linear_interpolate", a, b);
  if (alpha == 0.0) return a;
  if (alpha == 1.0) return b;
  const double wa = 1.0 - alpha, wb = alpha;
  ParamVector<S> out;
  out.arch = a.arch;
  out.values = (wa * a.values.template cast<double>() + wb * b.values.template cast<double>())
                   .template cast<S>();
  out.aux = (wa * a.aux.template cast<double>() + wb * b.aux.template cast<double>())
                .template cast<S>();
  detail::clamp_variances(out);
  return out;
}

// tau = theta_t - theta_base over trainable values, kept in double so that
// adding it back to the base reconstructs the task model bit-for-bit.
// Aux statistics are carried from theta_t for later reconstruction.
template <class S>
ParamVector<double> task_vector(const ParamVector<S>& model, const ParamVector<S>& base) {
  detail::require_compatible("task_vector", model, base);
  ParamVector<double> tau;
  tau.arch = model.arch;
  tau.values = model.values.template cast<double>() - base.values.template cast<double>();
  tau.aux = model.aux.template cast<double>();
  return tau;
}

// theta = base + sum_i alpha_i tau_i. Statistics policy: the single task
// model's statistics when merging exactly one vector with coefficient 1,
// otherwise the base statistics.
template <class S>
ParamVector<S> task_arithmetic_merge(const ParamVector<S>& base,
                                     const std::vector<ParamVector<double>>& vectors,
                                     const std::vector<double>& coeffs) {
  if (vectors.empty() || vectors.size() != coeffs.size())
    throw std::invalid_argument("task_arithmetic_merge: need matching, non-empty vectors and coefficients");
  for (const auto& tau : vectors) {
    if (!(tau.arch == base.arch))
      throw std::invalid_argument("task_arithmetic_merge: incompatible architectures (" +
                                  tau.arch.canonical() + " vs " + base.arch.canonical() + ")");
    if (tau.values.size() != base.values.size())
      throw std::invalid_argument("task_arithmetic_merge: task vector length mismatch");
  }
  VectorX<double> acc = base.values.template cast<double>();
  for (std::size_t i = 0; i < vectors.size(); ++i) acc += coeffs[i] * vectors[i].values;
  ParamVector<S> out;
  out.arch = base.arch;
  out.values = acc.template cast<S>();
  if (vectors.size() == 1 && coeffs[0] == 1.0) {
    out.aux = vectors[0].aux.template cast<S>();
  } else {
    out.aux = base.aux;
  }
  detail::clamp_variances(out);
  return out;
}

// Replaces running statistics by averaging batch statistics over n_batches
// sequential forward passes in train mode; trainable values untouched.
// Deterministic: batches walk the dataset in storage order.
template <class S>
ParamVector<S> recompute_statistics(const ParamVector<S>& params, const Dataset<S>& ds,
                                    Index n_batches, Index batch_size = 256,
                                    S bn_eps = S(kDefaultBnEps)) {
  if (ds.size() < 1) throw std::invalid_argument("recompute_statistics: empty dataset");
  const ArchLayout layout = make_layout(params.arch);
  if (layout.aux.empty()) return params;  // no normalization layers, nothing to do
  if (n_batches < 1) throw std::invalid_argument("recompute_statistics: need at least one batch");
  batch_size = std::min(batch_size, ds.size());
  ParamVector<S> out = params;
  VectorX<double> mean_acc = VectorX<double>::Zero(layout.aux_count);
  Index start = 0;
  for (Index b = 0; b < n_batches; ++b) {
    std::vector<Index> idx(static_cast<std::size_t>(batch_size));
    for (Index i = 0; i < batch_size; ++i) idx[static_cast<std::size_t>(i)] = (start + i) % ds.size();
    start = (start + batch_size) % ds.size();
    Batch<S> batch = gather_batch(ds, idx);
    ParamVector<S> probe = out;
    reset_stats_from_batch(probe, batch.x, bn_eps);  // momentum-1 replacement
    mean_acc += probe.aux.template cast<double>();
  }
  out.aux = (mean_acc / static_cast<double>(n_batches)).template cast<S>();
  detail::clamp_variances(out);
  return out;
}

}  // namespace mergelab
