// Derived quantities and landscape probes: merging gains, normalized
// accuracy, correlation, interpolation sweeps, barrier/transition
// classification, 2D loss planes, leading Hessian eigenvalues, and the
// noise-curve collapse score.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mergelab/hvp.hpp"
#include "mergelab/merge.hpp"
#include "mergelab/nets.hpp"
#include "mergelab/rng.hpp"

namespace mergelab {

enum class GainBaseline { kMean, kFirst, kMax };

// f(merged) - baseline(f(single_a), f(single_b)). For loss-style metrics
// (lower is better) callers negate or read the sign accordingly.
inline double performance_gain(double f_merged, std::pair<double, double> f_singles,
                               GainBaseline baseline = GainBaseline::kMean) {
  switch (baseline) {
    case GainBaseline::kMean: return f_merged - 0.5 * (f_singles.first + f_singles.second);
    case GainBaseline::kFirst: return f_merged - f_singles.first;
    case GainBaseline::kMax: return f_merged - std::max(f_singles.first, f_singles.second);
  }
  throw std::logic_error("unknown gain baseline");
}

// Mean over tasks of merged-model accuracy divided by single-model accuracy.
inline double normalized_accuracy(const std::vector<double>& acc_merged,
                                  const std::vector<double>& acc_singles) {
  if (acc_merged.empty() || acc_merged.size() != acc_singles.size())
    throw std::invalid_argument("normalized_accuracy: need matching, non-empty per-task accuracies");
  double acc = 0.0;
  for (std::size_t i = 0; i < acc_merged.size(); ++i) {
    if (!(acc_singles[i] > 0))
      throw std::invalid_argument("normalized_accuracy: single-model accuracy must be positive");
    acc += acc_merged[i] / acc_singles[i];
  }
  return acc / static_cast<double>(acc_merged.size());
}

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw std::invalid_argument("pearson: need two same-length series of length >= 2");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0 || syy == 0) throw std::invalid_argument("pearson: zero variance input");
  return sxy / std::sqrt(sxx * syy);
}

// --- Interpolation sweeps ----------------------------------------------------

struct AlphaPoint {
  double alpha = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
};

inline std::vector<double> uniform_grid(double lo, double hi, int points) {
  if (points < 2) throw std::invalid_argument("uniform_grid: need at least 2 points");
  std::vector<double> out(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i)
    out[static_cast<std::size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / (points - 1);
  return out;
}

// Evaluates the linear interpolation between two models on a fixed metric.
template <class S>
std::vector<AlphaPoint> alpha_sweep(
    const ParamVector<S>& a, const ParamVector<S>& b, const std::vector<double>& alphas,
    const std::function<EvalMetrics<S>(const ParamVector<S>&)>& eval_fn) {
  if (alphas.size() < 3)
    throw std::invalid_argument("alpha_sweep: need a grid of at least 3 points");
  std::vector<AlphaPoint> out;
  out.reserve(alphas.size());
  for (double alpha : alphas) {
    ParamVector<S> merged = linear_interpolate(a, b, alpha);
    EvalMetrics<S> m = eval_fn(merged);
    out.push_back({alpha, m.loss, m.accuracy});
  }
  return out;
}

// Task-arithmetic sweep with one shared coefficient for all task vectors.
template <class S>
std::vector<AlphaPoint> task_arithmetic_sweep(
    const ParamVector<S>& base, const std::vector<ParamVector<double>>& taus,
    const std::vector<double>& alphas,
    const std::function<EvalMetrics<S>(const ParamVector<S>&)>& eval_fn) {
  std::vector<AlphaPoint> out;
  out.reserve(alphas.size());
  for (double alpha : alphas) {
    ParamVector<S> merged;
    if (alpha == 0.0) {
      merged = base;
    } else {
      std::vector<double> coeffs(taus.size(), alpha);
      merged = task_arithmetic_merge(base, taus, coeffs);
    }
    EvalMetrics<S> m = eval_fn(merged);
    out.push_back({alpha, m.loss, m.accuracy});
  }
  return out;
}

// --- Transition classification ------------------------------------------------

enum class Transition { kHill, kFlat, kValley };

inline std::string transition_name(Transition t) {
  switch (t) {
    case Transition::kHill: return "hill";
    case Transition::kFlat: return "flat";
    case Transition::kValley: return "valley";
  }
  throw std::logic_error("unknown transition");
}

struct TransitionResult {
  Transition cls = Transition::kFlat;
  double barrier = 0.0;  // max loss above the worse endpoint
  double dip = 0.0;      // best loss below the better endpoint
};

constexpr double kTransitionTauRel = 0.05;
constexpr double kTransitionTauFloor = 1e-3;

// Classifies an interpolation loss curve (alpha 0 and 1 included) into
// hill / flat / valley with a threshold relative to the endpoint mean.
inline TransitionResult classify_transition(const std::vector<double>& losses,
                                            double tau_rel = kTransitionTauRel,
                                            double tau_floor = kTransitionTauFloor) {
  if (losses.size() < 3)
    throw std::invalid_argument("classify_transition: need at least 3 curve points");
  const double l0 = losses.front(), l1 = losses.back();
  double lmax = losses[0], lmin = losses[0];
  for (double l : losses) {
    lmax = std::max(lmax, l);
    lmin = std::min(lmin, l);
  }
  TransitionResult r;
  r.barrier = lmax - std::max(l0, l1);
  r.dip = std::min(l0, l1) - lmin;
  const double tau = std::max(tau_rel * 0.5 * (l0 + l1), tau_floor);
  if (r.barrier > tau)
    r.cls = Transition::kHill;
  else if (r.dip > tau)
    r.cls = Transition::kValley;
  else
    r.cls = Transition::kFlat;
  return r;
}

// Median-of-3 smoothing over the transition-class sequence (ends clamped).
inline std::vector<Transition> smooth_transitions(const std::vector<Transition>& seq) {
  if (seq.size() < 3) return seq;
  std::vector<Transition> out(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const std::size_t a = i == 0 ? 0 : i - 1;
    const std::size_t b = i;
    const std::size_t c = i + 1 < seq.size() ? i + 1 : i;
    int v[3] = {static_cast<int>(seq[a]), static_cast<int>(seq[b]), static_cast<int>(seq[c])};
    std::sort(v, v + 3);
    out[i] = static_cast<Transition>(v[1]);
  }
  return out;
}

// --- 2D loss plane -------------------------------------------------------------

struct PlanePoint {
  double x = 0.0, y = 0.0, loss = 0.0, accuracy = 0.0;
};

struct LossPlane {
  std::vector<double> xs, ys;         // grid coordinates
  std::vector<PlanePoint> grid;       // row-major over (ys, xs)
  double base_x = 0, base_y = 0;      // anchor coordinates in the (u,v) frame
  double a_x = 0, a_y = 0;
  double b_x = 0, b_y = 0;
};

// Evaluates the loss over the plane spanned by (theta_a - theta_base) and the
// orthogonalized (theta_b - theta_base), on a grid covering the anchors with
// the given margin.
template <class S>
LossPlane loss_plane(const ParamVector<S>& base, const ParamVector<S>& a, const ParamVector<S>& b,
                     int resolution, double margin,
                     const std::function<EvalMetrics<S>(const ParamVector<S>&)>& eval_fn) {
  detail::require_compatible("loss_plane", base, a);
  detail::require_compatible("loss_plane", base, b);
  if (resolution < 2) throw std::invalid_argument("loss_plane: resolution must be >= 2");
  VectorX<double> da = a.values.template cast<double>() - base.values.template cast<double>();
  VectorX<double> db = b.values.template cast<double>() - base.values.template cast<double>();
  const double na = da.norm();
  if (na == 0) throw std::invalid_argument("loss_plane: theta_a equals theta_base");
  VectorX<double> u = da / na;
  VectorX<double> w = db - db.dot(u) * u;
  const double nw = w.norm();
  if (nw < 1e-9 * db.norm())
    throw std::invalid_argument("loss_plane: span directions are parallel");
  VectorX<double> v = w / nw;

  LossPlane plane;
  plane.base_x = 0;
  plane.base_y = 0;
  plane.a_x = na;
  plane.a_y = 0;
  plane.b_x = db.dot(u);
  plane.b_y = nw;

  const double x_lo = std::min({0.0, plane.a_x, plane.b_x});
  const double x_hi = std::max({0.0, plane.a_x, plane.b_x});
  const double y_lo = std::min({0.0, plane.b_y});
  const double y_hi = std::max({0.0, plane.b_y});
  const double x_pad = margin * std::max(x_hi - x_lo, 1e-12);
  const double y_pad = margin * std::max(y_hi - y_lo, 1e-12);
  plane.xs = uniform_grid(x_lo - x_pad, x_hi + x_pad, resolution);
  plane.ys = uniform_grid(y_lo - y_pad, y_hi + y_pad, resolution);

  const VectorX<double> base_d = base.values.template cast<double>();
  for (double y : plane.ys)
    for (double x : plane.xs) {
      ParamVector<S> point = base;
      point.values = (base_d + x * u + y * v).template cast<S>();
      EvalMetrics<S> m = eval_fn(point);
      plane.grid.push_back({x, y, m.loss, m.accuracy});
    }
  return plane;
}

// --- Hessian top eigenvalues ----------------------------------------------------

struct EigenEstimate {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Power iteration with Hotelling deflation over an arbitrary symmetric
// operator. Start vectors are drawn from the given seed; eigenvalues are
// Rayleigh quotients, returned in the order found (non-increasing for
// positive-dominant spectra).
template <class S>
std::vector<EigenEstimate> hessian_top_eigs(const LinOp<S>& apply, Index dim, int k,
                                            double tol = 1e-4, int max_iters = 200,
                                            std::uint64_t seed = 0) {
  if (k < 1) throw std::invalid_argument("hessian_top_eigs: k must be >= 1");
  if (dim < 1) throw std::invalid_argument("hessian_top_eigs: empty operator");
  k = std::min<int>(k, static_cast<int>(dim));
  Rng rng(stream_seed(seed, "power_iteration"));
  std::vector<VectorX<S>> basis;
  std::vector<double> lambdas;
  std::vector<EigenEstimate> out;
  for (int j = 0; j < k; ++j) {
    VectorX<S> v(dim);
    for (Index i = 0; i < dim; ++i) v(i) = static_cast<S>(rng.normal());
    // Project out previously found directions from the start vector.
    for (const auto& u : basis) v -= u.dot(v) * u;
    v.normalize();
    double lambda = 0.0;
    EigenEstimate est;
    for (int it = 0; it < max_iters; ++it) {
      VectorX<S> hv = apply(v);
      for (std::size_t m = 0; m < basis.size(); ++m)
        hv -= static_cast<S>(lambdas[m]) * basis[m].dot(v) * basis[m];
      const double next = static_cast<double>(v.dot(hv));
      const double norm = hv.norm();
      est.iterations = it + 1;
      if (norm == 0) {
        lambda = 0.0;
        est.converged = true;
        break;
      }
      v = hv / static_cast<S>(norm);
      const double denom = std::max(std::abs(next), 1e-30);
      if (it > 0 && std::abs(next - lambda) / denom < tol) {
        lambda = next;
        est.converged = true;
        break;
      }
      lambda = next;
    }
    est.value = lambda;
    out.push_back(est);
    basis.push_back(v);
    lambdas.push_back(lambda);
  }
  return out;
}

// --- Collapse score --------------------------------------------------------------

struct SweepPoint {
  double eta = 0.0;
  Index batch = 0;
  double noise = 0.0;  // effective noise coordinate of the config
  double gain = 0.0;   // aggregated (median) gain of the config
};

namespace detail {

inline double mean_binned_variance(const std::vector<SweepPoint>& points, bool use_noise,
                                   int bins) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& p : points) {
    const double x = use_noise ? p.noise : p.eta;
    if (!(x > 0)) throw std::invalid_argument("collapse_score: coordinates must be positive");
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const double span = std::log(hi) - std::log(lo);
  auto bin_of = [&](double x) {
    if (span <= 0) return 0;
    int b = static_cast<int>(std::floor((std::log(x) - std::log(lo)) / span * bins));
    return std::clamp(b, 0, bins - 1);
  };
  // bin -> batch group -> gains
  std::map<int, std::map<Index, std::vector<double>>> table;
  for (const auto& p : points) table[bin_of(use_noise ? p.noise : p.eta)][p.batch].push_back(p.gain);
  double total = 0.0;
  int used = 0;
  for (auto& [bin, groups] : table) {
    if (groups.size() < 2) continue;  // a single batch group carries no cross-group variance
    std::vector<double> medians;
    for (auto& [batch, gains] : groups) {
      std::sort(gains.begin(), gains.end());
      const std::size_t n = gains.size();
      medians.push_back(n % 2 ? gains[n / 2] : 0.5 * (gains[n / 2 - 1] + gains[n / 2]));
    }
    double mean = 0.0;
    for (double m : medians) mean += m;
    mean /= static_cast<double>(medians.size());
    double var = 0.0;
    for (double m : medians) var += (m - mean) * (m - mean);
    var /= static_cast<double>(medians.size());
    total += var;
    ++used;
  }
  if (used == 0) return -1.0;  // sentinel: no usable bins
  return total / static_cast<double>(used);
}

}  // namespace detail

constexpr int kCollapseBins = 8;

// Ratio of mean binned cross-batch-group variance when binning by the noise
// coordinate versus binning by the learning rate alone. Values below 1 mean
// the noise coordinate aligns the per-batch-size gain curves better.
inline double collapse_score(const std::vector<SweepPoint>& points, int bins = kCollapseBins) {
  std::vector<Index> batches;
  std::vector<double> etas;
  for (const auto& p : points) {
    if (std::find(batches.begin(), batches.end(), p.batch) == batches.end())
      batches.push_back(p.batch);
    if (std::find(etas.begin(), etas.end(), p.eta) == etas.end()) etas.push_back(p.eta);
  }
  if (batches.size() < 2 || etas.size() < 3)
    throw std::invalid_argument("collapse_score: need >= 2 batch sizes and >= 3 learning rates");
  const double num = detail::mean_binned_variance(points, /*use_noise=*/true, bins);
  const double den = detail::mean_binned_variance(points, /*use_noise=*/false, bins);
  if (num < 0 && den < 0) throw std::invalid_argument("collapse_score: no usable bins");
  if (num < 0) return 0.0;  // noise binning separated all groups; nothing to misalign
  if (den < 0 || den == 0.0)
    return num == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

}  // namespace mergelab
