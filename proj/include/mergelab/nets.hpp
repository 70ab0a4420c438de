// Network definitions: an MLP (plain and batch-normalized) and a small
// two-block CNN, with flat parameter packing so trained models become
// vectors that merging algebra can operate on.
#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mergelab/rng.hpp"
#include "mergelab/tensor.hpp"

namespace mergelab {

enum class ArchKind { kMlp, kMlpNorm, kTinyCnn };

inline std::string arch_kind_name(ArchKind k) {
  switch (k) {
    case ArchKind::kMlp: return "mlp";
    case ArchKind::kMlpNorm: return "mlp_norm";
    case ArchKind::kTinyCnn: return "tiny_cnn";
  }
  throw std::logic_error("unknown arch kind");
}

inline ArchKind arch_kind_from(const std::string& name) {
  if (name == "mlp") return ArchKind::kMlp;
  if (name == "mlp_norm") return ArchKind::kMlpNorm;
  if (name == "tiny_cnn") return ArchKind::kTinyCnn;
  throw std::invalid_argument("unknown architecture kind: " + name);
}

struct ArchDescriptor {
  ArchKind kind = ArchKind::kMlp;
  Shape input_shape;           // {features} for MLPs, {C,H,W} for the CNN
  std::vector<Index> hidden;   // MLP widths; CNN conv channels (default {16,32})
  Index classes = 0;

  bool operator==(const ArchDescriptor&) const = default;

  std::string canonical() const {
    std::ostringstream os;
    os << "kind=" << arch_kind_name(kind) << ";input=";
    for (std::size_t i = 0; i < input_shape.size(); ++i) os << (i ? "x" : "") << input_shape[i];
    os << ";hidden=";
    for (std::size_t i = 0; i < hidden.size(); ++i) os << (i ? "," : "") << hidden[i];
    os << ";classes=" << classes;
    return os.str();
  }

  static ArchDescriptor parse(const std::string& text) {
    ArchDescriptor arch;
    std::istringstream is(text);
    std::string field;
    bool saw_kind = false, saw_input = false, saw_classes = false;
    while (std::getline(is, field, ';')) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("bad arch descriptor: " + text);
      const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
      if (key == "kind") {
        arch.kind = arch_kind_from(value);
        saw_kind = true;
      } else if (key == "input") {
        std::istringstream vs(value);
        std::string part;
        while (std::getline(vs, part, 'x')) arch.input_shape.push_back(std::stoll(part));
        saw_input = true;
      } else if (key == "hidden") {
        std::istringstream vs(value);
        std::string part;
        while (std::getline(vs, part, ',')) arch.hidden.push_back(std::stoll(part));
      } else if (key == "classes") {
        arch.classes = std::stoll(value);
        saw_classes = true;
      } else {
        throw std::invalid_argument("bad arch descriptor field: " + key);
      }
    }
    if (!saw_kind || !saw_input || !saw_classes)
      throw std::invalid_argument("incomplete arch descriptor: " + text);
    return arch;
  }
};

enum class ParamRole { kWeight, kBias, kGamma, kBeta };

struct LayoutEntry {
  std::string name;
  ParamRole role;
  Shape shape;
  Index offset = 0;
  Index size = 0;
  bool decayed = false;        // weight decay applies (weights and gammas)
  bool hidden_weight = false;  // scaled by the scale-invariance probe
  bool normalized = false;     // weight tensor feeding a normalization layer
};

struct AuxEntry {
  std::string name;
  Index mean_offset = 0;
  Index var_offset = 0;
  Index count = 0;
};

struct ArchLayout {
  std::vector<LayoutEntry> entries;
  std::vector<AuxEntry> aux;
  Index param_count = 0;
  Index aux_count = 0;
};

namespace detail {

inline void push_entry(ArchLayout& layout, std::string name, ParamRole role, Shape shape,
                       bool decayed, bool hidden_weight, bool normalized) {
  LayoutEntry e;
  e.name = std::move(name);
  e.role = role;
  e.shape = std::move(shape);
  e.offset = layout.param_count;
  e.size = numel(e.shape);
  e.decayed = decayed;
  e.hidden_weight = hidden_weight;
  e.normalized = normalized;
  layout.param_count += e.size;
  layout.entries.push_back(std::move(e));
}

inline void push_aux(ArchLayout& layout, std::string name, Index count) {
  AuxEntry a;
  a.name = std::move(name);
  a.mean_offset = layout.aux_count;
  a.var_offset = layout.aux_count + count;
  a.count = count;
  layout.aux_count += 2 * count;
  layout.aux.push_back(std::move(a));
}

}  // namespace detail

inline void validate_arch(const ArchDescriptor& arch) {
  if (arch.classes < 2) throw std::invalid_argument("arch: need at least 2 classes");
  for (Index h : arch.hidden)
    if (h <= 0) throw std::invalid_argument("arch: zero-width layer rejected");
  if (arch.kind == ArchKind::kTinyCnn) {
    if (arch.input_shape.size() != 3)
      throw std::invalid_argument("tiny_cnn input shape must be {C,H,W}, got " + shape_str(arch.input_shape));
    if (arch.hidden.size() != 2)
      throw std::invalid_argument("tiny_cnn expects two conv channel counts");
  } else {
    if (arch.input_shape.size() != 1)
      throw std::invalid_argument("mlp input shape must be {features}, got " + shape_str(arch.input_shape));
  }
  for (Index d : arch.input_shape)
    if (d <= 0) throw std::invalid_argument("arch: non-positive input extent");
}

inline ArchDescriptor make_mlp(Index input_dim, std::vector<Index> hidden, Index classes, bool norm) {
  ArchDescriptor arch;
  arch.kind = norm ? ArchKind::kMlpNorm : ArchKind::kMlp;
  arch.input_shape = {input_dim};
  arch.hidden = std::move(hidden);
  arch.classes = classes;
  validate_arch(arch);
  return arch;
}

inline ArchDescriptor make_tiny_cnn(Shape input_chw, Index classes,
                                    std::vector<Index> channels = {16, 32}) {
  ArchDescriptor arch;
  arch.kind = ArchKind::kTinyCnn;
  arch.input_shape = std::move(input_chw);
  arch.hidden = std::move(channels);
  arch.classes = classes;
  validate_arch(arch);
  return arch;
}

inline ArchLayout make_layout(const ArchDescriptor& arch) {
  validate_arch(arch);
  ArchLayout layout;
  if (arch.kind == ArchKind::kTinyCnn) {
    const Index c_in = arch.input_shape[0];
    const Index c1 = arch.hidden[0], c2 = arch.hidden[1];
    detail::push_entry(layout, "conv1.w", ParamRole::kWeight, {c1, c_in, 3, 3}, true, true, true);
    detail::push_entry(layout, "bn1.gamma", ParamRole::kGamma, {1, c1}, true, false, false);
    detail::push_entry(layout, "bn1.beta", ParamRole::kBeta, {1, c1}, false, false, false);
    detail::push_aux(layout, "bn1", c1);
    detail::push_entry(layout, "conv2.w", ParamRole::kWeight, {c2, c1, 3, 3}, true, true, true);
    detail::push_entry(layout, "bn2.gamma", ParamRole::kGamma, {1, c2}, true, false, false);
    detail::push_entry(layout, "bn2.beta", ParamRole::kBeta, {1, c2}, false, false, false);
    detail::push_aux(layout, "bn2", c2);
    const Index h1 = conv_out_extent(arch.input_shape[1], 2, 2, 0);
    const Index w1 = conv_out_extent(arch.input_shape[2], 2, 2, 0);
    const Index h2 = conv_out_extent(h1, 2, 2, 0);
    const Index w2 = conv_out_extent(w1, 2, 2, 0);
    if (h2 <= 0 || w2 <= 0)
      throw std::invalid_argument("tiny_cnn input too small for two pooling stages");
    detail::push_entry(layout, "fc.w", ParamRole::kWeight, {arch.classes, c2 * h2 * w2}, true, false, false);
    detail::push_entry(layout, "fc.b", ParamRole::kBias, {1, arch.classes}, false, false, false);
    return layout;
  }
  const bool norm = arch.kind == ArchKind::kMlpNorm;
  Index in = arch.input_shape[0];
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
    const Index out = arch.hidden[i];
    const std::string tag = "fc" + std::to_string(i + 1);
    detail::push_entry(layout, tag + ".w", ParamRole::kWeight, {out, in}, true, true, norm);
    if (norm) {
      detail::push_entry(layout, "bn" + std::to_string(i + 1) + ".gamma", ParamRole::kGamma, {1, out},
                         true, false, false);
      detail::push_entry(layout, "bn" + std::to_string(i + 1) + ".beta", ParamRole::kBeta, {1, out},
                         false, false, false);
      detail::push_aux(layout, "bn" + std::to_string(i + 1), out);
    } else {
      detail::push_entry(layout, tag + ".b", ParamRole::kBias, {1, out}, false, false, false);
    }
    in = out;
  }
  detail::push_entry(layout, "head.w", ParamRole::kWeight, {arch.classes, in}, true, false, false);
  detail::push_entry(layout, "head.b", ParamRole::kBias, {1, arch.classes}, false, false, false);
  return layout;
}

// Flat ordered parameters plus normalization running statistics. The unit of
// merging algebra: two ParamVectors are merge-compatible iff their
// descriptors are identical.
template <class S>
struct ParamVector {
  ArchDescriptor arch;
  VectorX<S> values;
  VectorX<S> aux;  // per norm layer: running means then running variances

  template <class T>
  ParamVector<T> cast() const {
    ParamVector<T> out;
    out.arch = arch;
    out.values = values.template cast<T>();
    out.aux = aux.template cast<T>();
    return out;
  }
};

template <class S>
bool merge_compatible(const ParamVector<S>& a, const ParamVector<S>& b) {
  return a.arch == b.arch;
}

inline double kaiming_bound(Index fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

// Kaiming-uniform weights (relu gain), zero biases, unit gammas, zero betas;
// running statistics start at mean 0, variance 1. Deterministic per seed.
template <class S>
ParamVector<S> build(const ArchDescriptor& arch, std::uint64_t seed) {
  const ArchLayout layout = make_layout(arch);
  ParamVector<S> params;
  params.arch = arch;
  params.values = VectorX<S>::Zero(layout.param_count);
  params.aux = VectorX<S>::Zero(layout.aux_count);
  Rng rng(stream_seed(seed, "init"));
  for (const LayoutEntry& e : layout.entries) {
    switch (e.role) {
      case ParamRole::kWeight: {
        const Index fan_in = e.size / e.shape[0];
        const double bound = kaiming_bound(fan_in);
        for (Index i = 0; i < e.size; ++i)
          params.values(e.offset + i) = static_cast<S>(rng.uniform(-bound, bound));
        break;
      }
      case ParamRole::kGamma:
        params.values.segment(e.offset, e.size).setConstant(S(1));
        break;
      case ParamRole::kBias:
      case ParamRole::kBeta:
        break;  // zeros
    }
  }
  for (const AuxEntry& a : layout.aux)
    params.aux.segment(a.var_offset, a.count).setConstant(S(1));
  return params;
}

// Per-entry tensors in canonical layer order.
template <class S>
std::vector<Tensor<S>> unpack(const ParamVector<S>& params) {
  const ArchLayout layout = make_layout(params.arch);
  if (params.values.size() != layout.param_count)
    throw std::invalid_argument("unpack: parameter vector length does not match architecture");
  std::vector<Tensor<S>> out;
  out.reserve(layout.entries.size());
  for (const LayoutEntry& e : layout.entries)
    out.emplace_back(e.shape, ArrayX<S>(params.values.segment(e.offset, e.size).array()));
  return out;
}

template <class S>
VectorX<S> pack(const ArchDescriptor& arch, const std::vector<Tensor<S>>& tensors) {
  const ArchLayout layout = make_layout(arch);
  if (tensors.size() != layout.entries.size())
    throw std::invalid_argument("pack: wrong number of tensors");
  VectorX<S> flat = VectorX<S>::Zero(layout.param_count);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const LayoutEntry& e = layout.entries[i];
    if (tensors[i].shape != e.shape) shape_error("pack(" + e.name + ")", tensors[i].shape, e.shape);
    flat.segment(e.offset, e.size) = tensors[i].v.matrix();
  }
  return flat;
}

constexpr double kDefaultBnEps = 1e-5;
constexpr double kDefaultBnMomentum = 0.1;

template <class S>
struct ForwardPass {
  Tensor<S> logits;
  std::vector<Tensor<S>> leaves;  // aligned with layout entries when taped
};

// Runs the network. In train mode the normalization running statistics in
// `aux` are updated in place (momentum fold); eval mode treats them as
// constants and is a pure function.
template <class S>
ForwardPass<S> forward_pass(Tape<S>* tape, const ArchDescriptor& arch, const ArchLayout& layout,
                            const VectorX<S>& values, VectorX<S>* aux, const Tensor<S>& x,
                            bool train, S bn_eps = S(kDefaultBnEps),
                            S bn_momentum = S(kDefaultBnMomentum)) {
  if (values.size() != layout.param_count)
    throw std::invalid_argument("forward: parameter vector length does not match architecture");
  ForwardPass<S> fp;
  fp.leaves.reserve(layout.entries.size());
  for (const LayoutEntry& e : layout.entries) {
    Tensor<S> t(e.shape, ArrayX<S>(values.segment(e.offset, e.size).array()));
    fp.leaves.push_back(tape ? tape->leaf(std::move(t)) : std::move(t));
  }
  auto leaf_of = [&](std::size_t i) -> Tensor<S>& { return fp.leaves[i]; };
  auto stats_of = [&](std::size_t aux_idx) {
    const AuxEntry& a = layout.aux[aux_idx];
    return BatchNormStats<S>{aux->data() + a.mean_offset, aux->data() + a.var_offset, a.count};
  };

  if (arch.kind == ArchKind::kTinyCnn) {
    if (x.rank() != 4 || x.shape[1] != arch.input_shape[0] || x.shape[2] != arch.input_shape[1] ||
        x.shape[3] != arch.input_shape[2])
      throw std::invalid_argument("forward: batch shape " + shape_str(x.shape) +
                                  " does not match input " + shape_str(arch.input_shape));
    Tensor<S> h = conv2d(x, leaf_of(0), 1, 1);
    h = batch_norm4d(h, leaf_of(1), leaf_of(2), stats_of(0), train, bn_eps, bn_momentum);
    h = maxpool2(relu(h));
    h = conv2d(h, leaf_of(3), 1, 1);
    h = batch_norm4d(h, leaf_of(4), leaf_of(5), stats_of(1), train, bn_eps, bn_momentum);
    h = maxpool2(relu(h));
    h = flatten(h);
    fp.logits = linear(h, leaf_of(6), &leaf_of(7));
    return fp;
  }

  if (x.rank() != 2 || x.shape[1] != arch.input_shape[0])
    throw std::invalid_argument("forward: batch shape " + shape_str(x.shape) +
                                " does not match input " + shape_str(arch.input_shape));
  const bool norm = arch.kind == ArchKind::kMlpNorm;
  Tensor<S> h = x;
  std::size_t entry = 0, aux_idx = 0;
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
    if (norm) {
      Tensor<S>& w = leaf_of(entry);
      Tensor<S> z = matmul(h, transpose(w));
      h = relu(batch_norm2d(z, leaf_of(entry + 1), leaf_of(entry + 2), stats_of(aux_idx), train,
                            bn_eps, bn_momentum));
      entry += 3;
      ++aux_idx;
    } else {
      h = relu(linear(h, leaf_of(entry), &leaf_of(entry + 1)));
      entry += 2;
    }
  }
  fp.logits = linear(h, leaf_of(entry), &leaf_of(entry + 1));
  return fp;
}

// Eval-mode logits as a pure function of (params, batch).
template <class S>
Tensor<S> logits_eval(const ParamVector<S>& params, const Tensor<S>& x,
                      S bn_eps = S(kDefaultBnEps)) {
  const ArchLayout layout = make_layout(params.arch);
  // Eval mode never writes aux; the const_cast only satisfies the shared
  // signature with the training path.
  auto* aux = const_cast<VectorX<S>*>(&params.aux);
  return forward_pass<S>(nullptr, params.arch, layout, params.values, aux, x, false, bn_eps).logits;
}

template <class S>
struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

template <class S>
EvalMetrics<S> evaluate_batch(const ParamVector<S>& params, const Tensor<S>& x,
                              const std::vector<int>& y, S bn_eps = S(kDefaultBnEps)) {
  Tensor<S> logits = logits_eval(params, x, bn_eps);
  const Index n = logits.shape[0], c = logits.shape[1];
  Tensor<S> loss = softmax_cross_entropy(logits, y);
  Index correct = 0;
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index j = 1; j < c; ++j)
      if (logits.v(i * c + j) > logits.v(i * c + best)) best = j;
    if (static_cast<int>(best) == y[i]) ++correct;
  }
  EvalMetrics<S> m;
  m.loss = static_cast<double>(loss.item());
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return m;
}

// Replaces running statistics with the exact batch statistics of `probe`
// (single full-replacement pass in train mode).
template <class S>
void reset_stats_from_batch(ParamVector<S>& params, const Tensor<S>& probe,
                            S bn_eps = S(kDefaultBnEps)) {
  const ArchLayout layout = make_layout(params.arch);
  forward_pass<S>(nullptr, params.arch, layout, params.values, &params.aux, probe, true, bn_eps,
                  S(1));
}

// Max absolute logit difference between params and a copy whose hidden
// weight tensors are multiplied by `scale`. Running statistics are
// recomputed over the probe batch on both sides; eval-mode comparison.
template <class S>
S check_scale_invariance(const ParamVector<S>& params, S scale, const Tensor<S>& probe,
                         S bn_eps = S(1e-12)) {
  if (!(scale > S(0))) throw std::invalid_argument("check_scale_invariance: scale must be positive");
  const ArchLayout layout = make_layout(params.arch);
  ParamVector<S> base = params;
  reset_stats_from_batch(base, probe, bn_eps);
  Tensor<S> ref = logits_eval(base, probe, bn_eps);

  ParamVector<S> scaled = params;
  for (const LayoutEntry& e : layout.entries)
    if (e.hidden_weight) scaled.values.segment(e.offset, e.size) *= scale;
  reset_stats_from_batch(scaled, probe, bn_eps);
  Tensor<S> got = logits_eval(scaled, probe, bn_eps);
  return (ref.v - got.v).abs().maxCoeff();
}

}  // namespace mergelab
