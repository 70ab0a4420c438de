// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tensor<Scalar> is a flat row-major value plus an optional handle into a
// Tape. Primitive operations record a backward closure on the active tape;
// backward() can itself record (create_graph), which is what enables exact
// Hessian-vector products by double backward. Layers (linear, conv, batch
// norm, softmax cross-entropy) are composites of the primitives, so their
// first and second derivatives come from the same machinery.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mergelab {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatrixR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Scoped toggle for input-finiteness checking on every primitive.
inline bool& finite_check_flag() {
  thread_local bool flag = false;
  return flag;
}

struct CheckedScope {
  bool previous;
  CheckedScope() : previous(finite_check_flag()) { finite_check_flag() = true; }
  ~CheckedScope() { finite_check_flag() = previous; }
};

template <class S>
class Tape;

template <class S>
struct Tensor {
  Shape shape;
  ArrayX<S> v;  // flat values, row-major over `shape`
  Tape<S>* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, ArrayX<S> values) : shape(std::move(s)), v(std::move(values)) {
    if (numel(shape) != v.size())
      throw std::invalid_argument("Tensor: " + shape_str(shape) + " does not hold " +
                                  std::to_string(v.size()) + " values");
  }

  static Tensor scalar(S value) { return Tensor({}, ArrayX<S>::Constant(1, value)); }
  static Tensor zeros(Shape s) {
    ArrayX<S> z = ArrayX<S>::Zero(numel(s));
    return Tensor(std::move(s), std::move(z));
  }
  static Tensor ones(Shape s) {
    ArrayX<S> z = ArrayX<S>::Constant(numel(s), S(1));
    return Tensor(std::move(s), std::move(z));
  }

  Index size() const { return v.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(std::size_t i) const { return shape.at(i); }
  bool is_scalar() const { return v.size() == 1; }
  S item() const {
    if (!is_scalar()) throw std::invalid_argument("item(): tensor " + shape_str(shape) + " is not scalar");
    return v(0);
  }
  bool on_tape() const { return tape != nullptr && node >= 0; }

  Tensor detached() const { return Tensor(shape, v); }

  Eigen::Map<const MatrixR<S>> mat() const {
    if (rank() != 2) throw std::invalid_argument("mat(): tensor " + shape_str(shape) + " is not rank 2");
    return Eigen::Map<const MatrixR<S>>(v.data(), shape[0], shape[1]);
  }
};

template <class T, class S>
Tensor<T> cast(const Tensor<S>& t) {
  Tensor<T> out;
  out.shape = t.shape;
  out.v = t.v.template cast<T>();
  return out;
}

template <class S>
void check_finite(const char* op, const Tensor<S>& t) {
  if (!finite_check_flag()) return;
  if (!t.v.isFinite().all())
    throw std::domain_error(std::string(op) + ": non-finite input value in checked mode");
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);

// Accumulates gradients into per-node slots; additive across consumers.
template <class S>
class GradSink {
 public:
  GradSink(std::vector<Tensor<S>>& slots, std::vector<char>& present)
      : slots_(slots), present_(present) {}
  void add(int node, Tensor<S> g) {
    if (node < 0 || node >= static_cast<int>(slots_.size())) return;
    if (!present_[node]) {
      slots_[node] = std::move(g);
      present_[node] = 1;
    } else {
      slots_[node] = mergelab::add(slots_[node], g);
    }
  }

 private:
  std::vector<Tensor<S>>& slots_;
  std::vector<char>& present_;
};

template <class S>
class Gradients {
 public:
  Gradients(std::vector<Tensor<S>> slots, std::vector<char> present)
      : slots_(std::move(slots)), present_(std::move(present)) {}

  bool has(const Tensor<S>& t) const {
    return t.node >= 0 && t.node < static_cast<int>(present_.size()) && present_[t.node];
  }
  // Zero for recorded-but-unreached leaves; error for tensors never taped.
  Tensor<S> grad(const Tensor<S>& t) const {
    if (t.node < 0 || t.node >= static_cast<int>(slots_.size()))
      throw std::invalid_argument("grad(): tensor is not on the tape");
    if (!present_[t.node]) return Tensor<S>::zeros(t.shape);
    return slots_[t.node];
  }

 private:
  std::vector<Tensor<S>> slots_;
  std::vector<char> present_;
};

template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<S>&, GradSink<S>&)>;

  bool recording() const { return recording_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Registers a differentiable source node for `t` on this tape.
  Tensor<S> leaf(Tensor<S> t) {
    t.tape = this;
    t.node = push(nullptr);
    return t;
  }

  int push(BackwardFn fn) {
    nodes_.push_back(Node{std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  Gradients<S> backward(const Tensor<S>& loss, bool create_graph = false) {
    if (loss.tape != this || loss.node < 0)
      throw std::invalid_argument("backward: loss was not produced under this tape");
    if (!loss.is_scalar())
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));
    const int top = loss.node;
    std::vector<Tensor<S>> slots(nodes_.size());
    std::vector<char> present(nodes_.size(), 0);
    slots[top] = Tensor<S>::scalar(S(1));
    present[top] = 1;
    GradSink<S> sink(slots, present);
    const bool saved = recording_;
    recording_ = create_graph;
    try {
      // Reverse recording order visits every node after all of its consumers.
      for (int id = top; id >= 0; --id) {
        if (!present[id]) continue;
        if (nodes_[id].backward) nodes_[id].backward(slots[id], sink);
      }
    } catch (...) {
      recording_ = saved;
      throw;
    }
    recording_ = saved;
    return Gradients<S>(std::move(slots), std::move(present));
  }

 private:
  struct Node {
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

template <class S>
Tape<S>* active_tape(const Tensor<S>& a) {
  return (a.tape && a.tape->recording()) ? a.tape : nullptr;
}

template <class S>
Tape<S>* active_tape(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>* ta = active_tape(a);
  Tape<S>* tb = active_tape(b);
  if (ta && tb && ta != tb) throw std::invalid_argument("operands recorded on different tapes");
  return ta ? ta : tb;
}

namespace detail {

template <class S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) shape_error(op, a.shape, b.shape);
}

template <class S>
void require_rank(const char* op, const Tensor<S>& t, Index rank) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(t.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  check_finite("scale", a);
  Tensor<S> out(a.shape, a.v * c);
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    out.node = tp->push([pa, c](const Tensor<S>& g, GradSink<S>& sink) { sink.add(pa, scale(g, c)); });
  }
  return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("add", a, b);
  check_finite("add", a);
  check_finite("add", b);
  Tensor<S> out(a.shape, a.v + b.v);
  if (Tape<S>* tp = active_tape(a, b)) {
    out.tape = tp;
    const int pa = a.node, pb = b.node;
    out.node = tp->push([pa, pb](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, g);
      sink.add(pb, g);
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("sub", a, b);
  check_finite("sub", a);
  check_finite("sub", b);
  Tensor<S> out(a.shape, a.v - b.v);
  if (Tape<S>* tp = active_tape(a, b)) {
    out.tape = tp;
    const int pa = a.node, pb = b.node;
    out.node = tp->push([pa, pb](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, g);
      sink.add(pb, scale(g, S(-1)));
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("mul", a, b);
  check_finite("mul", a);
  check_finite("mul", b);
  Tensor<S> out(a.shape, a.v * b.v);
  if (Tape<S>* tp = active_tape(a, b)) {
    out.tape = tp;
    Tensor<S> sa = a, sb = b;
    out.node = tp->push([sa, sb](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(sa.node, mul(g, sb));
      sink.add(sb.node, mul(g, sa));
    });
  }
  return out;
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("div", a, b);
  check_finite("div", a);
  check_finite("div", b);
  Tensor<S> out(a.shape, a.v / b.v);
  if (Tape<S>* tp = active_tape(a, b)) {
    out.tape = tp;
    out.node = tp->size();  // id the push below will assign
    const int pa = a.node;
    Tensor<S> sb = b, so = out;
    tp->push([pa, sb, so](const Tensor<S>& g, GradSink<S>& sink) {
      Tensor<S> ginv = div(g, sb);
      sink.add(pa, ginv);
      sink.add(sb.node, scale(mul(ginv, so), S(-1)));
    });
  }
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  check_finite("add_scalar", a);
  Tensor<S> out(a.shape, a.v + c);
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    out.node = tp->push([pa](const Tensor<S>& g, GradSink<S>& sink) { sink.add(pa, g); });
  }
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  check_finite("relu", a);
  Tensor<S> out(a.shape, a.v.max(S(0)));
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    Tensor<S> mask(a.shape, (a.v > S(0)).template cast<S>());
    out.node = tp->push([pa, mask](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, mul(g, mask));
    });
  }
  return out;
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
  check_finite("exp", a);
  Tensor<S> out(a.shape, a.v.exp());
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    out.node = tp->size();  // id the push below will assign
    const int pa = a.node;
    Tensor<S> so = out;
    tp->push([pa, so](const Tensor<S>& g, GradSink<S>& sink) { sink.add(pa, mul(g, so)); });
  }
  return out;
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
  check_finite("log", a);
  Tensor<S> out(a.shape, a.v.log());
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    Tensor<S> sa = a;
    out.node = tp->push([sa](const Tensor<S>& g, GradSink<S>& sink) { sink.add(sa.node, div(g, sa)); });
  }
  return out;
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
  check_finite("sqrt", a);
  Tensor<S> out(a.shape, a.v.sqrt());
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    out.node = tp->size();  // id the push below will assign
    const int pa = a.node;
    Tensor<S> so = out;
    tp->push([pa, so](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, div(scale(g, S(0.5)), so));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape primitives
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape s) {
  if (numel(s) != a.size()) shape_error("reshape", a.shape, s);
  Tensor<S> out(std::move(s), a.v);
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    Shape orig = a.shape;
    out.node = tp->push([pa, orig](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, reshape(g, orig));
    });
  }
  return out;
}

// [N, d1, d2, ...] -> [N, d1*d2*...]
template <class S>
Tensor<S> flatten(const Tensor<S>& a) {
  if (a.rank() < 2) throw std::invalid_argument("flatten: need rank >= 2, got " + shape_str(a.shape));
  return reshape(a, Shape{a.shape[0], a.size() / a.shape[0]});
}

template <class S>
Tensor<S> permute4(const Tensor<S>& x, std::array<int, 4> perm) {
  detail::require_rank("permute4", x, 4);
  const Shape& in = x.shape;
  Shape out_shape{in[perm[0]], in[perm[1]], in[perm[2]], in[perm[3]]};
  ArrayX<S> vals(x.size());
  const Index s3 = in[3], s2 = in[2] * s3, s1 = in[1] * s2;
  const Index strides[4] = {s1, s2, s3, 1};
  Index pos = 0;
  Index idx[4];
  for (idx[0] = 0; idx[0] < out_shape[0]; ++idx[0])
    for (idx[1] = 0; idx[1] < out_shape[1]; ++idx[1])
      for (idx[2] = 0; idx[2] < out_shape[2]; ++idx[2])
        for (idx[3] = 0; idx[3] < out_shape[3]; ++idx[3]) {
          const Index src = idx[0] * strides[perm[0]] + idx[1] * strides[perm[1]] +
                            idx[2] * strides[perm[2]] + idx[3] * strides[perm[3]];
          vals(pos++) = x.v(src);
        }
  Tensor<S> out(std::move(out_shape), std::move(vals));
  if (Tape<S>* tp = active_tape(x)) {
    out.tape = tp;
    const int pa = x.node;
    std::array<int, 4> inv{};
    for (int i = 0; i < 4; ++i) inv[perm[i]] = i;
    out.node = tp->push([pa, inv](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, permute4(g, inv));
    });
  }
  return out;
}

// 2D transpose (materialized).
template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_rank("transpose", a, 2);
  Tensor<S> out = Tensor<S>::zeros({a.shape[1], a.shape[0]});
  Eigen::Map<MatrixR<S>>(out.v.data(), a.shape[1], a.shape[0]) = a.mat().transpose();
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    out.node = tp->push([pa](const Tensor<S>& g, GradSink<S>& sink) { sink.add(pa, transpose(g)); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> expand_scalar(const Tensor<S>& s, Shape shape);

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  check_finite("sum_all", a);
  Tensor<S> out = Tensor<S>::scalar(a.v.sum());
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    Shape orig = a.shape;
    out.node = tp->push([pa, orig](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, expand_scalar(g, orig));
    });
  }
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return scale(sum_all(a), S(1) / static_cast<S>(a.size()));
}

template <class S>
Tensor<S> expand_scalar(const Tensor<S>& s, Shape shape) {
  if (!s.is_scalar()) throw std::invalid_argument("expand_scalar: source must be scalar");
  Tensor<S> out(shape, ArrayX<S>::Constant(numel(shape), s.v(0)));
  if (Tape<S>* tp = active_tape(s)) {
    out.tape = tp;
    const int pa = s.node;
    out.node = tp->push([pa](const Tensor<S>& g, GradSink<S>& sink) { sink.add(pa, sum_all(g)); });
  }
  return out;
}

template <class S>
Tensor<S> tile_rows(const Tensor<S>& row, Index n);
template <class S>
Tensor<S> tile_cols(const Tensor<S>& col, Index m);

// [N,F] -> [1,F]
template <class S>
Tensor<S> sum_rows(const Tensor<S>& a) {
  detail::require_rank("sum_rows", a, 2);
  check_finite("sum_rows", a);
  Tensor<S> out = Tensor<S>::zeros({1, a.shape[1]});
  Eigen::Map<MatrixR<S>>(out.v.data(), 1, a.shape[1]) = a.mat().colwise().sum();
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    const Index n = a.shape[0];
    out.node = tp->push([pa, n](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, tile_rows(g, n));
    });
  }
  return out;
}

// [N,F] -> [N,1]
template <class S>
Tensor<S> sum_cols(const Tensor<S>& a) {
  detail::require_rank("sum_cols", a, 2);
  check_finite("sum_cols", a);
  Tensor<S> out = Tensor<S>::zeros({a.shape[0], 1});
  Eigen::Map<MatrixR<S>>(out.v.data(), a.shape[0], 1) = a.mat().rowwise().sum();
  if (Tape<S>* tp = active_tape(a)) {
    out.tape = tp;
    const int pa = a.node;
    const Index m = a.shape[1];
    out.node = tp->push([pa, m](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, tile_cols(g, m));
    });
  }
  return out;
}

// [1,F] -> [N,F]
template <class S>
Tensor<S> tile_rows(const Tensor<S>& row, Index n) {
  detail::require_rank("tile_rows", row, 2);
  if (row.shape[0] != 1) throw std::invalid_argument("tile_rows: source must be [1,F], got " + shape_str(row.shape));
  const Index f = row.shape[1];
  Tensor<S> out = Tensor<S>::zeros({n, f});
  Eigen::Map<MatrixR<S>>(out.v.data(), n, f).rowwise() =
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(row.v.data(), f);
  if (Tape<S>* tp = active_tape(row)) {
    out.tape = tp;
    const int pa = row.node;
    out.node = tp->push([pa](const Tensor<S>& g, GradSink<S>& sink) { sink.add(pa, sum_rows(g)); });
  }
  return out;
}

// [N,1] -> [N,M]
template <class S>
Tensor<S> tile_cols(const Tensor<S>& col, Index m) {
  detail::require_rank("tile_cols", col, 2);
  if (col.shape[1] != 1) throw std::invalid_argument("tile_cols: source must be [N,1], got " + shape_str(col.shape));
  const Index n = col.shape[0];
  Tensor<S> out = Tensor<S>::zeros({n, m});
  Eigen::Map<MatrixR<S>>(out.v.data(), n, m).colwise() =
      Eigen::Map<const VectorX<S>>(col.v.data(), n);
  if (Tape<S>* tp = active_tape(col)) {
    out.tape = tp;
    const int pa = col.node;
    out.node = tp->push([pa](const Tensor<S>& g, GradSink<S>& sink) { sink.add(pa, sum_cols(g)); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.shape[1] != b.shape[0]) shape_error("matmul", a.shape, b.shape);
  check_finite("matmul", a);
  check_finite("matmul", b);
  Tensor<S> out = Tensor<S>::zeros({a.shape[0], b.shape[1]});
  Eigen::Map<MatrixR<S>>(out.v.data(), a.shape[0], b.shape[1]).noalias() = a.mat() * b.mat();
  if (Tape<S>* tp = active_tape(a, b)) {
    out.tape = tp;
    Tensor<S> sa = a, sb = b;
    out.node = tp->push([sa, sb](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(sa.node, matmul(g, transpose(sb)));
      sink.add(sb.node, matmul(transpose(sa), g));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Index-map primitives (gather/scatter pairs; linear, constant index maps)
// ---------------------------------------------------------------------------

using IndexList = std::shared_ptr<const std::vector<Index>>;

// out[i] = (idx[i] >= 0) ? x.v[idx[i]] : 0. Adjoint of `put`.
template <class S>
Tensor<S> take(const Tensor<S>& x, IndexList idx, Shape out_shape);
// out[idx[i]] += x.v[i] for idx[i] >= 0. Adjoint of `take`.
template <class S>
Tensor<S> put(const Tensor<S>& x, IndexList idx, Shape out_shape);

template <class S>
Tensor<S> take(const Tensor<S>& x, IndexList idx, Shape out_shape) {
  if (static_cast<Index>(idx->size()) != numel(out_shape))
    throw std::invalid_argument("take: index list does not match output shape");
  check_finite("take", x);
  ArrayX<S> vals(numel(out_shape));
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const Index src = (*idx)[i];
    vals(static_cast<Index>(i)) = src >= 0 ? x.v(src) : S(0);
  }
  Tensor<S> out(std::move(out_shape), std::move(vals));
  if (Tape<S>* tp = active_tape(x)) {
    out.tape = tp;
    const int pa = x.node;
    Shape in_shape = x.shape;
    out.node = tp->push([pa, idx, in_shape](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, put(g, idx, in_shape));
    });
  }
  return out;
}

template <class S>
Tensor<S> put(const Tensor<S>& x, IndexList idx, Shape out_shape) {
  if (static_cast<Index>(idx->size()) != x.size())
    throw std::invalid_argument("put: index list does not match input size");
  check_finite("put", x);
  ArrayX<S> vals = ArrayX<S>::Zero(numel(out_shape));
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const Index dst = (*idx)[i];
    if (dst >= 0) vals(dst) += x.v(static_cast<Index>(i));
  }
  Tensor<S> out(std::move(out_shape), std::move(vals));
  if (Tape<S>* tp = active_tape(x)) {
    out.tape = tp;
    const int pa = x.node;
    Shape in_shape = x.shape;
    out.node = tp->push([pa, idx, in_shape](const Tensor<S>& g, GradSink<S>& sink) {
      sink.add(pa, take(g, idx, in_shape));
    });
  }
  return out;
}

// Picks x[i, labels[i]] from [N,C] into [N,1].
template <class S>
Tensor<S> gather_cols(const Tensor<S>& x, const std::vector<int>& labels) {
  detail::require_rank("gather_cols", x, 2);
  if (static_cast<Index>(labels.size()) != x.shape[0])
    throw std::invalid_argument("gather_cols: need one index per row");
  auto idx = std::make_shared<std::vector<Index>>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= x.shape[1])
      throw std::out_of_range("gather_cols: label " + std::to_string(labels[i]) + " out of range");
    (*idx)[i] = static_cast<Index>(i) * x.shape[1] + labels[i];
  }
  return take(x, idx, Shape{x.shape[0], 1});
}

// ---------------------------------------------------------------------------
// Convolution and pooling building blocks
// ---------------------------------------------------------------------------

inline Index conv_out_extent(Index in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

inline IndexList im2col_map(const Shape& x_shape, int k, int stride, int pad) {
  const Index n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
  const Index oh = conv_out_extent(h, k, stride, pad);
  const Index ow = conv_out_extent(w, k, stride, pad);
  auto idx = std::make_shared<std::vector<Index>>();
  idx->reserve(n * oh * ow * c * k * k);
  for (Index in = 0; in < n; ++in)
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x)
        for (Index ch = 0; ch < c; ++ch)
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const Index sy = y * stride - pad + ki;
              const Index sx = x * stride - pad + kj;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
                idx->push_back(-1);
              } else {
                idx->push_back(((in * c + ch) * h + sy) * w + sx);
              }
            }
  return idx;
}

}  // namespace detail

// [N,C,H,W] -> [N*OH*OW, C*k*k] patch matrix (zero padding).
template <class S>
Tensor<S> im2col(const Tensor<S>& x, int k, int stride, int pad) {
  detail::require_rank("im2col", x, 4);
  if (k <= 0 || stride <= 0 || pad < 0) throw std::invalid_argument("im2col: bad kernel/stride/pad");
  const Index oh = conv_out_extent(x.shape[2], k, stride, pad);
  const Index ow = conv_out_extent(x.shape[3], k, stride, pad);
  if (oh <= 0 || ow <= 0)
    throw std::invalid_argument("im2col: kernel does not fit input " + shape_str(x.shape));
  IndexList idx = detail::im2col_map(x.shape, k, stride, pad);
  return take(x, idx, Shape{x.shape[0] * oh * ow, x.shape[1] * k * k});
}

// Adjoint of im2col: scatter-adds patches back onto [N,C,H,W].
template <class S>
Tensor<S> col2im(const Tensor<S>& cols, const Shape& x_shape, int k, int stride, int pad) {
  IndexList idx = detail::im2col_map(x_shape, k, stride, pad);
  return put(cols, idx, x_shape);
}

// Cross-correlation, stride/pad, no kernel flip. x [N,C,H,W], w [OC,C,k,k].
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride = 1, int pad = 0) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  if (x.shape[1] != w.shape[1] || w.shape[2] != w.shape[3]) shape_error("conv2d", x.shape, w.shape);
  const int k = static_cast<int>(w.shape[2]);
  const Index n = x.shape[0], oc = w.shape[0];
  const Index oh = conv_out_extent(x.shape[2], k, stride, pad);
  const Index ow = conv_out_extent(x.shape[3], k, stride, pad);
  Tensor<S> cols = im2col(x, k, stride, pad);                           // [N*OH*OW, C*k*k]
  Tensor<S> wf = reshape(w, Shape{oc, w.shape[1] * k * k});             // [OC, C*k*k]
  Tensor<S> prod = matmul(cols, transpose(wf));                         // [N*OH*OW, OC]
  Tensor<S> nhwc = reshape(prod, Shape{n, oh, ow, oc});
  return permute4(nhwc, {0, 3, 1, 2});                                  // [N,OC,OH,OW]
}

// 2D max pooling with argmax routing.
template <class S>
Tensor<S> maxpool2(const Tensor<S>& x, int k = 2, int stride = 2) {
  detail::require_rank("maxpool2", x, 4);
  if (k <= 0 || stride <= 0) throw std::invalid_argument("maxpool2: bad kernel/stride");
  check_finite("maxpool2", x);
  const Index n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const Index oh = conv_out_extent(h, k, stride, 0);
  const Index ow = conv_out_extent(w, k, stride, 0);
  if (oh <= 0 || ow <= 0)
    throw std::invalid_argument("maxpool2: window does not fit input " + shape_str(x.shape));
  auto arg = std::make_shared<std::vector<Index>>(n * c * oh * ow);
  ArrayX<S> vals(n * c * oh * ow);
  Index pos = 0;
  for (Index in = 0; in < n; ++in)
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < oh; ++y)
        for (Index xx = 0; xx < ow; ++xx) {
          Index best = -1;
          S best_v = S(0);
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const Index sy = y * stride + ki;
              const Index sx = xx * stride + kj;
              if (sy >= h || sx >= w) continue;
              const Index flat = ((in * c + ch) * h + sy) * w + sx;
              if (best < 0 || x.v(flat) > best_v) {
                best = flat;
                best_v = x.v(flat);
              }
            }
          (*arg)[pos] = best;
          vals(pos) = best_v;
          ++pos;
        }
  // take() with the argmax map reproduces the forward values and owns the
  // correct scatter adjoint, so route through it for tape recording.
  if (active_tape(x)) return take(x, arg, Shape{n, c, oh, ow});
  return Tensor<S>(Shape{n, c, oh, ow}, std::move(vals));
}

// ---------------------------------------------------------------------------
// Composite layers
// ---------------------------------------------------------------------------

// x [N,in] * w [out,in]^T + b [1,out]
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b = nullptr) {
  Tensor<S> out = matmul(x, transpose(w));
  if (b) out = add(out, tile_rows(*b, out.shape[0]));
  return out;
}

// Batch normalization over rows of [N,F] (per-feature statistics).
// Training mode normalizes with biased batch statistics and folds them into
// the running buffers with the given momentum; eval mode uses the buffers as
// constants. Running buffers live outside the tape.
template <class S>
struct BatchNormStats {
  S* mean = nullptr;
  S* var = nullptr;
  Index count = 0;
};

template <class S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       BatchNormStats<S> stats, bool train, S eps, S momentum) {
  detail::require_rank("batch_norm", x, 2);
  const Index n = x.shape[0], f = x.shape[1];
  if (gamma.shape != Shape{1, f} || beta.shape != Shape{1, f})
    throw std::invalid_argument("batch_norm: gamma/beta must be [1," + std::to_string(f) + "]");
  if (stats.count != f) throw std::invalid_argument("batch_norm: running stats length mismatch");
  Tensor<S> xhat;
  if (train) {
    if (n < 1) throw std::invalid_argument("batch_norm: empty batch");
    Tensor<S> mu = scale(sum_rows(x), S(1) / static_cast<S>(n));         // [1,F]
    Tensor<S> centered = sub(x, tile_rows(mu, n));
    Tensor<S> var = scale(sum_rows(mul(centered, centered)), S(1) / static_cast<S>(n));
    for (Index i = 0; i < f; ++i) {
      stats.mean[i] = (S(1) - momentum) * stats.mean[i] + momentum * mu.v(i);
      stats.var[i] = (S(1) - momentum) * stats.var[i] + momentum * var.v(i);
      if (stats.var[i] < S(1e-12)) stats.var[i] = S(1e-12);
    }
    xhat = div(centered, tile_rows(sqrt(add_scalar(var, eps)), n));
  } else {
    Tensor<S> rm = Tensor<S>::zeros({1, f});
    Tensor<S> ristd = Tensor<S>::zeros({1, f});
    for (Index i = 0; i < f; ++i) {
      rm.v(i) = stats.mean[i];
      ristd.v(i) = S(1) / std::sqrt(stats.var[i] + eps);
    }
    xhat = mul(sub(x, tile_rows(rm, n)), tile_rows(ristd, n));
  }
  return add(mul(xhat, tile_rows(gamma, n)), tile_rows(beta, n));
}

// Batch normalization over channels of [N,C,H,W].
template <class S>
Tensor<S> batch_norm4d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       BatchNormStats<S> stats, bool train, S eps, S momentum) {
  detail::require_rank("batch_norm", x, 4);
  const Index n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  Tensor<S> rows = reshape(permute4(x, {0, 2, 3, 1}), Shape{n * h * w, c});
  Tensor<S> norm = batch_norm2d(rows, gamma, beta, stats, train, eps, momentum);
  return permute4(reshape(norm, Shape{n, h, w, c}), {0, 3, 1, 2});
}

// Row-wise softmax probabilities.
template <class S>
Tensor<S> softmax(const Tensor<S>& logits) {
  detail::require_rank("softmax", logits, 2);
  const Index n = logits.shape[0], c = logits.shape[1];
  Tensor<S> rowmax = Tensor<S>::zeros({n, 1});
  Eigen::Map<MatrixR<S>>(rowmax.v.data(), n, 1) = logits.mat().rowwise().maxCoeff();
  Tensor<S> shifted = sub(logits, tile_cols(rowmax, c));  // constant shift, exact
  Tensor<S> e = exp(shifted);
  return div(e, tile_cols(sum_cols(e), c));
}

// Mean negative log-likelihood of integer labels under row-wise softmax.
template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  detail::require_rank("softmax_cross_entropy", logits, 2);
  if (static_cast<Index>(labels.size()) != logits.shape[0])
    throw std::invalid_argument("softmax_cross_entropy: need one label per row (" +
                                std::to_string(labels.size()) + " labels for " +
                                std::to_string(logits.shape[0]) + " rows)");
  check_finite("softmax_cross_entropy", logits);
  const Index n = logits.shape[0], c = logits.shape[1];
  Tensor<S> rowmax = Tensor<S>::zeros({n, 1});
  Eigen::Map<MatrixR<S>>(rowmax.v.data(), n, 1) = logits.mat().rowwise().maxCoeff();
  Tensor<S> shifted = sub(logits, tile_cols(rowmax, c));
  Tensor<S> lse = log(sum_cols(exp(shifted)));           // [N,1]
  Tensor<S> picked = gather_cols(shifted, labels);        // [N,1]
  return scale(sum_all(sub(lse, picked)), S(1) / static_cast<S>(n));
}

}  // namespace mergelab
