#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "mergelab/hvp.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/tensor.hpp"

using namespace mergelab;

namespace {

ArrayX<double> random_array(Rng& rng, Index n, double lo = -1.0, double hi = 1.0) {
  ArrayX<double> a(n);
  for (Index i = 0; i < n; ++i) a(i) = rng.uniform(lo, hi);
  return a;
}

// Keeps relu/maxpool inputs away from kinks so finite differences are valid.
ArrayX<double> random_array_off_kinks(Rng& rng, Index n) {
  ArrayX<double> a = random_array(rng, n);
  for (Index i = 0; i < n; ++i)
    if (std::abs(a(i)) < 0.05) a(i) = a(i) < 0 ? a(i) - 0.05 : a(i) + 0.05;
  return a;
}

// Central finite-difference gradient of a scalar-valued function of one
// flat input. The independent oracle used by every gradcheck below.
template <class F>
ArrayX<double> fd_gradient(const F& f, const ArrayX<double>& x, double h = 1e-4) {
  ArrayX<double> g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    ArrayX<double> xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

double max_rel_err(const ArrayX<double>& got, const ArrayX<double>& want) {
  double worst = 0.0;
  for (Index i = 0; i < got.size(); ++i) {
    const double denom = std::max(1.0, std::abs(want(i)));
    worst = std::max(worst, std::abs(got(i) - want(i)) / denom);
  }
  return worst;
}

// Runs the analytic gradient of `build` (a taped scalar function of one
// input tensor) against the finite-difference oracle.
template <class Build>
void gradcheck(const Build& build, const Shape& shape, Rng& rng, double tol = 1e-4,
               bool off_kinks = false) {
  ArrayX<double> x0 =
      off_kinks ? random_array_off_kinks(rng, numel(shape)) : random_array(rng, numel(shape));
  Tape<double> tape;
  Tensor<double> leaf = tape.leaf(Tensor<double>(shape, x0));
  Tensor<double> loss = build(leaf);
  Gradients<double> grads = tape.backward(loss);
  ArrayX<double> analytic = grads.grad(leaf).v;
  auto f = [&](const ArrayX<double>& x) {
    Tensor<double> t(shape, x);
    return build(t).item();
  };
  ArrayX<double> numeric = fd_gradient(f, x0);
  CHECK(max_rel_err(analytic, numeric) < tol);
}

}  // namespace

TEST_CASE("matmul identity") {
  Tensor<float> a({2, 2}, (ArrayX<float>(4) << 1, 2, 3, 4).finished());
  Tensor<float> eye({2, 2}, (ArrayX<float>(4) << 1, 0, 0, 1).finished());
  Tensor<float> out = matmul(a, eye);
  CHECK(out.v(0) == 1.0f);
  CHECK(out.v(1) == 2.0f);
  CHECK(out.v(2) == 3.0f);
  CHECK(out.v(3) == 4.0f);
}

TEST_CASE("relu clamps negatives") {
  Tensor<float> x({3}, (ArrayX<float>(3) << -1, 0, 2).finished());
  Tensor<float> y = relu(x);
  CHECK(y.v(0) == 0.0f);
  CHECK(y.v(1) == 0.0f);
  CHECK(y.v(2) == 2.0f);
}

TEST_CASE("softmax cross-entropy of uniform logits is ln 2") {
  Tensor<double> logits({1, 2}, ArrayX<double>::Zero(2));
  Tensor<double> loss = softmax_cross_entropy(logits, {0});
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("shape mismatch reports both shapes") {
  Tensor<float> a = Tensor<float>::zeros({2, 3});
  Tensor<float> b = Tensor<float>::zeros({3, 3});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[3,3]"), std::invalid_argument);
}

TEST_CASE("checked mode rejects non-finite input") {
  Tensor<float> a({2}, (ArrayX<float>(2) << 1.0f, std::numeric_limits<float>::quiet_NaN()).finished());
  Tensor<float> b = Tensor<float>::ones({2});
  CHECK_NOTHROW(add(a, b));
  CheckedScope checked;
  CHECK_THROWS_AS(add(a, b), std::domain_error);
}

TEST_CASE("backward of x*x at 3 is 6") {
  Tape<double> tape;
  Tensor<double> x = tape.leaf(Tensor<double>::scalar(3.0));
  Tensor<double> y = mul(x, x);
  Gradients<double> g = tape.backward(y);
  CHECK(g.grad(x).item() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("cross-entropy gradient is softmax minus one-hot") {
  Tape<double> tape;
  Tensor<double> logits = tape.leaf(Tensor<double>({1, 2}, ArrayX<double>::Zero(2)));
  Tensor<double> loss = softmax_cross_entropy(logits, {0});
  Gradients<double> g = tape.backward(loss);
  Tensor<double> gl = g.grad(logits);
  CHECK(gl.v(0) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(gl.v(1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar and off-tape losses") {
  Tape<double> tape;
  Tensor<double> x = tape.leaf(Tensor<double>::ones({3}));
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  Tensor<double> detached = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(detached), std::invalid_argument);
  Tape<double> other;
  Tensor<double> y = other.leaf(Tensor<double>::scalar(2.0));
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("unreached leaves get zero gradient") {
  Tape<double> tape;
  Tensor<double> x = tape.leaf(Tensor<double>::scalar(3.0));
  Tensor<double> unused = tape.leaf(Tensor<double>::ones({4}));
  Tensor<double> loss = mul(x, x);
  Gradients<double> g = tape.backward(loss);
  CHECK(!g.has(unused));
  CHECK(g.grad(unused).v.abs().maxCoeff() == 0.0);
}

TEST_CASE("gradcheck: elementwise and reduction primitives") {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(6));
    Shape shape{n, 1 + static_cast<Index>(rng.below(4))};
    ArrayX<double> other = random_array(rng, numel(shape));
    Tensor<double> c(shape, other);

    gradcheck([&](Tensor<double>& t) { return sum_all(add(t, c)); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(sub(c, t)); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(t, c)); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(t, t)); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(scale(t, 2.5)); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return mean_all(relu(t)); }, shape, rng, 1e-4, true);
    gradcheck([&](Tensor<double>& t) { return sum_all(exp(scale(t, 0.5))); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(log(add_scalar(mul(t, t), 0.5))); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(sqrt(add_scalar(mul(t, t), 0.5))); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(div(c, add_scalar(mul(t, t), 1.0))); }, shape, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(reshape(t, {numel(shape)}), reshape(c, {numel(shape)}))); },
              shape, rng);
  }
}

TEST_CASE("gradcheck: matmul, transpose, broadcasts") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(3));
    const Index k = 2 + static_cast<Index>(rng.below(3));
    const Index m = 2 + static_cast<Index>(rng.below(3));
    Tensor<double> b({k, m}, random_array(rng, k * m));
    Tensor<double> w({n, m}, random_array(rng, n * m));
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(matmul(t, b), w)); }, {n, k}, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(matmul(transpose(t), b), w)); }, {k, n}, rng);
    Tensor<double> row({1, m}, random_array(rng, m));
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(tile_rows(t, n), w)); }, {1, m}, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(tile_cols(t, m), w)); }, {n, 1}, rng);
    Tensor<double> colw({n, 1}, random_array(rng, n));
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(sum_rows(t), row)); }, {n, m}, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(sum_cols(t), colw)); }, {n, m}, rng);
  }
}

TEST_CASE("gradcheck: conv, pooling, permute, softmax-CE") {
  Rng rng(99);
  for (int trial = 0; trial < 6; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(2));
    const Index c = 1 + static_cast<Index>(rng.below(2));
    const Index h = 4 + static_cast<Index>(rng.below(3));
    const Index w = 4 + static_cast<Index>(rng.below(3));
    const Index oc = 1 + static_cast<Index>(rng.below(3));
    Shape xs{n, c, h, w};
    Tensor<double> kernel({oc, c, 3, 3}, random_array(rng, oc * c * 9));

    gradcheck([&](Tensor<double>& t) { return mean_all(conv2d(t, kernel, 1, 1)); }, xs, rng);
    gradcheck([&](Tensor<double>& t) { return mean_all(conv2d(t, kernel, 2, 1)); }, xs, rng);
    // Weight gradient route.
    Tensor<double> img(xs, random_array(rng, numel(xs)));
    gradcheck([&](Tensor<double>& t) { return mean_all(mul(conv2d(img, t, 1, 1), conv2d(img, t, 1, 1))); },
              {oc, c, 3, 3}, rng);
    gradcheck([&](Tensor<double>& t) { return mean_all(maxpool2(t, 2, 2)); }, xs, rng, 1e-4, true);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(permute4(t, {0, 2, 3, 1}), permute4(img, {0, 2, 3, 1}))); },
              xs, rng);

    std::vector<int> labels;
    const Index classes = 3;
    for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(classes)));
    Tensor<double> probs_w({n, classes}, random_array(rng, n * classes));
    gradcheck([&](Tensor<double>& t) { return softmax_cross_entropy(t, labels); }, {n, classes}, rng);
    gradcheck([&](Tensor<double>& t) { return sum_all(mul(softmax(t), probs_w)); }, {n, classes}, rng);
  }
}

TEST_CASE("gradcheck: batch norm, train and eval") {
  Rng rng(1234);
  for (int trial = 0; trial < 6; ++trial) {
    const Index n = 3 + static_cast<Index>(rng.below(4));
    const Index f = 2 + static_cast<Index>(rng.below(3));
    ArrayX<double> gamma_v = random_array(rng, f, 0.5, 1.5);
    ArrayX<double> beta_v = random_array(rng, f);
    std::vector<double> mean(f, 0.1), var(f, 1.3);
    for (bool train : {true, false}) {
      // Input route.
      {
        std::vector<double> m = mean, s = var;
        Tensor<double> gm({1, f}, gamma_v), bt({1, f}, beta_v);
        gradcheck(
            [&](Tensor<double>& t) {
              std::vector<double> mm = m, ss = s;
              BatchNormStats<double> st{mm.data(), ss.data(), f};
              return mean_all(mul(batch_norm2d(t, gm, bt, st, train, 1e-5, 0.1),
                                  batch_norm2d(t, gm, bt, st, train, 1e-5, 0.1)));
            },
            {n, f}, rng, 2e-4);
      }
      // Gamma/beta route.
      {
        Tensor<double> x({n, f}, random_array(rng, n * f));
        Tensor<double> bt({1, f}, beta_v);
        gradcheck(
            [&](Tensor<double>& t) {
              std::vector<double> mm = mean, ss = var;
              BatchNormStats<double> st{mm.data(), ss.data(), f};
              return mean_all(mul(batch_norm2d(x, t, bt, st, train, 1e-5, 0.1),
                                  batch_norm2d(x, t, bt, st, train, 1e-5, 0.1)));
            },
            {1, f}, rng, 2e-4);
      }
    }
    // 4D batch norm over channels.
    {
      const Index c = 2, h = 3, w = 3;
      ArrayX<double> g4 = random_array(rng, c, 0.5, 1.5);
      Tensor<double> gm({1, c}, g4), bt({1, c}, random_array(rng, c));
      gradcheck(
          [&](Tensor<double>& t) {
            std::vector<double> mm(c, 0.0), ss(c, 1.0);
            BatchNormStats<double> st{mm.data(), ss.data(), c};
            return mean_all(batch_norm4d(t, gm, bt, st, true, 1e-5, 0.1));
          },
          {2, c, h, w}, rng, 2e-4);
    }
  }
}

TEST_CASE("batch norm train updates running statistics") {
  const Index n = 8, f = 3;
  Rng rng(5);
  Tensor<double> x({n, f}, random_array(rng, n * f));
  Tensor<double> gm = Tensor<double>::ones({1, f});
  Tensor<double> bt = Tensor<double>::zeros({1, f});
  std::vector<double> mean(f, 0.0), var(f, 1.0);
  BatchNormStats<double> st{mean.data(), var.data(), f};
  batch_norm2d(x, gm, bt, st, true, 1e-5, 0.1);
  // Expected: 0.9 * old + 0.1 * batch statistic.
  for (Index j = 0; j < f; ++j) {
    double mu = 0.0;
    for (Index i = 0; i < n; ++i) mu += x.v(i * f + j);
    mu /= n;
    double vv = 0.0;
    for (Index i = 0; i < n; ++i) vv += (x.v(i * f + j) - mu) * (x.v(i * f + j) - mu);
    vv /= n;
    CHECK(mean[j] == doctest::Approx(0.1 * mu).epsilon(1e-12));
    CHECK(var[j] == doctest::Approx(0.9 + 0.1 * vv).epsilon(1e-12));
  }
}

TEST_CASE("linearity of backward") {
  Rng rng(21);
  const Shape shape{4, 3};
  ArrayX<double> x0 = random_array(rng, numel(shape));
  auto grad_of = [&](auto&& fn) {
    Tape<double> tape;
    Tensor<double> t = tape.leaf(Tensor<double>(shape, x0));
    return tape.backward(fn(t)).grad(t).v.eval();
  };
  Tensor<double> c(shape, random_array(rng, numel(shape)));
  auto f = [&](Tensor<double>& t) { return sum_all(mul(t, c)); };
  auto g = [&](Tensor<double>& t) { return sum_all(mul(mul(t, t), c)); };
  const double a = 2.25, b = -0.75;
  ArrayX<double> combined = grad_of([&](Tensor<double>& t) { return add(scale(f(t), a), scale(g(t), b)); });
  ArrayX<double> expected = a * grad_of(f) + b * grad_of(g);
  CHECK(max_rel_err(combined, expected) < 1e-6);
}

TEST_CASE("forward and backward are bitwise deterministic") {
  auto run = [] {
    Rng rng(77);
    Tape<float> tape;
    Tensor<float> x = tape.leaf(Tensor<float>({4, 4}, random_array(rng, 16).cast<float>()));
    Tensor<float> w = tape.leaf(Tensor<float>({4, 4}, random_array(rng, 16).cast<float>()));
    Tensor<float> loss = mean_all(mul(matmul(x, w), matmul(x, w)));
    Gradients<float> g = tape.backward(loss);
    return std::make_pair(loss.item(), g.grad(w).v.eval());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK((g1 == g2).all());
}

// --- Hessian-vector products -------------------------------------------------

namespace {

// theta^T A theta / 2 as a taped loss; A constant.
LossBuilder<double> quadratic_builder(const MatrixR<double>& a) {
  return [a](Tape<double>& tape, const VectorX<double>& theta) {
    const Index d = theta.size();
    Tensor<double> amat({d, d}, ArrayX<double>(Eigen::Map<const ArrayX<double>>(a.data(), d * d)));
    Tensor<double> th = tape.leaf(Tensor<double>({1, d}, theta.array()));
    Tensor<double> loss = scale(sum_all(mul(th, matmul(th, amat))), 0.5);
    BuiltLoss<double> built;
    built.loss = loss;
    built.leaves = {th};
    built.offsets = {0};
    return built;
  };
}

GradFn<double> quadratic_grad(const MatrixR<double>& a) {
  return [a](const VectorX<double>& theta) { return (a * theta).eval(); };
}

}  // namespace

TEST_CASE("hvp on diag(3,1) quadratic") {
  MatrixR<double> a(2, 2);
  a << 3, 0, 0, 1;
  VectorX<double> theta(2);
  theta << 0.7, -0.4;
  VectorX<double> v(2);
  v << 1, 0;
  for (HvpMode mode : {HvpMode::kCentralDiff, HvpMode::kDoubleBackward}) {
    auto op = make_hvp_operator<double>(mode, quadratic_grad(a), quadratic_builder(a), theta);
    VectorX<double> hv = op(v);
    CHECK(hv(0) == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(hv(1) == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("hvp of zero direction is zero") {
  MatrixR<double> a(3, 3);
  a.setIdentity();
  VectorX<double> theta = VectorX<double>::Constant(3, 0.5);
  VectorX<double> v = VectorX<double>::Zero(3);
  auto op = make_hvp_operator<double>(HvpMode::kCentralDiff, quadratic_grad(a), nullptr, theta);
  CHECK(op(v).norm() == 0.0);
}

TEST_CASE("hvp matches explicit matrix on random symmetric quadratic") {
  Rng rng(31);
  const Index d = 10;
  MatrixR<double> b(d, d);
  for (Index i = 0; i < d * d; ++i) b.data()[i] = rng.uniform(-1, 1);
  MatrixR<double> a = 0.5 * (b + b.transpose());
  VectorX<double> theta(d), v(d);
  for (Index i = 0; i < d; ++i) {
    theta(i) = rng.uniform(-1, 1);
    v(i) = rng.uniform(-1, 1);
  }
  VectorX<double> expect = a * v;
  for (HvpMode mode : {HvpMode::kCentralDiff, HvpMode::kDoubleBackward}) {
    auto op = make_hvp_operator<double>(mode, quadratic_grad(a), quadratic_builder(a), theta);
    VectorX<double> hv = op(v);
    CHECK((hv - expect).norm() / expect.norm() < 1e-6);
  }
}

TEST_CASE("hvp rejects dimension mismatch") {
  MatrixR<double> a(2, 2);
  a.setIdentity();
  VectorX<double> theta = VectorX<double>::Zero(2);
  VectorX<double> v = VectorX<double>::Zero(3);
  CHECK_THROWS_AS(hvp_central<double>(quadratic_grad(a), theta, v), std::invalid_argument);
  CHECK_THROWS_AS(hvp_double_backward<double>(quadratic_builder(a), theta, v), std::invalid_argument);
}

TEST_CASE("hvp symmetry v.(Hu) == u.(Hv) on a taped nonlinear loss") {
  // Small two-layer function with smooth nonlinearities.
  Rng rng(63);
  const Index d = 12;
  LossBuilder<double> build = [](Tape<double>& tape, const VectorX<double>& theta) {
    const Index n = theta.size();
    Tensor<double> th = tape.leaf(Tensor<double>({1, n}, theta.array()));
    Tensor<double> sq = mul(th, th);
    Tensor<double> loss = add(sum_all(log(add_scalar(sq, 1.0))), sum_all(exp(scale(th, 0.3))));
    BuiltLoss<double> built;
    built.loss = loss;
    built.leaves = {th};
    built.offsets = {0};
    return built;
  };
  VectorX<double> theta(d), u(d), v(d);
  for (Index i = 0; i < d; ++i) {
    theta(i) = rng.uniform(-1, 1);
    u(i) = rng.uniform(-1, 1);
    v(i) = rng.uniform(-1, 1);
  }
  VectorX<double> hu = hvp_double_backward<double>(build, theta, u);
  VectorX<double> hv = hvp_double_backward<double>(build, theta, v);
  const double lhs = v.dot(hu), rhs = u.dot(hv);
  CHECK(std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)) < 1e-10);
  // Double backward agrees with the finite-difference route.
  GradFn<double> grad = [&](const VectorX<double>& t) {
    Tape<double> tape;
    BuiltLoss<double> bl = build(tape, t);
    return VectorX<double>(tape.backward(bl.loss).grad(bl.leaves[0]).v.matrix());
  };
  VectorX<double> hv_fd = hvp_central<double>(grad, theta, v);
  CHECK((hv - hv_fd).norm() / std::max(1.0, hv.norm()) < 1e-5);
}
