#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "mergelab/analysis.hpp"
#include "mergelab/protocol.hpp"

using namespace mergelab;

TEST_CASE("performance gain arithmetic") {
  CHECK(performance_gain(0.762, {0.750, 0.752}) == doctest::Approx(0.011).epsilon(1e-9));
  CHECK(performance_gain(0.5, {0.5, 0.5}) == 0.0);
  CHECK(performance_gain(0.7, {0.6, 0.8}, GainBaseline::kFirst) == doctest::Approx(0.1));
  CHECK(performance_gain(0.7, {0.6, 0.8}, GainBaseline::kMax) == doctest::Approx(-0.1));
  // Loss-style metrics keep the same formula; the sign convention flips in
  // interpretation (lower loss gain is better).
  CHECK(performance_gain(2.0, {2.5, 2.5}) == doctest::Approx(-0.5));
}

TEST_CASE("gain is invariant to a shared metric offset") {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const double m = rng.uniform(0, 1), a = rng.uniform(0, 1), b = rng.uniform(0, 1);
    const double c = rng.uniform(-5, 5);
    CHECK(performance_gain(m + c, {a + c, b + c}) ==
          doctest::Approx(performance_gain(m, {a, b})).epsilon(1e-9));
  }
}

TEST_CASE("normalized accuracy") {
  CHECK(normalized_accuracy({0.8, 0.6}, {0.8, 0.6}) == doctest::Approx(1.0));
  CHECK(normalized_accuracy({0.5, 0.5}, {1.0, 0.5}) == doctest::Approx(0.75));
  CHECK(normalized_accuracy({0.0, 0.0}, {0.9, 0.7}) == 0.0);
  CHECK_THROWS_AS(normalized_accuracy({0.5}, {0.0}), std::invalid_argument);
  CHECK_THROWS_AS(normalized_accuracy({}, {}), std::invalid_argument);
  // Scale consistency: multiplying all accuracies by c > 0 changes nothing.
  CHECK(normalized_accuracy({0.4, 0.3}, {0.8, 0.6}) ==
        doctest::Approx(normalized_accuracy({0.2, 0.15}, {0.4, 0.3})));
}

TEST_CASE("pearson correlation") {
  std::vector<double> xs = {1, 2, 3, 4, 5};
  std::vector<double> lin, neg;
  for (double x : xs) {
    lin.push_back(2 * x + 1);
    neg.push_back(-x);
  }
  CHECK(pearson(xs, lin) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson(xs, neg) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(pearson(xs, {1, 1, 1, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(pearson({1.0}, {2.0}), std::invalid_argument);
  // Invariance under positive affine transforms, sign flip under negation.
  std::vector<double> ys = {0.3, -1.2, 2.0, 0.7, 1.1};
  const double r = pearson(xs, ys);
  std::vector<double> ys_aff, ys_neg;
  for (double y : ys) {
    ys_aff.push_back(3.0 * y + 7.0);
    ys_neg.push_back(-y);
  }
  CHECK(pearson(xs, ys_aff) == doctest::Approx(r).epsilon(1e-12));
  CHECK(pearson(xs, ys_neg) == doctest::Approx(-r).epsilon(1e-12));
}

TEST_CASE("alpha sweep endpoints reproduce single-model evaluations") {
  auto task = make_synthetic<float>(0, 64, 32, 4, 8, 3);
  auto arch = make_mlp(8, {10}, 4, true);
  auto a = build<float>(arch, 1);
  auto b = build<float>(arch, 2);
  auto eval_fn = [&](const ParamVector<float>& p) { return evaluate_dataset(p, task.test); };
  auto curve = alpha_sweep<float>(a, b, uniform_grid(0.0, 1.0, 21), eval_fn);
  REQUIRE(curve.size() == 21);
  EvalMetrics<float> ea = eval_fn(a), eb = eval_fn(b);
  CHECK(curve.front().loss == ea.loss);
  CHECK(curve.front().accuracy == ea.accuracy);
  CHECK(curve.back().loss == eb.loss);
  CHECK(curve.back().accuracy == eb.accuracy);
  // Degenerate sweep is a constant curve.
  auto flat_curve = alpha_sweep<float>(a, a, uniform_grid(0.0, 1.0, 5), eval_fn);
  for (const AlphaPoint& p : flat_curve) CHECK(p.loss == ea.loss);
  CHECK_THROWS_AS(alpha_sweep<float>(a, b, {0.0, 1.0}, eval_fn), std::invalid_argument);
}

TEST_CASE("transition classification on constructed curves") {
  auto hill = classify_transition({1.0, 2.0, 1.0});
  CHECK(hill.cls == Transition::kHill);
  CHECK(hill.barrier == doctest::Approx(1.0));
  auto valley = classify_transition({1.0, 0.5, 1.0});
  CHECK(valley.cls == Transition::kValley);
  CHECK(valley.dip == doctest::Approx(0.5));
  auto flat = classify_transition({1.0, 1.001, 1.0});
  CHECK(flat.cls == Transition::kFlat);
  CHECK_THROWS_AS(classify_transition({1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("barrier and dip are shift invariant; class follows recomputed threshold") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> curve;
    for (int j = 0; j < 9; ++j) curve.push_back(rng.uniform(0.5, 2.0));
    const double shift = rng.uniform(0.0, 3.0);
    std::vector<double> shifted;
    for (double v : curve) shifted.push_back(v + shift);
    auto base = classify_transition(curve);
    auto moved = classify_transition(shifted);
    CHECK(moved.barrier == doctest::Approx(base.barrier).epsilon(1e-12));
    CHECK(moved.dip == doctest::Approx(base.dip).epsilon(1e-12));
  }
}

TEST_CASE("median-of-3 smoothing removes single-sample flicker") {
  using T = Transition;
  std::vector<T> seq = {T::kHill, T::kHill, T::kFlat, T::kHill, T::kValley, T::kValley};
  auto sm = smooth_transitions(seq);
  CHECK(sm[2] == T::kHill);
  CHECK(sm[4] == T::kValley);
  CHECK(sm.front() == T::kHill);
  CHECK(sm.back() == T::kValley);
}

TEST_CASE("loss plane anchors reproduce direct evaluations") {
  auto task = make_synthetic<float>(0, 64, 32, 4, 8, 3);
  auto arch = make_mlp(8, {10}, 4, false);
  auto base = build<float>(arch, 1);
  auto a = build<float>(arch, 2);
  auto b = build<float>(arch, 3);
  auto eval_fn = [&](const ParamVector<float>& p) { return evaluate_dataset(p, task.test); };
  LossPlane plane = loss_plane<float>(base, a, b, 9, 0.0, eval_fn);
  // u and v are orthonormal by construction.
  VectorX<double> da = a.values.cast<double>() - base.values.cast<double>();
  VectorX<double> db = b.values.cast<double>() - base.values.cast<double>();
  VectorX<double> u = da.normalized();
  VectorX<double> w = db - db.dot(u) * u;
  CHECK(std::abs(u.dot(w.normalized())) < 1e-6);
  // The anchor coordinates reconstruct the models; losses match direct eval.
  auto reconstruct = [&](double x, double y) {
    ParamVector<float> p = base;
    p.values = (base.values.cast<double>() + x * u + y * w.normalized()).cast<float>();
    return eval_fn(p).loss;
  };
  const double base_direct = eval_fn(base).loss;
  CHECK(std::abs(reconstruct(plane.base_x, plane.base_y) - base_direct) <
        1e-6 * std::max(1.0, base_direct));
  const double a_direct = eval_fn(a).loss;
  CHECK(std::abs(reconstruct(plane.a_x, plane.a_y) - a_direct) < 1e-4 * std::max(1.0, a_direct));
  const double b_direct = eval_fn(b).loss;
  CHECK(std::abs(reconstruct(plane.b_x, plane.b_y) - b_direct) < 1e-4 * std::max(1.0, b_direct));
  CHECK(plane.grid.size() == 81);
}

TEST_CASE("loss plane rejects parallel spans") {
  auto task = make_synthetic<float>(0, 32, 16, 4, 8, 3);
  auto arch = make_mlp(8, {10}, 4, false);
  auto base = build<float>(arch, 1);
  base.values.setZero();  // makes b = 2a exactly collinear in float
  auto a = build<float>(arch, 2);
  ParamVector<float> b = a;
  b.values = 2.0f * a.values;
  auto eval_fn = [&](const ParamVector<float>& p) { return evaluate_dataset(p, task.test); };
  CHECK_THROWS_AS(loss_plane<float>(base, a, b, 5, 0.1, eval_fn), std::invalid_argument);
}

namespace {

LinOp<double> matrix_op(const MatrixR<double>& m) {
  return [m](const VectorX<double>& v) { return (m * v).eval(); };
}

}  // namespace

TEST_CASE("power iteration on a known diagonal spectrum") {
  MatrixR<double> diag = MatrixR<double>::Zero(2, 2);
  diag(0, 0) = 3;
  diag(1, 1) = 1;
  auto eigs = hessian_top_eigs<double>(matrix_op(diag), 2, 2, 1e-8, 500, 1);
  REQUIRE(eigs.size() == 2);
  CHECK(eigs[0].converged);
  CHECK(eigs[1].converged);
  CHECK(eigs[0].value == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(eigs[1].value == doctest::Approx(1.0).epsilon(1e-6));

  auto identity = hessian_top_eigs<double>(matrix_op(MatrixR<double>::Identity(4, 4)), 4, 1);
  CHECK(identity[0].value == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("power iteration matches the dense eigensolver oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 4; ++trial) {
    const Index d = 20;
    MatrixR<double> b(d, d);
    for (Index i = 0; i < d * d; ++i) b.data()[i] = rng.uniform(-1, 1);
    MatrixR<double> a = (0.5 * (b + b.transpose())).eval();
    // Shift to make the spectrum positive so top-k by magnitude equals top-k.
    a += static_cast<double>(d) * MatrixR<double>::Identity(d, d);
    const Eigen::MatrixXd dense = a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense);
    VectorX<double> truth = es.eigenvalues().reverse();
    auto eigs = hessian_top_eigs<double>(matrix_op(a), d, 5, 1e-7, 2000,
                                         static_cast<std::uint64_t>(trial));
    for (int j = 0; j < 5; ++j) {
      CHECK(eigs[static_cast<std::size_t>(j)].converged);
      CHECK(std::abs(eigs[static_cast<std::size_t>(j)].value - truth(j)) /
                std::abs(truth(j)) <
            1e-3);
    }
    // Ordering is non-increasing.
    for (int j = 1; j < 5; ++j)
      CHECK(eigs[static_cast<std::size_t>(j)].value <=
            eigs[static_cast<std::size_t>(j - 1)].value + 1e-9);
  }
}

TEST_CASE("power iteration flags non-convergence") {
  // Two nearly equal leading eigenvalues converge very slowly; with a strict
  // tolerance and a tiny iteration budget the estimate must be flagged.
  MatrixR<double> a = MatrixR<double>::Zero(3, 3);
  a(0, 0) = 1.0;
  a(1, 1) = 0.999999;
  a(2, 2) = 0.1;
  auto eigs = hessian_top_eigs<double>(matrix_op(a), 3, 1, 1e-14, 3, 4);
  CHECK(!eigs[0].converged);
  CHECK(eigs[0].iterations == 3);
}

TEST_CASE("net-loss hessian probe: double backward matches loss curvature") {
  // The network loss is piecewise smooth (relu kinks), so the oracle is the
  // directional second difference of the loss itself at a step small enough
  // to stay on one smooth piece; the gradient central difference at the same
  // step must agree too.
  auto task = make_synthetic<double>(0, 64, 0, 3, 6, 9);
  auto arch = make_mlp(6, {8}, 3, true);
  auto params = build<double>(arch, 4);
  std::vector<Index> idx(32);
  for (Index i = 0; i < 32; ++i) idx[static_cast<std::size_t>(i)] = i;
  Batch<double> probe = gather_batch(task.train, idx);
  GradFn<double> grad = net_grad_fn<double>(arch, params.aux, probe.x, probe.y);
  LossBuilder<double> builder = net_loss_builder<double>(arch, params.aux, probe.x, probe.y);
  auto loss_at = [&](const VectorX<double>& th) {
    Tape<double> tape;
    return static_cast<double>(builder(tape, th).loss.item());
  };
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    VectorX<double> v(params.values.size());
    for (Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    VectorX<double> hv = hvp_double_backward<double>(builder, params.values, v);
    const double h = 1e-5;
    const double l0 = loss_at(params.values);
    const double lp = loss_at(params.values + h * v);
    const double lm = loss_at(params.values - h * v);
    const double curvature = (lp - 2 * l0 + lm) / (h * h);
    CHECK(v.dot(hv) == doctest::Approx(curvature).epsilon(1e-4));
    VectorX<double> hv_fd = (grad(params.values + h * v) - grad(params.values - h * v)) / (2 * h);
    CHECK((hv_fd - hv).norm() / std::max(1.0, hv.norm()) < 1e-6);
  }
}

TEST_CASE("collapse score separates noise-aligned from rate-aligned gains") {
  // Constructed sweeps: gains that are an exact function of the noise
  // coordinate collapse under it (score ~ 0); gains that are an exact
  // function of the learning rate alone score >= 1.
  std::vector<double> etas = {0.01, 0.02, 0.04, 0.08, 0.16, 0.32};
  std::vector<Index> batches = {16, 64, 256};
  auto build_points = [&](bool noise_function) {
    std::vector<SweepPoint> points;
    for (double eta : etas)
      for (Index b : batches) {
        SweepPoint p;
        p.eta = eta;
        p.batch = b;
        p.noise = effective_noise(eta, b, 0.0);
        const double x = noise_function ? std::log(p.noise) : std::log(eta);
        p.gain = std::exp(-0.5 * (x + 7.0) * (x + 7.0));
        points.push_back(p);
      }
    return points;
  };
  const double aligned = collapse_score(build_points(true));
  const double misaligned = collapse_score(build_points(false));
  CHECK(aligned < 0.05);
  CHECK(misaligned >= 1.0);
  // Preconditions: at least two batch sizes and three learning rates.
  std::vector<SweepPoint> single;
  for (double eta : etas) {
    SweepPoint p;
    p.eta = eta;
    p.batch = 64;
    p.noise = effective_noise(eta, 64, 0.0);
    p.gain = 0.1;
    single.push_back(p);
  }
  CHECK_THROWS_AS(collapse_score(single), std::invalid_argument);
}
