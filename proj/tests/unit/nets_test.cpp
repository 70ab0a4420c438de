#include <doctest.h>

#include "mergelab/nets.hpp"
#include "mergelab/rng.hpp"

using namespace mergelab;

TEST_CASE("mlp layout length matches hand arithmetic") {
  // widths [4, 8, 3] with biases, no norm: 4*8+8 + 8*3+3 = 67
  auto arch = make_mlp(4, {8}, 3, false);
  CHECK(make_layout(arch).param_count == 67);
}

TEST_CASE("build is deterministic per seed and differs across seeds") {
  auto arch = make_mlp(4, {8}, 3, false);
  auto p1 = build<float>(arch, 7);
  auto p2 = build<float>(arch, 7);
  auto p3 = build<float>(arch, 8);
  CHECK(p1.values == p2.values);
  CHECK(p1.aux == p2.aux);
  CHECK(p1.values != p3.values);
}

TEST_CASE("zero-width layer is rejected") {
  CHECK_THROWS_AS(make_mlp(4, {0}, 3, false), std::invalid_argument);
  CHECK_THROWS_AS(make_mlp(4, {8}, 1, false), std::invalid_argument);
}

TEST_CASE("arch descriptor canonical round trip") {
  for (const ArchDescriptor& arch :
       {make_mlp(32, {256, 256}, 8, true), make_mlp(5, {7}, 3, false),
        make_tiny_cnn({3, 8, 8}, 5)}) {
    const ArchDescriptor parsed = ArchDescriptor::parse(arch.canonical());
    CHECK(parsed == arch);
  }
  CHECK_THROWS_AS(ArchDescriptor::parse("kind=mlp;bogus=1"), std::invalid_argument);
}

TEST_CASE("pack/unpack round trip is bitwise") {
  for (const ArchDescriptor& arch :
       {make_mlp(6, {10, 5}, 4, true), make_tiny_cnn({3, 8, 8}, 5)}) {
    auto params = build<float>(arch, 3);
    auto tensors = unpack(params);
    VectorX<float> flat = pack(arch, tensors);
    CHECK(flat == params.values);
  }
}

TEST_CASE("merge compatibility is descriptor equality") {
  auto a = build<float>(make_mlp(4, {8}, 3, false), 1);
  auto b = build<float>(make_mlp(4, {8}, 3, false), 2);
  auto c = build<float>(make_mlp(4, {9}, 3, false), 1);
  CHECK(merge_compatible(a, a));
  CHECK(merge_compatible(a, b));
  CHECK(merge_compatible(b, a));
  CHECK(!merge_compatible(a, c));
}

namespace {

template <class S>
Tensor<S> random_batch(Rng& rng, Shape shape) {
  ArrayX<S> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v(i) = static_cast<S>(rng.uniform(-1, 1));
  return Tensor<S>(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("eval-mode forward is a pure function") {
  Rng rng(5);
  auto arch = make_mlp(6, {12, 12}, 4, true);
  auto params = build<float>(arch, 11);
  Tensor<float> x = random_batch<float>(rng, {5, 6});
  Tensor<float> l1 = logits_eval(params, x);
  Tensor<float> l2 = logits_eval(params, x);
  CHECK((l1.v == l2.v).all());
  CHECK(l1.shape == Shape{5, 4});
}

TEST_CASE("tiny_cnn produces [N, classes] logits") {
  Rng rng(6);
  auto arch = make_tiny_cnn({3, 8, 8}, 5);
  auto params = build<float>(arch, 2);
  Tensor<float> x = random_batch<float>(rng, {1, 3, 8, 8});
  Tensor<float> logits = logits_eval(params, x);
  CHECK(logits.shape == Shape{1, 5});
}

TEST_CASE("forward rejects mismatched batch shape") {
  auto arch = make_mlp(6, {12}, 4, false);
  auto params = build<float>(arch, 1);
  Rng rng(1);
  Tensor<float> bad = random_batch<float>(rng, {3, 7});
  CHECK_THROWS_WITH_AS(logits_eval(params, bad), doctest::Contains("[3,7]"),
                       std::invalid_argument);
}

TEST_CASE("train-mode forward updates running statistics") {
  Rng rng(9);
  auto arch = make_mlp(6, {8}, 3, true);
  auto params = build<float>(arch, 4);
  const VectorX<float> before = params.aux;
  const ArchLayout layout = make_layout(arch);
  Tensor<float> x = random_batch<float>(rng, {16, 6});
  forward_pass<float>(nullptr, arch, layout, params.values, &params.aux, x, true);
  CHECK(params.aux != before);
}

TEST_CASE("scale invariance of normalized mlp") {
  Rng rng(17);
  auto arch = make_mlp(16, {32, 32}, 5, true);
  Tensor<float> probe = random_batch<float>(rng, {64, 16});
  for (int seed = 0; seed < 3; ++seed) {
    auto params = build<float>(arch, static_cast<std::uint64_t>(seed));
    CHECK(check_scale_invariance<float>(params, 2.0f, probe) < 1e-5f);
    CHECK(check_scale_invariance<float>(params, 0.5f, probe) < 1e-5f);
    CHECK(check_scale_invariance<float>(params, 1.0f, probe) == 0.0f);
  }
}

TEST_CASE("plain mlp is not scale invariant") {
  Rng rng(18);
  auto arch = make_mlp(16, {32, 32}, 5, false);
  Tensor<float> probe = random_batch<float>(rng, {64, 16});
  for (int seed = 0; seed < 3; ++seed) {
    auto params = build<float>(arch, static_cast<std::uint64_t>(seed));
    CHECK(check_scale_invariance<float>(params, 2.0f, probe) > 1e-2f);
  }
}

TEST_CASE("scale invariance rejects non-positive scale") {
  auto arch = make_mlp(4, {8}, 3, true);
  auto params = build<float>(arch, 1);
  Rng rng(3);
  Tensor<float> probe = random_batch<float>(rng, {8, 4});
  CHECK_THROWS_AS(check_scale_invariance<float>(params, 0.0f, probe), std::invalid_argument);
  CHECK_THROWS_AS(check_scale_invariance<float>(params, -1.0f, probe), std::invalid_argument);
}

TEST_CASE("scale invariance also holds for the normalized cnn") {
  Rng rng(21);
  auto arch = make_tiny_cnn({3, 8, 8}, 4);
  auto params = build<float>(arch, 5);
  Tensor<float> probe = random_batch<float>(rng, {32, 3, 8, 8});
  CHECK(check_scale_invariance<float>(params, 2.0f, probe) < 1e-5f);
}
