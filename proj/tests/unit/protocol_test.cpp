#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mergelab/protocol.hpp"

using namespace mergelab;

namespace {

BifurcationPlan tiny_plan() {
  BifurcationPlan plan;
  plan.config.eta = 0.05;
  plan.config.batch = 16;
  plan.config.momentum = 0.9;
  plan.config.weight_decay = 1e-3;
  plan.config.augment.enabled = true;
  plan.config.augment.jitter_sigma = 0.05;
  plan.warmup_steps = 8;
  plan.stable_epochs = 4;
  plan.checkpoint_interval = 1;
  plan.decay_epochs = 2;
  plan.transition_points = 5;
  plan.transition_probe = 64;
  return plan;
}

}  // namespace

TEST_CASE("trunk emits one checkpoint per interval") {
  auto task = make_synthetic<float>(0, 64, 32, 4, 8, 3);
  auto arch = make_mlp(8, {12}, 4, true);
  auto plan = tiny_plan();
  auto trunk = train_trunk<float>(arch, task.train, plan, 1);
  CHECK(trunk.checkpoints.size() == 4);  // stable_epochs / interval
  CHECK(trunk.checkpoints[0].trunk_epoch == 1);
  CHECK(trunk.checkpoints[3].trunk_epoch == 4);
  CHECK(!trunk.outcome.diverged);

  plan.checkpoint_interval = 2;
  auto trunk2 = train_trunk<float>(arch, task.train, plan, 1);
  CHECK(trunk2.checkpoints.size() == 2);
}

TEST_CASE("restoring a checkpoint replays the trunk bitwise") {
  auto task = make_synthetic<float>(0, 64, 32, 4, 8, 3);
  auto arch = make_mlp(8, {12}, 4, true);
  auto plan = tiny_plan();
  auto trunk = train_trunk<float>(arch, task.train, plan, 7);
  REQUIRE(trunk.checkpoints.size() == 4);
  // Continue epoch 3's checkpoint for one epoch; must equal epoch 4's state.
  Checkpoint<float> restored = trunk.checkpoints[2];
  RunOutcome out = continue_trunk(restored, task.train, plan, 1);
  CHECK(!out.diverged);
  CHECK(restored.params.values == trunk.checkpoints[3].params.values);
  CHECK(restored.params.aux == trunk.checkpoints[3].params.aux);
  CHECK(restored.velocity == trunk.checkpoints[3].velocity);
  CHECK(restored.step == trunk.checkpoints[3].step);
  CHECK(restored.data_stream == trunk.checkpoints[3].data_stream);
  CHECK(restored.augment_stream == trunk.checkpoints[3].augment_stream);
}

TEST_CASE("checkpoint save/load/save is byte identical") {
  auto task = make_synthetic<float>(0, 64, 0, 4, 8, 3);
  auto arch = make_mlp(8, {12}, 4, true);
  auto trunk = train_trunk<float>(arch, task.train, tiny_plan(), 5);
  const Checkpoint<float>& ck = trunk.checkpoints.front();

  std::ostringstream first(std::ios::binary);
  save_checkpoint(first, ck);
  std::istringstream in(first.str());
  Checkpoint<float> loaded = load_checkpoint<float>(in, "<memory>");
  std::ostringstream second(std::ios::binary);
  save_checkpoint(second, loaded);
  CHECK(first.str() == second.str());
  CHECK(loaded.params.values == ck.params.values);
  CHECK(loaded.velocity == ck.velocity);
  CHECK(loaded.step == ck.step);
  CHECK(loaded.config_hash == ck.config_hash);
  CHECK(loaded.data_stream == ck.data_stream);
  CHECK(loaded.augment_stream == ck.augment_stream);
}

TEST_CASE("checkpoint loader rejects corrupted headers") {
  auto task = make_synthetic<float>(0, 32, 0, 4, 8, 3);
  auto arch = make_mlp(8, {10}, 4, false);
  auto plan = tiny_plan();
  plan.config.augment.enabled = false;
  auto trunk = train_trunk<float>(arch, task.train, plan, 5);
  std::ostringstream out(std::ios::binary);
  save_checkpoint(out, trunk.checkpoints.front());
  std::string bytes = out.str();
  bytes[0] = 'X';
  std::istringstream bad(bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad, "<memory>"), doctest::Contains("bad magic"),
                       std::runtime_error);
  std::istringstream truncated(out.str().substr(0, 40));
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(truncated, "<memory>"),
                       doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("identical branch seeds give identical endpoints and zero gains") {
  auto task = make_synthetic<float>(0, 96, 48, 4, 8, 11);
  auto arch = make_mlp(8, {12}, 4, true);
  auto plan = tiny_plan();
  plan.branch_seed_a = 9;
  plan.branch_seed_b = 9;  // degenerate control
  auto events = run_bifurcation_experiment<float>(arch, task.train, task.test, plan, 21, "ctrl");
  REQUIRE(events.size() == 4);
  for (const MergeEvent& ev : events) {
    CHECK(!ev.diverged);
    CHECK(ev.test.gain_mean == 0.0);
    CHECK(ev.test.gain_a == 0.0);
    CHECK(ev.test.gain_b == 0.0);
    CHECK(ev.train.gain_mean == 0.0);
    CHECK(ev.transition == Transition::kFlat);
    CHECK(ev.barrier == 0.0);
  }
}

TEST_CASE("distinct branch seeds separate the endpoints") {
  auto task = make_synthetic<float>(0, 96, 48, 4, 8, 11);
  auto arch = make_mlp(8, {12}, 4, true);
  auto plan = tiny_plan();
  auto trunk = train_trunk<float>(arch, task.train, plan, 21);
  auto [ba, bb] = bifurcate(trunk.checkpoints.back(), task.train, plan);
  CHECK(!ba.outcome.diverged);
  CHECK(!bb.outcome.diverged);
  CHECK((ba.params.values - bb.params.values).norm() > 0.0f);
}

TEST_CASE("branch endpoints converge at moderate learning rate") {
  // Convergence check: branch endpoint training loss below the frozen
  // threshold from a reference run of this configuration.
  auto task = make_synthetic<float>(0, 256, 64, 4, 16, 5);
  auto arch = make_mlp(16, {32}, 4, true);
  BifurcationPlan plan = tiny_plan();
  plan.config.eta = 0.1;
  plan.config.batch = 32;
  plan.config.augment.enabled = false;
  plan.stable_epochs = 12;
  plan.checkpoint_interval = 12;
  plan.decay_epochs = 6;
  auto trunk = train_trunk<float>(arch, task.train, plan, 2);
  REQUIRE(trunk.checkpoints.size() == 1);
  auto [ba, bb] = bifurcate(trunk.checkpoints.front(), task.train, plan);
  for (const auto* br : {&ba, &bb}) {
    CHECK(!br->outcome.diverged);
    CHECK(evaluate_dataset(br->params, task.train).loss < 0.05);
  }
}

TEST_CASE("divergence at an absurd learning rate is flagged, not thrown") {
  auto task = make_synthetic<float>(0, 64, 32, 4, 8, 3);
  auto arch = make_mlp(8, {12}, 4, false);  // no normalization: no safety net
  auto plan = tiny_plan();
  plan.config.eta = 1e14;
  plan.config.momentum = 0.0;
  plan.config.augment.enabled = false;
  plan.warmup_steps = 0;
  auto trunk = train_trunk<float>(arch, task.train, plan, 1);
  CHECK(trunk.outcome.diverged);
  CHECK(trunk.outcome.diverged_step >= 0);
  // The experiment driver still produces (flagged) rows for any checkpoints
  // that existed before the divergence.
  auto events = run_bifurcation_experiment<float>(arch, task.train, task.test, plan, 1, "hot");
  for (const MergeEvent& ev : events) CHECK(ev.diverged);
}

TEST_CASE("full experiment replays bitwise") {
  auto task = make_synthetic<float>(0, 96, 48, 4, 8, 13);
  auto arch = make_mlp(8, {12}, 4, true);
  auto plan = tiny_plan();
  auto e1 = run_bifurcation_experiment<float>(arch, task.train, task.test, plan, 33, "rep");
  auto e2 = run_bifurcation_experiment<float>(arch, task.train, task.test, plan, 33, "rep");
  REQUIRE(e1.size() == e2.size());
  for (std::size_t i = 0; i < e1.size(); ++i) {
    CHECK(e1[i].test.loss_merged == e2[i].test.loss_merged);
    CHECK(e1[i].test.acc_merged == e2[i].test.acc_merged);
    CHECK(e1[i].test.gain_mean == e2[i].test.gain_mean);
    CHECK(e1[i].barrier == e2[i].barrier);
  }
}

TEST_CASE("task arithmetic setting (b): alpha grid size and base reproduction") {
  auto task = make_synthetic<float>(0, 96, 48, 4, 8, 17);
  auto arch = make_mlp(8, {12}, 4, true);
  auto plan = tiny_plan();
  plan.stable_epochs = 2;
  plan.checkpoint_interval = 2;
  const std::vector<double> alphas = uniform_grid(0.0, 1.0, 11);
  auto points = run_task_arithmetic_b<float>(arch, task.train, task.test, plan, 3, "ta", alphas);
  REQUIRE(points.size() == 11);  // one checkpoint, 11 alphas
  // alpha = 0 reproduces the base (checkpoint) metrics exactly.
  auto trunk = train_trunk<float>(arch, task.train, plan, 3);
  EvalMetrics<float> base = evaluate_dataset(trunk.checkpoints.front().params, task.test);
  CHECK(points.front().alpha == 0.0);
  CHECK(points.front().test_loss == base.loss);
  CHECK(points.front().test_acc == base.accuracy);
}

TEST_CASE("task arithmetic with one vector reduces to linear interpolation") {
  // With normalization layers the two merges share trainable values but
  // differ in the statistics policy, so the value-level identity is the
  // contract; on a normalization-free net the whole curve coincides.
  auto task = make_synthetic<float>(0, 96, 48, 4, 8, 19);
  std::vector<double> alphas = uniform_grid(0.0, 1.0, 5);
  {
    auto arch = make_mlp(8, {12}, 4, true);
    auto plan = tiny_plan();
    plan.stable_epochs = 2;
    plan.checkpoint_interval = 2;
    auto trunk = train_trunk<float>(arch, task.train, plan, 4);
    auto [ba, bb] = bifurcate(trunk.checkpoints.front(), task.train, plan);
    std::vector<ParamVector<double>> taus;
    taus.push_back(task_vector(bb.params, ba.params));
    for (double alpha : alphas) {
      auto ta = task_arithmetic_merge(ba.params, taus, {alpha});
      auto li = linear_interpolate(ba.params, bb.params, alpha);
      for (Index i = 0; i < ta.values.size(); ++i) {
        const double denom = std::max(1.0, std::abs(static_cast<double>(li.values(i))));
        CHECK(std::abs(static_cast<double>(ta.values(i) - li.values(i))) / denom < 1e-7);
      }
    }
  }
  {
    auto arch = make_mlp(8, {12}, 4, false);
    auto plan = tiny_plan();
    plan.stable_epochs = 2;
    plan.checkpoint_interval = 2;
    plan.config.augment.enabled = false;
    auto trunk = train_trunk<float>(arch, task.train, plan, 4);
    auto [ba, bb] = bifurcate(trunk.checkpoints.front(), task.train, plan);
    auto eval_fn = [&](const ParamVector<float>& p) { return evaluate_dataset(p, task.test); };
    std::vector<ParamVector<double>> taus;
    taus.push_back(task_vector(bb.params, ba.params));
    auto ta_curve = task_arithmetic_sweep<float>(ba.params, taus, alphas, eval_fn);
    auto li_curve = alpha_sweep<float>(ba.params, bb.params, alphas, eval_fn);
    for (std::size_t i = 0; i < alphas.size(); ++i)
      CHECK(ta_curve[i].loss == doctest::Approx(li_curve[i].loss).epsilon(1e-5));
  }
}

TEST_CASE("task arithmetic setting (a) scores normalized accuracy per task") {
  auto task1 = make_synthetic<float>(0, 128, 64, 4, 8, 23);
  auto task2 = make_synthetic<float>(1, 128, 64, 4, 8, 23);
  auto arch = make_mlp(8, {16}, 4, true);
  // Combined pretraining task: concatenate the two training sets.
  Dataset<float> combined;
  combined.classes = 4;
  combined.split = "train";
  ArrayX<float> vals(task1.train.inputs.v.size() + task2.train.inputs.v.size());
  vals << task1.train.inputs.v, task2.train.inputs.v;
  combined.inputs = Tensor<float>({task1.train.size() + task2.train.size(), 8}, std::move(vals));
  combined.labels = task1.train.labels;
  combined.labels.insert(combined.labels.end(), task2.train.labels.begin(),
                         task2.train.labels.end());

  auto plan = tiny_plan();
  plan.stable_epochs = 4;
  plan.checkpoint_interval = 4;
  plan.config.augment.enabled = false;
  auto pre = train_trunk<float>(arch, combined, plan, 31);
  const ParamVector<float>& base = pre.final_params;
  // Finetune per task from the shared base.
  auto finetune = [&](const Dataset<float>& ds, std::uint64_t seed) {
    Checkpoint<float> ck;
    ck.params = base;
    ck.velocity = VectorX<float>::Zero(base.values.size());
    ck.step = 0;
    ck.config_hash = seed;
    ck.trunk_epoch = 0;
    return run_branch(ck, ds, plan, seed).params;
  };
  ParamVector<float> m1 = finetune(task1.train, 101);
  ParamVector<float> m2 = finetune(task2.train, 202);
  auto result = run_task_arithmetic_a<float>(base, m1, m2, task1.test, task2.test,
                                             uniform_grid(0.0, 1.0, 6));
  REQUIRE(result.alphas.size() == 6);
  REQUIRE(result.normalized.size() == 6);
  // alpha = 0: merged == base on both tasks.
  EvalMetrics<float> b1 = evaluate_dataset(base, task1.test);
  CHECK(result.acc_task1.front() == doctest::Approx(b1.accuracy));
}
