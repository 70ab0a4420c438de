#include "mergelab/cli.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "mergelab/artifacts.hpp"
#include "mergelab/plan.hpp"
#include "mergelab/protocol.hpp"
#include "mergelab/svg.hpp"

namespace mergelab {

namespace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Plan -> domain objects
// ---------------------------------------------------------------------------

AugmentSpec augment_from_plan(const Plan& plan) {
  AugmentSpec spec;
  spec.enabled = plan.get_bool("augment.enabled", false);
  spec.flip_prob = plan.get_double("augment.flip_prob", 0.5);
  spec.crop_pad = static_cast<int>(plan.get_int("augment.crop_pad", 4));
  spec.jitter_sigma = plan.get_double("augment.jitter_sigma", 0.1);
  return spec;
}

TrainConfig train_config_from_plan(const Plan& plan) {
  TrainConfig cfg;
  cfg.eta = plan.get_double("train.eta", 0.1);
  cfg.batch = plan.get_int("train.batch", 64);
  cfg.momentum = plan.get_double("train.momentum", 0.0);
  cfg.weight_decay = plan.get_double("train.weight_decay", 5e-4);
  cfg.augment = augment_from_plan(plan);
  cfg.validate();
  return cfg;
}

BifurcationPlan bif_plan_from_plan(const Plan& plan) {
  BifurcationPlan bp;
  bp.config = train_config_from_plan(plan);
  bp.warmup_steps = plan.get_int("schedule.warmup_steps", 100);
  bp.stable_epochs = plan.get_int("schedule.stable_epochs", 60);
  bp.checkpoint_interval = plan.get_int("schedule.checkpoint_interval", 5);
  bp.decay_epochs = plan.get_int("schedule.decay_epochs", 10);
  bp.merge_alpha = plan.get_double("merge.alpha", 0.5);
  const std::string policy = plan.get_string("merge.stats_policy", "interpolate");
  if (policy == "interpolate") bp.stats_policy = StatsPolicy::kInterpolate;
  else if (policy == "recompute") bp.stats_policy = StatsPolicy::kRecompute;
  else throw std::invalid_argument("merge.stats_policy must be interpolate or recompute, got " + policy);
  bp.branch_seed_a = plan.get_u64("merge.branch_seed_a", 1);
  bp.branch_seed_b = plan.get_u64("merge.branch_seed_b", 2);
  bp.transition_points = static_cast<int>(plan.get_int("analysis.transition_points", 21));
  bp.transition_probe = plan.get_int("analysis.transition_probe", 1024);
  bp.bn_eps = plan.get_double("analysis.bn_eps", kDefaultBnEps);
  bp.validate();
  return bp;
}

template <class S>
struct PlanData {
  ArchDescriptor arch;
  Dataset<S> train;
  Dataset<S> test;
};

template <class S>
PlanData<S> data_from_plan(const Plan& plan, std::uint64_t seed, bool second_task = false) {
  PlanData<S> out;
  const std::string kind = plan.get_string("dataset.kind", "synthetic");
  if (kind == "synthetic") {
    const int task_id = static_cast<int>(
        second_task ? plan.get_int("dataset.task_id_b", 1) : plan.get_int("dataset.task_id", 0));
    SyntheticTask<S> task = make_synthetic<S>(
        task_id, plan.get_int("dataset.n_train", 768), plan.get_int("dataset.n_test", 1024),
        static_cast<int>(plan.get_int("dataset.classes", 8)), plan.get_int("dataset.input_dim", 32),
        seed);
    out.train = std::move(task.train);
    out.test = std::move(task.test);
  } else if (kind == "image_binary") {
    const int classes = static_cast<int>(plan.get_int("dataset.classes", 10));
    out.train = read_image_binary<S>(plan.require_string("dataset.train_path"), classes, "train");
    out.test = read_image_binary<S>(plan.require_string("dataset.test_path"), classes, "test");
  } else {
    throw std::invalid_argument("dataset.kind must be synthetic or image_binary, got " + kind);
  }

  const std::string arch_kind = plan.get_string("arch.kind", "mlp_norm");
  std::vector<std::int64_t> hidden = plan.get_int_list("arch.hidden", {256, 256});
  std::vector<Index> widths(hidden.begin(), hidden.end());
  const Shape sample = out.train.sample_shape();
  if (arch_kind == "tiny_cnn") {
    if (sample.size() != 3)
      throw std::invalid_argument("tiny_cnn needs image data, got sample shape " + shape_str(sample));
    out.arch = make_tiny_cnn(sample, out.train.classes,
                             widths.size() == 2 ? widths : std::vector<Index>{16, 32});
  } else {
    if (sample.size() != 1)
      throw std::invalid_argument(arch_kind + " needs vector data, got sample shape " + shape_str(sample));
    out.arch = make_mlp(sample[0], widths, out.train.classes, arch_kind == "mlp_norm");
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV schemas
// ---------------------------------------------------------------------------

const std::vector<std::string> kMergeReportColumns = {
    "config_id", "eta",    "batch_size", "momentum", "weight_decay", "augment", "s_tilde",
    "checkpoint_epoch", "alpha", "loss_merged", "acc_merged", "loss_a", "acc_a", "loss_b",
    "acc_b", "gain_mean", "gain_a", "gain_b", "barrier", "transition", "diverged"};

std::vector<std::string> event_row(const MergeEvent& ev, bool train_split) {
  const SplitMetrics& m = train_split ? ev.train : ev.test;
  return {ev.config_id,
          format_g9(ev.eta),
          std::to_string(ev.batch),
          format_g9(ev.momentum),
          format_g9(ev.weight_decay),
          ev.augment ? "1" : "0",
          format_g9(ev.s_tilde),
          std::to_string(ev.checkpoint_epoch),
          format_g9(ev.alpha),
          format_g9(m.loss_merged),
          format_g9(m.acc_merged),
          format_g9(m.loss_a),
          format_g9(m.acc_a),
          format_g9(m.loss_b),
          format_g9(m.acc_b),
          format_g9(m.gain_mean),
          format_g9(m.gain_a),
          format_g9(m.gain_b),
          format_g9(ev.barrier),
          transition_name(ev.transition),
          ev.diverged ? "1" : "0"};
}

const std::vector<std::string> kTaColumns = {
    "config_id", "eta", "batch_size", "s_tilde", "checkpoint_epoch", "alpha",
    "test_loss", "test_acc", "train_loss", "train_acc", "diverged"};

std::vector<std::string> ta_row(const TaPoint& p) {
  return {p.config_id, format_g9(p.eta), std::to_string(p.batch), format_g9(p.s_tilde),
          std::to_string(p.checkpoint_epoch), format_g9(p.alpha), format_g9(p.test_loss),
          format_g9(p.test_acc), format_g9(p.train_loss), format_g9(p.train_acc),
          p.diverged ? "1" : "0"};
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Sweep grid
// ---------------------------------------------------------------------------

struct SweepCell {
  std::size_t ordinal = 0;
  double eta = 0;
  Index batch = 0;
  double weight_decay = 0;
  bool augment = false;
  std::uint64_t seed_index = 0;
  std::string config_id;
};

std::string cell_id(std::size_t ordinal, double eta, Index batch, double wd, bool augment,
                    std::uint64_t seed_index) {
  std::ostringstream os;
  char ord[16];
  std::snprintf(ord, sizeof(ord), "c%04zu", ordinal);
  os << ord << "_eta" << format_g9(eta) << "_b" << batch << "_wd" << format_g9(wd) << "_aug"
     << (augment ? 1 : 0) << "_s" << seed_index;
  return os.str();
}

std::vector<SweepCell> sweep_grid(const Plan& plan) {
  const std::vector<double> etas =
      plan.get_double_list("sweep.eta_grid", {0.003, 0.01, 0.03, 0.1, 0.3, 1.0});
  const std::vector<std::int64_t> batches = plan.get_int_list("sweep.batch_grid", {16, 64, 256});
  const std::vector<double> wds =
      plan.get_double_list("sweep.wd_grid", {plan.get_double("train.weight_decay", 5e-4)});
  std::vector<std::string> augs = plan.get_string_list("sweep.augment_grid", {});
  if (augs.empty()) augs = {plan.get_bool("augment.enabled", true) ? "on" : "off"};
  const std::int64_t seeds = plan.get_int("sweep.seeds", 3);
  if (seeds < 1) throw std::invalid_argument("sweep.seeds must be >= 1");

  std::vector<SweepCell> cells;
  std::size_t ordinal = 0;
  for (double eta : etas)
    for (std::int64_t batch : batches)
      for (double wd : wds)
        for (const std::string& aug : augs)
          for (std::int64_t s = 0; s < seeds; ++s) {
            SweepCell cell;
            cell.ordinal = ordinal++;
            cell.eta = eta;
            cell.batch = batch;
            cell.weight_decay = wd;
            if (aug == "on") cell.augment = true;
            else if (aug == "off") cell.augment = false;
            else throw std::invalid_argument("sweep.augment_grid entries must be on/off, got " + aug);
            cell.seed_index = static_cast<std::uint64_t>(s);
            cell.config_id = cell_id(cell.ordinal, eta, batch, wd, cell.augment, cell.seed_index);
            cells.push_back(std::move(cell));
          }
  return cells;
}

BifurcationPlan plan_for_cell(const BifurcationPlan& base, const SweepCell& cell) {
  BifurcationPlan bp = base;
  bp.config.eta = cell.eta;
  bp.config.batch = cell.batch;
  bp.config.weight_decay = cell.weight_decay;
  bp.config.augment.enabled = cell.augment;
  bp.config.validate();
  return bp;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct CliOptions {
  std::string plan_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = 1;
  int precision = 32;
  bool charts = false;
};

std::uint64_t effective_seed(const CliOptions& opt, const Plan& plan) {
  return opt.seed_set ? opt.seed : plan.get_u64("run.seed", 1);
}

template <class S>
std::string checkpoint_bytes(const Checkpoint<S>& ck) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, ck);
  return os.str();
}

template <class S>
int cmd_train(const Plan& plan, const CliOptions& opt) {
  const std::uint64_t seed = effective_seed(opt, plan);
  PlanData<S> data = data_from_plan<S>(plan, seed);
  BifurcationPlan bp = bif_plan_from_plan(plan);
  if (plan.has("train.epochs")) bp.stable_epochs = plan.get_int("train.epochs", bp.stable_epochs);
  ArtifactWriter artifacts(opt.out_dir);

  CsvWriter log({"epoch", "step", "lr", "train_loss", "eff_lr_mean", "test_loss", "test_acc"});
  EpochHook<S> hook = [&](Index epoch, const EpochLog& el, const ParamVector<S>& params) {
    EvalMetrics<S> test = evaluate_dataset(params, data.test, static_cast<S>(bp.bn_eps));
    log.add_row({std::to_string(epoch), std::to_string(el.step), format_g9(el.lr),
                 format_g9(el.train_loss), format_g9(el.eff_lr_mean), format_g9(test.loss),
                 format_g9(test.accuracy)});
  };
  TrunkResult<S> trunk = train_trunk<S>(data.arch, data.train, bp, seed, hook);
  for (const Checkpoint<S>& ck : trunk.checkpoints) {
    char name[64];
    std::snprintf(name, sizeof(name), "checkpoints/ck_epoch%04lld.mlck",
                  static_cast<long long>(ck.trunk_epoch));
    artifacts.write(name, checkpoint_bytes(ck));
  }
  artifacts.write("trunk_log.csv", log.str());
  if (trunk.outcome.diverged)
    artifacts.note("trunk diverged at step " + std::to_string(trunk.outcome.diverged_step));
  artifacts.finalize();
  return trunk.outcome.diverged ? 2 : 0;
}

template <class S>
int cmd_bifurcate(const Plan& plan, const CliOptions& opt) {
  const std::uint64_t seed = effective_seed(opt, plan);
  PlanData<S> data = data_from_plan<S>(plan, seed);
  const BifurcationPlan bp = bif_plan_from_plan(plan);
  Checkpoint<S> ck = load_checkpoint<S>(plan.require_string("inputs.checkpoint"));
  if (!(ck.params.arch == data.arch))
    throw std::invalid_argument("checkpoint architecture " + ck.params.arch.canonical() +
                                " does not match plan architecture " + data.arch.canonical());
  ArtifactWriter artifacts(opt.out_dir);
  auto [ba, bb] = bifurcate(ck, data.train, bp);

  CsvWriter log({"branch", "diverged", "final_train_loss", "final_test_loss", "final_test_acc"});
  bool diverged = false;
  const char* names[2] = {"a", "b"};
  const BranchResult<S>* branches[2] = {&ba, &bb};
  for (int i = 0; i < 2; ++i) {
    const BranchResult<S>& br = *branches[i];
    diverged = diverged || br.outcome.diverged;
    double train_loss = std::nan(""), test_loss = std::nan(""), test_acc = std::nan("");
    if (!br.outcome.diverged) {
      EvalMetrics<S> tr = evaluate_dataset(br.params, data.train, static_cast<S>(bp.bn_eps));
      EvalMetrics<S> te = evaluate_dataset(br.params, data.test, static_cast<S>(bp.bn_eps));
      train_loss = tr.loss;
      test_loss = te.loss;
      test_acc = te.accuracy;
      Checkpoint<S> endpoint;
      endpoint.params = br.params;
      endpoint.velocity = br.velocity;
      endpoint.step = ck.step + br.step;
      endpoint.config_hash = ck.config_hash;
      endpoint.data_stream = ck.data_stream;
      endpoint.augment_stream = ck.augment_stream;
      artifacts.write(std::string("branch_") + names[i] + ".mlck", checkpoint_bytes(endpoint));
    }
    log.add_row({names[i], br.outcome.diverged ? "1" : "0", format_g9(train_loss),
                 format_g9(test_loss), format_g9(test_acc)});
  }
  artifacts.write("branches.csv", log.str());
  artifacts.finalize();
  return diverged ? 2 : 0;
}

template <class S>
int cmd_sweep(const Plan& plan, const CliOptions& opt) {
  const std::uint64_t seed = effective_seed(opt, plan);
  PlanData<S> data = data_from_plan<S>(plan, seed);
  const BifurcationPlan base = bif_plan_from_plan(plan);
  const std::vector<SweepCell> cells = sweep_grid(plan);
  const std::string kind = plan.get_string("sweep.kind", "bifurcation");
  if (kind != "bifurcation" && kind != "task_arithmetic")
    throw std::invalid_argument("sweep.kind must be bifurcation or task_arithmetic, got " + kind);
  // Validate every cell before any training starts.
  std::vector<BifurcationPlan> plans;
  plans.reserve(cells.size());
  for (const SweepCell& cell : cells) plans.push_back(plan_for_cell(base, cell));

  ArtifactWriter artifacts(opt.out_dir);
  bool any_diverged = false;

  if (kind == "bifurcation") {
    std::vector<std::vector<MergeEvent>> results(cells.size());
    parallel_for(cells.size(), opt.workers, [&](std::size_t i) {
      const std::uint64_t cell_seed = stream_seed(seed, cells[i].config_id);
      results[i] = run_bifurcation_experiment<S>(data.arch, data.train, data.test, plans[i],
                                                 cell_seed, cells[i].config_id);
    });
    CsvWriter test_csv(kMergeReportColumns), train_csv(kMergeReportColumns);
    for (const auto& events : results)
      for (const MergeEvent& ev : events) {
        test_csv.add_row(event_row(ev, false));
        train_csv.add_row(event_row(ev, true));
        any_diverged = any_diverged || ev.diverged;
      }
    artifacts.write("merge_reports.csv", test_csv.str());
    artifacts.write("merge_reports_train.csv", train_csv.str());
  } else {
    const double ta_max = plan.get_double("analysis.ta_alpha_max", 1.5);
    const int ta_points = static_cast<int>(plan.get_int("analysis.ta_alpha_points",
                                                        static_cast<int>(ta_max * 10) + 1));
    const std::vector<double> alphas = uniform_grid(0.0, ta_max, ta_points);
    std::vector<std::vector<TaPoint>> results(cells.size());
    parallel_for(cells.size(), opt.workers, [&](std::size_t i) {
      const std::uint64_t cell_seed = stream_seed(seed, cells[i].config_id);
      results[i] = run_task_arithmetic_b<S>(data.arch, data.train, data.test, plans[i], cell_seed,
                                            cells[i].config_id, alphas);
    });
    CsvWriter ta_csv(kTaColumns);
    for (const auto& points : results)
      for (const TaPoint& p : points) {
        ta_csv.add_row(ta_row(p));
        any_diverged = any_diverged || p.diverged;
      }
    artifacts.write("ta_curves.csv", ta_csv.str());
  }
  if (any_diverged) artifacts.note("one or more cells carry divergence flags");
  artifacts.finalize();
  return any_diverged ? 2 : 0;
}

template <class S>
int cmd_merge(const Plan& plan, const CliOptions& opt) {
  const std::uint64_t seed = effective_seed(opt, plan);
  PlanData<S> data = data_from_plan<S>(plan, seed);
  const BifurcationPlan bp = bif_plan_from_plan(plan);
  Checkpoint<S> a = load_checkpoint<S>(plan.require_string("inputs.checkpoint_a"));
  Checkpoint<S> b = load_checkpoint<S>(plan.require_string("inputs.checkpoint_b"));
  ArtifactWriter artifacts(opt.out_dir);

  ParamVector<S> merged;
  std::string method;
  if (plan.has("inputs.checkpoint_base")) {
    Checkpoint<S> base = load_checkpoint<S>(plan.require_string("inputs.checkpoint_base"));
    std::vector<ParamVector<double>> taus;
    taus.push_back(task_vector(a.params, base.params));
    taus.push_back(task_vector(b.params, base.params));
    std::vector<double> coeffs = plan.get_double_list("merge.coefficients",
                                                      {bp.merge_alpha, bp.merge_alpha});
    merged = task_arithmetic_merge(base.params, taus, coeffs);
    method = "task_arithmetic";
  } else {
    merged = linear_interpolate(a.params, b.params, bp.merge_alpha);
    method = "linear";
  }
  if (bp.stats_policy == StatsPolicy::kRecompute)
    merged = recompute_statistics(merged, data.train, 8);

  Checkpoint<S> out;
  out.params = merged;
  out.velocity = VectorX<S>::Zero(merged.values.size());
  out.step = 0;
  out.config_hash = a.config_hash;
  artifacts.write("merged.mlck", checkpoint_bytes(out));

  EvalMetrics<S> tr = evaluate_dataset(merged, data.train, static_cast<S>(bp.bn_eps));
  EvalMetrics<S> te = evaluate_dataset(merged, data.test, static_cast<S>(bp.bn_eps));
  EvalMetrics<S> ta = evaluate_dataset(a.params, data.test, static_cast<S>(bp.bn_eps));
  EvalMetrics<S> tb = evaluate_dataset(b.params, data.test, static_cast<S>(bp.bn_eps));
  CsvWriter csv({"method", "alpha", "train_loss", "train_acc", "test_loss", "test_acc",
                 "test_acc_a", "test_acc_b", "gain_mean"});
  csv.add_row({method, format_g9(bp.merge_alpha), format_g9(tr.loss), format_g9(tr.accuracy),
               format_g9(te.loss), format_g9(te.accuracy), format_g9(ta.accuracy),
               format_g9(tb.accuracy),
               format_g9(performance_gain(te.accuracy, {ta.accuracy, tb.accuracy}))});
  artifacts.write("merge_eval.csv", csv.str());
  artifacts.finalize();
  return 0;
}

// The Hessian probe always runs in 64-bit: checkpoints store 32-bit values,
// which embed exactly.
template <class S>
int cmd_hessian(const Plan& plan, const CliOptions& opt) {
  const std::uint64_t seed = effective_seed(opt, plan);
  PlanData<double> data = data_from_plan<double>(plan, seed);
  Checkpoint<double> ck = load_checkpoint<double>(plan.require_string("inputs.checkpoint"));
  if (!(ck.params.arch == data.arch))
    throw std::invalid_argument("checkpoint architecture does not match plan architecture");
  const Index probe_n = plan.get_int("analysis.hessian_probe", 1024);
  const Dataset<double> probe = probe_subset(data.test, probe_n);
  std::vector<Index> idx(static_cast<std::size_t>(probe.size()));
  for (Index i = 0; i < probe.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
  Batch<double> batch = gather_batch(probe, idx);
  const double bn_eps = plan.get_double("analysis.bn_eps", kDefaultBnEps);

  const std::string mode_name = plan.get_string("analysis.hessian_mode", "central");
  HvpMode mode;
  if (mode_name == "central") mode = HvpMode::kCentralDiff;
  else if (mode_name == "double_backward") mode = HvpMode::kDoubleBackward;
  else throw std::invalid_argument("analysis.hessian_mode must be central or double_backward");

  GradFn<double> grad = net_grad_fn<double>(ck.params.arch, ck.params.aux, batch.x, batch.y, bn_eps);
  LossBuilder<double> builder =
      net_loss_builder<double>(ck.params.arch, ck.params.aux, batch.x, batch.y, bn_eps);
  LinOp<double> op = make_hvp_operator<double>(mode, grad, builder, ck.params.values);

  const int k = static_cast<int>(plan.get_int("analysis.hessian_k", 8));
  const double tol = plan.get_double("analysis.hessian_tol", 1e-4);
  const int iters = static_cast<int>(plan.get_int("analysis.hessian_max_iters", 200));
  std::vector<EigenEstimate> eigs =
      hessian_top_eigs<double>(op, ck.params.values.size(), k, tol, iters, seed);

  ArtifactWriter artifacts(opt.out_dir);
  CsvWriter csv({"rank", "eigenvalue", "converged", "iterations"});
  for (std::size_t i = 0; i < eigs.size(); ++i)
    csv.add_row({std::to_string(i + 1), format_g9(eigs[i].value), eigs[i].converged ? "1" : "0",
                 std::to_string(eigs[i].iterations)});
  artifacts.write("hessian.csv", csv.str());
  artifacts.finalize();
  return 0;
}

template <class S>
int cmd_slice(const Plan& plan, const CliOptions& opt) {
  const std::uint64_t seed = effective_seed(opt, plan);
  PlanData<S> data = data_from_plan<S>(plan, seed);
  Checkpoint<S> base = load_checkpoint<S>(plan.require_string("inputs.checkpoint_base"));
  Checkpoint<S> a = load_checkpoint<S>(plan.require_string("inputs.checkpoint_a"));
  Checkpoint<S> b = load_checkpoint<S>(plan.require_string("inputs.checkpoint_b"));
  const int resolution = static_cast<int>(plan.get_int("slice.resolution", 25));
  const double margin = plan.get_double("slice.margin", 0.25);
  const double bn_eps = plan.get_double("analysis.bn_eps", kDefaultBnEps);
  const Dataset<S> probe = probe_subset(data.train, plan.get_int("analysis.transition_probe", 1024));
  auto eval_fn = [&](const ParamVector<S>& p) {
    return evaluate_dataset(p, probe, static_cast<S>(bn_eps));
  };
  LossPlane plane = loss_plane<S>(base.params, a.params, b.params, resolution, margin, eval_fn);

  ArtifactWriter artifacts(opt.out_dir);
  CsvWriter grid({"x", "y", "loss", "acc"});
  for (const PlanePoint& p : plane.grid)
    grid.add_row({format_g9(p.x), format_g9(p.y), format_g9(p.loss), format_g9(p.accuracy)});
  artifacts.write("slice.csv", grid.str());
  CsvWriter anchors({"name", "x", "y"});
  anchors.add_row({"base", format_g9(plane.base_x), format_g9(plane.base_y)});
  anchors.add_row({"model_a", format_g9(plane.a_x), format_g9(plane.a_y)});
  anchors.add_row({"model_b", format_g9(plane.b_x), format_g9(plane.b_y)});
  artifacts.write("slice_anchors.csv", anchors.str());
  if (opt.charts) {
    std::vector<double> values;
    values.reserve(plane.grid.size());
    for (const PlanePoint& p : plane.grid) values.push_back(p.loss);
    ChartOptions copt;
    copt.title = "loss over span(base, a, b)";
    copt.x_label = "u";
    copt.y_label = "v";
    artifacts.write("slice.svg",
                    heatmap_svg(plane.xs, plane.ys, values, copt,
                                {{"base", plane.base_x, plane.base_y},
                                 {"a", plane.a_x, plane.a_y},
                                 {"b", plane.b_x, plane.b_y}}));
  }
  artifacts.finalize();
  return 0;
}

int cmd_report(const Plan& plan, const CliOptions& opt) {
  const fs::path dir(opt.out_dir);
  const CsvTable table = read_csv_file((dir / "merge_reports.csv").string());
  ArtifactWriter artifacts(opt.out_dir);

  const std::vector<report::ConfigSummary> summaries = report::summarize_gains(table);
  CsvWriter summary({"eta", "batch_size", "weight_decay", "augment", "s_tilde", "median_gain",
                     "mean_gain", "stderr_gain", "events", "diverged_events"});
  for (const auto& s : summaries)
    summary.add_row({format_g9(s.eta), std::to_string(s.batch), format_g9(s.weight_decay),
                     s.augment ? "1" : "0", format_g9(s.s_tilde), format_g9(s.median_gain),
                     format_g9(s.mean_gain), format_g9(s.stderr_gain), std::to_string(s.events),
                     std::to_string(s.diverged)});
  artifacts.write("summary_gain.csv", summary.str());

  const int bins = static_cast<int>(plan.get_int("analysis.collapse_bins", kCollapseBins));
  const std::vector<report::NoiseBin> nbins = report::noise_bins(table, bins);
  CsvWriter bins_csv({"bin", "s_tilde_lo", "s_tilde_hi", "median_gain", "stderr_gain", "events",
                      "seeds"});
  for (std::size_t i = 0; i < nbins.size(); ++i)
    bins_csv.add_row({std::to_string(i), format_g9(nbins[i].lo), format_g9(nbins[i].hi),
                      format_g9(nbins[i].median_gain), format_g9(nbins[i].stderr_gain),
                      std::to_string(nbins[i].events), std::to_string(nbins[i].seeds)});
  artifacts.write("noise_bins.csv", bins_csv.str());

  double collapse = std::nan("");
  std::string collapse_note = "ok";
  try {
    collapse = report::collapse_score_from_table(table, bins);
  } catch (const std::exception& e) {
    collapse_note = e.what();
  }
  CsvWriter overview({"key", "value"});
  overview.add_row({"collapse_score", format_g9(collapse)});
  overview.add_row({"collapse_note", collapse_note});
  overview.add_row({"rows", std::to_string(table.rows.size())});
  artifacts.write("report_summary.csv", overview.str());

  const std::vector<report::TransitionRow> transitions = report::transition_table(table);
  CsvWriter tr({"config_id", "checkpoint_epoch", "transition", "transition_smoothed"});
  for (const auto& row : transitions)
    tr.add_row({row.config_id, std::to_string(row.checkpoint_epoch), row.transition,
                row.transition_smoothed});
  artifacts.write("transitions.csv", tr.str());

  if (opt.charts) {
    // Median gain against the noise coordinate, one series per batch size.
    std::map<std::int64_t, ChartSeries> series;
    for (const auto& s : summaries) {
      ChartSeries& cs = series[s.batch];
      cs.label = "B=" + std::to_string(s.batch);
      cs.xs.push_back(s.s_tilde);
      cs.ys.push_back(s.median_gain);
    }
    std::vector<ChartSeries> list;
    for (auto& [b, cs] : series) list.push_back(cs);
    ChartOptions copt;
    copt.title = "merge gain vs effective noise";
    copt.x_label = "effective noise";
    copt.y_label = "median test accuracy gain";
    copt.log_x = true;
    artifacts.write("gain_vs_noise.svg", line_chart_svg(list, copt));
    std::map<std::int64_t, ChartSeries> by_eta;
    for (const auto& s : summaries) {
      ChartSeries& cs = by_eta[s.batch];
      cs.label = "B=" + std::to_string(s.batch);
      cs.xs.push_back(s.eta);
      cs.ys.push_back(s.median_gain);
    }
    std::vector<ChartSeries> eta_list;
    for (auto& [b, cs] : by_eta) eta_list.push_back(cs);
    copt.title = "merge gain vs learning rate";
    copt.x_label = "learning rate";
    artifacts.write("gain_vs_eta.svg", line_chart_svg(eta_list, copt));
  }
  artifacts.finalize();
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Report analytics
// ---------------------------------------------------------------------------

namespace report {

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::uint64_t seed_of_config(const std::string& config_id) {
  const auto pos = config_id.rfind("_s");
  if (pos == std::string::npos) return 0;
  return std::strtoull(config_id.c_str() + pos + 2, nullptr, 10);
}

struct EventRef {
  double eta, wd, s_tilde, gain;
  std::int64_t batch;
  bool augment, diverged;
  std::uint64_t seed;
  std::string config_id;
};

std::vector<EventRef> load_events(const CsvTable& t) {
  const int c_id = t.column("config_id"), c_eta = t.column("eta"), c_b = t.column("batch_size");
  const int c_wd = t.column("weight_decay"), c_aug = t.column("augment");
  const int c_s = t.column("s_tilde"), c_gain = t.column("gain_mean"), c_div = t.column("diverged");
  if (c_id < 0 || c_eta < 0 || c_b < 0 || c_s < 0 || c_gain < 0 || c_div < 0)
    throw std::runtime_error("merge_reports.csv is missing required columns");
  std::vector<EventRef> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    EventRef e;
    e.config_id = t.cell(r, c_id);
    e.eta = t.number(r, c_eta);
    e.batch = static_cast<std::int64_t>(t.number(r, c_b));
    e.wd = c_wd >= 0 ? t.number(r, c_wd) : 0.0;
    e.augment = c_aug >= 0 && t.number(r, c_aug) != 0;
    e.s_tilde = t.number(r, c_s);
    e.gain = t.number(r, c_gain);
    e.diverged = t.number(r, c_div) != 0;
    e.seed = seed_of_config(e.config_id);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

std::vector<ConfigSummary> summarize_gains(const CsvTable& table) {
  const std::vector<EventRef> events = load_events(table);
  std::map<std::tuple<double, std::int64_t, double, bool>, std::vector<const EventRef*>> groups;
  for (const EventRef& e : events)
    groups[{e.eta, e.batch, e.wd, e.augment}].push_back(&e);
  std::vector<ConfigSummary> out;
  for (auto& [key, list] : groups) {
    ConfigSummary s;
    std::tie(s.eta, s.batch, s.weight_decay, s.augment) = key;
    s.s_tilde = list.front()->s_tilde;
    std::vector<double> gains;
    for (const EventRef* e : list) {
      if (e->diverged || std::isnan(e->gain)) {
        ++s.diverged;
        continue;
      }
      gains.push_back(e->gain);
    }
    s.events = gains.size();
    if (!gains.empty()) {
      s.median_gain = median_of(gains);
      double mean = 0;
      for (double g : gains) mean += g;
      mean /= static_cast<double>(gains.size());
      s.mean_gain = mean;
      double var = 0;
      for (double g : gains) var += (g - mean) * (g - mean);
      s.stderr_gain = gains.size() > 1
                          ? std::sqrt(var / static_cast<double>(gains.size() - 1)) /
                                std::sqrt(static_cast<double>(gains.size()))
                          : 0.0;
    } else {
      s.median_gain = std::nan("");
      s.mean_gain = std::nan("");
      s.stderr_gain = std::nan("");
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<NoiseBin> noise_bins(const CsvTable& table, int bins) {
  const std::vector<EventRef> events = load_events(table);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const EventRef& e : events) {
    if (e.diverged || std::isnan(e.gain)) continue;
    lo = std::min(lo, e.s_tilde);
    hi = std::max(hi, e.s_tilde);
  }
  if (!std::isfinite(lo)) return {};
  const double log_lo = std::log(lo), span = std::log(hi) - std::log(lo);
  auto bin_of = [&](double x) {
    if (span <= 0) return 0;
    return std::clamp(static_cast<int>(std::floor((std::log(x) - log_lo) / span * bins)), 0,
                      bins - 1);
  };
  std::vector<NoiseBin> out(static_cast<std::size_t>(bins));
  std::vector<std::vector<double>> pooled(static_cast<std::size_t>(bins));
  std::vector<std::map<std::uint64_t, std::vector<double>>> by_seed(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].lo = std::exp(log_lo + span * b / bins);
    out[static_cast<std::size_t>(b)].hi = std::exp(log_lo + span * (b + 1) / bins);
  }
  for (const EventRef& e : events) {
    if (e.diverged || std::isnan(e.gain)) continue;
    const auto b = static_cast<std::size_t>(bin_of(e.s_tilde));
    pooled[b].push_back(e.gain);
    by_seed[b][e.seed].push_back(e.gain);
  }
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b].events = pooled[b].size();
    out[b].seeds = by_seed[b].size();
    out[b].median_gain = median_of(pooled[b]);
    if (by_seed[b].size() > 1) {
      std::vector<double> seed_medians;
      for (auto& [seed, gains] : by_seed[b]) seed_medians.push_back(median_of(gains));
      double mean = 0;
      for (double m : seed_medians) mean += m;
      mean /= static_cast<double>(seed_medians.size());
      double var = 0;
      for (double m : seed_medians) var += (m - mean) * (m - mean);
      var /= static_cast<double>(seed_medians.size() - 1);
      out[b].stderr_gain = std::sqrt(var / static_cast<double>(seed_medians.size()));
    } else {
      out[b].stderr_gain = 0.0;
    }
  }
  return out;
}

double collapse_score_from_table(const CsvTable& table, int bins) {
  const std::vector<EventRef> events = load_events(table);
  std::map<std::tuple<double, std::int64_t, double, bool, std::uint64_t>, std::vector<double>>
      configs;
  std::map<std::tuple<double, std::int64_t, double, bool, std::uint64_t>, double> noise;
  for (const EventRef& e : events) {
    if (e.diverged || std::isnan(e.gain)) continue;
    const auto key = std::make_tuple(e.eta, e.batch, e.wd, e.augment, e.seed);
    configs[key].push_back(e.gain);
    noise[key] = e.s_tilde;
  }
  std::vector<SweepPoint> points;
  for (auto& [key, gains] : configs) {
    SweepPoint p;
    p.eta = std::get<0>(key);
    p.batch = std::get<1>(key);
    p.noise = noise[key];
    p.gain = median_of(gains);
    points.push_back(p);
  }
  return collapse_score(points, bins);
}

std::vector<TransitionRow> transition_table(const CsvTable& table) {
  const int c_id = table.column("config_id"), c_epoch = table.column("checkpoint_epoch");
  const int c_tr = table.column("transition"), c_div = table.column("diverged");
  if (c_id < 0 || c_epoch < 0 || c_tr < 0)
    throw std::runtime_error("merge_reports.csv is missing transition columns");
  std::map<std::string, std::vector<std::pair<std::int64_t, std::string>>> by_config;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    if (c_div >= 0 && table.number(r, c_div) != 0) continue;
    by_config[table.cell(r, c_id)].push_back(
        {static_cast<std::int64_t>(table.number(r, c_epoch)), table.cell(r, c_tr)});
  }
  std::vector<TransitionRow> out;
  for (auto& [config, rows] : by_config) {
    std::sort(rows.begin(), rows.end());
    std::vector<Transition> seq;
    for (auto& [epoch, name] : rows) {
      if (name == "hill") seq.push_back(Transition::kHill);
      else if (name == "valley") seq.push_back(Transition::kValley);
      else seq.push_back(Transition::kFlat);
    }
    const std::vector<Transition> smoothed = smooth_transitions(seq);
    for (std::size_t i = 0; i < rows.size(); ++i)
      out.push_back({config, rows[i].first, rows[i].second, transition_name(smoothed[i])});
  }
  return out;
}

}  // namespace report

// ---------------------------------------------------------------------------
// CLI wiring
// ---------------------------------------------------------------------------

namespace cli {

namespace {

template <class Cmd32, class Cmd64>
int dispatch(int precision, Cmd32&& c32, Cmd64&& c64) {
  if (precision == 32) return c32();
  if (precision == 64) return c64();
  throw std::invalid_argument("--precision must be 32 or 64");
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"optimizer-noise and model-merging laboratory"};
  app.require_subcommand(1);

  CliOptions opt;
  std::string command;
  for (const char* name : {"train", "bifurcate", "sweep", "merge", "hessian", "slice", "report"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--plan", opt.plan_path, "experiment plan file");
    sub->add_option("--out", opt.out_dir, "output directory");
    sub->add_option("--seed", opt.seed, "global seed (overrides run.seed)")
        ->each([&opt](const std::string&) { opt.seed_set = true; });
    sub->add_option("--workers", opt.workers, "worker threads for grid cells");
    sub->add_option("--precision", opt.precision, "numeric width: 32 or 64");
    sub->add_option("--charts", [&opt](const std::vector<std::string>& vals) {
      if (vals.empty()) return true;
      if (vals[0] == "on") opt.charts = true;
      else if (vals[0] == "off") opt.charts = false;
      else return false;
      return true;
    }, "emit SVG charts: on|off")->expected(1);
    sub->callback([&command, name] { command = name; });
  }

  std::vector<std::string> cli_args(args.rbegin(), args.rend());
  try {
    app.parse(cli_args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    Plan plan = opt.plan_path.empty() ? Plan::parse_text("", "<empty>")
                                      : Plan::parse_file(opt.plan_path);
    if (command == "train")
      return dispatch(opt.precision, [&] { return cmd_train<float>(plan, opt); },
                      [&] { return cmd_train<double>(plan, opt); });
    if (command == "bifurcate")
      return dispatch(opt.precision, [&] { return cmd_bifurcate<float>(plan, opt); },
                      [&] { return cmd_bifurcate<double>(plan, opt); });
    if (command == "sweep")
      return dispatch(opt.precision, [&] { return cmd_sweep<float>(plan, opt); },
                      [&] { return cmd_sweep<double>(plan, opt); });
    if (command == "merge")
      return dispatch(opt.precision, [&] { return cmd_merge<float>(plan, opt); },
                      [&] { return cmd_merge<double>(plan, opt); });
    if (command == "hessian")
      return dispatch(opt.precision, [&] { return cmd_hessian<float>(plan, opt); },
                      [&] { return cmd_hessian<double>(plan, opt); });
    if (command == "slice")
      return dispatch(opt.precision, [&] { return cmd_slice<float>(plan, opt); },
                      [&] { return cmd_slice<double>(plan, opt); });
    if (command == "report") return cmd_report(plan, opt);
    throw std::logic_error("no subcommand selected");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace cli

}  // namespace mergelab
