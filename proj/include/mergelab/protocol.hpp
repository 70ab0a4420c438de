// The bifurcation experiment: a trunk trained at constant learning rate
// emits periodic checkpoints; each checkpoint spawns two branches that decay
// to zero under different data-order/augmentation streams; branch endpoints
// are merged and scored. Also the task-arithmetic settings built on top of
// the same runs, and the checkpoint binary format.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mergelab/analysis.hpp"
#include "mergelab/data.hpp"
#include "mergelab/merge.hpp"
#include "mergelab/nets.hpp"
#include "mergelab/optim.hpp"
#include "mergelab/rng.hpp"

namespace mergelab {

// --- Evaluation over a dataset ------------------------------------------------

template <class S>
EvalMetrics<S> evaluate_dataset(const ParamVector<S>& params, const Dataset<S>& ds,
                                S bn_eps = S(kDefaultBnEps), Index chunk = 512) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate_dataset: empty dataset");
  double loss = 0.0, acc = 0.0;
  Index done = 0;
  while (done < ds.size()) {
    const Index take = std::min(chunk, ds.size() - done);
    std::vector<Index> idx(static_cast<std::size_t>(take));
    for (Index i = 0; i < take; ++i) idx[static_cast<std::size_t>(i)] = done + i;
    Batch<S> b = gather_batch(ds, idx);
    EvalMetrics<S> m = evaluate_batch(params, b.x, b.y, bn_eps);
    loss += m.loss * static_cast<double>(take);
    acc += m.accuracy * static_cast<double>(take);
    done += take;
  }
  EvalMetrics<S> out;
  out.loss = loss / static_cast<double>(ds.size());
  out.accuracy = acc / static_cast<double>(ds.size());
  return out;
}

// First min(n, size) samples as a fixed probe subset.
template <class S>
Dataset<S> probe_subset(const Dataset<S>& ds, Index n) {
  if (n >= ds.size()) return ds;
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Batch<S> b = gather_batch(ds, idx);
  Dataset<S> out;
  out.inputs = std::move(b.x);
  out.labels = std::move(b.y);
  out.classes = ds.classes;
  out.split = ds.split;
  out.task_id = ds.task_id;
  return out;
}

// --- Training loop --------------------------------------------------------------

struct EpochLog {
  Index epoch = 0;         // 1-based, relative to this run
  std::uint64_t step = 0;  // optimizer step counter after the epoch
  double lr = 0.0;
  double train_loss = 0.0;  // mean over the epoch's minibatch losses
  double eff_lr_mean = 0.0; // mean effective learning rate over normalized groups
};

struct RunOutcome {
  bool diverged = false;
  std::int64_t diverged_step = -1;
  std::vector<EpochLog> epochs;
};

// Runs `epochs` epochs of SGD. Divergence (non-finite loss or gradient)
// aborts the run and is reported, not thrown: at high effective noise it is
// an expected outcome. The callback fires after every completed epoch.
template <class S, class EpochCallback>
RunOutcome train_epochs(ParamVector<S>& params, OptimizerState<S>& opt, BatchSampler& sampler,
                        Rng& aug_stream, const Dataset<S>& train, const TrainConfig& cfg,
                        const ScheduleSpec& schedule, Index epochs, const ArchLayout& layout,
                        const VectorX<S>& mask, S bn_eps, EpochCallback&& on_epoch_end) {
  RunOutcome outcome;
  const Index steps_per_epoch = sampler.steps_per_epoch();
  for (Index epoch = 1; epoch <= epochs; ++epoch) {
    double loss_sum = 0.0;
    double lr = 0.0;
    for (Index s = 0; s < steps_per_epoch; ++s) {
      std::vector<Index> idx = sampler.next();
      Batch<S> b = gather_batch(train, idx);
      Tensor<S> x = cfg.augment.enabled ? augment(b.x, cfg.augment, aug_stream) : b.x;
      LossGrad<S> lg = loss_and_grad<S>(params, layout, x, b.y, /*train=*/true, bn_eps);
      if (!std::isfinite(static_cast<double>(lg.loss)) || !lg.grad.allFinite()) {
        outcome.diverged = true;
        outcome.diverged_step = static_cast<std::int64_t>(opt.step);
        return outcome;
      }
      lr = lr_at(schedule, cfg.eta, opt.step);
      sgd_step<S>(params.values, lg.grad, opt, static_cast<S>(lr), static_cast<S>(cfg.momentum),
                  static_cast<S>(cfg.weight_decay), mask);
      loss_sum += static_cast<double>(lg.loss);
    }
    if (!params.values.allFinite()) {
      outcome.diverged = true;
      outcome.diverged_step = static_cast<std::int64_t>(opt.step);
      return outcome;
    }
    EpochLog log;
    log.epoch = epoch;
    log.step = opt.step;
    log.lr = lr;
    log.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    const std::vector<double> groups = effective_lr(params, cfg.eta);
    if (!groups.empty()) {
      double m = 0.0;
      for (double g : groups) m += g;
      log.eff_lr_mean = m / static_cast<double>(groups.size());
    }
    outcome.epochs.push_back(log);
    on_epoch_end(epoch, log);
  }
  return outcome;
}

// --- Checkpoints -----------------------------------------------------------------

template <class S>
struct Checkpoint {
  ParamVector<S> params;
  VectorX<S> velocity;
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
  Rng::State data_stream{};
  Rng::State augment_stream{};
  Index trunk_epoch = 0;  // derived bookkeeping, not part of the binary format
};

constexpr char kCheckpointMagic[4] = {'M', 'L', 'C', 'K'};

namespace detail {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}
inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}
inline void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct ByteReader {
  std::istream& in;
  std::string path;
  std::size_t offset = 0;
  void get(void* dst, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw std::runtime_error(path + ": truncated " + what + " at byte offset " +
                               std::to_string(offset));
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    get(b, 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    get(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace detail

// Little-endian: magic "MLCK", version u32=1, config-hash u64, arch text
// (u32 length + bytes), step u64, param count u64, params f32[], momentum
// f32[], aux block (count u64, f32[]), then data-order and augmentation
// stream states (4 x u64 each).
template <class S>
void save_checkpoint(std::ostream& out, const Checkpoint<S>& ck) {
  detail::put_bytes(out, kCheckpointMagic, 4);
  detail::put_u32(out, 1);
  detail::put_u64(out, ck.config_hash);
  const std::string arch = ck.params.arch.canonical();
  detail::put_u32(out, static_cast<std::uint32_t>(arch.size()));
  detail::put_bytes(out, arch.data(), arch.size());
  detail::put_u64(out, ck.step);
  detail::put_u64(out, static_cast<std::uint64_t>(ck.params.values.size()));
  for (Index i = 0; i < ck.params.values.size(); ++i)
    detail::put_f32(out, static_cast<float>(ck.params.values(i)));
  for (Index i = 0; i < ck.velocity.size(); ++i)
    detail::put_f32(out, static_cast<float>(ck.velocity(i)));
  detail::put_u64(out, static_cast<std::uint64_t>(ck.params.aux.size()));
  for (Index i = 0; i < ck.params.aux.size(); ++i)
    detail::put_f32(out, static_cast<float>(ck.params.aux(i)));
  for (std::uint64_t w : ck.data_stream) detail::put_u64(out, w);
  for (std::uint64_t w : ck.augment_stream) detail::put_u64(out, w);
}

template <class S>
void save_checkpoint(const std::string& path, const Checkpoint<S>& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_checkpoint(out, ck);
  if (!out) throw std::runtime_error("short write to " + path);
}

template <class S>
Checkpoint<S> load_checkpoint(std::istream& in, const std::string& path = "<stream>") {
  detail::ByteReader r{in, path};
  char magic[4];
  r.get(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error(path + ": bad magic at byte offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != 1) throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
  Checkpoint<S> ck;
  ck.config_hash = r.u64("config hash");
  const std::uint32_t arch_len = r.u32("arch length");
  std::string arch_text(arch_len, '\0');
  r.get(arch_text.data(), arch_len, "arch descriptor");
  ck.params.arch = ArchDescriptor::parse(arch_text);
  ck.step = r.u64("step");
  const std::uint64_t count = r.u64("param count");
  const ArchLayout layout = make_layout(ck.params.arch);
  if (static_cast<Index>(count) != layout.param_count)
    throw std::runtime_error(path + ": parameter count " + std::to_string(count) +
                             " does not match architecture (" + std::to_string(layout.param_count) + ")");
  ck.params.values = VectorX<S>::Zero(layout.param_count);
  for (Index i = 0; i < layout.param_count; ++i) ck.params.values(i) = static_cast<S>(r.f32("params"));
  ck.velocity = VectorX<S>::Zero(layout.param_count);
  for (Index i = 0; i < layout.param_count; ++i) ck.velocity(i) = static_cast<S>(r.f32("momentum"));
  const std::uint64_t aux_count = r.u64("aux count");
  if (static_cast<Index>(aux_count) != layout.aux_count)
    throw std::runtime_error(path + ": aux count " + std::to_string(aux_count) +
                             " does not match architecture (" + std::to_string(layout.aux_count) + ")");
  ck.params.aux = VectorX<S>::Zero(layout.aux_count);
  for (Index i = 0; i < layout.aux_count; ++i) ck.params.aux(i) = static_cast<S>(r.f32("aux"));
  for (auto& w : ck.data_stream) w = r.u64("data stream state");
  for (auto& w : ck.augment_stream) w = r.u64("augment stream state");
  return ck;
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_checkpoint<S>(in, path);
}

// --- Bifurcation plan -------------------------------------------------------------

struct BifurcationPlan {
  TrainConfig config;               // trunk optimizer configuration
  Index warmup_steps = 100;
  Index stable_epochs = 60;
  Index checkpoint_interval = 5;    // epochs between checkpoints
  Index decay_epochs = 10;
  std::uint64_t branch_seed_a = 1;
  std::uint64_t branch_seed_b = 2;
  double merge_alpha = 0.5;
  StatsPolicy stats_policy = StatsPolicy::kInterpolate;
  int transition_points = 21;
  Index transition_probe = 1024;    // train samples used for the loss curve
  double bn_eps = kDefaultBnEps;

  void validate() const {
    config.validate();
    if (stable_epochs < 1 || checkpoint_interval < 1 || decay_epochs < 1)
      throw std::invalid_argument("plan: epochs and checkpoint interval must be >= 1");
    if (warmup_steps < 0) throw std::invalid_argument("plan: negative warmup");
    if (transition_points < 3) throw std::invalid_argument("plan: transition grid needs >= 3 points");
  }
};

inline std::string config_text(const ArchDescriptor& arch, const TrainConfig& cfg,
                               const BifurcationPlan& plan, std::uint64_t seed) {
  std::ostringstream os;
  os << arch.canonical() << "|eta=" << cfg.eta << "|batch=" << cfg.batch
     << "|momentum=" << cfg.momentum << "|wd=" << cfg.weight_decay
     << "|augment=" << (cfg.augment.enabled ? 1 : 0) << "|jitter=" << cfg.augment.jitter_sigma
     << "|flip=" << cfg.augment.flip_prob << "|crop=" << cfg.augment.crop_pad
     << "|warmup=" << plan.warmup_steps << "|stable=" << plan.stable_epochs
     << "|interval=" << plan.checkpoint_interval << "|decay=" << plan.decay_epochs
     << "|seed=" << seed;
  return os.str();
}

// --- Trunk / branches ----------------------------------------------------------------

template <class S>
struct TrunkResult {
  std::vector<Checkpoint<S>> checkpoints;
  RunOutcome outcome;
  std::uint64_t config_hash = 0;
  ParamVector<S> final_params;
};

template <class S>
using EpochHook = std::function<void(Index epoch, const EpochLog&, const ParamVector<S>&)>;

// Warmup followed by constant-eta training for `stable_epochs`, emitting a
// checkpoint every `checkpoint_interval` epochs (at epoch boundaries, so a
// restored checkpoint replays the remaining trunk exactly).
template <class S>
TrunkResult<S> train_trunk(const ArchDescriptor& arch, const Dataset<S>& train,
                           const BifurcationPlan& plan, std::uint64_t seed,
                           const EpochHook<S>& epoch_hook = {}) {
  plan.validate();
  const ArchLayout layout = make_layout(arch);
  TrunkResult<S> result;
  result.config_hash = fnv1a64(config_text(arch, plan.config, plan, seed));
  ParamVector<S> params = build<S>(arch, seed);
  OptimizerState<S> opt = make_optimizer_state<S>(layout.param_count);
  BatchSampler sampler(train.size(), plan.config.batch, Rng(stream_seed(seed, "trunk-data")));
  Rng aug_stream(stream_seed(seed, "trunk-augment"));
  const VectorX<S> mask = decay_mask<S>(layout);
  ScheduleSpec schedule{plan.warmup_steps, 0, 0};  // constant eta after warmup

  result.outcome = train_epochs<S>(
      params, opt, sampler, aug_stream, train, plan.config, schedule, plan.stable_epochs, layout,
      mask, static_cast<S>(plan.bn_eps), [&](Index epoch, const EpochLog& log) {
        if (epoch % plan.checkpoint_interval == 0) {
          Checkpoint<S> ck;
          ck.params = params;
          ck.velocity = opt.velocity;
          ck.step = opt.step;
          ck.config_hash = result.config_hash;
          ck.data_stream = sampler.stream().state();
          ck.augment_stream = aug_stream.state();
          ck.trunk_epoch = epoch;
          result.checkpoints.push_back(std::move(ck));
        }
        if (epoch_hook) epoch_hook(epoch, log, params);
      });
  result.final_params = std::move(params);
  return result;
}

// Continues trunk training from a checkpoint under the trunk schedule.
// Restoring and continuing reproduces the original trajectory bitwise.
template <class S>
RunOutcome continue_trunk(Checkpoint<S>& ck, const Dataset<S>& train, const BifurcationPlan& plan,
                          Index epochs) {
  const ArchLayout layout = make_layout(ck.params.arch);
  OptimizerState<S> opt;
  opt.velocity = ck.velocity;
  opt.step = static_cast<Index>(ck.step);
  BatchSampler sampler(train.size(), plan.config.batch, Rng::from_state(ck.data_stream));
  Rng aug_stream = Rng::from_state(ck.augment_stream);
  const VectorX<S> mask = decay_mask<S>(layout);
  ScheduleSpec schedule{plan.warmup_steps, 0, 0};
  RunOutcome out = train_epochs<S>(ck.params, opt, sampler, aug_stream, train, plan.config,
                                   schedule, epochs, layout, mask, static_cast<S>(plan.bn_eps),
                                   [](Index, const EpochLog&) {});
  ck.velocity = opt.velocity;
  ck.step = opt.step;
  ck.data_stream = sampler.stream().state();
  ck.augment_stream = aug_stream.state();
  return out;
}

template <class S>
struct BranchResult {
  ParamVector<S> params;
  VectorX<S> velocity;
  std::uint64_t step = 0;  // branch-relative step count at the endpoint
  RunOutcome outcome;
};

// One decayed branch: inherits the checkpoint's parameters and optimizer
// state, swaps in branch-specific data-order/augmentation streams, and
// decays the learning rate to zero over `decay_epochs`.
template <class S>
BranchResult<S> run_branch(const Checkpoint<S>& ck, const Dataset<S>& train,
                           const BifurcationPlan& plan, std::uint64_t branch_seed) {
  const ArchLayout layout = make_layout(ck.params.arch);
  BranchResult<S> result;
  result.params = ck.params;
  OptimizerState<S> opt;
  opt.velocity = ck.velocity;
  opt.step = 0;  // branch schedule is relative to the bifurcation point
  std::uint64_t mix = branch_seed;
  const std::uint64_t root = ck.config_hash ^ splitmix64(mix) ^
                             (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(ck.trunk_epoch + 1));
  BatchSampler sampler(train.size(), plan.config.batch, Rng(stream_seed(root, "branch-data")));
  Rng aug_stream(stream_seed(root, "branch-augment"));
  const VectorX<S> mask = decay_mask<S>(layout);
  const Index steps = sampler.steps_per_epoch() * plan.decay_epochs;
  ScheduleSpec schedule{0, 0, steps};
  result.outcome = train_epochs<S>(result.params, opt, sampler, aug_stream, train, plan.config,
                                   schedule, plan.decay_epochs, layout, mask,
                                   static_cast<S>(plan.bn_eps), [](Index, const EpochLog&) {});
  result.velocity = opt.velocity;
  result.step = static_cast<std::uint64_t>(opt.step);
  return result;
}

template <class S>
std::pair<BranchResult<S>, BranchResult<S>> bifurcate(const Checkpoint<S>& ck,
                                                      const Dataset<S>& train,
                                                      const BifurcationPlan& plan) {
  return {run_branch(ck, train, plan, plan.branch_seed_a),
          run_branch(ck, train, plan, plan.branch_seed_b)};
}

// --- Merge events ------------------------------------------------------------------

struct SplitMetrics {
  double loss_merged = 0, acc_merged = 0;
  double loss_a = 0, acc_a = 0, loss_b = 0, acc_b = 0;
  double gain_mean = 0, gain_a = 0, gain_b = 0;
};

struct MergeEvent {
  std::string config_id;
  double eta = 0;
  Index batch = 0;
  double momentum = 0;
  double weight_decay = 0;
  bool augment = false;
  double s_tilde = 0;
  Index checkpoint_epoch = 0;
  double alpha = 0;
  SplitMetrics test;   // reported in the primary CSV
  SplitMetrics train;  // sibling CSV with identical schema
  double barrier = 0;
  Transition transition = Transition::kFlat;
  bool diverged = false;
};

template <class S>
SplitMetrics score_split(const ParamVector<S>& merged, const ParamVector<S>& a,
                         const ParamVector<S>& b, const Dataset<S>& ds, double bn_eps) {
  SplitMetrics m;
  EvalMetrics<S> em = evaluate_dataset(merged, ds, static_cast<S>(bn_eps));
  EvalMetrics<S> ea = evaluate_dataset(a, ds, static_cast<S>(bn_eps));
  EvalMetrics<S> eb = evaluate_dataset(b, ds, static_cast<S>(bn_eps));
  m.loss_merged = em.loss;
  m.acc_merged = em.accuracy;
  m.loss_a = ea.loss;
  m.acc_a = ea.accuracy;
  m.loss_b = eb.loss;
  m.acc_b = eb.accuracy;
  m.gain_mean = performance_gain(em.accuracy, {ea.accuracy, eb.accuracy}, GainBaseline::kMean);
  m.gain_a = performance_gain(em.accuracy, {ea.accuracy, eb.accuracy}, GainBaseline::kFirst);
  m.gain_b = em.accuracy - eb.accuracy;
  return m;
}

// Full bifurcation experiment for one configuration: trunk, branches per
// checkpoint, merge at the plan's alpha, metrics on train and test splits,
// and the train-loss interpolation curve for barrier/transition analysis.
template <class S>
std::vector<MergeEvent> run_bifurcation_experiment(const ArchDescriptor& arch,
                                                   const Dataset<S>& train_ds,
                                                   const Dataset<S>& test_ds,
                                                   const BifurcationPlan& plan, std::uint64_t seed,
                                                   const std::string& config_id,
                                                   TrunkResult<S>* trunk_out = nullptr) {
  TrunkResult<S> trunk = train_trunk(arch, train_ds, plan, seed);
  const double s_tilde = effective_noise(plan.config.eta, plan.config.batch, plan.config.momentum);
  const Dataset<S> probe = probe_subset(train_ds, plan.transition_probe);
  std::vector<MergeEvent> events;
  for (const Checkpoint<S>& ck : trunk.checkpoints) {
    auto [ba, bb] = bifurcate(ck, train_ds, plan);
    MergeEvent ev;
    ev.config_id = config_id;
    ev.eta = plan.config.eta;
    ev.batch = plan.config.batch;
    ev.momentum = plan.config.momentum;
    ev.weight_decay = plan.config.weight_decay;
    ev.augment = plan.config.augment.enabled;
    ev.s_tilde = s_tilde;
    ev.checkpoint_epoch = ck.trunk_epoch;
    ev.alpha = plan.merge_alpha;
    ev.diverged = trunk.outcome.diverged || ba.outcome.diverged || bb.outcome.diverged;
    if (ba.outcome.diverged || bb.outcome.diverged) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      ev.test = SplitMetrics{nan, nan, nan, nan, nan, nan, nan, nan, nan};
      ev.train = ev.test;
      ev.barrier = nan;
      ev.transition = Transition::kFlat;
      events.push_back(std::move(ev));
      continue;
    }
    ParamVector<S> merged = linear_interpolate(ba.params, bb.params, plan.merge_alpha);
    if (plan.stats_policy == StatsPolicy::kRecompute)
      merged = recompute_statistics(merged, train_ds, 8);
    ev.test = score_split(merged, ba.params, bb.params, test_ds, plan.bn_eps);
    ev.train = score_split(merged, ba.params, bb.params, train_ds, plan.bn_eps);
    // Train-loss interpolation curve between the branch endpoints.
    auto eval_fn = [&](const ParamVector<S>& p) {
      return evaluate_dataset(p, probe, static_cast<S>(plan.bn_eps));
    };
    std::vector<AlphaPoint> curve =
        alpha_sweep<S>(ba.params, bb.params, uniform_grid(0.0, 1.0, plan.transition_points),
                       eval_fn);
    std::vector<double> losses;
    for (const AlphaPoint& p : curve) losses.push_back(p.loss);
    TransitionResult tr = classify_transition(losses);
    ev.barrier = tr.barrier;
    ev.transition = tr.cls;
    events.push_back(std::move(ev));
  }
  if (trunk_out) *trunk_out = std::move(trunk);
  return events;
}

// --- Hessian probes over network losses ------------------------------------------------

// Taped loss of the network on a fixed probe batch, eval mode, as a function
// of the flat trainable values (aux statistics frozen). Feeds the
// double-backward Hessian-vector route.
template <class S>
LossBuilder<S> net_loss_builder(ArchDescriptor arch, VectorX<S> aux, Tensor<S> x,
                                std::vector<int> y, S bn_eps = S(kDefaultBnEps)) {
  return [arch = std::move(arch), aux = std::move(aux), x = std::move(x), y = std::move(y),
          bn_eps](Tape<S>& tape, const VectorX<S>& theta) {
    const ArchLayout layout = make_layout(arch);
    VectorX<S> aux_copy = aux;  // eval mode never writes
    ForwardPass<S> fp =
        forward_pass<S>(&tape, arch, layout, theta, &aux_copy, x, /*train=*/false, bn_eps);
    BuiltLoss<S> built;
    built.loss = softmax_cross_entropy(fp.logits, y);
    built.leaves = std::move(fp.leaves);
    built.offsets.reserve(layout.entries.size());
    for (const LayoutEntry& e : layout.entries) built.offsets.push_back(e.offset);
    return built;
  };
}

// Flat gradient of the same probe loss; feeds the central-difference route.
template <class S>
GradFn<S> net_grad_fn(ArchDescriptor arch, VectorX<S> aux, Tensor<S> x, std::vector<int> y,
                      S bn_eps = S(kDefaultBnEps)) {
  LossBuilder<S> builder = net_loss_builder<S>(std::move(arch), std::move(aux), std::move(x),
                                               std::move(y), bn_eps);
  return [builder](const VectorX<S>& theta) {
    Tape<S> tape;
    BuiltLoss<S> built = builder(tape, theta);
    Gradients<S> grads = tape.backward(built.loss);
    VectorX<S> flat = VectorX<S>::Zero(theta.size());
    for (std::size_t i = 0; i < built.leaves.size(); ++i)
      flat.segment(built.offsets[i], built.leaves[i].size()) =
          grads.grad(built.leaves[i]).v.matrix();
    return flat;
  };
}

// --- Task arithmetic -----------------------------------------------------------------

struct TaPoint {
  std::string config_id;
  double eta = 0;
  Index batch = 0;
  double s_tilde = 0;
  Index checkpoint_epoch = 0;
  double alpha = 0;
  double test_loss = 0, test_acc = 0;
  double train_loss = 0, train_acc = 0;
  bool diverged = false;
};

// Setting (b): for each trunk checkpoint, the base model is the checkpoint
// itself and the task vectors are the two branch endpoints' displacements.
// One shared alpha traverses the merged subspace.
template <class S>
std::vector<TaPoint> run_task_arithmetic_b(const ArchDescriptor& arch, const Dataset<S>& train_ds,
                                           const Dataset<S>& test_ds, const BifurcationPlan& plan,
                                           std::uint64_t seed, const std::string& config_id,
                                           const std::vector<double>& alphas) {
  TrunkResult<S> trunk = train_trunk(arch, train_ds, plan, seed);
  const double s_tilde = effective_noise(plan.config.eta, plan.config.batch, plan.config.momentum);
  std::vector<TaPoint> points;
  for (const Checkpoint<S>& ck : trunk.checkpoints) {
    auto [ba, bb] = bifurcate(ck, train_ds, plan);
    if (ba.outcome.diverged || bb.outcome.diverged) {
      TaPoint p;
      p.config_id = config_id;
      p.eta = plan.config.eta;
      p.batch = plan.config.batch;
      p.s_tilde = s_tilde;
      p.checkpoint_epoch = ck.trunk_epoch;
      p.diverged = true;
      points.push_back(p);
      continue;
    }
    std::vector<ParamVector<double>> taus;
    taus.push_back(task_vector(ba.params, ck.params));
    taus.push_back(task_vector(bb.params, ck.params));
    auto eval_test = [&](const ParamVector<S>& p) {
      return evaluate_dataset(p, test_ds, static_cast<S>(plan.bn_eps));
    };
    auto eval_train = [&](const ParamVector<S>& p) {
      return evaluate_dataset(p, train_ds, static_cast<S>(plan.bn_eps));
    };
    std::vector<AlphaPoint> curve_test = task_arithmetic_sweep<S>(ck.params, taus, alphas, eval_test);
    std::vector<AlphaPoint> curve_train = task_arithmetic_sweep<S>(ck.params, taus, alphas, eval_train);
    for (std::size_t i = 0; i < alphas.size(); ++i) {
      TaPoint p;
      p.config_id = config_id;
      p.eta = plan.config.eta;
      p.batch = plan.config.batch;
      p.s_tilde = s_tilde;
      p.checkpoint_epoch = ck.trunk_epoch;
      p.alpha = alphas[i];
      p.test_loss = curve_test[i].loss;
      p.test_acc = curve_test[i].accuracy;
      p.train_loss = curve_train[i].loss;
      p.train_acc = curve_train[i].accuracy;
      points.push_back(p);
    }
  }
  return points;
}

// Setting (a): a shared base pretrained on a combined task, two models
// finetuned on separate tasks, merged with one shared alpha and scored by
// normalized accuracy over the two tasks.
template <class S>
struct TaSettingAResult {
  std::vector<double> alphas;
  std::vector<double> normalized;   // normalized accuracy per alpha
  std::vector<double> acc_task1, acc_task2;
  double single_acc1 = 0, single_acc2 = 0;
};

template <class S>
TaSettingAResult<S> run_task_arithmetic_a(const ParamVector<S>& base, const ParamVector<S>& model1,
                                          const ParamVector<S>& model2, const Dataset<S>& test1,
                                          const Dataset<S>& test2, const std::vector<double>& alphas,
                                          double bn_eps = kDefaultBnEps) {
  TaSettingAResult<S> result;
  result.alphas = alphas;
  std::vector<ParamVector<double>> taus;
  taus.push_back(task_vector(model1, base));
  taus.push_back(task_vector(model2, base));
  result.single_acc1 = evaluate_dataset(model1, test1, static_cast<S>(bn_eps)).accuracy;
  result.single_acc2 = evaluate_dataset(model2, test2, static_cast<S>(bn_eps)).accuracy;
  for (double alpha : alphas) {
    ParamVector<S> merged;
    if (alpha == 0.0) {
      merged = base;
    } else {
      merged = task_arithmetic_merge(base, taus, {alpha, alpha});
    }
    const double a1 = evaluate_dataset(merged, test1, static_cast<S>(bn_eps)).accuracy;
    const double a2 = evaluate_dataset(merged, test2, static_cast<S>(bn_eps)).accuracy;
    result.acc_task1.push_back(a1);
    result.acc_task2.push_back(a2);
    result.normalized.push_back(
        normalized_accuracy({a1, a2}, {result.single_acc1, result.single_acc2}));
  }
  return result;
}

}  // namespace mergelab
