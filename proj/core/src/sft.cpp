#include "wmgym/sft.hpp"

#include <cmath>

namespace wmgym::sft {

using envsim::Dataset;
using envsim::Trajectory;
using policy::PolicyConfig;

void SFTConfig::validate() const {
  if (steps < 0) throw ConfigError("sft steps must be >= 0");
  if (batch_size < 1) throw ConfigError("sft batch_size must be >= 1");
  if (mixture_expert <= 0.0 || mixture_synthetic <= 0.0) {
    throw ConfigError("mixture ratio components must be positive");
  }
  if (rollout_temperature <= 0.0) throw ConfigError("rollout_temperature must be > 0");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  success_filter.validate();
}

std::vector<ChunkSample> chunk_samples(const Dataset& data, const PolicyConfig& pc,
                                       bool successful_only) {
  std::vector<ChunkSample> out;
  for (const auto& traj : data.trajectories) {
    if (successful_only && !traj.success) continue;
    int chunks = static_cast<int>(traj.actions.size()) / pc.chunk_len;
    for (int c = 0; c < chunks; ++c) {
      ChunkSample s;
      s.obs = &traj.observations[static_cast<size_t>(c) * pc.chunk_len];
      s.goal_class = traj.goal_class;
      s.tokens.reserve(pc.tokens_per_chunk());
      for (int i = 0; i < pc.chunk_len; ++i) {
        auto a = traj.actions[static_cast<size_t>(c) * pc.chunk_len + i].as_array();
        for (int dim = 0; dim < pc.action_dims; ++dim) {
          s.tokens.push_back(policy::quantize_action(a[dim], pc.bins));
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

namespace {

// One cross-entropy step over a batch of chunk samples drawn by `pick`.
double ce_step(ParamStore& ps, const PolicyConfig& pc, dynamo::AdamW& opt,
               const std::function<const ChunkSample&(int)>& pick, int batch_size) {
  dynamo::MlpCache cache;
  std::vector<double> d_logits;
  ps.zero_grads();
  double batch_loss = 0.0;
  for (int b = 0; b < batch_size; ++b) {
    const ChunkSample& s = pick(b);
    const auto& logits = policy::action_logits_cached(ps, pc, *s.obs, s.goal_class, cache);
    double lp = policy::logprob_from_logits(pc, logits, s.tokens, 1.0, &d_logits);
    batch_loss -= lp;
    // minimize -logprob: flip sign and average over the batch
    for (double& g : d_logits) g *= -1.0 / batch_size;
    dynamo::mlp_backward(ps, pc.arch(), cache, d_logits);
  }
  opt.step(ps);
  return batch_loss / batch_size;
}

}  // namespace

BcStats bc_train(ParamStore& policy_params, const PolicyConfig& pc, const Dataset& dataset,
                 const SFTConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (dataset.trajectories.empty()) throw ConfigError("bc_train: empty dataset");
  auto samples = chunk_samples(dataset, pc, !cfg.include_failed_demos);
  if (samples.empty()) throw ConfigError("bc_train: no usable chunk samples");

  BcStats stats;
  stats.chunk_samples = static_cast<int>(samples.size());
  if (cfg.steps == 0) return stats;

  dynamo::AdamWConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  ac.grad_clip = cfg.grad_clip;
  dynamo::AdamW opt(policy_params, ac);
  Rng root(seed);
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng = root.fork("bc", static_cast<uint64_t>(step));
    double loss = ce_step(policy_params, pc, opt,
                          [&](int) -> const ChunkSample& {
                            return samples[rng.uniform_int(samples.size())];
                          },
                          cfg.batch_size);
    stats.loss_curve.push_back(loss);
  }
  policy_params.check_finite("bc_train");
  return stats;
}

bool pick_synthetic(Rng& rng, const SFTConfig& cfg) {
  double odds = cfg.mixture_synthetic / (cfg.mixture_expert + cfg.mixture_synthetic);
  return rng.uniform() < odds;
}

IterSftReport iter_sft(ParamStore& policy_params, const PolicyConfig& pc,
                       const worldmodel::WorldModel& wm,
                       const std::vector<envsim::TaskSpec>& suite, const Dataset& expert_data,
                       const envsim::Env& env, const SFTConfig& cfg,
                       int64_t rollout_budget_steps, uint64_t seed) {
  cfg.validate();
  if (rollout_budget_steps <= 0) throw ConfigError("iter_sft: rollout budget must be > 0");
  if (suite.empty()) throw ConfigError("iter_sft: empty suite");

  IterSftReport report;
  Rng root(seed);
  int horizon = env.cfg.horizon;

  for (int round = 0; round < cfg.rounds; ++round) {
    Dataset kept;
    int64_t budget = rollout_budget_steps / cfg.rounds;
    int64_t used = 0;
    uint64_t k = 0;
    // frozen policy snapshot for this round's rollouts
    ParamStore frozen = policy_params;
    while (used < budget) {
      Rng stream = root.fork("itersft", (static_cast<uint64_t>(round) << 32) | k);
      const envsim::TaskSpec& task = suite[stream.fork("task").uniform_int(suite.size())];
      auto [scene0, o0] = env.reset(task, stream.fork("reset").key());
      (void)scene0;
      Rng sample_rng = stream.fork("sample");
      envsim::Trajectory traj;
      traj.task_id = task.task_id;
      traj.goal = task.goal;
      traj.goal_class = envsim::goal_class_of(task.goal, task.scene0);
      traj.provenance = task.provenance;
      traj.source = "iter_sft";
      traj.seed = stream.fork("reset").key();
      {
        worldmodel::WorldModelSession session =
            worldmodel::wm_reset(wm, o0, stream.fork("wm").key());
        traj.observations.push_back(o0);
        int chunks = horizon / pc.chunk_len;
        for (int c = 0; c < chunks; ++c) {
          policy::ActionChunk chunk =
              policy::sample_chunk(frozen, pc, traj.observations.back(), traj.goal_class,
                                   cfg.rollout_temperature, sample_rng);
          for (int i = 0; i < pc.chunk_len; ++i) {
            envsim::Action a = chunk.action_at(i, pc.action_dims);
            traj.actions.push_back(a);
            traj.observations.push_back(wm_step(session, a));
          }
        }
      }
      used += horizon;
      report.rollouts += 1;
      int verdict = rewarder::judge_binary(traj, cfg.success_filter,
                                           stream.fork("judge").key());
      if (verdict == 1) {
        traj.success = true;  // judge-approved (may disagree with ground truth)
        kept.trajectories.push_back(std::move(traj));
      }
      ++k;
    }
    report.wm_steps += used;
    report.kept += static_cast<int>(kept.trajectories.size());

    // hallucination cross-check: replay kept action sequences in the real env
    int replay_ok = 0;
    for (const auto& traj : kept.trajectories) {
      const envsim::TaskSpec* task = nullptr;
      for (const auto& t : suite) {
        if (t.task_id == traj.task_id) task = &t;
      }
      if (task == nullptr) continue;
      auto [state, obs0] = env.reset(*task, traj.seed);
      (void)obs0;
      bool ok = env.success(state, task->goal);
      for (const auto& a : traj.actions) {
        state = env.step(state, a);
        if (env.success(state, task->goal)) ok = true;
      }
      report.replay_env_steps += static_cast<int64_t>(traj.actions.size());
      replay_ok += ok ? 1 : 0;
    }
    if (!kept.trajectories.empty()) {
      report.kept_ground_truth_success =
          static_cast<double>(replay_ok) / kept.trajectories.size();
    }

    // fine-tune on the expert/synthetic mixture
    auto expert_samples = chunk_samples(expert_data, pc, !cfg.include_failed_demos);
    auto synth_samples = chunk_samples(kept, pc, false);
    if (synth_samples.empty()) {
      report.fell_back_to_pure_bc = true;
      SFTConfig pure = cfg;
      BcStats st = bc_train(policy_params, pc, expert_data, pure, root.fork("bc").key());
      report.loss_curve = std::move(st.loss_curve);
      continue;
    }
    dynamo::AdamWConfig ac;
    ac.lr = cfg.lr;
    ac.weight_decay = cfg.weight_decay;
    ac.grad_clip = cfg.grad_clip;
    dynamo::AdamW opt(policy_params, ac);
    Rng train_rng = root.fork("mix_train", round);
    for (int step = 0; step < cfg.steps; ++step) {
      double loss = ce_step(policy_params, pc, opt,
                            [&](int) -> const ChunkSample& {
                              if (pick_synthetic(train_rng, cfg)) {
                                return synth_samples[train_rng.uniform_int(synth_samples.size())];
                              }
                              return expert_samples[train_rng.uniform_int(expert_samples.size())];
                            },
                            cfg.batch_size);
      report.loss_curve.push_back(loss);
    }
  }
  report.kept_fraction =
      report.rollouts > 0 ? static_cast<double>(report.kept) / report.rollouts : 0.0;
  policy_params.check_finite("iter_sft");
  return report;
}

}  // namespace wmgym::sft
