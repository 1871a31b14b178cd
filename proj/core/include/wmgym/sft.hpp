#pragma once

// Supervised baselines: behavior cloning from scripted-expert demonstrations
// and Iter-SFT (world-model rollouts filtered by the judge, mixed with expert
// data at a configurable sampling rate).

#include "wmgym/policy.hpp"
#include "wmgym/rewarder.hpp"
#include "wmgym/worldmodel.hpp"

namespace wmgym::sft {

struct SFTConfig {
  int steps = 3000;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double mixture_expert = 1.0;     // Iter-SFT sampling odds
  double mixture_synthetic = 1.0;
  rewarder::JudgeConfig success_filter;
  double rollout_temperature = 1.6;
  int rounds = 1;
  bool include_failed_demos = false;

  void validate() const;
};

struct BcStats {
  std::vector<double> loss_curve;
  int chunk_samples = 0;
};

// Minimizes per-token cross-entropy of quantized expert actions given
// (observation, goal class). Only successful demonstrations are used unless
// include_failed_demos is set.
BcStats bc_train(ParamStore& policy, const policy::PolicyConfig& pc,
                 const envsim::Dataset& dataset, const SFTConfig& cfg, uint64_t seed);

struct IterSftReport {
  int rollouts = 0;
  int kept = 0;
  int64_t wm_steps = 0;
  double kept_fraction = 0.0;
  // replaying kept action sequences in the ground-truth environment exposes
  // world-model hallucinations and judge noise
  double kept_ground_truth_success = 0.0;
  int64_t replay_env_steps = 0;
  bool fell_back_to_pure_bc = false;
  std::vector<double> loss_curve;
};

// Rolls the frozen input policy in the world model across suite tasks until
// the step budget is exhausted, keeps judge-approved trajectories, then
// fine-tunes on the expert/synthetic mixture.
IterSftReport iter_sft(ParamStore& policy, const policy::PolicyConfig& pc,
                       const worldmodel::WorldModel& wm,
                       const std::vector<envsim::TaskSpec>& suite,
                       const envsim::Dataset& expert_data, const envsim::Env& env,
                       const SFTConfig& cfg, int64_t rollout_budget_steps, uint64_t seed);

// Chunked (observation, goal, tokens) samples extracted from trajectories.
struct ChunkSample {
  const envsim::Observation* obs;
  int goal_class;
  std::vector<int> tokens;
};

std::vector<ChunkSample> chunk_samples(const envsim::Dataset& data,
                                       const policy::PolicyConfig& pc, bool successful_only);

// The Iter-SFT mixture draw: true selects a synthetic sample.
bool pick_synthetic(Rng& rng, const SFTConfig& cfg);

}  // namespace wmgym::sft
