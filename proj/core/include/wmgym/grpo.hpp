#pragma once

// Group-relative policy optimization with world-model rollouts: groups of
// trajectories per task, rewards from the programmatic judge, group-normalized
// advantages broadcast to every chunk decision, dynamic filtering of
// zero-variance groups, and the asymmetric-clip surrogate objective.

#include "wmgym/policy.hpp"
#include "wmgym/rewarder.hpp"
#include "wmgym/worldmodel.hpp"

namespace wmgym::grpo {

struct GRPOConfig {
  int group_size = 8;
  int tasks_per_batch = 20;
  int horizon = 40;
  int chunk_len = 5;
  double lr = 3e-4;  // desk-scale default; the headline table value is 5e-6
  double eps_low = 0.2;
  double eps_high = 0.28;
  double adv_epsilon = 1e-4;
  double rollout_temperature = 1.6;
  double discount = 1.0;  // kept for the policy-gradient diagnostic only
  double kl_coef = 0.0;   // fixed: no KL penalty term
  double entropy_coef = 0.0;
  int updates_per_batch = 1;
  int total_batches = 40;
  std::string ratio_temperature = "rollout";  // "rollout" | "unit"
  int patience = 5;        // consecutive fully-filtered batches before warning
  bool resample_filtered = false;
  double weight_decay = 0.0;
  double grad_clip = 1.0;

  void validate() const;
};

struct ChunkRecord {
  int obs_index = 0;             // decision observation within the trajectory
  std::vector<int> tokens;
  double logprob_rollout = 0.0;  // at the sampling temperature
  double logprob_unit = 0.0;     // at temperature 1
};

struct RlTrajectory {
  std::vector<envsim::Observation> observations;  // horizon + 1 predicted frames
  std::vector<envsim::Action> actions;
  std::vector<ChunkRecord> chunks;
};

struct RolloutGroup {
  envsim::TaskSpec task;
  int goal_class = 0;
  uint64_t judge_seed = 0;
  std::vector<RlTrajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
  bool zero_variance = false;
};

// K rollouts of the policy in the world model from one (task, o0) pair,
// judged by the configured rewarder on the predicted frames.
RolloutGroup rollout_group(const ParamStore& policy_params, const policy::PolicyConfig& pc,
                           const worldmodel::WorldModel& wm, const envsim::TaskSpec& task,
                           const envsim::Env& env, const rewarder::JudgeConfig& judge,
                           const GRPOConfig& cfg, uint64_t seed);

// A_k = (r_k - mean) / (sample_std + eps); all-equal rewards give zeros.
std::vector<double> compute_advantages(std::span<const double> rewards, double eps);

// Removes zero-variance groups in place; returns how many were removed.
int dynamic_filter(std::vector<RolloutGroup>& groups);

// min(ratio * adv, clip(ratio, 1-eps_low, 1+eps_high) * adv)
double clipped_term(double ratio, double adv, double eps_low, double eps_high);

struct SurrogateStats {
  double loss = 0.0;           // negated objective (minimized)
  double objective = 0.0;      // the clipped surrogate itself
  double clip_fraction = 0.0;  // chunk terms where the clipped branch won
  double mean_ratio = 0.0;
  double entropy = 0.0;
};

// Evaluates the surrogate and accumulates policy gradients (zeroed first).
SurrogateStats surrogate_loss(ParamStore& policy_params, const policy::PolicyConfig& pc,
                              const std::vector<RolloutGroup>& groups, const GRPOConfig& cfg);

// Surrogate value only (no gradients); for update-direction diagnostics.
SurrogateStats surrogate_eval(const ParamStore& policy_params, const policy::PolicyConfig& pc,
                              const std::vector<RolloutGroup>& groups, const GRPOConfig& cfg);

struct BatchMetrics {
  int batch = 0;
  double mean_reward = 0.0;
  double filtered_fraction = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double clip_fraction = 0.0;
  double wallclock_s = 0.0;
  bool skipped = false;  // every group filtered: no update this batch
};

struct TrainResult {
  std::vector<BatchMetrics> metrics;
  int64_t wm_steps = 0;
  int variance_collapse_warnings = 0;
};

using MetricsSink = std::function<void(const BatchMetrics&)>;

// Full training loop: sample tasks, snapshot theta_old, roll out groups,
// judge, filter, normalize, update.
TrainResult train(ParamStore& policy_params, const policy::PolicyConfig& pc,
                  const worldmodel::WorldModel& wm, const std::vector<envsim::TaskSpec>& suite,
                  const envsim::Env& env, const rewarder::JudgeConfig& judge,
                  const GRPOConfig& cfg, uint64_t seed, const MetricsSink& sink = nullptr);

}  // namespace wmgym::grpo
