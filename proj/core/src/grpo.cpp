#include "wmgym/grpo.hpp"

#include <chrono>
#include <cmath>

namespace wmgym::grpo {

using policy::PolicyConfig;

void GRPOConfig::validate() const {
  if (group_size < 2) throw ConfigError("group_size must be >= 2");
  if (tasks_per_batch < 1) throw ConfigError("tasks_per_batch must be >= 1");
  if (horizon < 1 || chunk_len < 1 || horizon % chunk_len != 0) {
    throw ConfigError("horizon must be a positive multiple of chunk_len");
  }
  if (eps_low <= 0.0 || eps_high < eps_low) {
    throw ConfigError("need eps_high >= eps_low > 0");
  }
  if (adv_epsilon < 0.0) throw ConfigError("adv_epsilon must be >= 0");
  if (rollout_temperature <= 0.0) throw ConfigError("rollout_temperature must be > 0");
  if (updates_per_batch < 1) throw ConfigError("updates_per_batch must be >= 1");
  if (ratio_temperature != "rollout" && ratio_temperature != "unit") {
    throw ConfigError("ratio_temperature must be rollout|unit");
  }
  if (kl_coef != 0.0) throw ConfigError("kl penalty is discarded by design (kl_coef = 0)");
}

RolloutGroup rollout_group(const ParamStore& policy_params, const PolicyConfig& pc,
                           const worldmodel::WorldModel& wm, const envsim::TaskSpec& task,
                           const envsim::Env& env, const rewarder::JudgeConfig& judge,
                           const GRPOConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  RolloutGroup group;
  group.task = task;
  group.goal_class = envsim::goal_class_of(task.goal, task.scene0);
  group.judge_seed = root.fork("judge").key();

  // the whole group shares one initial observation
  auto [scene0, o0] = env.reset(task, root.fork("reset").key());
  (void)scene0;

  int chunks = cfg.horizon / cfg.chunk_len;
  group.trajectories.resize(cfg.group_size);
  group.rewards.resize(cfg.group_size);
  for (int k = 0; k < cfg.group_size; ++k) {
    Rng stream = root.fork("rollout", static_cast<uint64_t>(k));
    Rng sample_rng = stream.fork("sample");
    RlTrajectory& traj = group.trajectories[k];
    traj.observations.reserve(cfg.horizon + 1);
    traj.observations.push_back(o0);
    worldmodel::WorldModelSession session =
        worldmodel::wm_reset(wm, o0, stream.fork("wm").key());
    for (int c = 0; c < chunks; ++c) {
      ChunkRecord rec;
      rec.obs_index = static_cast<int>(traj.observations.size()) - 1;
      policy::ActionChunk chunk =
          policy::sample_chunk(policy_params, pc, traj.observations.back(), group.goal_class,
                               cfg.rollout_temperature, sample_rng);
      rec.tokens = chunk.tokens;
      rec.logprob_rollout = chunk.logprob;
      rec.logprob_unit = chunk.logprob_unit;
      for (int i = 0; i < cfg.chunk_len; ++i) {
        envsim::Action a = chunk.action_at(i, pc.action_dims);
        traj.actions.push_back(a);
        traj.observations.push_back(worldmodel::wm_step(session, a));
      }
      traj.chunks.push_back(std::move(rec));
    }
    envsim::Trajectory judged;
    judged.goal = task.goal;
    judged.goal_class = group.goal_class;
    judged.observations = traj.observations;
    group.rewards[k] =
        rewarder::reward_of(judged, judge, Rng(group.judge_seed).fork(k).key());
  }
  double mn = group.rewards[0], mx = group.rewards[0];
  for (double r : group.rewards) {
    mn = std::min(mn, r);
    mx = std::max(mx, r);
  }
  group.zero_variance = (mx - mn) == 0.0;
  group.advantages = compute_advantages(group.rewards, cfg.adv_epsilon);
  return group;
}

std::vector<double> compute_advantages(std::span<const double> rewards, double eps) {
  size_t k = rewards.size();
  if (k < 2) throw ConfigError("compute_advantages needs K >= 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(k);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  double std_dev = std::sqrt(var / static_cast<double>(k - 1));  // sample std
  std::vector<double> adv(k);
  if (std_dev == 0.0 && eps == 0.0) {
    // all-equal rewards: zero advantages rather than 0/0
    return adv;
  }
  for (size_t i = 0; i < k; ++i) adv[i] = (rewards[i] - mean) / (std_dev + eps);
  return adv;
}

int dynamic_filter(std::vector<RolloutGroup>& groups) {
  int before = static_cast<int>(groups.size());
  std::erase_if(groups, [](const RolloutGroup& g) { return g.zero_variance; });
  return before - static_cast<int>(groups.size());
}

double clipped_term(double ratio, double adv, double eps_low, double eps_high) {
  double clipped = std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(ratio * adv, clipped * adv);
}

namespace {

struct TermAccum {
  double objective = 0.0;
  double clip_hits = 0.0;
  double terms = 0.0;
  double ratio_sum = 0.0;
  double entropy_sum = 0.0;
};

// Walks every (group, trajectory, chunk) term; `backprop` receives the
// gradient of the *loss* (negated objective) w.r.t. the chunk logprob.
template <typename Fn>
TermAccum accumulate_terms(const ParamStore& policy_params, const PolicyConfig& pc,
                           const std::vector<RolloutGroup>& groups, const GRPOConfig& cfg,
                           const Fn& per_chunk) {
  TermAccum acc;
  if (groups.empty()) throw ConfigError("surrogate on empty group batch");
  bool rollout_temp = cfg.ratio_temperature == "rollout";
  double temp = rollout_temp ? cfg.rollout_temperature : 1.0;
  int chunks_per_traj = cfg.horizon / cfg.chunk_len;
  double norm = 1.0 / (static_cast<double>(groups.size()) * cfg.group_size * chunks_per_traj);

  for (const auto& group : groups) {
    for (int k = 0; k < cfg.group_size; ++k) {
      const RlTrajectory& traj = group.trajectories[k];
      double adv = group.advantages[k];  // broadcast to every chunk decision
      for (const auto& rec : traj.chunks) {
        double old_lp = rollout_temp ? rec.logprob_rollout : rec.logprob_unit;
        per_chunk(group, traj, rec, adv, old_lp, temp, norm, acc);
      }
    }
  }
  acc.objective *= norm;
  (void)policy_params;
  return acc;
}

SurrogateStats finish_stats(const TermAccum& acc, const GRPOConfig& cfg) {
  SurrogateStats st;
  st.objective = acc.objective;
  st.entropy = acc.terms > 0 ? acc.entropy_sum / acc.terms : 0.0;
  st.loss = -acc.objective - cfg.entropy_coef * st.entropy;
  st.clip_fraction = acc.terms > 0 ? acc.clip_hits / acc.terms : 0.0;
  st.mean_ratio = acc.terms > 0 ? acc.ratio_sum / acc.terms : 0.0;
  return st;
}

}  // namespace

SurrogateStats surrogate_loss(ParamStore& policy_params, const PolicyConfig& pc,
                              const std::vector<RolloutGroup>& groups, const GRPOConfig& cfg) {
  cfg.validate();
  policy_params.zero_grads();
  dynamo::MlpCache cache;
  std::vector<double> d_logits;
  std::vector<double> d_logits_entropy;

  TermAccum acc = accumulate_terms(
      policy_params, pc, groups, cfg,
      [&](const RolloutGroup& group, const RlTrajectory& traj, const ChunkRecord& rec,
          double adv, double old_lp, double temp, double norm, TermAccum& a) {
        const auto& logits = policy::action_logits_cached(
            policy_params, pc, traj.observations[rec.obs_index], group.goal_class, cache);
        double lp = policy::logprob_from_logits(pc, logits, rec.tokens, temp, &d_logits);
        double ratio = std::exp(lp - old_lp);
        double term = clipped_term(ratio, adv, cfg.eps_low, cfg.eps_high);
        a.objective += term;
        a.terms += 1.0;
        a.ratio_sum += ratio;
        // the min selects the raw branch iff ratio*adv == term (ties included);
        // the clipped branch is flat in theta, so its gradient is zero
        bool unclipped_selected = ratio * adv == term;
        double d_term_d_lp = unclipped_selected ? ratio * adv : 0.0;
        if (!unclipped_selected) a.clip_hits += 1.0;
        // loss = -objective * norm (entropy handled separately)
        double scale = -d_term_d_lp * norm;
        for (double& g : d_logits) g *= scale;
        if (cfg.entropy_coef != 0.0) {
          double h = policy::chunk_entropy(pc, logits, temp);
          a.entropy_sum += h;
          // entropy gradient via finite structure: dH/dlogits computed below
          // dH/dz_b = (p_b / T) * (-(log p_b + 1) + sum_c p_c (log p_c + 1))
          d_logits_entropy.assign(d_logits.size(), 0.0);
          for (int t = 0; t < pc.tokens_per_chunk(); ++t) {
            const double* row = logits.data() + static_cast<size_t>(t) * pc.bins;
            double mx = row[0] / temp;
            for (int b = 1; b < pc.bins; ++b) mx = std::max(mx, row[b] / temp);
            double zsum = 0.0;
            for (int b = 0; b < pc.bins; ++b) zsum += std::exp(row[b] / temp - mx);
            double lse = mx + std::log(zsum);
            double inner = 0.0;
            std::vector<double> p(pc.bins);
            for (int b = 0; b < pc.bins; ++b) {
              p[b] = std::exp(row[b] / temp - lse);
              inner += p[b] * (row[b] / temp - lse);
            }
            for (int b = 0; b < pc.bins; ++b) {
              double dh = -p[b] / temp * ((row[b] / temp - lse) - inner);
              // loss carries -entropy_coef * mean entropy over all chunk terms
              d_logits_entropy[static_cast<size_t>(t) * pc.bins + b] =
                  -cfg.entropy_coef * dh * norm;
            }
          }
          for (size_t i = 0; i < d_logits.size(); ++i) d_logits[i] += d_logits_entropy[i];
        } else {
          a.entropy_sum += 0.0;
        }
        dynamo::mlp_backward(policy_params, pc.arch(), cache, d_logits);
      });

  return finish_stats(acc, cfg);
}

SurrogateStats surrogate_eval(const ParamStore& policy_params, const PolicyConfig& pc,
                              const std::vector<RolloutGroup>& groups, const GRPOConfig& cfg) {
  cfg.validate();
  dynamo::MlpCache cache;
  TermAccum acc = accumulate_terms(
      policy_params, pc, groups, cfg,
      [&](const RolloutGroup& group, const RlTrajectory& traj, const ChunkRecord& rec,
          double adv, double old_lp, double temp, double, TermAccum& a) {
        const auto& logits = policy::action_logits_cached(
            policy_params, pc, traj.observations[rec.obs_index], group.goal_class, cache);
        double lp = policy::logprob_from_logits(pc, logits, rec.tokens, temp);
        double ratio = std::exp(lp - old_lp);
        double term = clipped_term(ratio, adv, cfg.eps_low, cfg.eps_high);
        a.objective += term;
        a.terms += 1.0;
        a.ratio_sum += ratio;
        if (ratio * adv != term) a.clip_hits += 1.0;
        if (cfg.entropy_coef != 0.0) {
          a.entropy_sum += policy::chunk_entropy(pc, logits, temp);
        }
      });
  return finish_stats(acc, cfg);
}

TrainResult train(ParamStore& policy_params, const PolicyConfig& pc,
                  const worldmodel::WorldModel& wm, const std::vector<envsim::TaskSpec>& suite,
                  const envsim::Env& env, const rewarder::JudgeConfig& judge,
                  const GRPOConfig& cfg, uint64_t seed, const MetricsSink& sink) {
  cfg.validate();
  if (suite.empty()) throw ConfigError("grpo::train: empty suite");

  dynamo::AdamWConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  ac.grad_clip = cfg.grad_clip;
  dynamo::AdamW opt(policy_params, ac);

  TrainResult result;
  Rng root(seed);
  int consecutive_skipped = 0;

  for (int batch = 0; batch < cfg.total_batches; ++batch) {
    auto t0 = std::chrono::steady_clock::now();
    Rng batch_rng = root.fork("batch", static_cast<uint64_t>(batch));

    // theta_old is the sampling policy for this batch's rollouts; the stored
    // per-chunk logprobs are its snapshot
    std::vector<RolloutGroup> groups;
    groups.reserve(cfg.tasks_per_batch);
    double reward_sum = 0.0;
    int reward_count = 0;
    int attempts = 0;
    int max_attempts = cfg.resample_filtered ? cfg.tasks_per_batch * 5 : cfg.tasks_per_batch;
    auto roll_one = [&]() {
      const envsim::TaskSpec& task =
          suite[batch_rng.fork("task", attempts).uniform_int(suite.size())];
      RolloutGroup group =
          rollout_group(policy_params, pc, wm, task, env, judge, cfg,
                        batch_rng.fork("group", attempts).key());
      result.wm_steps += static_cast<int64_t>(cfg.group_size) * cfg.horizon;
      for (double r : group.rewards) {
        reward_sum += r;
        reward_count += 1;
      }
      ++attempts;
      return group;
    };
    if (cfg.resample_filtered) {
      // keep drawing until the batch holds tasks_per_batch informative groups
      while (static_cast<int>(groups.size()) < cfg.tasks_per_batch &&
             attempts < max_attempts) {
        RolloutGroup g = roll_one();
        if (!g.zero_variance) groups.push_back(std::move(g));
      }
    } else {
      while (attempts < cfg.tasks_per_batch) {
        groups.push_back(roll_one());
      }
    }

    int before = static_cast<int>(groups.size());
    int filtered = dynamic_filter(groups);

    BatchMetrics m;
    m.batch = batch;
    m.mean_reward = reward_count > 0 ? reward_sum / reward_count : 0.0;
    m.filtered_fraction = before > 0 ? static_cast<double>(filtered) / before : 0.0;

    if (groups.empty()) {
      m.skipped = true;
      ++consecutive_skipped;
      if (consecutive_skipped > cfg.patience) {
        ++result.variance_collapse_warnings;
      }
    } else {
      consecutive_skipped = 0;
      for (int u = 0; u < cfg.updates_per_batch; ++u) {
        SurrogateStats st = surrogate_loss(policy_params, pc, groups, cfg);
        m.loss = st.loss;
        m.clip_fraction = st.clip_fraction;
        m.grad_norm = opt.step(policy_params);
      }
    }
    m.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (sink) sink(m);
    result.metrics.push_back(m);
  }
  policy_params.check_finite("grpo::train");
  return result;
}

}  // namespace wmgym::grpo
