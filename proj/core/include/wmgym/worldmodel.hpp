#pragma once

// Learned dynamics model: an action-conditioned autoregressive observation
// predictor over a sliding window of past frames. Each new frame starts from
// Gaussian noise and is refined by a fixed number of deterministic update
// steps; every step runs one action-conditioned pass and one null-conditioned
// pass and blends them as v_null + w * (v_cond - v_null). Keys/values for the
// clean-frame prefix are computed once per frame and reused across refinement
// steps (separate caches for the conditioned and null passes).

#include <deque>

#include "wmgym/envsim.hpp"
#include "wmgym/transformer.hpp"

namespace wmgym::worldmodel {

struct WMConfig {
  int context_frames = 20;
  int denoise_steps = 4;
  double guidance_weight = 1.5;
  double null_action_rate = 0.1;
  dynamo::ArchSpec arch;  // temporal_transformer over embedded frame tokens
  int obs_width = 16, obs_height = 16, obs_channels = 3;
  int action_dims = 3;
  int head_hidden = 256;
  double noise_scale = 0.3;         // initial-noise amplitude for refinement
  double motion_loss_weight = 9.0;  // extra loss weight on pixels that change
  double entity_loss_weight = 3.0;  // extra weight on non-background pixels
  double context_noise = 0.02;      // training-time corruption of window frames
  double palette_snap = 0.15;       // snap decoded pixels this close to a palette color

  WMConfig();
  void validate() const;
  int frame_dim() const { return obs_width * obs_height * obs_channels; }
  std::string descriptor() const;
};

struct WorldModel {
  WMConfig cfg;
  ParamStore params;
};

WorldModel init_world_model(const WMConfig& cfg, uint64_t seed);

struct WMTrainConfig {
  int steps = 2500;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double grad_clip = 1.0;
};

struct WmTrainStats {
  std::vector<double> loss_curve;  // per-step batch loss
};

// Teacher-forced training: sample windows of true past frames plus the next
// action (embedding replaced by the learned null embedding at
// null_action_rate), regress the clean next frame. Deterministic in seed.
WmTrainStats train_world_model(WorldModel& wm, const envsim::Dataset& dataset,
                               const WMTrainConfig& tc, uint64_t seed);

// Continues training on a mixture of original and new trajectories
// (mixture_new : mixture_original sampling odds, default 1:1).
WmTrainStats finetune_world_model(WorldModel& wm, const envsim::Dataset& new_trajectories,
                                  const envsim::Dataset& original, const WMTrainConfig& tc,
                                  uint64_t seed, double mixture_new = 1.0,
                                  double mixture_original = 1.0);

// Mean per-pixel squared error of full-sampler one-step predictions under
// teacher forcing. Deterministic (internal fixed noise streams).
double one_step_error(const WorldModel& wm, const envsim::Dataset& trajectories);

// Single teacher-forced transition loss (mean squared error of the predicted
// clean frame, refinement input built from the supplied noise at the given
// grid index); accumulates parameter gradients when requested. Exposed for
// gradient verification.
double wm_transition_loss(WorldModel& wm, const envsim::Trajectory& traj, int t, int tau_idx,
                          std::span<const double> noise, bool null_cond,
                          bool accumulate_grads);

// ---------------------------------------------------------------------------
// Rollout sessions
// ---------------------------------------------------------------------------

struct WorldModelSession {
  const WorldModel* wm = nullptr;
  std::deque<std::vector<double>> frames;           // clean frame ring
  std::deque<std::array<double, 3>> incoming;       // action that produced each frame
  int current_frame = 0;
  dynamo::KvCache cond_cache, null_cache;
  Rng rng{0};

  int window_size() const { return static_cast<int>(frames.size()); }
};

// history = [o0]; caches empty.
WorldModelSession wm_reset(const WorldModel& wm, const envsim::Observation& o0, uint64_t seed);

// Predicts the next observation. Clears the per-frame caches, then reuses the
// clean-prefix keys/values across refinement steps, recomputing only the new
// frame; the new frame's keys/values are appended on the final step.
envsim::Observation wm_step(WorldModelSession& session, const envsim::Action& action);

// Reference path recomputing full-window attention at every refinement step.
// Consumes the same rng stream positions as wm_step.
envsim::Observation wm_step_uncached(WorldModelSession& session, const envsim::Action& action);

// Rolls a full trajectory in the model from the task's initial observation.
envsim::Trajectory rollout_wm(const WorldModel& wm, const envsim::TaskSpec& task,
                              const envsim::Observation& o0, int horizon, uint64_t seed,
                              const std::function<envsim::Action(const envsim::Observation&, int)>& act);

}  // namespace wmgym::worldmodel
