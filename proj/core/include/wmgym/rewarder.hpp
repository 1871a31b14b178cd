#pragma once

// Reward surrogates standing in for the VLM judge: a programmatic binary
// trajectory judge with configurable hallucination noise and majority voting,
// plus a dense partial-credit scheme. All judging is purely visual — scenes
// are re-estimated from frames with the shared palette, never read from
// ground-truth state.

#include <array>
#include <cstdint>

#include "wmgym/envsim.hpp"

namespace wmgym::rewarder {

struct JudgeConfig {
  double flip_rate = 0.0;  // probability of flipping the final verdict
  int votes = 5;           // majority-vote count (odd)
  int frame_stride = 3;    // temporal downsampling before judging
  std::string mode = "binary";  // "binary" | "dense"
  bool any_frame = true;   // success on any judged frame vs final frame only

  void validate() const;
};

struct DecodedEntity {
  envsim::Vec2 pos;
  double confidence = 0.0;
};

struct DecodedScene {
  DecodedEntity gripper;
  bool gripper_closed = false;
  std::array<DecodedEntity, 4> objects;  // by palette color index
  std::array<bool, 4> held{};
  DecodedEntity sink;
  DecodedEntity basket;
  DecodedEntity handle;
  double slider_openness = 0.0;
  double slider_confidence = 0.0;

  // Estimated SceneState (objects with nonzero confidence only).
  envsim::SceneState as_scene_state() const;
};

// Color-matching extraction of entity positions (centroid of matching pixels).
DecodedScene decode_scene(const envsim::Observation& obs);

// Subject color / target region resolved from the trajectory's goal class.
struct GoalView {
  envsim::GoalKind kind;
  int subject_color = 0;  // move goals
  bool target_sink = false;
  double threshold = 0.0;
};

GoalView goal_view(const envsim::GoalSpec& goal, int goal_class);

// Does the decoded frame satisfy the goal?
bool decoded_success(const DecodedScene& scene, const GoalView& goal);

// Binary verdict over stride-downsampled frames (the final frame is always
// included), flipped with probability flip_rate. Deterministic given seed.
int judge_binary(const envsim::Trajectory& traj, const JudgeConfig& cfg, uint64_t seed);

// Majority over `votes` independent judge_binary calls with independent
// noise draws.
int judge_majority(const envsim::Trajectory& traj, const JudgeConfig& cfg, uint64_t seed);

// Per-step partial-credit booleans.
struct StepPredicates {
  bool is_grasped = false;
  bool consecutive_grasp = false;
  bool source_object_grasped = false;
  bool lifted = false;
  bool lifted_significantly = false;
  bool success = false;
};

// Predicates for every action step (frames 1..T), decoded from pixels.
std::vector<StepPredicates> step_predicates(const envsim::Trajectory& traj);

// step reward = 0.1 * (# true partial predicates) + 1.0 * success, summed.
double dense_reward_from_predicates(const std::vector<StepPredicates>& steps);
double dense_reward(const envsim::Trajectory& traj);

// Dispatches on cfg.mode; the entry point used by the trainer.
double reward_of(const envsim::Trajectory& traj, const JudgeConfig& cfg, uint64_t seed);

}  // namespace wmgym::rewarder
