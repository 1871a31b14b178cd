#pragma once

// Ground-truth 2D tabletop manipulation environment: the "real robot" stand-in,
// plus procedural task, demonstration, and augmentation generators.
//
// Geometry lives in [0,1]^2 workspace units. Two scene families:
//   slider scenes:  a horizontal slider (drawer analog) + basket region + one
//                   bystander block
//   move scenes:    sink + basket regions + a subject block + one bystander
// Rendering is a deterministic low-resolution rasterization with a fixed
// palette; every entity class has a unique color so frames stay decodable.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wmgym/common.hpp"

namespace wmgym::envsim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline double dist(const Vec2& a, const Vec2& b) {
  double dx = a.x - b.x, dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

struct ObjectState {
  std::string id;
  int color_index = 0;  // index into the object palette
  Vec2 pos;
  bool held = false;
};

enum class FixtureKind { target_region, slider };

struct Fixture {
  FixtureKind kind = FixtureKind::target_region;
  std::string id;
  Vec2 pos;               // region: center; slider: rail origin (openness 0)
  double extent = 0.0;    // region: half-size; slider: travel length (+x)
  double slider_openness = 0.0;
};

struct SceneState {
  Vec2 gripper_pos;
  bool gripper_closed = false;
  std::vector<ObjectState> objects;
  std::vector<Fixture> fixtures;

  const ObjectState* find_object(const std::string& id) const;
  const Fixture* find_fixture(const std::string& id) const;
  int held_index() const;  // -1 when nothing held
};

enum class GoalKind { move_object_to_region, open_slider, close_slider };

struct GoalSpec {
  GoalKind kind = GoalKind::move_object_to_region;
  std::string subject_id;  // object for move; slider id for slider goals
  std::string target_id;   // region id (move only)
  double threshold = 0.1;  // move: max distance; slider: openness cutoff
};

enum class Provenance { base, distractor_augmented, novel_instruction, scaled };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);
std::string to_string(GoalKind k);
GoalKind goal_kind_from_string(const std::string& s);

struct TaskSpec {
  SceneState scene0;
  GoalSpec goal;
  std::string task_id;
  Provenance provenance = Provenance::base;

  // archetype label used for per-kind reporting ("open_slider", "close_slider",
  // "move_to_sink", "move_to_basket")
  std::string kind_label() const;
};

struct Observation {
  int width = 0, height = 0, channels = 0;
  std::vector<double> pixels;       // row-major [y][x][c], values in [0,1]
  std::vector<double> state_vec;    // optional flat state (debug obs mode)

  double at(int x, int y, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

struct Action {
  double dx = 0.0;
  double dy = 0.0;
  double grip = -1.0;  // > 0.5 toggles the gripper

  std::array<double, 3> as_array() const { return {dx, dy, grip}; }
  static Action from_span(std::span<const double> v) {
    Action a;
    if (!v.empty()) a.dx = v[0];
    if (v.size() > 1) a.dy = v[1];
    if (v.size() > 2) a.grip = v[2];
    return a;
  }
};

// ---------------------------------------------------------------------------
// Palette and static scene geometry (shared with the frame decoder).
// ---------------------------------------------------------------------------

struct Rgb {
  double r, g, b;
};

struct Palette {
  Rgb background{0.05, 0.05, 0.08};
  Rgb sink_region{0.05, 0.15, 0.55};
  Rgb basket_region{0.45, 0.40, 0.08};
  Rgb rail{0.30, 0.30, 0.33};
  Rgb handle{1.00, 0.55, 0.00};
  Rgb gripper_open{1.00, 1.00, 1.00};
  Rgb gripper_closed{0.55, 0.55, 0.62};
  std::array<Rgb, 4> objects{{{0.60, 0.15, 0.80},    // purple (move subject)
                              {0.90, 0.12, 0.10},    // red
                              {0.10, 0.85, 0.25},    // green
                              {0.10, 0.75, 0.90}}};  // cyan
};

const Palette& palette();

struct SceneGeometry {
  // anchors sit on the 1/16 lattice so the gripper can land on them exactly
  Vec2 sink_center{0.25, 0.75};
  double sink_half = 0.14;
  Vec2 basket_center{0.75, 0.75};
  double basket_half = 0.12;
  Vec2 rail_origin{0.3125, 0.1875};  // handle center at openness 0
  double rail_travel = 0.375;        // +x
  double object_half = 0.055;        // renders as a 2x2 block at 16x16
  double handle_half = 0.055;
  double gripper_half = 0.095;       // renders as a 3x3 ring
};

const SceneGeometry& geometry();

// ---------------------------------------------------------------------------
// Environment configuration and core dynamics.
// ---------------------------------------------------------------------------

struct EnvConfig {
  int width = 16;
  int height = 16;
  double step_size = 0.07;
  // keeps the gripper (and whatever it carries) on the pixel lattice, so
  // rendered frames identify the motion state exactly
  bool lattice_motion = true;
  double grasp_radius = 0.12;
  double handle_radius = 0.12;
  double jitter = 0.05;        // reset-time randomization amplitude
  int horizon = 40;
  double move_threshold = 0.10;
  double open_cutoff = 0.8;
  double close_cutoff = 0.2;
  double expert_noise = 0.3;
};

struct Env {
  EnvConfig cfg;

  // Validates goal references; jitters objects/gripper/openness by up to
  // cfg.jitter (seed-determined) and renders the result.
  std::pair<SceneState, Observation> reset(const TaskSpec& task, uint64_t seed) const;

  // Pure transition. Gripper moves by step_size * (dx, dy) clamped to the
  // workspace; grip > 0.5 toggles the gripper (grasping the nearest object
  // within grasp_radius on close, releasing on open); a closed empty gripper
  // near the slider handle drags it along x.
  SceneState step(const SceneState& s, const Action& a) const;

  Observation render(const SceneState& s) const;

  // Flat ground-truth vector (debug observation mode).
  std::vector<double> state_vector(const SceneState& s) const;

  bool success(const SceneState& s, const GoalSpec& g) const;
};

// ---------------------------------------------------------------------------
// Goal-class registry: fixed, enumerable goal identities used for policy
// conditioning. open=0, close=1, move(color c, region r) = 2 + 2c + r.
// ---------------------------------------------------------------------------

int n_goal_classes();
int goal_class_of(const GoalSpec& goal, const SceneState& scene0);
std::string instruction_of(const TaskSpec& task);  // display string only

// ---------------------------------------------------------------------------
// Suites, demonstrations, augmentation.
// ---------------------------------------------------------------------------

struct TaskSuite {
  std::vector<TaskSpec> train;
  std::vector<TaskSpec> eval;
};

// Cycles the four base archetypes; initial scenes are disjoint between splits
// while both splits share the archetype set (needs enough eval slots).
TaskSuite generate_task_suite(const EnvConfig& cfg, uint64_t seed, int n_tasks,
                              double split_fraction);

// Adds k non-goal objects on free cells; colors stay unique per scene. Throws
// AugmentationError when no free color/space remains.
TaskSpec inject_distractors(const EnvConfig& cfg, const TaskSpec& task, int k, uint64_t seed);

// Enumerates alternative goals achievable in the unchanged scene (other
// object/region pairs, opposite slider direction), keeping only those the
// noise-free scripted expert solves within the horizon.
std::vector<TaskSpec> propose_novel_instructions(const EnvConfig& cfg, const TaskSpec& task,
                                                 uint64_t seed);

// Proportional controller over approach -> grasp -> carry -> release (or
// slider drag) with additive uniform noise of the given magnitude.
Action scripted_expert(const EnvConfig& cfg, const SceneState& s, const GoalSpec& g,
                       double noise, Rng& rng);

struct Trajectory {
  std::string task_id;
  GoalSpec goal;
  int goal_class = 0;
  Provenance provenance = Provenance::base;
  std::string source;  // env_expert | env_policy | world_model | iter_sft
  uint64_t seed = 0;
  std::vector<Observation> observations;  // horizon + 1
  std::vector<Action> actions;            // horizon
  bool success = false;                   // any-frame ground truth when known
};

struct Dataset {
  std::vector<Trajectory> trajectories;
};

// Rolls the scripted expert on every task; stores full trajectories including
// failures, with per-trajectory provenance and seeds.
Dataset collect_demonstrations(const EnvConfig& cfg, const std::vector<TaskSpec>& suite,
                               int n_per_task, double noise, uint64_t seed);

// Rolls an arbitrary per-step controller in the ground-truth environment.
Trajectory rollout_env(const EnvConfig& cfg, const TaskSpec& task, uint64_t reset_seed,
                       const std::function<Action(const Observation&, int step)>& act);

}  // namespace wmgym::envsim
