#include "wmgym/rewarder.hpp"

#include <algorithm>
#include <cmath>

namespace wmgym::rewarder {

using envsim::GoalKind;
using envsim::Observation;
using envsim::Rgb;
using envsim::Trajectory;
using envsim::Vec2;

void JudgeConfig::validate() const {
  if (flip_rate < 0.0 || flip_rate >= 1.0) throw ConfigError("flip_rate must be in [0,1)");
  if (votes < 1 || votes % 2 == 0) throw ConfigError("votes must be odd and >= 1");
  if (frame_stride < 1) throw ConfigError("frame_stride must be >= 1");
  if (mode != "binary" && mode != "dense") throw ConfigError("judge mode must be binary|dense");
}

namespace {

// Pixel classes for nearest-color classification.
enum PixelClass : int {
  kBackground = 0,
  kSink,
  kBasket,
  kRail,
  kHandle,
  kGripperOpen,
  kGripperClosed,
  kObj0,
  kNumClasses = kObj0 + 4,
};

struct ClassTable {
  std::array<Rgb, kNumClasses> colors;
  ClassTable() {
    const auto& pal = envsim::palette();
    colors[kBackground] = pal.background;
    colors[kSink] = pal.sink_region;
    colors[kBasket] = pal.basket_region;
    colors[kRail] = pal.rail;
    colors[kHandle] = pal.handle;
    colors[kGripperOpen] = pal.gripper_open;
    colors[kGripperClosed] = pal.gripper_closed;
    for (int i = 0; i < 4; ++i) colors[kObj0 + i] = pal.objects[i];
  }
};

double color_dist2(double r, double g, double b, const Rgb& c) {
  double dr = r - c.r, dg = g - c.g, db = b - c.b;
  return dr * dr + dg * dg + db * db;
}

struct ClassStats {
  double sx = 0.0, sy = 0.0;
  int count = 0;
  Vec2 centroid(int w, int h) const {
    return {(sx / count + 0.5) / w, (sy / count + 0.5) / h};
  }
};

constexpr double kMinConfidence = 0.15;
// Success demands crisp detections: genuine placements decode at high
// confidence, while model-hallucinated smears are faint and partial.
constexpr double kSuccessConfidence = 0.35;
constexpr double kHeldRadius = 0.10;

}  // namespace

DecodedScene decode_scene(const Observation& obs) {
  static const ClassTable table;
  std::array<ClassStats, kNumClasses> stats;
  for (int y = 0; y < obs.height; ++y) {
    for (int x = 0; x < obs.width; ++x) {
      double r = obs.at(x, y, 0), g = obs.at(x, y, 1), b = obs.at(x, y, 2);
      int best = 0;
      double best_d = color_dist2(r, g, b, table.colors[0]);
      for (int c = 1; c < kNumClasses; ++c) {
        double d = color_dist2(r, g, b, table.colors[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      stats[best].sx += x;
      stats[best].sy += y;
      stats[best].count += 1;
    }
  }

  const auto& geo = envsim::geometry();
  DecodedScene out;
  auto entity = [&](int cls, double expected) {
    DecodedEntity e;
    if (stats[cls].count > 0) {
      e.pos = stats[cls].centroid(obs.width, obs.height);
      e.confidence = std::min(1.0, stats[cls].count / expected);
    }
    return e;
  };

  // Regions are fixed scene furniture: pixels only confirm presence, the
  // position comes from the static geometry (objects parked inside a region
  // would otherwise bias its centroid).
  out.sink = entity(kSink, 16.0);
  out.sink.pos = geo.sink_center;
  out.basket = entity(kBasket, 16.0);
  out.basket.pos = geo.basket_center;
  out.handle = entity(kHandle, 4.0);
  for (int i = 0; i < 4; ++i) out.objects[i] = entity(kObj0 + i, 4.0);

  DecodedEntity open_g = entity(kGripperOpen, 8.0);
  DecodedEntity closed_g = entity(kGripperClosed, 8.0);
  if (closed_g.confidence > open_g.confidence) {
    out.gripper = closed_g;
    out.gripper_closed = true;
  } else {
    out.gripper = open_g;
    out.gripper_closed = false;
  }

  if (out.handle.confidence > 0.0) {
    out.slider_openness =
        std::clamp((out.handle.pos.x - geo.rail_origin.x) / geo.rail_travel, 0.0, 1.0);
    out.slider_confidence = out.handle.confidence;
  }

  for (int i = 0; i < 4; ++i) {
    out.held[i] = out.gripper_closed && out.gripper.confidence > 0.0 &&
                  out.objects[i].confidence > 0.0 &&
                  envsim::dist(out.objects[i].pos, out.gripper.pos) <= kHeldRadius;
  }
  return out;
}

envsim::SceneState DecodedScene::as_scene_state() const {
  envsim::SceneState s;
  s.gripper_pos = gripper.pos;
  s.gripper_closed = gripper_closed;
  for (int i = 0; i < 4; ++i) {
    if (objects[i].confidence > 0.0) {
      s.objects.push_back({"color" + std::to_string(i), i, objects[i].pos, held[i]});
    }
  }
  const auto& geo = envsim::geometry();
  if (sink.confidence > 0.0) {
    s.fixtures.push_back({envsim::FixtureKind::target_region, "sink", sink.pos, geo.sink_half, 0.0});
  }
  if (basket.confidence > 0.0) {
    s.fixtures.push_back(
        {envsim::FixtureKind::target_region, "basket", basket.pos, geo.basket_half, 0.0});
  }
  if (slider_confidence > 0.0) {
    s.fixtures.push_back({envsim::FixtureKind::slider, "slider", geo.rail_origin,
                          geo.rail_travel, slider_openness});
  }
  return s;
}

GoalView goal_view(const envsim::GoalSpec& goal, int goal_class) {
  GoalView v;
  v.kind = goal.kind;
  v.threshold = goal.threshold;
  if (goal.kind == GoalKind::move_object_to_region) {
    v.subject_color = (goal_class - 2) / 2;
    v.target_sink = ((goal_class - 2) % 2) == 0;
  }
  return v;
}

bool decoded_success(const DecodedScene& scene, const GoalView& goal) {
  switch (goal.kind) {
    case GoalKind::open_slider:
      return scene.slider_confidence >= kSuccessConfidence &&
             scene.slider_openness >= goal.threshold;
    case GoalKind::close_slider:
      return scene.slider_confidence >= kSuccessConfidence &&
             scene.slider_openness <= goal.threshold;
    case GoalKind::move_object_to_region: {
      const DecodedEntity& obj = scene.objects[goal.subject_color % 4];
      const DecodedEntity& region = goal.target_sink ? scene.sink : scene.basket;
      if (obj.confidence < kSuccessConfidence || region.confidence < kMinConfidence) {
        return false;
      }
      if (scene.held[goal.subject_color % 4]) return false;
      return envsim::dist(obj.pos, region.pos) <= goal.threshold;
    }
  }
  return false;
}

namespace {

std::vector<int> judged_frames(int n_frames, int stride) {
  // stride back from the final frame so a success that only appears at the
  // end is never missed
  std::vector<int> idx;
  for (int i = n_frames - 1; i >= 0; i -= stride) idx.push_back(i);
  std::reverse(idx.begin(), idx.end());
  return idx;
}

}  // namespace

int judge_binary(const Trajectory& traj, const JudgeConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (traj.observations.empty()) throw ConfigError("judge_binary: empty trajectory");
  GoalView goal = goal_view(traj.goal, traj.goal_class);
  int verdict = 0;
  if (cfg.any_frame) {
    for (int idx : judged_frames(static_cast<int>(traj.observations.size()), cfg.frame_stride)) {
      if (decoded_success(decode_scene(traj.observations[idx]), goal)) {
        verdict = 1;
        break;
      }
    }
  } else {
    verdict = decoded_success(decode_scene(traj.observations.back()), goal) ? 1 : 0;
  }
  if (cfg.flip_rate > 0.0) {
    Rng rng = Rng(seed).fork("judge_flip");
    if (rng.uniform() < cfg.flip_rate) verdict = 1 - verdict;
  }
  return verdict;
}

int judge_majority(const Trajectory& traj, const JudgeConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng root = Rng(seed).fork("majority");
  int ones = 0;
  for (int v = 0; v < cfg.votes; ++v) {
    ones += judge_binary(traj, cfg, root.fork(static_cast<uint64_t>(v)).key());
  }
  return ones * 2 > cfg.votes ? 1 : 0;
}

std::vector<StepPredicates> step_predicates(const Trajectory& traj) {
  GoalView goal = goal_view(traj.goal, traj.goal_class);
  const auto& geo = envsim::geometry();
  const double px = 1.0 / 16.0;  // one pixel-width in workspace units

  std::vector<StepPredicates> steps;
  if (traj.observations.size() < 2) return steps;

  DecodedScene first = decode_scene(traj.observations.front());
  double start_x = 0.0, start_y = 0.0, start_openness = first.slider_openness;
  bool subject_is_object = goal.kind == GoalKind::move_object_to_region;
  if (subject_is_object) {
    start_x = first.objects[goal.subject_color % 4].pos.x;
    start_y = first.objects[goal.subject_color % 4].pos.y;
  }

  bool prev_grasped = false;
  for (size_t t = 1; t < traj.observations.size(); ++t) {
    DecodedScene scene = decode_scene(traj.observations[t]);
    StepPredicates p;
    bool handle_engaged = scene.gripper_closed && scene.handle.confidence > 0.0 &&
                          envsim::dist(scene.gripper.pos, scene.handle.pos) <= 0.12;
    bool any_held = false;
    for (bool h : scene.held) any_held = any_held || h;

    double displacement = 0.0;
    if (subject_is_object) {
      const auto& obj = scene.objects[goal.subject_color % 4];
      p.source_object_grasped = scene.held[goal.subject_color % 4];
      if (obj.confidence > 0.0) {
        double dx = obj.pos.x - start_x, dy = obj.pos.y - start_y;
        displacement = std::sqrt(dx * dx + dy * dy);
      }
    } else {
      p.source_object_grasped = handle_engaged;
      displacement = std::abs(scene.slider_openness - start_openness) * geo.rail_travel;
    }
    p.is_grasped = any_held || handle_engaged;
    p.consecutive_grasp = p.is_grasped && prev_grasped;
    p.lifted = p.source_object_grasped && displacement >= px;
    p.lifted_significantly = p.lifted && displacement >= 3.0 * px;
    p.success = decoded_success(scene, goal);
    steps.push_back(p);
    prev_grasped = p.is_grasped;
  }
  return steps;
}

double dense_reward_from_predicates(const std::vector<StepPredicates>& steps) {
  double total = 0.0;
  for (const auto& p : steps) {
    int partials = static_cast<int>(p.is_grasped) + static_cast<int>(p.consecutive_grasp) +
                   static_cast<int>(p.source_object_grasped) + static_cast<int>(p.lifted) +
                   static_cast<int>(p.lifted_significantly);
    total += 0.1 * partials + (p.success ? 1.0 : 0.0);
  }
  return total;
}

double dense_reward(const Trajectory& traj) {
  return dense_reward_from_predicates(step_predicates(traj));
}

double reward_of(const Trajectory& traj, const JudgeConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (cfg.mode == "dense") return dense_reward(traj);
  return static_cast<double>(judge_binary(traj, cfg, seed));
}

}  // namespace wmgym::rewarder
