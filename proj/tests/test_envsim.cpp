#include <gtest/gtest.h>

#include <set>

#include "wmgym/envsim.hpp"

using namespace wmgym;
using namespace wmgym::envsim;

namespace {

EnvConfig cfg0() {
  EnvConfig c;
  c.jitter = 0.0;
  return c;
}

TaskSpec sample_move_task(uint64_t seed = 3) {
  EnvConfig c = cfg0();
  auto suite = generate_task_suite(c, seed, 8, 0.5);
  for (const auto& t : suite.train) {
    if (t.goal.kind == GoalKind::move_object_to_region) return t;
  }
  throw std::runtime_error("no move task generated");
}

TaskSpec sample_slider_task(bool open_task, uint64_t seed = 3) {
  EnvConfig c = cfg0();
  auto suite = generate_task_suite(c, seed, 8, 0.5);
  for (const auto& t : suite.train) {
    if (open_task && t.goal.kind == GoalKind::open_slider) return t;
    if (!open_task && t.goal.kind == GoalKind::close_slider) return t;
  }
  throw std::runtime_error("no slider task generated");
}

SceneState run_expert(const EnvConfig& cfg, const TaskSpec& task, double noise, Rng& rng,
                      int steps) {
  Env env{cfg};
  SceneState s = task.scene0;
  for (int t = 0; t < steps; ++t) {
    s = env.step(s, scripted_expert(cfg, s, task.goal, noise, rng));
  }
  return s;
}

}  // namespace

TEST(Reset, ZeroJitterIdentityAndDeterminism) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  auto [s1, o1] = env.reset(task, 1);
  auto [s2, o2] = env.reset(task, 2);
  EXPECT_EQ(s1.gripper_pos.x, task.scene0.gripper_pos.x);
  EXPECT_EQ(s1.objects[0].pos.x, task.scene0.objects[0].pos.x);
  EXPECT_EQ(o1.pixels, o2.pixels);  // zero jitter: seed irrelevant

  auto [s3, o3] = env.reset(task, 1);
  EXPECT_EQ(o1.pixels, o3.pixels);  // determinism
}

TEST(Reset, JitterBoundedAndSeedDependent) {
  EnvConfig c = cfg0();
  c.jitter = 0.05;
  Env env{c};
  TaskSpec task = sample_move_task();
  auto [s1, o1] = env.reset(task, 1);
  auto [s2, o2] = env.reset(task, 2);
  for (size_t i = 0; i < s1.objects.size(); ++i) {
    EXPECT_LE(std::abs(s1.objects[i].pos.x - task.scene0.objects[i].pos.x), c.jitter + 1e-12);
    EXPECT_LE(std::abs(s1.objects[i].pos.y - task.scene0.objects[i].pos.y), c.jitter + 1e-12);
  }
  bool differs = false;
  for (size_t i = 0; i < s1.objects.size(); ++i) {
    if (s1.objects[i].pos.x != s2.objects[i].pos.x) differs = true;
  }
  EXPECT_TRUE(differs);
}

TEST(Reset, DanglingGoalReferenceThrows) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  task.goal.subject_id = "ghost";
  EXPECT_THROW(env.reset(task, 0), ConfigError);
}

TEST(Step, ZeroActionIdentity) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  SceneState s = task.scene0;
  SceneState ns = env.step(s, Action{0.0, 0.0, -1.0});
  EXPECT_EQ(ns.gripper_pos.x, s.gripper_pos.x);
  EXPECT_EQ(ns.gripper_pos.y, s.gripper_pos.y);
  EXPECT_EQ(ns.objects[0].pos.x, s.objects[0].pos.x);
  EXPECT_EQ(ns.gripper_closed, s.gripper_closed);
}

TEST(Step, GraspTogglePicksNearestObjectWithinRadius) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  SceneState s = task.scene0;
  s.gripper_pos = s.objects[0].pos;
  SceneState ns = env.step(s, Action{0.0, 0.0, 1.0});
  EXPECT_TRUE(ns.gripper_closed);
  EXPECT_TRUE(ns.objects[0].held);
  // held object follows the gripper
  SceneState ns2 = env.step(ns, Action{1.0, 0.0, -1.0});
  EXPECT_EQ(ns2.objects[0].pos.x, ns2.gripper_pos.x);
  // second toggle releases
  SceneState ns3 = env.step(ns2, Action{0.0, 0.0, 1.0});
  EXPECT_FALSE(ns3.gripper_closed);
  EXPECT_FALSE(ns3.objects[0].held);
}

TEST(Step, WorkspaceClampSaturates) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  SceneState s = task.scene0;
  for (int i = 0; i < 60; ++i) s = env.step(s, Action{1.0, 0.0, -1.0});
  EXPECT_DOUBLE_EQ(s.gripper_pos.x, 1.0);
}

TEST(Step, PureFunctionDeterminism) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_slider_task(true);
  SceneState s = task.scene0;
  Action a{0.4, -0.2, 0.7};
  SceneState r1 = env.step(s, a);
  SceneState r2 = env.step(s, a);
  EXPECT_EQ(r1.gripper_pos.x, r2.gripper_pos.x);
  EXPECT_EQ(r1.fixtures[0].slider_openness, r2.fixtures[0].slider_openness);
}

TEST(Step, SliderDragRequiresClosedEmptyGripperNearHandle) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_slider_task(true);
  SceneState s = task.scene0;
  const Fixture& sl = *s.find_fixture("slider");
  double h_x = sl.pos.x + sl.slider_openness * sl.extent;
  s.gripper_pos = {h_x, sl.pos.y};
  // open gripper near handle: no drag
  SceneState ns = env.step(s, Action{1.0, 0.0, -1.0});
  EXPECT_EQ(ns.find_fixture("slider")->slider_openness, sl.slider_openness);
  // close on handle, then drag +x
  s.gripper_pos = {h_x, sl.pos.y};
  ns = env.step(s, Action{0.0, 0.0, 1.0});
  EXPECT_TRUE(ns.gripper_closed);
  double before = ns.find_fixture("slider")->slider_openness;
  SceneState ns2 = env.step(ns, Action{1.0, 0.0, -1.0});
  EXPECT_GT(ns2.find_fixture("slider")->slider_openness, before);
}

TEST(Render, EmptySceneIsBackgroundOnly) {
  EnvConfig c = cfg0();
  Env env{c};
  SceneState empty;
  empty.gripper_pos = {-10.0, -10.0};  // clamp puts the ring at the corner
  SceneState bare;
  bare.objects.clear();
  bare.fixtures.clear();
  bare.gripper_pos = {0.5, 0.5};
  Observation img = env.render(bare);
  const Palette& pal = palette();
  int non_background = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.at(x, y, 0) != pal.background.r) non_background++;
    }
  }
  EXPECT_EQ(non_background, 8);  // just the gripper ring
}

TEST(Render, DeterministicAndCentered) {
  EnvConfig c = cfg0();
  Env env{c};
  SceneState s;
  s.gripper_pos = {0.1, 0.9};
  s.objects.push_back({"obj0", 0, {0.5, 0.5}, false});
  Observation a = env.render(s);
  Observation b = env.render(s);
  EXPECT_EQ(a.pixels, b.pixels);
  // 2x2 block centered on the grid midpoint covers pixels {7,8}x{7,8}
  const Palette& pal = palette();
  for (int y = 7; y <= 8; ++y) {
    for (int x = 7; x <= 8; ++x) {
      EXPECT_EQ(a.at(x, y, 0), pal.objects[0].r);
      EXPECT_EQ(a.at(x, y, 2), pal.objects[0].b);
    }
  }
  EXPECT_EQ(a.at(6, 7, 0), pal.background.r);
  EXPECT_EQ(a.at(9, 8, 0), pal.background.r);
}

TEST(Render, InjectiveOnCoarseGridScenes) {
  // exhaustive small-grid enumeration: distinct coarse placements of the
  // gripper and two colored objects render to distinct images
  EnvConfig c = cfg0();
  Env env{c};
  std::set<std::vector<double>> seen;
  int count = 0;
  for (int g = 0; g < 4; ++g) {
    for (int o1 = 0; o1 < 4; ++o1) {
      for (int o2 = 0; o2 < 4; ++o2) {
        if (o1 == o2 || o1 == g || o2 == g) continue;
        auto cell = [](int i) { return Vec2{0.2 + 0.2 * i, 0.3 + 0.12 * i}; };
        SceneState s;
        s.gripper_pos = cell(g);
        s.objects.push_back({"a", 1, cell(o1), false});
        s.objects.push_back({"b", 2, cell(o2), false});
        Observation img = env.render(s);
        EXPECT_TRUE(seen.insert(img.pixels).second);
        ++count;
      }
    }
  }
  EXPECT_EQ(count, 24);
}

TEST(Success, MoveThresholdBoundary) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  SceneState s = task.scene0;
  const Fixture* region = s.find_fixture(task.goal.target_id);
  // exactly at center
  for (auto& o : s.objects) {
    if (o.id == task.goal.subject_id) o.pos = region->pos;
  }
  EXPECT_TRUE(env.success(s, task.goal));
  // just outside the threshold
  for (auto& o : s.objects) {
    if (o.id == task.goal.subject_id) {
      o.pos = {region->pos.x + task.goal.threshold + 0.01, region->pos.y};
    }
  }
  EXPECT_FALSE(env.success(s, task.goal));
  // held at center does not count
  for (auto& o : s.objects) {
    if (o.id == task.goal.subject_id) {
      o.pos = region->pos;
      o.held = true;
    }
  }
  s.gripper_closed = true;
  EXPECT_FALSE(env.success(s, task.goal));
}

TEST(Success, SliderCutoffs) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_slider_task(true);
  SceneState s = task.scene0;
  for (auto& f : s.fixtures) {
    if (f.kind == FixtureKind::slider) f.slider_openness = 0.9;
  }
  GoalSpec open_goal{GoalKind::open_slider, "slider", "", 0.8};
  EXPECT_TRUE(env.success(s, open_goal));
  for (auto& f : s.fixtures) {
    if (f.kind == FixtureKind::slider) f.slider_openness = 0.79;
  }
  EXPECT_FALSE(env.success(s, open_goal));
}

TEST(Suite, SplitCountsAndDeterminism) {
  EnvConfig c = cfg0();
  auto s1 = generate_task_suite(c, 7, 10, 0.8);
  EXPECT_EQ(s1.train.size(), 8u);
  EXPECT_EQ(s1.eval.size(), 2u);
  auto s2 = generate_task_suite(c, 7, 10, 0.8);
  for (size_t i = 0; i < s1.train.size(); ++i) {
    EXPECT_EQ(s1.train[i].task_id, s2.train[i].task_id);
    EXPECT_EQ(s1.train[i].scene0.gripper_pos.x, s2.train[i].scene0.gripper_pos.x);
  }
}

TEST(Suite, KindsInBothSplitsAndDisjointScenes) {
  EnvConfig c = cfg0();
  auto suite = generate_task_suite(c, 11, 40, 0.8);
  EXPECT_EQ(suite.train.size() + suite.eval.size(), 40u);
  std::set<std::string> train_kinds, eval_kinds;
  for (const auto& t : suite.train) train_kinds.insert(t.kind_label());
  for (const auto& t : suite.eval) eval_kinds.insert(t.kind_label());
  EXPECT_EQ(train_kinds.size(), 4u);
  EXPECT_EQ(eval_kinds, train_kinds);

  auto scene_key = [](const TaskSpec& t) {
    std::string k = std::to_string(t.scene0.gripper_pos.x);
    for (const auto& o : t.scene0.objects) {
      k += "," + std::to_string(o.pos.x) + "," + std::to_string(o.pos.y);
    }
    return k;
  };
  std::set<std::string> train_scenes;
  for (const auto& t : suite.train) train_scenes.insert(scene_key(t));
  for (const auto& t : suite.eval) {
    EXPECT_EQ(train_scenes.count(scene_key(t)), 0u);
  }
}

TEST(Distractors, CountGoalPreservationAndSolvability) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  TaskSpec aug = inject_distractors(c, task, 1, 99);
  EXPECT_EQ(aug.scene0.objects.size(), task.scene0.objects.size() + 1);
  EXPECT_EQ(aug.provenance, Provenance::distractor_augmented);
  const ObjectState* before = task.scene0.find_object(task.goal.subject_id);
  const ObjectState* after = aug.scene0.find_object(task.goal.subject_id);
  EXPECT_EQ(before->pos.x, after->pos.x);
  EXPECT_EQ(before->pos.y, after->pos.y);
  EXPECT_EQ(aug.goal.target_id, task.goal.target_id);

  // expert still solves the augmented task
  Rng rng(0);
  SceneState end = run_expert(c, aug, 0.0, rng, c.horizon);
  EXPECT_TRUE(env.success(end, aug.goal));
}

TEST(Distractors, SuccessInvariantUnderInjection) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  Rng rng(5);
  SceneState s = task.scene0;
  for (int t = 0; t < 25; ++t) {
    s = env.step(s, scripted_expert(c, s, task.goal, 0.0, rng));
  }
  TaskSpec aug = inject_distractors(c, task, 2, 40);
  SceneState s_aug = s;
  for (const auto& o : aug.scene0.objects) {
    if (s_aug.find_object(o.id) == nullptr) s_aug.objects.push_back(o);
  }
  EXPECT_EQ(env.success(s, task.goal), env.success(s_aug, task.goal));
}

TEST(Novel, MoveSceneYieldsAlternatives) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = sample_move_task();
  auto novel = propose_novel_instructions(c, task, 0);
  EXPECT_GE(novel.size(), 1u);
  for (const auto& t : novel) {
    EXPECT_EQ(t.provenance, Provenance::novel_instruction);
    EXPECT_FALSE(env.success(t.scene0, t.goal));
    Rng rng(0);
    SceneState end = run_expert(c, t, 0.0, rng, c.horizon);
    EXPECT_TRUE(env.success(end, t.goal)) << t.task_id;
  }
}

TEST(Novel, BareSceneYieldsNothing) {
  EnvConfig c = cfg0();
  TaskSpec t;
  t.scene0.objects.push_back({"obj0", 0, {0.5, 0.5}, false});
  t.scene0.fixtures.push_back(
      {FixtureKind::target_region, "sink", geometry().sink_center, geometry().sink_half, 0.0});
  t.goal = {GoalKind::move_object_to_region, "obj0", "sink", c.move_threshold};
  t.task_id = "bare";
  auto novel = propose_novel_instructions(c, t, 0);
  EXPECT_TRUE(novel.empty());
}

TEST(Expert, CompletenessOnBaseSuite) {
  // noise-free expert solves every generated base task within the horizon
  EnvConfig c = cfg0();
  Env env{c};
  auto suite = generate_task_suite(c, 1234, 24, 0.75);
  std::vector<TaskSpec> all = suite.train;
  all.insert(all.end(), suite.eval.begin(), suite.eval.end());
  for (const auto& task : all) {
    Rng rng(0);
    SceneState s = task.scene0;
    bool solved = false;
    for (int t = 0; t < c.horizon && !solved; ++t) {
      s = env.step(s, scripted_expert(c, s, task.goal, 0.0, rng));
      solved = env.success(s, task.goal);
    }
    EXPECT_TRUE(solved) << task.task_id;
  }
}

TEST(Expert, PointsTowardDistantObject) {
  EnvConfig c = cfg0();
  TaskSpec task = sample_move_task();
  SceneState s = task.scene0;
  s.gripper_pos = {0.05, 0.05};
  const ObjectState* subject = s.find_object(task.goal.subject_id);
  Rng rng(0);
  Action a = scripted_expert(c, s, task.goal, 0.0, rng);
  double dot = a.dx * (subject->pos.x - s.gripper_pos.x) + a.dy * (subject->pos.y - s.gripper_pos.y);
  EXPECT_GT(dot, 0.0);
}

TEST(Expert, DeterministicGivenSeedStream) {
  EnvConfig c = cfg0();
  TaskSpec task = sample_move_task();
  Rng r1(9), r2(9);
  Action a1 = scripted_expert(c, task.scene0, task.goal, 0.3, r1);
  Action a2 = scripted_expert(c, task.scene0, task.goal, 0.3, r2);
  EXPECT_EQ(a1.dx, a2.dx);
  EXPECT_EQ(a1.dy, a2.dy);
  EXPECT_EQ(a1.grip, a2.grip);
}

TEST(Demos, NoiseFreeAllSuccessfulAndCounted) {
  EnvConfig c = cfg0();
  c.jitter = 0.05;  // train-style resets
  auto suite = generate_task_suite(c, 2, 8, 0.5);
  Dataset data = collect_demonstrations(c, suite.train, 3, 0.0, 77);
  EXPECT_EQ(data.trajectories.size(), suite.train.size() * 3);
  for (const auto& tr : data.trajectories) {
    EXPECT_TRUE(tr.success) << tr.task_id;
    EXPECT_EQ(tr.observations.size(), static_cast<size_t>(c.horizon) + 1);
    EXPECT_EQ(tr.actions.size(), static_cast<size_t>(c.horizon));
    EXPECT_EQ(tr.source, "env_expert");
  }
}

TEST(Demos, ModerateNoiseKeepsExpertMostlySuccessful) {
  EnvConfig c = cfg0();
  c.jitter = 0.05;
  auto suite = generate_task_suite(c, 2, 8, 0.5);
  Dataset data = collect_demonstrations(c, suite.train, 6, 0.3, 5);
  int ok = 0;
  for (const auto& tr : data.trajectories) ok += tr.success ? 1 : 0;
  double rate = static_cast<double>(ok) / data.trajectories.size();
  EXPECT_GT(rate, 0.7) << "noisy expert success collapsed: " << rate;
}

TEST(GoalClasses, RegistryIsStable) {
  EXPECT_EQ(n_goal_classes(), 10);
  TaskSpec move_task = sample_move_task();
  TaskSpec open_task = sample_slider_task(true);
  TaskSpec close_task = sample_slider_task(false);
  EXPECT_EQ(goal_class_of(open_task.goal, open_task.scene0), 0);
  EXPECT_EQ(goal_class_of(close_task.goal, close_task.scene0), 1);
  int mc = goal_class_of(move_task.goal, move_task.scene0);
  EXPECT_GE(mc, 2);
  EXPECT_LT(mc, 10);
  EXPECT_FALSE(instruction_of(move_task).empty());
}
