#include <gtest/gtest.h>

#include <cmath>

#include "wmgym/rewarder.hpp"

using namespace wmgym;
using namespace wmgym::envsim;
using namespace wmgym::rewarder;

namespace {

EnvConfig cfg0() {
  EnvConfig c;
  c.jitter = 0.0;
  return c;
}

Trajectory expert_trajectory(const EnvConfig& cfg, const TaskSpec& task, double noise,
                             uint64_t seed) {
  Env env{cfg};
  Trajectory traj;
  traj.task_id = task.task_id;
  traj.goal = task.goal;
  traj.goal_class = goal_class_of(task.goal, task.scene0);
  traj.source = "env_expert";
  auto [state, obs] = env.reset(task, seed);
  traj.observations.push_back(obs);
  Rng rng(seed);
  traj.success = env.success(state, task.goal);
  for (int t = 0; t < cfg.horizon; ++t) {
    Action a = scripted_expert(cfg, state, task.goal, noise, rng);
    state = env.step(state, a);
    traj.actions.push_back(a);
    traj.observations.push_back(env.render(state));
    if (env.success(state, task.goal)) traj.success = true;
  }
  return traj;
}

std::vector<TaskSpec> base_tasks(const EnvConfig& cfg, uint64_t seed, int n) {
  auto suite = generate_task_suite(cfg, seed, n, 0.5);
  std::vector<TaskSpec> all = suite.train;
  all.insert(all.end(), suite.eval.begin(), suite.eval.end());
  return all;
}

}  // namespace

TEST(Decode, RoundTripRecoversPositions) {
  EnvConfig c = cfg0();
  Env env{c};
  auto tasks = base_tasks(c, 21, 12);
  double px = 1.0 / c.width;
  for (const auto& task : tasks) {
    DecodedScene d = decode_scene(env.render(task.scene0));
    for (const auto& o : task.scene0.objects) {
      const auto& est = d.objects[o.color_index % 4];
      ASSERT_GT(est.confidence, 0.0) << task.task_id;
      EXPECT_LE(dist(est.pos, o.pos), px) << task.task_id << " obj " << o.id;
    }
    ASSERT_GT(d.gripper.confidence, 0.0);
    EXPECT_LE(dist(d.gripper.pos, task.scene0.gripper_pos), px);
    EXPECT_EQ(d.gripper_closed, task.scene0.gripper_closed);
    for (const auto& f : task.scene0.fixtures) {
      if (f.kind == FixtureKind::slider) {
        ASSERT_GT(d.slider_confidence, 0.0);
        EXPECT_NEAR(d.slider_openness, f.slider_openness, 0.09);
      }
    }
  }
}

TEST(Decode, BlankImageAllZeroConfidence) {
  Observation obs;
  obs.width = 16;
  obs.height = 16;
  obs.channels = 3;
  obs.pixels.assign(16 * 16 * 3, 0.0);
  DecodedScene d = decode_scene(obs);
  for (const auto& o : d.objects) EXPECT_EQ(o.confidence, 0.0);
  EXPECT_EQ(d.gripper.confidence, 0.0);
  EXPECT_EQ(d.sink.confidence, 0.0);
  EXPECT_EQ(d.basket.confidence, 0.0);
  EXPECT_EQ(d.slider_confidence, 0.0);
}

TEST(Decode, HeldObjectVisibleThroughGripperRing) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task;
  for (const auto& t : base_tasks(c, 4, 8)) {
    if (t.goal.kind == GoalKind::move_object_to_region) {
      task = t;
      break;
    }
  }
  SceneState s = task.scene0;
  s.gripper_pos = s.objects[0].pos;
  s = env.step(s, Action{0.0, 0.0, 1.0});
  ASSERT_TRUE(s.objects[0].held);
  DecodedScene d = decode_scene(env.render(s));
  EXPECT_GT(d.objects[0].confidence, 0.0);
  EXPECT_TRUE(d.gripper_closed);
  EXPECT_TRUE(d.held[0]);
}

TEST(JudgeBinary, NoiseFreeVerdicts) {
  EnvConfig c = cfg0();
  JudgeConfig jc;
  for (const auto& task : base_tasks(c, 31, 8)) {
    Trajectory good = expert_trajectory(c, task, 0.0, 7);
    ASSERT_TRUE(good.success);
    EXPECT_EQ(judge_binary(good, jc, 0), 1) << task.task_id;

    // stationary trajectory never succeeds
    Env env{c};
    Trajectory idle;
    idle.goal = task.goal;
    idle.goal_class = goal_class_of(task.goal, task.scene0);
    for (int i = 0; i < 10; ++i) idle.observations.push_back(env.render(task.scene0));
    EXPECT_EQ(judge_binary(idle, jc, 0), 0) << task.task_id;
  }
}

TEST(JudgeBinary, NoiseFreeFidelityOnExpertCorpus) {
  // judge == ground-truth any-frame success across noise levels
  EnvConfig c = cfg0();
  c.jitter = 0.05;
  JudgeConfig jc;
  auto tasks = base_tasks(c, 77, 8);
  int cases = 0;
  for (const auto& task : tasks) {
    for (double noise : {0.0, 0.15, 0.3}) {
      for (uint64_t seed = 0; seed < 4; ++seed) {
        Trajectory traj = expert_trajectory(c, task, noise, 1000 + seed);
        EXPECT_EQ(judge_binary(traj, jc, 0), traj.success ? 1 : 0)
            << task.task_id << " noise=" << noise << " seed=" << seed;
        ++cases;
      }
    }
  }
  EXPECT_EQ(cases, 8 * 3 * 4);
}

TEST(JudgeBinary, FlipRateCalibration) {
  EnvConfig c = cfg0();
  TaskSpec task = base_tasks(c, 31, 8)[0];
  Trajectory good = expert_trajectory(c, task, 0.0, 7);
  ASSERT_TRUE(good.success);
  JudgeConfig jc;
  jc.flip_rate = 0.5;
  int ones = 0;
  int n = 10000;
  for (int i = 0; i < n; ++i) ones += judge_binary(good, jc, 1000 + i);
  EXPECT_NEAR(static_cast<double>(ones) / n, 0.5, 0.02);
}

TEST(JudgeMajority, NoiseFreeEqualsBinaryAndCalibrates) {
  EnvConfig c = cfg0();
  TaskSpec task = base_tasks(c, 31, 8)[0];
  Trajectory good = expert_trajectory(c, task, 0.0, 7);
  JudgeConfig jc;
  EXPECT_EQ(judge_majority(good, jc, 3), judge_binary(good, jc, 3));

  // error rate of 5-vote majority at flip 0.2: P[Binomial(5,0.2) >= 3] = 0.05792
  jc.flip_rate = 0.2;
  int wrong = 0;
  int n = 10000;
  for (int i = 0; i < n; ++i) {
    wrong += judge_majority(good, jc, 5000 + i) == 1 ? 0 : 1;
  }
  EXPECT_NEAR(static_cast<double>(wrong) / n, 0.05792, 0.005);
}

TEST(JudgeMajority, DominatesSingleJudgeUnderNoise) {
  EnvConfig c = cfg0();
  TaskSpec task = base_tasks(c, 31, 8)[0];
  Trajectory good = expert_trajectory(c, task, 0.0, 7);
  int n = 4000;
  for (double flip : {0.1, 0.2, 0.3}) {
    JudgeConfig jc;
    jc.flip_rate = flip;
    int wrong_single = 0, wrong_major = 0;
    for (int i = 0; i < n; ++i) {
      wrong_single += judge_binary(good, jc, 91000 + i) == 1 ? 0 : 1;
      wrong_major += judge_majority(good, jc, 17000 + i) == 1 ? 0 : 1;
    }
    EXPECT_LE(wrong_major, wrong_single) << "flip=" << flip;
  }
}

TEST(Dense, HandComputedSums) {
  // one step with all five partials true and no success
  StepPredicates all5;
  all5.is_grasped = all5.consecutive_grasp = all5.source_object_grasped = true;
  all5.lifted = all5.lifted_significantly = true;
  EXPECT_DOUBLE_EQ(dense_reward_from_predicates({all5}), 0.5);

  // 40 steps: is_grasped on 10 steps only, success on the final 3
  std::vector<StepPredicates> steps(40);
  for (int i = 0; i < 10; ++i) steps[2 * i].is_grasped = true;  // non-adjacent
  for (int i = 37; i < 40; ++i) steps[i].success = true;
  EXPECT_DOUBLE_EQ(dense_reward_from_predicates(steps), 10 * 0.1 + 3 * 1.0);
}

TEST(Dense, UntouchedTrajectoryScoresZero) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task = base_tasks(c, 31, 8)[0];
  Trajectory idle;
  idle.goal = task.goal;
  idle.goal_class = goal_class_of(task.goal, task.scene0);
  for (int i = 0; i < 12; ++i) idle.observations.push_back(env.render(task.scene0));
  idle.actions.resize(11);
  EXPECT_DOUBLE_EQ(dense_reward(idle), 0.0);
}

TEST(Dense, ExpertTrajectoryEarnsPartialsAndSuccess) {
  EnvConfig c = cfg0();
  for (const auto& task : base_tasks(c, 31, 8)) {
    Trajectory good = expert_trajectory(c, task, 0.0, 7);
    double r = dense_reward(good);
    EXPECT_GE(r, 1.0) << task.task_id;  // at least one success step
    auto steps = step_predicates(good);
    bool any_grasp = false;
    for (const auto& p : steps) {
      if (p.lifted_significantly) EXPECT_TRUE(p.lifted);
      if (p.consecutive_grasp) EXPECT_TRUE(p.is_grasped);
      any_grasp = any_grasp || p.is_grasped;
    }
    EXPECT_TRUE(any_grasp) << task.task_id;
  }
}

TEST(Dense, AppendingSuccessStepAddsAtLeastOne) {
  EnvConfig c = cfg0();
  Env env{c};
  TaskSpec task;
  for (const auto& t : base_tasks(c, 4, 8)) {
    if (t.goal.kind == GoalKind::move_object_to_region) {
      task = t;
      break;
    }
  }
  Trajectory traj;
  traj.goal = task.goal;
  traj.goal_class = goal_class_of(task.goal, task.scene0);
  traj.observations.push_back(env.render(task.scene0));
  traj.observations.push_back(env.render(task.scene0));
  double before = dense_reward(traj);

  SceneState done = task.scene0;
  const Fixture* region = done.find_fixture(task.goal.target_id);
  for (auto& o : done.objects) {
    if (o.id == task.goal.subject_id) o.pos = region->pos;
  }
  traj.observations.push_back(env.render(done));
  double after = dense_reward(traj);
  EXPECT_GE(after - before, 1.0);
}

TEST(RewardOf, ModeDispatch) {
  EnvConfig c = cfg0();
  TaskSpec task = base_tasks(c, 31, 8)[0];
  Trajectory good = expert_trajectory(c, task, 0.0, 7);
  JudgeConfig jc;
  EXPECT_DOUBLE_EQ(reward_of(good, jc, 0), 1.0);
  jc.mode = "dense";
  EXPECT_GT(reward_of(good, jc, 0), 1.0);
  jc.mode = "nope";
  EXPECT_THROW(reward_of(good, jc, 0), ConfigError);
  jc.mode = "binary";
  jc.votes = 4;
  EXPECT_THROW(reward_of(good, jc, 0), ConfigError);
}
