#include <gtest/gtest.h>

#include "wmgym/sft.hpp"

using namespace wmgym;
using namespace wmgym::envsim;
using namespace wmgym::sft;

namespace {

EnvConfig small_env() {
  EnvConfig c;
  c.width = 12;
  c.height = 12;
  c.jitter = 0.03;
  c.horizon = 20;
  return c;
}

policy::PolicyConfig small_pc() {
  policy::PolicyConfig c;
  c.hidden = {64};
  c.obs_width = 12;
  c.obs_height = 12;
  return c;
}

}  // namespace

TEST(BcTrain, LossDecreasesOnDemos) {
  EnvConfig ec = small_env();
  auto suite = generate_task_suite(ec, 3, 8, 0.5);
  Dataset demos = collect_demonstrations(ec, suite.train, 12, 0.3, 7);
  policy::PolicyConfig pc = small_pc();
  ParamStore ps = policy::init_policy(pc, 1);
  SFTConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 16;
  BcStats st = bc_train(ps, pc, demos, cfg, 5);
  ASSERT_EQ(st.loss_curve.size(), 300u);
  double late = 0.0;
  for (int i = 270; i < 300; ++i) late += st.loss_curve[i];
  late /= 30.0;
  EXPECT_LT(late, 0.6 * st.loss_curve[0]);  // vs the untrained first batch
}

TEST(BcTrain, ZeroStepsNoChangeAndEmptyThrows) {
  EnvConfig ec = small_env();
  auto suite = generate_task_suite(ec, 3, 8, 0.5);
  Dataset demos = collect_demonstrations(ec, suite.train, 2, 0.0, 7);
  policy::PolicyConfig pc = small_pc();
  ParamStore ps = policy::init_policy(pc, 1);
  std::vector<double> before = ps.param("fc0.W").data;
  SFTConfig cfg;
  cfg.steps = 0;
  bc_train(ps, pc, demos, cfg, 5);
  EXPECT_EQ(ps.param("fc0.W").data, before);
  Dataset empty;
  cfg.steps = 10;
  EXPECT_THROW(bc_train(ps, pc, empty, cfg, 5), ConfigError);
}

TEST(BcTrain, MemorizesSingleDemonstration) {
  EnvConfig ec = small_env();
  ec.jitter = 0.0;
  auto suite = generate_task_suite(ec, 3, 8, 0.5);
  Dataset demos = collect_demonstrations(ec, {suite.train[0]}, 1, 0.0, 7);
  ASSERT_EQ(demos.trajectories.size(), 1u);
  ASSERT_TRUE(demos.trajectories[0].success);

  policy::PolicyConfig pc = small_pc();
  ParamStore ps = policy::init_policy(pc, 1);
  SFTConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 4;
  cfg.lr = 2e-3;
  bc_train(ps, pc, demos, cfg, 5);

  auto samples = chunk_samples(demos, pc, true);
  for (const auto& s : samples) {
    policy::ActionChunk g = policy::greedy_chunk(ps, pc, *s.obs, s.goal_class);
    EXPECT_EQ(g.tokens, s.tokens);
  }
}

TEST(ChunkSamples, LayoutAndSuccessFilter) {
  EnvConfig ec = small_env();
  auto suite = generate_task_suite(ec, 3, 8, 0.5);
  Dataset demos = collect_demonstrations(ec, suite.train, 3, 0.0, 7);
  policy::PolicyConfig pc = small_pc();
  auto all = chunk_samples(demos, pc, false);
  EXPECT_EQ(all.size(), demos.trajectories.size() * (ec.horizon / pc.chunk_len));
  for (const auto& s : all) {
    EXPECT_EQ(static_cast<int>(s.tokens.size()), pc.tokens_per_chunk());
  }
  demos.trajectories[0].success = false;
  auto ok_only = chunk_samples(demos, pc, true);
  EXPECT_EQ(ok_only.size(), all.size() - (ec.horizon / pc.chunk_len));
}

TEST(IterSft, BudgetParityKeepCountsAndFilterSemantics) {
  EnvConfig ec = small_env();
  Env env{ec};
  auto suite = generate_task_suite(ec, 3, 8, 0.5);
  Dataset demos = collect_demonstrations(ec, suite.train, 4, 0.3, 7);
  policy::PolicyConfig pc = small_pc();
  ParamStore ps = policy::init_policy(pc, 1);
  SFTConfig bc_cfg;
  bc_cfg.steps = 150;
  bc_train(ps, pc, demos, bc_cfg, 5);

  worldmodel::WMConfig wc;
  wc.obs_width = 12;
  wc.obs_height = 12;
  wc.context_frames = 6;
  wc.denoise_steps = 2;
  wc.arch.widths = {32, 64};
  wc.arch.layers = 1;
  wc.arch.heads = 4;
  wc.arch.context = 7;
  wc.head_hidden = 64;
  worldmodel::WorldModel wm = worldmodel::init_world_model(wc, 9);
  worldmodel::WMTrainConfig tc;
  tc.steps = 150;
  tc.batch_size = 4;
  train_world_model(wm, demos, tc, 3);

  SFTConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 8;
  int64_t budget = 20 * 9;  // nine trajectories worth of steps
  IterSftReport rep = iter_sft(ps, pc, wm, suite.train, demos, env, cfg, budget, 77);
  EXPECT_GE(rep.wm_steps, budget);
  EXPECT_LT(rep.wm_steps, budget + ec.horizon);  // within one trajectory's length
  EXPECT_LE(rep.kept, rep.rollouts);
  EXPECT_EQ(rep.rollouts, 9);
  if (rep.kept == 0) {
    EXPECT_TRUE(rep.fell_back_to_pure_bc);
  } else {
    EXPECT_FALSE(rep.fell_back_to_pure_bc);
    EXPECT_GE(rep.kept_ground_truth_success, 0.0);
    EXPECT_LE(rep.kept_ground_truth_success, 1.0);
  }
}

TEST(IterSft, MixtureConvergesToConfiguredRate) {
  SFTConfig cfg;  // defaults 1:1
  Rng rng(13);
  int synth = 0;
  int n = 20000;
  for (int i = 0; i < n; ++i) synth += pick_synthetic(rng, cfg) ? 1 : 0;
  EXPECT_NEAR(static_cast<double>(synth) / n, 0.5, 0.02);

  cfg.mixture_expert = 3.0;
  cfg.mixture_synthetic = 1.0;
  synth = 0;
  for (int i = 0; i < n; ++i) synth += pick_synthetic(rng, cfg) ? 1 : 0;
  EXPECT_NEAR(static_cast<double>(synth) / n, 0.25, 0.02);
}
