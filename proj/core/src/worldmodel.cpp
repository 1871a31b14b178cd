#include "wmgym/worldmodel.hpp"

#include <cmath>

#include "wmgym/linalg.hpp"

namespace wmgym::worldmodel {

using dynamo::ArchKind;

WMConfig::WMConfig() {
  arch.kind = ArchKind::temporal_transformer;
  arch.widths = {64, 256};
  arch.layers = 2;
  arch.heads = 4;
  arch.context = 21;  // window frames + the frame being refined
  arch.activation = dynamo::Activation::gelu;
}

void WMConfig::validate() const {
  if (context_frames < 1) throw ConfigError("context_frames must be >= 1");
  if (denoise_steps < 1) throw ConfigError("denoise_steps must be >= 1");
  if (null_action_rate < 0.0 || null_action_rate >= 1.0) {
    throw ConfigError("null_action_rate must be in [0,1)");
  }
  if (arch.kind != ArchKind::temporal_transformer) {
    throw ConfigError("world model arch must be temporal_transformer");
  }
  if (arch.context < context_frames + 1) {
    throw ConfigError("arch context must cover context_frames + 1 positions");
  }
  arch.validate();
}

std::string WMConfig::descriptor() const {
  return "wm:" + arch.descriptor() + ":ctx" + std::to_string(context_frames) + ":S" +
         std::to_string(denoise_steps) + ":F" + std::to_string(frame_dim()) + ":H" +
         std::to_string(head_hidden);
}

WorldModel init_world_model(const WMConfig& cfg, uint64_t seed) {
  cfg.validate();
  WorldModel wm;
  wm.cfg = cfg;
  Rng rng(seed);
  int d = cfg.arch.widths[0];
  int f = cfg.frame_dim();

  auto scaled = [&](const std::string& name, std::vector<int> shape, int fan_in) {
    Tensor& t = wm.params.add(name, std::move(shape));
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
  };

  scaled("embed.frame.W", {d, f}, f);
  wm.params.add("embed.frame.b", {d});
  scaled("embed.action.W", {d, cfg.action_dims}, cfg.action_dims);
  scaled("embed.null_action", {d}, d);
  scaled("embed.tau", {cfg.denoise_steps + 1, d}, d);
  scaled("embed.pos", {cfg.context_frames + 1, d}, d);
  dynamo::add_transformer_params(wm.params, cfg.arch, "tf.", rng);
  scaled("head.w1", {cfg.head_hidden, d}, d);
  wm.params.add("head.b1", {cfg.head_hidden});
  scaled("head.w2", {f, cfg.head_hidden}, cfg.head_hidden);
  wm.params.add("head.b2", {f});
  Tensor& gain = wm.params.add("head.skip_gain", {1});
  gain.data[0] = 1.0;
  return wm;
}

// ---------------------------------------------------------------------------
// Token assembly shared by training and both inference paths
// ---------------------------------------------------------------------------

namespace {

struct TokenBind {
  const Tensor *frame_w, *frame_b, *action_w, *null_action, *tau, *pos;
  const Tensor *head_w1, *head_b1, *head_w2, *head_b2, *skip_gain;
};

TokenBind bind_tokens(const ParamStore& ps) {
  return TokenBind{
      &ps.param("embed.frame.W"),     &ps.param("embed.frame.b"), &ps.param("embed.action.W"),
      &ps.param("embed.null_action"), &ps.param("embed.tau"),     &ps.param("embed.pos"),
      &ps.param("head.w1"),           &ps.param("head.b1"),       &ps.param("head.w2"),
      &ps.param("head.b2"),           &ps.param("head.skip_gain")};
}

int clean_tau_index(const WMConfig& cfg) { return cfg.denoise_steps; }

// token = W_f frame + b_f + W_a action (or null embedding) + pos[i] + tau[idx]
void build_token(const WMConfig& cfg, const TokenBind& tb, const double* frame,
                 const double* action, bool null_action, int pos_idx, int tau_idx,
                 double* out) {
  int d = cfg.arch.widths[0];
  int f = cfg.frame_dim();
  matvec(tb.frame_w->ptr(), frame, tb.frame_b->ptr(), out, d, f);
  if (null_action) {
    for (int i = 0; i < d; ++i) out[i] += tb.null_action->data[i];
  } else if (action != nullptr) {
    for (int r = 0; r < d; ++r) {
      out[r] += dot(tb.action_w->ptr() + static_cast<size_t>(r) * cfg.action_dims, action,
                    cfg.action_dims);
    }
  }
  const double* pos = tb.pos->ptr() + static_cast<size_t>(pos_idx) * d;
  const double* tau = tb.tau->ptr() + static_cast<size_t>(tau_idx) * d;
  for (int i = 0; i < d; ++i) out[i] += pos[i] + tau[i];
}

void head_forward(const WMConfig& cfg, const TokenBind& tb, const double* h,
                  const double* prev_frame, std::vector<double>& hidden_pre,
                  std::vector<double>& x1) {
  int d = cfg.arch.widths[0];
  int hh = cfg.head_hidden;
  int f = cfg.frame_dim();
  hidden_pre.resize(hh);
  matvec(tb.head_w1->ptr(), h, tb.head_b1->ptr(), hidden_pre.data(), hh, d);
  std::vector<double> act(hh);
  for (int i = 0; i < hh; ++i) {
    act[i] = dynamo::apply_activation(cfg.arch.activation, hidden_pre[i]);
  }
  x1.resize(f);
  matvec(tb.head_w2->ptr(), act.data(), tb.head_b2->ptr(), x1.data(), f, hh);
  axpy(tb.skip_gain->data[0], prev_frame, x1.data(), f);
}

}  // namespace

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct TrainForwardCache {
  // inputs retained for the backward pass
  std::vector<const double*> frames;            // window, oldest first
  std::vector<std::vector<double>> frame_storage;  // corrupted copies, when used
  std::vector<std::array<double, 3>> actions;   // incoming action per frame
  std::array<double, 3> next_action{};
  bool null_cond = false;
  const double* x_tau = nullptr;
  int tau_idx = 0;
  // activations
  std::vector<double> tokens;
  int n_tokens = 0;
  dynamo::TfTrainCache tf;
  std::vector<double> hidden_pre;
  std::vector<double> x1;
};

void wm_forward_train(const WorldModel& wm, TrainForwardCache& cache) {
  const WMConfig& cfg = wm.cfg;
  TokenBind tb = bind_tokens(wm.params);
  int d = cfg.arch.widths[0];
  int n = static_cast<int>(cache.frames.size());
  cache.n_tokens = n + 1;
  cache.tokens.resize(static_cast<size_t>(n + 1) * d);
  for (int i = 0; i < n; ++i) {
    build_token(cfg, tb, cache.frames[i], cache.actions[i].data(), false, i,
                clean_tau_index(cfg), &cache.tokens[static_cast<size_t>(i) * d]);
  }
  build_token(cfg, tb, cache.x_tau, cache.next_action.data(), cache.null_cond, n,
              cache.tau_idx, &cache.tokens[static_cast<size_t>(n) * d]);
  const auto& out =
      dynamo::transformer_forward(wm.params, cfg.arch, cache.tokens, n + 1, cache.tf, "tf.");
  head_forward(cfg, tb, &out[static_cast<size_t>(n) * d], cache.frames.back(),
               cache.hidden_pre, cache.x1);
}

void wm_backward_train(WorldModel& wm, const TrainForwardCache& cache,
                       std::span<const double> d_x1) {
  const WMConfig& cfg = wm.cfg;
  ParamStore& ps = wm.params;
  TokenBind tb = bind_tokens(ps);
  int d = cfg.arch.widths[0];
  int hh = cfg.head_hidden;
  int f = cfg.frame_dim();
  int n = cache.n_tokens - 1;

  // head backward
  ps.grad("head.skip_gain").data[0] += dot(d_x1.data(), cache.frames.back(), f);
  std::vector<double> act(hh);
  for (int i = 0; i < hh; ++i) {
    act[i] = dynamo::apply_activation(cfg.arch.activation, cache.hidden_pre[i]);
  }
  outer_acc(d_x1.data(), act.data(), ps.grad("head.w2").ptr(), f, hh);
  {
    Tensor& g_b2 = ps.grad("head.b2");
    for (int i = 0; i < f; ++i) g_b2.data[i] += d_x1[i];
  }
  std::vector<double> d_act(hh, 0.0);
  matvec_t_acc(tb.head_w2->ptr(), d_x1.data(), d_act.data(), f, hh);
  std::vector<double> d_pre(hh);
  for (int i = 0; i < hh; ++i) {
    d_pre[i] = d_act[i] * dynamo::activation_grad(cfg.arch.activation, cache.hidden_pre[i]);
  }
  const double* h_last = &cache.tf.lnf_out[static_cast<size_t>(n) * d];
  outer_acc(d_pre.data(), h_last, ps.grad("head.w1").ptr(), hh, d);
  {
    Tensor& g_b1 = ps.grad("head.b1");
    for (int i = 0; i < hh; ++i) g_b1.data[i] += d_pre[i];
  }

  // only the last position's output feeds the loss
  std::vector<double> d_out(static_cast<size_t>(n + 1) * d, 0.0);
  matvec_t_acc(tb.head_w1->ptr(), d_pre.data(), &d_out[static_cast<size_t>(n) * d], hh, d);
  std::vector<double> d_tokens;
  dynamo::transformer_backward(ps, cfg.arch, cache.tf, d_out, &d_tokens, "tf.");

  // embedding backward
  Tensor& g_fw = ps.grad("embed.frame.W");
  Tensor& g_fb = ps.grad("embed.frame.b");
  Tensor& g_aw = ps.grad("embed.action.W");
  Tensor& g_null = ps.grad("embed.null_action");
  Tensor& g_tau = ps.grad("embed.tau");
  Tensor& g_pos = ps.grad("embed.pos");
  for (int i = 0; i <= n; ++i) {
    const double* dt = &d_tokens[static_cast<size_t>(i) * d];
    const double* frame = i < n ? cache.frames[i] : cache.x_tau;
    outer_acc(dt, frame, g_fw.ptr(), d, f);
    axpy(1.0, dt, g_fb.ptr(), d);
    axpy(1.0, dt, g_pos.ptr() + static_cast<size_t>(i) * d, d);
    int tau_idx = i == n ? cache.tau_idx : clean_tau_index(cfg);
    axpy(1.0, dt, g_tau.ptr() + static_cast<size_t>(tau_idx) * d, d);
    if (i == n && cache.null_cond) {
      axpy(1.0, dt, g_null.ptr(), d);
    } else {
      const double* action = i == n ? cache.next_action.data() : cache.actions[i].data();
      outer_acc(dt, action, g_aw.ptr(), d, cfg.action_dims);
    }
  }
}

struct Transition {
  const envsim::Trajectory* traj;
  int t;  // predicts frame t+1
};

std::vector<Transition> index_transitions(const envsim::Dataset& data) {
  std::vector<Transition> out;
  for (const auto& traj : data.trajectories) {
    int len = static_cast<int>(traj.observations.size());
    for (int t = 0; t + 1 < len; ++t) out.push_back({&traj, t});
  }
  return out;
}

// Window of true past frames ending at frame t (inclusive). When noise_rng is
// given, window frames are corrupted slightly (and re-clamped) so rollouts
// conditioned on the model's own imperfect frames stay in distribution.
void fill_window(const WMConfig& cfg, const envsim::Trajectory& traj, int t,
                 TrainForwardCache& cache, Rng* noise_rng = nullptr) {
  int start = std::max(0, t + 1 - cfg.context_frames);
  int n = t - start + 1;
  cache.frames.clear();
  cache.actions.clear();
  cache.frame_storage.resize(n);
  for (int i = start; i <= t; ++i) {
    const auto& px = traj.observations[i].pixels;
    if (noise_rng != nullptr && cfg.context_noise > 0.0) {
      auto& buf = cache.frame_storage[i - start];
      buf.resize(px.size());
      for (size_t j = 0; j < px.size(); ++j) {
        buf[j] = std::clamp(
            px[j] + noise_rng->uniform(-cfg.context_noise, cfg.context_noise), 0.0, 1.0);
      }
      cache.frames.push_back(buf.data());
    } else {
      cache.frames.push_back(px.data());
    }
    std::array<double, 3> act{0.0, 0.0, 0.0};
    if (i > 0) act = traj.actions[i - 1].as_array();
    cache.actions.push_back(act);
  }
  cache.next_action = traj.actions[t].as_array();
}

double train_steps(WorldModel& wm, const std::vector<Transition>& transitions,
                   const std::vector<Transition>& extra, double extra_odds,
                   const WMTrainConfig& tc, uint64_t seed, WmTrainStats& stats) {
  if (transitions.empty() && extra.empty()) throw ConfigError("empty training dataset");
  dynamo::AdamWConfig ac;
  ac.lr = tc.lr;
  ac.weight_decay = tc.weight_decay;
  ac.beta1 = tc.beta1;
  ac.beta2 = tc.beta2;
  ac.grad_clip = tc.grad_clip;
  dynamo::AdamW opt(wm.params, ac);

  const WMConfig& cfg = wm.cfg;
  int f = cfg.frame_dim();
  Rng root(seed);
  TrainForwardCache cache;
  std::vector<double> noise(f), x_tau(f), d_x1(f);
  double last_loss = 0.0;

  for (int step = 0; step < tc.steps; ++step) {
    Rng rng = root.fork("wm_step", static_cast<uint64_t>(step));
    wm.params.zero_grads();
    double batch_loss = 0.0;
    for (int b = 0; b < tc.batch_size; ++b) {
      // mixture sampling between base transitions and extra (new) transitions
      const std::vector<Transition>* pool = &transitions;
      if (!extra.empty() &&
          (transitions.empty() || rng.uniform() < extra_odds)) {
        pool = &extra;
      }
      const Transition& tr = (*pool)[rng.uniform_int(pool->size())];
      fill_window(cfg, *tr.traj, tr.t, cache, &rng);
      const auto& target = tr.traj->observations[tr.t + 1].pixels;

      int tau_idx = static_cast<int>(rng.uniform_int(cfg.denoise_steps));
      double tau = static_cast<double>(tau_idx) / cfg.denoise_steps;
      rng.fill_normal(noise);
      for (int i = 0; i < f; ++i) {
        x_tau[i] = (1.0 - tau) * cfg.noise_scale * noise[i] + tau * target[i];
      }
      cache.x_tau = x_tau.data();
      cache.tau_idx = tau_idx;
      cache.null_cond = cfg.null_action_rate > 0.0 && rng.uniform() < cfg.null_action_rate;

      wm_forward_train(wm, cache);
      // changed pixels and entity pixels carry extra weight so the scene
      // content dominates the gradient instead of the static background
      const double* prev = tr.traj->observations[tr.t].pixels.data();
      double sample_loss = 0.0;
      double weight_sum = 0.0;
      const auto& bg = envsim::palette().background;
      const double bgc[3] = {bg.r, bg.g, bg.b};
      for (int i = 0; i < f; ++i) {
        double w = 1.0;
        if (std::abs(target[i] - prev[i]) > 0.04) w += cfg.motion_loss_weight;
        if (std::abs(target[i] - bgc[i % 3]) > 0.08) w += cfg.entity_loss_weight;
        double diff = cache.x1[i] - target[i];
        sample_loss += w * diff * diff;
        d_x1[i] = w * diff;
        weight_sum += w;
      }
      double inv = 1.0 / weight_sum;
      for (int i = 0; i < f; ++i) d_x1[i] *= 2.0 * inv / tc.batch_size;
      batch_loss += sample_loss * inv / tc.batch_size;
      wm_backward_train(wm, cache, d_x1);
    }
    opt.step(wm.params);
    stats.loss_curve.push_back(batch_loss);
    last_loss = batch_loss;
  }
  wm.params.check_finite("train_world_model");
  return last_loss;
}

}  // namespace

double wm_transition_loss(WorldModel& wm, const envsim::Trajectory& traj, int t, int tau_idx,
                          std::span<const double> noise, bool null_cond,
                          bool accumulate_grads) {
  const WMConfig& cfg = wm.cfg;
  int f = cfg.frame_dim();
  if (static_cast<int>(noise.size()) != f) throw ConfigError("noise size mismatch");
  if (t < 0 || t + 1 >= static_cast<int>(traj.observations.size())) {
    throw ConfigError("transition index out of range");
  }
  TrainForwardCache cache;
  fill_window(cfg, traj, t, cache);
  const auto& target = traj.observations[t + 1].pixels;
  double tau = static_cast<double>(tau_idx) / cfg.denoise_steps;
  std::vector<double> x_tau(f);
  for (int i = 0; i < f; ++i) {
    x_tau[i] = (1.0 - tau) * cfg.noise_scale * noise[i] + tau * target[i];
  }
  cache.x_tau = x_tau.data();
  cache.tau_idx = tau_idx;
  cache.null_cond = null_cond;
  wm_forward_train(wm, cache);
  const double* prev = cache.frames.back();
  const auto& bg = envsim::palette().background;
  const double bgc[3] = {bg.r, bg.g, bg.b};
  double loss = 0.0;
  double weight_sum = 0.0;
  std::vector<double> d_x1(f);
  for (int i = 0; i < f; ++i) {
    double w = 1.0;
    if (std::abs(target[i] - prev[i]) > 0.04) w += cfg.motion_loss_weight;
    if (std::abs(target[i] - bgc[i % 3]) > 0.08) w += cfg.entity_loss_weight;
    double diff = cache.x1[i] - target[i];
    loss += w * diff * diff;
    d_x1[i] = w * diff;
    weight_sum += w;
  }
  double inv = 1.0 / weight_sum;
  for (int i = 0; i < f; ++i) d_x1[i] *= 2.0 * inv;
  if (accumulate_grads) wm_backward_train(wm, cache, d_x1);
  return loss * inv;
}

WmTrainStats train_world_model(WorldModel& wm, const envsim::Dataset& dataset,
                               const WMTrainConfig& tc, uint64_t seed) {
  if (dataset.trajectories.empty()) throw ConfigError("train_world_model: empty dataset");
  WmTrainStats stats;
  auto transitions = index_transitions(dataset);
  train_steps(wm, transitions, {}, 0.0, tc, seed, stats);
  return stats;
}

WmTrainStats finetune_world_model(WorldModel& wm, const envsim::Dataset& new_trajectories,
                                  const envsim::Dataset& original, const WMTrainConfig& tc,
                                  uint64_t seed, double mixture_new, double mixture_original) {
  if (new_trajectories.trajectories.empty()) {
    throw ConfigError("finetune_world_model: no new trajectories");
  }
  WmTrainStats stats;
  if (tc.steps == 0) return stats;
  auto base = index_transitions(original);
  auto extra = index_transitions(new_trajectories);
  double odds = mixture_new / std::max(1e-12, mixture_new + mixture_original);
  train_steps(wm, base, extra, odds, tc, seed, stats);
  return stats;
}

// ---------------------------------------------------------------------------
// Sampler internals shared by cached and uncached paths
// ---------------------------------------------------------------------------

namespace {

struct StepScratch {
  std::vector<double> clean_tokens;
  std::vector<double> noisy_token;
  std::vector<double> tf_out;
  std::vector<double> hidden_pre;
  std::vector<double> x1_cond, x1_null;
  std::vector<double> x;
};

void build_clean_tokens(const WorldModelSession& s, const TokenBind& tb,
                        std::vector<double>& out) {
  const WMConfig& cfg = s.wm->cfg;
  int d = cfg.arch.widths[0];
  int n = s.window_size();
  out.resize(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    build_token(cfg, tb, s.frames[i].data(), s.incoming[i].data(), false, i,
                clean_tau_index(cfg), &out[static_cast<size_t>(i) * d]);
  }
}

envsim::Observation decode_frame(const WMConfig& cfg, const std::vector<double>& x) {
  envsim::Observation obs;
  obs.width = cfg.obs_width;
  obs.height = cfg.obs_height;
  obs.channels = cfg.obs_channels;
  obs.pixels.resize(x.size());
  for (size_t i = 0; i < x.size(); ++i) obs.pixels[i] = std::clamp(x[i], 0.0, 1.0);
  if (cfg.palette_snap > 0.0 && cfg.obs_channels == 3) {
    // quantize near-palette pixels so the autoregressive state stays close to
    // the clean-frame distribution the model was trained on
    const auto& pal = envsim::palette();
    std::array<envsim::Rgb, 11> colors{pal.background,    pal.sink_region, pal.basket_region,
                                       pal.rail,          pal.handle,      pal.gripper_open,
                                       pal.gripper_closed, pal.objects[0],  pal.objects[1],
                                       pal.objects[2],    pal.objects[3]};
    double snap2 = cfg.palette_snap * cfg.palette_snap;
    for (size_t p = 0; p + 2 < obs.pixels.size(); p += 3) {
      double r = obs.pixels[p], g = obs.pixels[p + 1], b = obs.pixels[p + 2];
      int best = -1;
      double best_d = snap2;
      for (size_t c = 0; c < colors.size(); ++c) {
        double dr = r - colors[c].r, dg = g - colors[c].g, db = b - colors[c].b;
        double d = dr * dr + dg * dg + db * db;
        if (d <= best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      if (best >= 0) {
        obs.pixels[p] = colors[best].r;
        obs.pixels[p + 1] = colors[best].g;
        obs.pixels[p + 2] = colors[best].b;
      }
    }
  }
  return obs;
}

void push_frame(WorldModelSession& s, const envsim::Observation& obs,
                const envsim::Action& a) {
  s.frames.emplace_back(obs.pixels);
  s.incoming.push_back(a.as_array());
  s.current_frame += 1;
  while (s.window_size() > s.wm->cfg.context_frames) {
    s.frames.pop_front();
    s.incoming.pop_front();
  }
}

// One full generation of the next frame. When `use_cache` is set, refinement
// steps after the first reuse the clean-prefix keys/values; the final step
// appends the new frame's keys/values (per-frame caches are cleared on entry
// either way, so both paths are bit-identical).
envsim::Observation generate_frame(WorldModelSession& s, const envsim::Action& action,
                                   bool use_cache) {
  const WorldModel& wm = *s.wm;
  const WMConfig& cfg = wm.cfg;
  TokenBind tb = bind_tokens(wm.params);
  int d = cfg.arch.widths[0];
  int f = cfg.frame_dim();
  int n = s.window_size();
  int S = cfg.denoise_steps;
  auto act = action.as_array();

  s.cond_cache.clear();
  s.null_cache.clear();
  if (s.cond_cache.k.empty()) s.cond_cache.init(cfg.arch);
  if (s.null_cache.k.empty()) s.null_cache.init(cfg.arch);

  StepScratch sc;
  build_clean_tokens(s, tb, sc.clean_tokens);
  sc.noisy_token.resize(d);
  sc.tf_out.resize(d);
  sc.x.resize(f);
  s.rng.fill_normal(sc.x);  // noise drawn once per frame
  for (double& v : sc.x) v *= cfg.noise_scale;

  const double* prev = s.frames.back().data();
  std::vector<double> seq;
  for (int step = 0; step < S; ++step) {
    double tau = static_cast<double>(step) / S;
    bool final_step = step == S - 1;
    auto full_pass = [&](dynamo::KvCache& cache, int prefix, std::vector<double>& x1) {
      seq.assign(sc.clean_tokens.begin(), sc.clean_tokens.end());
      seq.insert(seq.end(), sc.noisy_token.begin(), sc.noisy_token.end());
      dynamo::transformer_forward_rollout(wm.params, cfg.arch, seq, n + 1, cache, prefix,
                                          sc.tf_out, "tf.");
      head_forward(cfg, tb, sc.tf_out.data(), prev, sc.hidden_pre, x1);
    };
    auto incremental_pass = [&](dynamo::KvCache& cache, std::vector<double>& x1) {
      dynamo::transformer_forward_incremental(wm.params, cfg.arch, sc.noisy_token, cache,
                                              /*append_kv=*/final_step, sc.tf_out, "tf.");
      head_forward(cfg, tb, sc.tf_out.data(), prev, sc.hidden_pre, x1);
    };

    build_token(cfg, tb, sc.x.data(), act.data(), false, n, step, sc.noisy_token.data());
    if (!use_cache) {
      full_pass(s.cond_cache, 0, sc.x1_cond);
    } else if (step == 0) {
      full_pass(s.cond_cache, final_step ? n + 1 : n, sc.x1_cond);
    } else {
      incremental_pass(s.cond_cache, sc.x1_cond);
    }

    build_token(cfg, tb, sc.x.data(), act.data(), true, n, step, sc.noisy_token.data());
    if (!use_cache) {
      full_pass(s.null_cache, 0, sc.x1_null);
    } else {
      if (step == 0) {
        // both passes share the clean prefix (conditioning differs only at
        // the new frame), so the null cache adopts the cond prefix values
        s.null_cache.clone_prefix(s.cond_cache, n);
      }
      incremental_pass(s.null_cache, sc.x1_null);
    }

    double w = cfg.guidance_weight;
    double inv_rem = 1.0 / (1.0 - tau);
    double dt = 1.0 / S;
    for (int i = 0; i < f; ++i) {
      double v_cond = (sc.x1_cond[i] - sc.x[i]) * inv_rem;
      double v_null = (sc.x1_null[i] - sc.x[i]) * inv_rem;
      double v = v_null + w * (v_cond - v_null);
      sc.x[i] += dt * v;
    }
  }

  envsim::Observation obs = decode_frame(cfg, sc.x);
  push_frame(s, obs, action);
  return obs;
}

}  // namespace

WorldModelSession wm_reset(const WorldModel& wm, const envsim::Observation& o0, uint64_t seed) {
  if (o0.width != wm.cfg.obs_width || o0.height != wm.cfg.obs_height ||
      o0.channels != wm.cfg.obs_channels) {
    throw ConfigError("wm_reset: observation shape does not match config");
  }
  WorldModelSession s;
  s.wm = &wm;
  s.frames.emplace_back(o0.pixels);
  s.incoming.push_back({0.0, 0.0, 0.0});
  s.current_frame = 0;
  s.cond_cache.init(wm.cfg.arch);
  s.null_cache.init(wm.cfg.arch);
  s.rng = Rng(seed).fork("wm_session");
  return s;
}

envsim::Observation wm_step(WorldModelSession& session, const envsim::Action& action) {
  if (session.wm == nullptr) throw ConfigError("wm_step on uninitialized session");
  return generate_frame(session, action, /*use_cache=*/true);
}

envsim::Observation wm_step_uncached(WorldModelSession& session, const envsim::Action& action) {
  if (session.wm == nullptr) throw ConfigError("wm_step on uninitialized session");
  return generate_frame(session, action, /*use_cache=*/false);
}

double one_step_error(const WorldModel& wm, const envsim::Dataset& trajectories) {
  const WMConfig& cfg = wm.cfg;
  int f = cfg.frame_dim();
  TokenBind tb = bind_tokens(wm.params);
  int d = cfg.arch.widths[0];
  double total = 0.0;
  size_t count = 0;

  TrainForwardCache cache;
  std::vector<double> x(f), noise(f), tf_out(d), hidden_pre, x1_cond, x1_null;
  std::vector<double> seq;
  dynamo::KvCache scratch;
  scratch.init(cfg.arch);

  for (size_t ti = 0; ti < trajectories.trajectories.size(); ++ti) {
    const auto& traj = trajectories.trajectories[ti];
    int len = static_cast<int>(traj.observations.size());
    for (int t = 0; t + 1 < len; ++t) {
      fill_window(cfg, traj, t, cache);
      int n = static_cast<int>(cache.frames.size());
      Rng rng = Rng(0xA11CEull).fork(ti).fork(static_cast<uint64_t>(t));
      rng.fill_normal(x);
      for (double& v : x) v *= cfg.noise_scale;
      const double* prev = cache.frames.back();
      int S = cfg.denoise_steps;
      std::vector<double> clean_tokens(static_cast<size_t>(n) * d);
      for (int i = 0; i < n; ++i) {
        build_token(cfg, tb, cache.frames[i], cache.actions[i].data(), false, i,
                    clean_tau_index(cfg), &clean_tokens[static_cast<size_t>(i) * d]);
      }
      std::vector<double> noisy(d);
      for (int step = 0; step < S; ++step) {
        double tau = static_cast<double>(step) / S;
        auto run_pass = [&](bool null_pass, std::vector<double>& x1) {
          build_token(cfg, tb, x.data(), cache.next_action.data(), null_pass, n, step,
                      noisy.data());
          seq.assign(clean_tokens.begin(), clean_tokens.end());
          seq.insert(seq.end(), noisy.begin(), noisy.end());
          dynamo::transformer_forward_rollout(wm.params, cfg.arch, seq, n + 1, scratch, 0,
                                              tf_out, "tf.");
          head_forward(cfg, tb, tf_out.data(), prev, hidden_pre, x1);
        };
        run_pass(false, x1_cond);
        run_pass(true, x1_null);
        double inv_rem = 1.0 / (1.0 - tau);
        double dt = 1.0 / S;
        for (int i = 0; i < f; ++i) {
          double v_cond = (x1_cond[i] - x[i]) * inv_rem;
          double v_null = (x1_null[i] - x[i]) * inv_rem;
          x[i] += dt * (v_null + cfg.guidance_weight * (v_cond - v_null));
        }
      }
      const auto& target = traj.observations[t + 1].pixels;
      envsim::Observation predicted = decode_frame(cfg, x);  // what a rollout would emit
      double err = 0.0;
      for (int i = 0; i < f; ++i) {
        double diff = predicted.pixels[i] - target[i];
        err += diff * diff;
      }
      total += err / f;
      count += 1;
    }
  }
  if (count == 0) throw ConfigError("one_step_error: no transitions");
  return total / static_cast<double>(count);
}

envsim::Trajectory rollout_wm(const WorldModel& wm, const envsim::TaskSpec& task,
                              const envsim::Observation& o0, int horizon, uint64_t seed,
                              const std::function<envsim::Action(const envsim::Observation&,
                                                                 int)>& act) {
  envsim::Trajectory traj;
  traj.task_id = task.task_id;
  traj.goal = task.goal;
  traj.goal_class = envsim::goal_class_of(task.goal, task.scene0);
  traj.provenance = task.provenance;
  traj.source = "world_model";
  traj.seed = seed;
  WorldModelSession session = wm_reset(wm, o0, seed);
  traj.observations.push_back(o0);
  for (int t = 0; t < horizon; ++t) {
    envsim::Action a = act(traj.observations.back(), t);
    traj.actions.push_back(a);
    traj.observations.push_back(wm_step(session, a));
  }
  return traj;
}

}  // namespace wmgym::worldmodel
