#include "wmgym/envsim.hpp"

#include <algorithm>
#include <cmath>

namespace wmgym::envsim {

const Palette& palette() {
  static const Palette p;
  return p;
}

const SceneGeometry& geometry() {
  static const SceneGeometry g;
  return g;
}

const ObjectState* SceneState::find_object(const std::string& id) const {
  for (const auto& o : objects) {
    if (o.id == id) return &o;
  }
  return nullptr;
}

const Fixture* SceneState::find_fixture(const std::string& id) const {
  for (const auto& f : fixtures) {
    if (f.id == id) return &f;
  }
  return nullptr;
}

int SceneState::held_index() const {
  for (size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].held) return static_cast<int>(i);
  }
  return -1;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::base: return "base";
    case Provenance::distractor_augmented: return "distractor_augmented";
    case Provenance::novel_instruction: return "novel_instruction";
    case Provenance::scaled: return "scaled";
  }
  return "base";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "base") return Provenance::base;
  if (s == "distractor_augmented") return Provenance::distractor_augmented;
  if (s == "novel_instruction") return Provenance::novel_instruction;
  if (s == "scaled") return Provenance::scaled;
  throw ConfigError("unknown provenance: " + s);
}

std::string to_string(GoalKind k) {
  switch (k) {
    case GoalKind::move_object_to_region: return "move_object_to_region";
    case GoalKind::open_slider: return "open_slider";
    case GoalKind::close_slider: return "close_slider";
  }
  return "move_object_to_region";
}

GoalKind goal_kind_from_string(const std::string& s) {
  if (s == "move_object_to_region") return GoalKind::move_object_to_region;
  if (s == "open_slider") return GoalKind::open_slider;
  if (s == "close_slider") return GoalKind::close_slider;
  throw ConfigError("unknown goal kind: " + s);
}

std::string TaskSpec::kind_label() const {
  switch (goal.kind) {
    case GoalKind::open_slider: return "open_slider";
    case GoalKind::close_slider: return "close_slider";
    case GoalKind::move_object_to_region:
      return goal.target_id == "sink" ? "move_to_sink" : "move_to_basket";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Vec2 handle_pos(const Fixture& slider) {
  return {slider.pos.x + slider.slider_openness * slider.extent, slider.pos.y};
}

void validate_goal_refs(const SceneState& scene, const GoalSpec& goal) {
  if (goal.kind == GoalKind::move_object_to_region) {
    if (scene.find_object(goal.subject_id) == nullptr) {
      throw ConfigError("goal references missing object: " + goal.subject_id);
    }
    const Fixture* f = scene.find_fixture(goal.target_id);
    if (f == nullptr || f->kind != FixtureKind::target_region) {
      throw ConfigError("goal references missing region: " + goal.target_id);
    }
  } else {
    const Fixture* f = scene.find_fixture(goal.subject_id);
    if (f == nullptr || f->kind != FixtureKind::slider) {
      throw ConfigError("goal references missing slider: " + goal.subject_id);
    }
  }
  if (goal.threshold <= 0.0) throw ConfigError("goal threshold must be positive");
}

}  // namespace

std::pair<SceneState, Observation> Env::reset(const TaskSpec& task, uint64_t seed) const {
  validate_goal_refs(task.scene0, task.goal);
  SceneState s = task.scene0;
  for (const auto& o : s.objects) {
    if (o.pos.x < 0.0 || o.pos.x > 1.0 || o.pos.y < 0.0 || o.pos.y > 1.0) {
      throw ConfigError("object outside workspace: " + o.id);
    }
  }
  if (cfg.jitter > 0.0) {
    Rng rng = Rng(seed).fork("reset");
    for (auto& o : s.objects) {
      o.pos.x = std::clamp(o.pos.x + rng.uniform(-cfg.jitter, cfg.jitter), 0.06, 0.94);
      o.pos.y = std::clamp(o.pos.y + rng.uniform(-cfg.jitter, cfg.jitter), 0.06, 0.94);
    }
    s.gripper_pos.x = std::clamp(s.gripper_pos.x + rng.uniform(-cfg.jitter, cfg.jitter), 0.04, 0.96);
    s.gripper_pos.y = std::clamp(s.gripper_pos.y + rng.uniform(-cfg.jitter, cfg.jitter), 0.04, 0.96);
    for (auto& f : s.fixtures) {
      if (f.kind == FixtureKind::slider) {
        f.slider_openness = clamp01(f.slider_openness + 0.5 * rng.uniform(-cfg.jitter, cfg.jitter));
      }
    }
  }
  return {s, render(s)};
}

SceneState Env::step(const SceneState& s, const Action& a) const {
  SceneState ns = s;
  double dx = std::clamp(a.dx, -1.0, 1.0) * cfg.step_size;
  double dy = std::clamp(a.dy, -1.0, 1.0) * cfg.step_size;
  ns.gripper_pos.x = clamp01(s.gripper_pos.x + dx);
  ns.gripper_pos.y = clamp01(s.gripper_pos.y + dy);
  if (cfg.lattice_motion) {
    ns.gripper_pos.x = std::round(ns.gripper_pos.x * cfg.width) / cfg.width;
    ns.gripper_pos.y = std::round(ns.gripper_pos.y * cfg.height) / cfg.height;
  }

  if (a.grip > 0.5) {
    if (ns.gripper_closed) {
      ns.gripper_closed = false;
      for (auto& o : ns.objects) o.held = false;
    } else {
      ns.gripper_closed = true;
      int best = -1;
      double best_d = cfg.grasp_radius;
      for (size_t i = 0; i < ns.objects.size(); ++i) {
        double d = dist(ns.objects[i].pos, ns.gripper_pos);
        if (d <= best_d) {
          best_d = d;
          best = static_cast<int>(i);
        }
      }
      if (best >= 0) ns.objects[best].held = true;
    }
  }

  for (auto& o : ns.objects) {
    if (o.held) o.pos = ns.gripper_pos;
  }

  // A closed, empty gripper near the handle drags the slider; the handle
  // snaps to the gripper's x while engaged.
  if (ns.gripper_closed && ns.held_index() < 0) {
    for (auto& f : ns.fixtures) {
      if (f.kind != FixtureKind::slider || f.extent <= 0.0) continue;
      Vec2 h = handle_pos(f);  // post-toggle, pre-drag handle position
      if (dist(ns.gripper_pos, h) <= cfg.handle_radius) {
        f.slider_openness = clamp01((ns.gripper_pos.x - f.pos.x) / f.extent);
      }
    }
  }
  return ns;
}

bool Env::success(const SceneState& s, const GoalSpec& g) const {
  validate_goal_refs(s, g);
  if (g.kind == GoalKind::move_object_to_region) {
    const ObjectState* o = s.find_object(g.subject_id);
    const Fixture* r = s.find_fixture(g.target_id);
    return !o->held && dist(o->pos, r->pos) <= g.threshold;
  }
  const Fixture* f = s.find_fixture(g.subject_id);
  if (g.kind == GoalKind::open_slider) return f->slider_openness >= g.threshold;
  return f->slider_openness <= g.threshold;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

void draw_block(Observation& img, double cx, double cy, double half, const Rgb& c) {
  int w = img.width, h = img.height;
  int sx = std::max(1, static_cast<int>(std::lround(2.0 * half * w)));
  int sy = std::max(1, static_cast<int>(std::lround(2.0 * half * h)));
  int bx = std::clamp(static_cast<int>(std::lround(cx * w - 0.5 * sx)), 0, w - sx);
  int by = std::clamp(static_cast<int>(std::lround(cy * h - 0.5 * sy)), 0, h - sy);
  for (int y = by; y < by + sy; ++y) {
    for (int x = bx; x < bx + sx; ++x) {
      double* px = &img.pixels[(static_cast<size_t>(y) * w + x) * img.channels];
      px[0] = c.r;
      px[1] = c.g;
      px[2] = c.b;
    }
  }
}

// 3x3 outline; the center pixel stays untouched so a carried block remains
// visible (and decodable) under the gripper.
void draw_gripper(Observation& img, double cx, double cy, double half, const Rgb& c) {
  int w = img.width, h = img.height;
  int s = std::max(3, static_cast<int>(std::lround(2.0 * half * w)));
  int bx = std::clamp(static_cast<int>(std::lround(cx * w - 0.5 * s)), 0, w - s);
  int by = std::clamp(static_cast<int>(std::lround(cy * h - 0.5 * s)), 0, h - s);
  int mx = bx + s / 2, my = by + s / 2;
  for (int y = by; y < by + s; ++y) {
    for (int x = bx; x < bx + s; ++x) {
      if (x == mx && y == my) continue;
      double* px = &img.pixels[(static_cast<size_t>(y) * w + x) * img.channels];
      px[0] = c.r;
      px[1] = c.g;
      px[2] = c.b;
    }
  }
}

}  // namespace

Observation Env::render(const SceneState& s) const {
  const Palette& pal = palette();
  const SceneGeometry& geo = geometry();
  Observation img;
  img.width = cfg.width;
  img.height = cfg.height;
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(cfg.width) * cfg.height * 3);
  for (int i = 0; i < cfg.width * cfg.height; ++i) {
    img.pixels[i * 3 + 0] = pal.background.r;
    img.pixels[i * 3 + 1] = pal.background.g;
    img.pixels[i * 3 + 2] = pal.background.b;
  }
  for (const auto& f : s.fixtures) {
    if (f.kind == FixtureKind::target_region) {
      const Rgb& c = (f.id == "sink") ? pal.sink_region : pal.basket_region;
      draw_block(img, f.pos.x, f.pos.y, f.extent, c);
    }
  }
  for (const auto& f : s.fixtures) {
    if (f.kind != FixtureKind::slider) continue;
    // rail extends past the travel range so the handle never hides its ends
    double x0 = f.pos.x - geo.handle_half;
    double x1 = f.pos.x + f.extent + geo.handle_half;
    int w = img.width;
    int y = std::clamp(static_cast<int>(std::lround(f.pos.y * img.height - 0.5)), 0,
                       img.height - 1);
    int ix0 = std::clamp(static_cast<int>(std::lround(x0 * w)), 0, w - 1);
    int ix1 = std::clamp(static_cast<int>(std::lround(x1 * w)), 0, w - 1);
    for (int x = ix0; x <= ix1; ++x) {
      double* px = &img.pixels[(static_cast<size_t>(y) * w + x) * 3];
      px[0] = pal.rail.r;
      px[1] = pal.rail.g;
      px[2] = pal.rail.b;
    }
    Vec2 hp = handle_pos(f);
    draw_block(img, hp.x, hp.y, geo.handle_half, pal.handle);
  }
  for (const auto& o : s.objects) {
    draw_block(img, o.pos.x, o.pos.y, geo.object_half, pal.objects[o.color_index % 4]);
  }
  draw_gripper(img, s.gripper_pos.x, s.gripper_pos.y, geo.gripper_half,
               s.gripper_closed ? pal.gripper_closed : pal.gripper_open);
  return img;
}

std::vector<double> Env::state_vector(const SceneState& s) const {
  // fixed layout: gripper(3) + 4 color slots * (present, x, y, held) + slider(present, openness)
  std::vector<double> v(3 + 16 + 2, 0.0);
  v[0] = s.gripper_pos.x;
  v[1] = s.gripper_pos.y;
  v[2] = s.gripper_closed ? 1.0 : 0.0;
  for (const auto& o : s.objects) {
    int base = 3 + 4 * (o.color_index % 4);
    v[base] = 1.0;
    v[base + 1] = o.pos.x;
    v[base + 2] = o.pos.y;
    v[base + 3] = o.held ? 1.0 : 0.0;
  }
  for (const auto& f : s.fixtures) {
    if (f.kind == FixtureKind::slider) {
      v[19] = 1.0;
      v[20] = f.slider_openness;
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Goal classes and instructions
// ---------------------------------------------------------------------------

int n_goal_classes() { return 10; }

int goal_class_of(const GoalSpec& goal, const SceneState& scene0) {
  switch (goal.kind) {
    case GoalKind::open_slider: return 0;
    case GoalKind::close_slider: return 1;
    case GoalKind::move_object_to_region: {
      const ObjectState* o = scene0.find_object(goal.subject_id);
      if (o == nullptr) throw ConfigError("goal subject missing: " + goal.subject_id);
      int region = goal.target_id == "sink" ? 0 : 1;
      return 2 + 2 * (o->color_index % 4) + region;
    }
  }
  return 0;
}

std::string instruction_of(const TaskSpec& task) {
  static const char* color_names[4] = {"purple", "red", "green", "cyan"};
  switch (task.goal.kind) {
    case GoalKind::open_slider: return "open the drawer";
    case GoalKind::close_slider: return "close the drawer";
    case GoalKind::move_object_to_region: {
      const ObjectState* o = task.scene0.find_object(task.goal.subject_id);
      std::string color = o != nullptr ? color_names[o->color_index % 4] : "unknown";
      std::string where = task.goal.target_id == "sink" ? "the blue sink" : "the yellow basket";
      return "put the " + color + " block into " + where;
    }
  }
  return "";
}

// ---------------------------------------------------------------------------
// Procedural generation
// ---------------------------------------------------------------------------

namespace {

Vec2 spawn_object(Rng& rng) {
  // the band stays clear of the rail strip below and the regions above,
  // including jitter headroom
  return {rng.uniform(0.10, 0.90), rng.uniform(0.38, 0.56)};
}

Vec2 spawn_object_separated(Rng& rng, const std::vector<Vec2>& taken, double min_dist) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    Vec2 p = spawn_object(rng);
    bool ok = true;
    for (const auto& t : taken) {
      if (dist(p, t) < min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) return p;
  }
  throw AugmentationError("no free space for object placement");
}

SceneState make_move_scene(Rng& rng) {
  const SceneGeometry& geo = geometry();
  SceneState s;
  s.fixtures.push_back({FixtureKind::target_region, "sink", geo.sink_center, geo.sink_half, 0.0});
  s.fixtures.push_back(
      {FixtureKind::target_region, "basket", geo.basket_center, geo.basket_half, 0.0});
  Vec2 p0 = spawn_object(rng);
  s.objects.push_back({"obj0", 0, p0, false});
  int bystander_color = 1 + static_cast<int>(rng.uniform_int(3));
  Vec2 p1 = spawn_object_separated(rng, {p0}, 0.14);
  s.objects.push_back({"obj1", bystander_color, p1, false});
  s.gripper_pos = {std::round(rng.uniform(0.25, 0.75) * 16.0) / 16.0,
                   std::round(rng.uniform(0.06, 0.14) * 16.0) / 16.0};
  s.gripper_closed = false;
  return s;
}

SceneState make_slider_scene(Rng& rng, bool open_task) {
  const SceneGeometry& geo = geometry();
  SceneState s;
  double openness = open_task ? rng.uniform(0.0, 0.12) : rng.uniform(0.88, 1.0);
  s.fixtures.push_back(
      {FixtureKind::slider, "slider", geo.rail_origin, geo.rail_travel, openness});
  s.fixtures.push_back(
      {FixtureKind::target_region, "basket", geo.basket_center, geo.basket_half, 0.0});
  int bystander_color = 1 + static_cast<int>(rng.uniform_int(3));
  s.objects.push_back({"obj1", bystander_color, spawn_object(rng), false});
  s.gripper_pos = {std::round(rng.uniform(0.25, 0.75) * 16.0) / 16.0,
                   std::round(rng.uniform(0.06, 0.14) * 16.0) / 16.0};
  s.gripper_closed = false;
  return s;
}

TaskSpec make_base_task(const EnvConfig& cfg, int archetype, int index, Rng rng) {
  TaskSpec t;
  t.provenance = Provenance::base;
  switch (archetype) {
    case 0:
      t.scene0 = make_slider_scene(rng, true);
      t.goal = {GoalKind::open_slider, "slider", "", cfg.open_cutoff};
      t.task_id = "open_slider_" + std::to_string(index);
      break;
    case 1:
      t.scene0 = make_slider_scene(rng, false);
      t.goal = {GoalKind::close_slider, "slider", "", cfg.close_cutoff};
      t.task_id = "close_slider_" + std::to_string(index);
      break;
    case 2:
      t.scene0 = make_move_scene(rng);
      t.goal = {GoalKind::move_object_to_region, "obj0", "sink", cfg.move_threshold};
      t.task_id = "move_to_sink_" + std::to_string(index);
      break;
    default:
      t.scene0 = make_move_scene(rng);
      t.goal = {GoalKind::move_object_to_region, "obj0", "basket", cfg.move_threshold};
      t.task_id = "move_to_basket_" + std::to_string(index);
      break;
  }
  return t;
}

}  // namespace

TaskSuite generate_task_suite(const EnvConfig& cfg, uint64_t seed, int n_tasks,
                              double split_fraction) {
  if (n_tasks < 2) throw ConfigError("generate_task_suite needs n_tasks >= 2");
  if (split_fraction <= 0.0 || split_fraction >= 1.0) {
    throw ConfigError("split_fraction must be in (0, 1)");
  }
  Rng rng(seed);
  std::vector<std::vector<TaskSpec>> by_arch(4);
  for (int i = 0; i < n_tasks; ++i) {
    int a = i % 4;
    by_arch[a].push_back(make_base_task(cfg, a, i, rng.fork("task", i)));
  }
  int n_train = static_cast<int>(std::lround(split_fraction * n_tasks));
  n_train = std::clamp(n_train, 1, n_tasks - 1);
  int n_eval = n_tasks - n_train;

  // eval quota per archetype by largest remainder; every populated archetype
  // gets at least one eval slot when capacity allows
  std::array<int, 4> quota{};
  std::array<double, 4> frac{};
  int assigned = 0;
  for (int a = 0; a < 4; ++a) {
    double ideal = (1.0 - split_fraction) * static_cast<double>(by_arch[a].size());
    quota[a] = static_cast<int>(ideal);
    frac[a] = ideal - quota[a];
    quota[a] = std::min(quota[a], static_cast<int>(by_arch[a].size()));
    assigned += quota[a];
  }
  while (assigned < n_eval) {
    int best = -1;
    for (int a = 0; a < 4; ++a) {
      if (quota[a] >= static_cast<int>(by_arch[a].size())) continue;
      if (best < 0 || frac[a] > frac[best]) best = a;
    }
    if (best < 0) break;
    quota[best]++;
    frac[best] -= 1.0;
    ++assigned;
  }
  if (n_eval >= 4) {
    for (int a = 0; a < 4; ++a) {
      if (!by_arch[a].empty() && quota[a] == 0) {
        int donor = 0;
        for (int b = 1; b < 4; ++b) {
          if (quota[b] > quota[donor]) donor = b;
        }
        if (quota[donor] > 1) {
          quota[donor]--;
          quota[a]++;
        }
      }
    }
  }

  TaskSuite suite;
  for (int a = 0; a < 4; ++a) {
    int c = static_cast<int>(by_arch[a].size());
    for (int i = 0; i < c; ++i) {
      if (i >= c - quota[a]) {
        suite.eval.push_back(by_arch[a][i]);
      } else {
        suite.train.push_back(by_arch[a][i]);
      }
    }
  }
  return suite;
}

TaskSpec inject_distractors(const EnvConfig& cfg, const TaskSpec& task, int k, uint64_t seed) {
  if (k < 1) throw ConfigError("inject_distractors needs k >= 1");
  Rng rng = Rng(seed).fork("distract");
  TaskSpec out = task;
  std::array<bool, 4> used{};
  for (const auto& o : out.scene0.objects) used[o.color_index % 4] = true;

  const Fixture* goal_region = nullptr;
  if (task.goal.kind == GoalKind::move_object_to_region) {
    goal_region = out.scene0.find_fixture(task.goal.target_id);
  }
  for (int d = 0; d < k; ++d) {
    std::vector<int> free_colors;
    for (int c = 0; c < 4; ++c) {
      if (!used[c]) free_colors.push_back(c);
    }
    if (free_colors.empty()) {
      throw AugmentationError("no free distractor color for task " + task.task_id);
    }
    int color = free_colors[rng.uniform_int(free_colors.size())];

    bool placed = false;
    for (int attempt = 0; attempt < 300 && !placed; ++attempt) {
      Vec2 p{rng.uniform(0.08, 0.92), rng.uniform(0.36, 0.60)};
      bool ok = true;
      for (const auto& o : out.scene0.objects) {
        if (dist(p, o.pos) < 0.13) ok = false;
      }
      if (goal_region != nullptr && dist(p, goal_region->pos) < goal_region->extent + 0.12) {
        ok = false;
      }
      for (const auto& f : out.scene0.fixtures) {
        if (f.kind == FixtureKind::slider && dist(p, handle_pos(f)) < 0.15) ok = false;
      }
      if (dist(p, out.scene0.gripper_pos) < 0.14) ok = false;
      if (ok) {
        out.scene0.objects.push_back({"dist" + std::to_string(d), color, p, false});
        used[color] = true;
        placed = true;
      }
    }
    if (!placed) {
      throw AugmentationError("no free space for distractor in task " + task.task_id);
    }
  }
  out.provenance = Provenance::distractor_augmented;
  out.task_id = task.task_id + "_dst" + std::to_string(seed % 1000);
  return out;
}

namespace {

bool expert_solves(const EnvConfig& cfg, const SceneState& scene0, const GoalSpec& goal) {
  Env env{cfg};
  SceneState s = scene0;
  Rng rng(0);
  for (int t = 0; t < cfg.horizon; ++t) {
    if (env.success(s, goal)) return true;
    s = env.step(s, scripted_expert(cfg, s, goal, 0.0, rng));
  }
  return env.success(s, goal);
}

}  // namespace

std::vector<TaskSpec> propose_novel_instructions(const EnvConfig& cfg, const TaskSpec& task,
                                                 uint64_t seed) {
  bool has_fixture = !task.scene0.fixtures.empty();
  if (task.scene0.objects.size() < 2 && !has_fixture) {
    throw ConfigError("propose_novel_instructions needs >= 2 objects or a fixture");
  }
  Env env{cfg};
  std::vector<TaskSpec> out;
  int idx = 0;
  auto add_candidate = [&](const GoalSpec& g) {
    if (g.kind == task.goal.kind && g.subject_id == task.goal.subject_id &&
        g.target_id == task.goal.target_id) {
      return;  // same instruction
    }
    if (env.success(task.scene0, g)) return;  // vacuous in this scene
    if (!expert_solves(cfg, task.scene0, g)) return;
    TaskSpec t = task;
    t.goal = g;
    t.provenance = Provenance::novel_instruction;
    t.task_id = task.task_id + "_nov" + std::to_string(idx++);
    out.push_back(t);
  };

  for (const auto& o : task.scene0.objects) {
    for (const auto& f : task.scene0.fixtures) {
      if (f.kind != FixtureKind::target_region) continue;
      add_candidate({GoalKind::move_object_to_region, o.id, f.id, cfg.move_threshold});
    }
  }
  for (const auto& f : task.scene0.fixtures) {
    if (f.kind != FixtureKind::slider) continue;
    add_candidate({GoalKind::open_slider, f.id, "", cfg.open_cutoff});
    add_candidate({GoalKind::close_slider, f.id, "", cfg.close_cutoff});
  }
  (void)seed;  // enumeration is deterministic; kept for interface stability
  return out;
}

// ---------------------------------------------------------------------------
// Scripted expert
// ---------------------------------------------------------------------------

namespace {

Action toward(const EnvConfig& cfg, const Vec2& from, const Vec2& to, double grip) {
  Action a;
  if (cfg.lattice_motion) {
    // bang-bang per axis: a 0.7 command still moves one lattice cell, leaving
    // headroom for additive noise to stall a step now and then
    double half_cell = 0.5 / cfg.width;
    a.dx = std::abs(to.x - from.x) > half_cell ? (to.x > from.x ? 0.7 : -0.7) : 0.0;
    a.dy = std::abs(to.y - from.y) > half_cell ? (to.y > from.y ? 0.7 : -0.7) : 0.0;
  } else {
    a.dx = std::clamp((to.x - from.x) / cfg.step_size, -1.0, 1.0);
    a.dy = std::clamp((to.y - from.y) / cfg.step_size, -1.0, 1.0);
  }
  a.grip = grip;
  return a;
}

}  // namespace

Action scripted_expert(const EnvConfig& cfg, const SceneState& s, const GoalSpec& g,
                       double noise, Rng& rng) {
  if (noise < 0.0) throw ConfigError("expert noise must be >= 0");
  Env env{cfg};
  // Sliders are driven to their end stop, not just past the cutoff, so the
  // achieved margin survives pixel quantization in any downstream judge.
  bool satisfied;
  if (g.kind == GoalKind::move_object_to_region) {
    satisfied = env.success(s, g);
  } else {
    double openness = s.find_fixture(g.subject_id)->slider_openness;
    satisfied = g.kind == GoalKind::open_slider ? openness >= 0.97 : openness <= 0.03;
  }
  Action a{0.0, 0.0, -1.0};
  if (satisfied) {
    // release anything still grabbed, then retract so the scene stays visible
    const Vec2 home{0.5, 0.06};
    if (s.gripper_closed) {
      a = Action{0.0, 0.0, 1.0};
    } else if (dist(s.gripper_pos, home) > 0.04) {
      a = toward(cfg, s.gripper_pos, home, -1.0);
    }
  } else {
    if (g.kind == GoalKind::move_object_to_region) {
      const ObjectState* subject = s.find_object(g.subject_id);
      const Fixture* region = s.find_fixture(g.target_id);
      if (subject->held) {
        if (dist(s.gripper_pos, region->pos) <= 0.035) {
          a = Action{0.0, 0.0, 1.0};  // release
        } else {
          a = toward(cfg, s.gripper_pos, region->pos, -1.0);
        }
      } else if (s.gripper_closed) {
        // closed on nothing: reopen while homing to the subject
        a = toward(cfg, s.gripper_pos, subject->pos, 1.0);
      } else if (dist(s.gripper_pos, subject->pos) <= 0.5 * cfg.grasp_radius) {
        a = Action{0.0, 0.0, 1.0};  // grasp
      } else {
        a = toward(cfg, s.gripper_pos, subject->pos, -1.0);
      }
    } else {
      const Fixture* slider = s.find_fixture(g.subject_id);
      Vec2 h = handle_pos(*slider);
      bool opening = g.kind == GoalKind::open_slider;
      Vec2 target{slider->pos.x + (opening ? slider->extent : 0.0), slider->pos.y};
      bool engaged = s.gripper_closed && s.held_index() < 0 &&
                     dist(s.gripper_pos, h) <= 0.9 * cfg.handle_radius;
      if (s.gripper_closed && s.held_index() >= 0) {
        // grabbed a block instead of the handle: dump it clear of the rail
        Vec2 dump{0.5, 0.5};
        if (dist(s.gripper_pos, dump) <= 0.06) {
          a = Action{0.0, 0.0, 1.0};  // release
        } else {
          a = toward(cfg, s.gripper_pos, dump, -1.0);
        }
      } else if (engaged) {
        a = toward(cfg, s.gripper_pos, target, -1.0);
      } else if (s.gripper_closed) {
        a = toward(cfg, s.gripper_pos, h, 1.0);  // lost the handle: reopen
      } else if (dist(s.gripper_pos, h) <= 0.5 * cfg.handle_radius) {
        a = Action{0.0, 0.0, 1.0};  // grab the handle
      } else {
        a = toward(cfg, s.gripper_pos, h, -1.0);
      }
    }
  }
  if (noise > 0.0) {
    a.dx = std::clamp(a.dx + rng.uniform(-noise, noise), -1.0, 1.0);
    a.dy = std::clamp(a.dy + rng.uniform(-noise, noise), -1.0, 1.0);
    a.grip = std::clamp(a.grip + rng.uniform(-noise, noise), -1.0, 1.0);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

Trajectory rollout_env(const EnvConfig& cfg, const TaskSpec& task, uint64_t reset_seed,
                       const std::function<Action(const Observation&, int)>& act) {
  Env env{cfg};
  Trajectory traj;
  traj.task_id = task.task_id;
  traj.goal = task.goal;
  traj.goal_class = goal_class_of(task.goal, task.scene0);
  traj.provenance = task.provenance;
  traj.source = "env_policy";
  traj.seed = reset_seed;
  auto [state, obs] = env.reset(task, reset_seed);
  traj.observations.push_back(obs);
  traj.success = env.success(state, task.goal);
  for (int t = 0; t < cfg.horizon; ++t) {
    Action a = act(traj.observations.back(), t);
    state = env.step(state, a);
    traj.actions.push_back(a);
    traj.observations.push_back(env.render(state));
    if (env.success(state, task.goal)) traj.success = true;
  }
  return traj;
}

Dataset collect_demonstrations(const EnvConfig& cfg, const std::vector<TaskSpec>& suite,
                               int n_per_task, double noise, uint64_t seed) {
  if (n_per_task < 1) throw ConfigError("collect_demonstrations needs n_per_task >= 1");
  Env env{cfg};
  Dataset data;
  data.trajectories.reserve(suite.size() * static_cast<size_t>(n_per_task));
  Rng root(seed);
  for (size_t ti = 0; ti < suite.size(); ++ti) {
    const TaskSpec& task = suite[ti];
    for (int d = 0; d < n_per_task; ++d) {
      Rng stream = root.fork("demo", ti * 100003ull + static_cast<uint64_t>(d));
      uint64_t reset_seed = stream.fork("reset").key();
      Rng noise_rng = stream.fork("noise");

      Trajectory traj;
      traj.task_id = task.task_id;
      traj.goal = task.goal;
      traj.goal_class = goal_class_of(task.goal, task.scene0);
      traj.provenance = task.provenance;
      traj.source = "env_expert";
      traj.seed = reset_seed;
      auto [state, obs] = env.reset(task, reset_seed);
      traj.observations.push_back(obs);
      traj.success = env.success(state, task.goal);
      for (int t = 0; t < cfg.horizon; ++t) {
        Action a = scripted_expert(cfg, state, task.goal, noise, noise_rng);
        state = env.step(state, a);
        traj.actions.push_back(a);
        traj.observations.push_back(env.render(state));
        if (env.success(state, task.goal)) traj.success = true;
      }
      data.trajectories.push_back(std::move(traj));
    }
  }
  return data;
}

}  // namespace wmgym::envsim
