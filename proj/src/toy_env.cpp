#include "fvla/toy_env.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <mutex>
#include <random>

#include "fvla/error.hpp"

namespace fvla::env {

namespace {

constexpr double kObjectSpacing = 0.1;
constexpr int kResetAttempts = 10000;

Rgb rgb(int r, int g, int b) {
  return {static_cast<float>(r) / 255.0f, static_cast<float>(g) / 255.0f, static_cast<float>(b) / 255.0f};
}

const Rgb kTable = rgb(96, 96, 96);
const Rgb kWall = rgb(58, 58, 78);
const Rgb kFloor = rgb(40, 40, 40);
const Rgb kWhiteBin = rgb(235, 235, 235);
const Rgb kBrownBin = rgb(120, 72, 32);
const Rgb kBlue = rgb(40, 90, 220);
const Rgb kGreen = rgb(50, 170, 70);
const Rgb kRed = rgb(kGripperRgb[0], kGripperRgb[1], kGripperRgb[2]);

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double clamp_step(double v) {
  if (!std::isfinite(v)) return 0.0;
  return std::clamp(v, -kMaxStep, kMaxStep);
}

void put(Image& img, int r, int c, Rgb color) {
  if (r < 0 || c < 0 || r >= img.height || c >= img.width) return;
  float* px = img.data.data() + (static_cast<std::size_t>(r) * img.width + c) * 3;
  px[0] = color.r;
  px[1] = color.g;
  px[2] = color.b;
}

/// Pixels whose centre lies inside the axis-aligned ellipse.
void fill_ellipse(Image& img, Vec2 centre, double rx, double ry, Rgb color) {
  const int r0 = static_cast<int>(std::floor(centre.y - ry - 1));
  const int r1 = static_cast<int>(std::ceil(centre.y + ry + 1));
  const int c0 = static_cast<int>(std::floor(centre.x - rx - 1));
  const int c1 = static_cast<int>(std::ceil(centre.x + rx + 1));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      const double u = (c + 0.5 - centre.x) / rx;
      const double v = (r + 0.5 - centre.y) / ry;
      if (u * u + v * v <= 1.0) put(img, r, c, color);
    }
}

/// Pixels whose centre lies inside [x0, x1) x [y0, y1).
void fill_rect(Image& img, double x0, double y0, double x1, double y1, Rgb color) {
  const int c0 = static_cast<int>(std::ceil(x0 - 0.5));
  const int c1 = static_cast<int>(std::ceil(x1 - 0.5));
  const int r0 = static_cast<int>(std::ceil(y0 - 0.5));
  const int r1 = static_cast<int>(std::ceil(y1 - 0.5));
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) put(img, r, c, color);
}

/// Horizontal scale and radius factor of a workspace row in each view.
double view_scale(double y, View view) {
  switch (view) {
    case View::Top:
    case View::Side:
      return 1.0;
    case View::Oblique:
      return 0.6 + 0.4 * y;
  }
  return 1.0;
}

double vertical_squash(View view) {
  switch (view) {
    case View::Top:
      return 1.0;
    case View::Side:
      return 100.0 / kFrameSize;
    case View::Oblique:
      return 192.0 / kFrameSize;
  }
  return 1.0;
}

void draw_box(Image& img, const Box& box, View view, Rgb color) {
  // Fill row by row so the oblique trapezoid is exact at pixel centres.
  const Vec2 top = to_pixel(box.lo, view);
  const Vec2 bottom = to_pixel(box.hi, view);
  const int r0 = static_cast<int>(std::ceil(top.y - 0.5));
  const int r1 = static_cast<int>(std::ceil(bottom.y - 0.5));
  for (int r = r0; r < r1; ++r) {
    const double frac = (r + 0.5 - top.y) / (bottom.y - top.y);
    const double y = box.lo.y + frac * (box.hi.y - box.lo.y);
    const double x0 = to_pixel({box.lo.x, y}, view).x;
    const double x1 = to_pixel({box.hi.x, y}, view).x;
    fill_rect(img, x0, r, x1, r + 1, color);
  }
}

void draw_object(Image& img, Vec2 pos, ObjectClass cls, View view) {
  const Vec2 px = to_pixel(pos, view);
  const double s = view_scale(pos.y, view);
  const double radius = 8.0 * s;
  fill_ellipse(img, px, radius, view == View::Top ? radius : radius * 0.6, color_of(cls));
}

void draw_gripper(Image& img, const EnvState& st, View view) {
  Vec2 px = to_pixel(st.gripper, view);
  const double s = view_scale(st.gripper.y, view);
  const double sy = view == View::Top ? s : s * 0.7;
  if (view != View::Top) px.y -= (st.grip == Grip::Open ? 10.0 : 5.0) * s;
  if (st.grip == Grip::Closed) {
    fill_rect(img, px.x - 6 * s, px.y - 6 * sy, px.x + 6 * s, px.y + 6 * sy, kRed);
  } else {
    // Open jaws: two bars joined at the top.
    fill_rect(img, px.x - 7 * s, px.y - 7 * sy, px.x - 2 * s, px.y + 7 * sy, kRed);
    fill_rect(img, px.x + 2 * s, px.y - 7 * sy, px.x + 7 * s, px.y + 7 * sy, kRed);
    fill_rect(img, px.x - 7 * s, px.y - 7 * sy, px.x + 7 * s, px.y - 3 * sy, kRed);
  }
}

Image make_background(View view) {
  Image img(kFrameSize, kFrameSize);
  if (view == View::Top) {
    fill_rect(img, 0, 0, kFrameSize, kFrameSize, kTable);
  } else {
    const double top = to_pixel({0.0, 0.0}, view).y;
    fill_rect(img, 0, 0, kFrameSize, kFrameSize, kFloor);
    fill_rect(img, 0, 0, kFrameSize, top, kWall);
    draw_box(img, Box{{0.0, 0.0}, {1.0, 1.0}}, view, kTable);
  }
  draw_box(img, kTablewareBin, view, kWhiteBin);
  draw_box(img, kWasteBin, view, kBrownBin);
  return img;
}

}  // namespace

std::string to_string(ObjectClass c) { return c == ObjectClass::Tableware ? "tableware" : "waste"; }

std::string to_string(View v) {
  switch (v) {
    case View::Top:
      return "top";
    case View::Side:
      return "side";
    case View::Oblique:
      return "oblique";
  }
  return "?";
}

View view_from_index(int index) {
  if (index < 0 || index > 2) throw Error(ErrorCode::UnknownView, "view " + std::to_string(index));
  return static_cast<View>(index);
}

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }
double chebyshev(Vec2 a, Vec2 b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

const Box& bin_for(ObjectClass c) { return c == ObjectClass::Tableware ? kTablewareBin : kWasteBin; }
const Box& other_bin(ObjectClass c) { return c == ObjectClass::Tableware ? kWasteBin : kTablewareBin; }

const Object& EnvState::object(int id) const {
  for (const auto& o : objects)
    if (o.id == id) return o;
  throw Error(ErrorCode::InvalidArgument, "no object with id " + std::to_string(id));
}

EnvAction action_from_row(const actions::ActionChunk& chunk, int t) {
  EnvAction a;
  a.dx = chunk.at(t, 0);
  a.dy = chunk.at(t, 1);
  const double g = chunk.at(t, 2);
  a.grip = g > 0.5 ? GripCmd::Close : (g < -0.5 ? GripCmd::Open : GripCmd::Hold);
  return a;
}

void write_action(actions::ActionChunk& chunk, int t, const EnvAction& a) {
  chunk.at(t, 0) = a.dx;
  chunk.at(t, 1) = a.dy;
  chunk.at(t, 2) = static_cast<double>(static_cast<int>(a.grip));
}

EnvState reset(std::uint64_t seed, int n_objects) {
  if (n_objects < 0 || n_objects > kMaxObjects)
    throw Error(ErrorCode::InvalidArgument, "n_objects must be in [0, " + std::to_string(kMaxObjects) + "]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(kSpawnRegion.lo.x, kSpawnRegion.hi.x);
  std::uniform_real_distribution<double> uy(kSpawnRegion.lo.y, kSpawnRegion.hi.y);
  std::bernoulli_distribution waste(0.5);
  EnvState st;
  st.rng_seed = seed;
  for (int attempt = 0; static_cast<int>(st.objects.size()) < n_objects; ++attempt) {
    if (attempt >= kResetAttempts) throw Error(ErrorCode::InvalidArgument, "could not place objects");
    const Vec2 p{ux(rng), uy(rng)};
    const bool is_waste = waste(rng);
    const bool clear = std::all_of(st.objects.begin(), st.objects.end(),
                                   [&](const Object& o) { return distance(o.pos, p) >= kObjectSpacing; });
    if (!clear) continue;
    st.objects.push_back({static_cast<int>(st.objects.size()), is_waste ? ObjectClass::Waste : ObjectClass::Tableware, p,
                          false});
  }
  return st;
}

EnvState step(const EnvState& state, const EnvAction& action) {
  EnvState s = state;
  s.gripper.x = clamp01(s.gripper.x + clamp_step(action.dx));
  s.gripper.y = clamp01(s.gripper.y + clamp_step(action.dy));
  auto find = [&](int id) -> Object& {
    for (auto& o : s.objects)
      if (o.id == id) return o;
    throw Error(ErrorCode::InvalidArgument, "held object missing");
  };
  if (s.held) find(*s.held).pos = s.gripper;
  switch (action.grip) {
    case GripCmd::Close: {
      s.grip = Grip::Closed;
      if (!s.held) {
        const Object* best = nullptr;
        for (const auto& o : s.objects) {
          if (o.binned || distance(o.pos, s.gripper) > kAttachRadius) continue;
          if (!best || distance(o.pos, s.gripper) < distance(best->pos, s.gripper)) best = &o;
        }
        if (best) {
          s.held = best->id;
          find(best->id).pos = s.gripper;
        }
      }
      break;
    }
    case GripCmd::Open:
      s.grip = Grip::Open;
      if (s.held) {
        Object& o = find(*s.held);
        o.pos = s.gripper;
        o.binned = kTablewareBin.contains(o.pos) || kWasteBin.contains(o.pos);
        s.held.reset();
      }
      break;
    case GripCmd::Hold:
      break;
  }
  ++s.step_count;
  return s;
}

bool success(const EnvState& state) {
  if (state.held) return false;
  return std::all_of(state.objects.begin(), state.objects.end(),
                     [](const Object& o) { return o.binned && bin_for(o.cls).contains(o.pos); });
}

bool unrecoverable(const EnvState& state) {
  return std::any_of(state.objects.begin(), state.objects.end(),
                     [](const Object& o) { return o.binned && !bin_for(o.cls).contains(o.pos); });
}

std::optional<int> tracked_object(const EnvState& state) {
  if (state.held) return state.held;
  std::optional<int> best;
  double best_d = 0.0;
  for (const auto& o : state.objects) {
    if (o.binned) continue;
    const double d = distance(o.pos, state.gripper);
    if (!best || d < best_d) {
      best = o.id;
      best_d = d;
    }
  }
  return best;
}

EnvAction oracle_action(const EnvState& state, bool wrong_bin, Vec2 offset) {
  EnvAction a;
  const auto target_id = tracked_object(state);
  if (!target_id) return a;
  const Object& obj = state.object(*target_id);
  const bool carrying = state.held.has_value();
  Vec2 target;
  if (carrying || wrong_bin)
    target = (wrong_bin ? other_bin(obj.cls) : bin_for(obj.cls)).center();
  else
    target = obj.pos;
  target = {clamp01(target.x + offset.x), clamp01(target.y + offset.y)};
  a.dx = clamp_step(target.x - state.gripper.x);
  a.dy = clamp_step(target.y - state.gripper.y);
  const bool arrives = chebyshev(target, state.gripper) <= kMaxStep;
  if (arrives) {
    if (carrying) a.grip = GripCmd::Open;
    else if (!wrong_bin) a.grip = GripCmd::Close;
  }
  return a;
}

OracleChunk oracle_chunk(const EnvState& state, int horizon) {
  if (horizon < 1) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 1");
  OracleChunk out{actions::ActionChunk(horizon, kActionDims), {}};
  out.states.reserve(static_cast<std::size_t>(horizon));
  EnvState s = state;
  for (int t = 0; t < horizon; ++t) {
    const EnvAction a = success(s) ? EnvAction{} : oracle_action(s);
    write_action(out.chunk, t, a);
    s = step(s, a);
    out.states.push_back(s);
  }
  return out;
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::Idle: return "idle";
    case Phase::Reach: return "reach";
    case Phase::Grasp: return "grasp";
    case Phase::Carry: return "carry";
    case Phase::Place: return "place";
  }
  return "unknown";
}

Phase transition_phase(const EnvState& before, const EnvState& after) {
  if (!before.held && after.held) return Phase::Grasp;
  if (before.held && !after.held) return Phase::Place;
  if (after.held) return Phase::Carry;
  if (!(before.gripper == after.gripper)) return Phase::Reach;
  return Phase::Idle;
}

std::vector<EnvState> exploration_states(std::uint64_t seed, std::size_t count) {
  std::vector<EnvState> out;
  out.reserve(count);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (out.size() < count) {
    EnvState s = reset(rng(), 1 + static_cast<int>(rng() % 4));
    bool wrong = false;
    Vec2 offset;
    for (int t = 0; t < 200 && out.size() < count && !success(s); ++t) {
      if (u(rng) < 0.1) wrong = !wrong;
      if (u(rng) < 0.1) offset = u(rng) < 0.5 ? Vec2{} : Vec2{0.2 * (u(rng) - 0.5), 0.2 * (u(rng) - 0.5)};
      EnvAction a = oracle_action(s, wrong, offset);
      a.dx += 0.04 * (u(rng) - 0.5);
      a.dy += 0.04 * (u(rng) - 0.5);
      s = step(s, a);
      if (u(rng) < 0.5) out.push_back(s);
    }
  }
  return out;
}

std::vector<EnvState> oracle_states(std::uint64_t seed, std::size_t count, int n_objects) {
  std::vector<EnvState> out;
  out.reserve(count);
  std::mt19937_64 rng(seed);
  while (out.size() < count) {
    EnvState s = reset(rng(), n_objects);
    for (int t = 0; t < 200 && out.size() < count && !success(s); ++t) {
      s = step(s, oracle_action(s));
      if (rng() % 2 == 0) out.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------- rendering

Rgb color_of(ObjectClass c) { return c == ObjectClass::Tableware ? kBlue : kGreen; }

Vec2 to_pixel(Vec2 p, View view) {
  const double squash = vertical_squash(view);
  switch (view) {
    case View::Top:
      return {p.x * kFrameSize, p.y * kFrameSize};
    case View::Side:
      return {p.x * kFrameSize, 100.0 + p.y * squash * kFrameSize};
    case View::Oblique:
      return {kFrameSize / 2.0 + (p.x - 0.5) * kFrameSize * view_scale(p.y, view), 48.0 + p.y * squash * kFrameSize};
  }
  return {};
}

Vec2 top_pixel_to_workspace(double row, double col) { return {col / kFrameSize, row / kFrameSize}; }

const Image& background(View view) {
  static const std::array<Image, 3> cache = {make_background(View::Top), make_background(View::Side),
                                             make_background(View::Oblique)};
  return cache[static_cast<std::size_t>(view)];
}

Image render(const EnvState& state, View view) {
  Image img = background(view);
  for (const auto& o : state.objects)
    if (!state.held || o.id != *state.held) draw_object(img, o.pos, o.cls, view);
  if (state.held) draw_object(img, state.gripper, state.object(*state.held).cls, view);
  draw_gripper(img, state, view);
  return img;
}

Image render(const EnvState& state, int view) { return render(state, view_from_index(view)); }

}  // namespace fvla::env
