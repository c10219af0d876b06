#pragma once

// Deterministic 2D tabletop: a gripper moves objects into class-matching
// bins at opposite corners of the unit square. States are values; step
// returns a new state.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fvla/action_codec.hpp"
#include "fvla/image.hpp"

namespace fvla::env {

inline constexpr double kAttachRadius = 0.04;
inline constexpr double kMaxStep = 0.05;
inline constexpr int kActionDims = 3;  // dx, dy, grip
inline constexpr int kMaxObjects = 12;

enum class ObjectClass { Tableware, Waste };
enum class Grip { Open, Closed };
enum class GripCmd { Open = -1, Hold = 0, Close = 1 };
enum class View { Top = 0, Side = 1, Oblique = 2 };

std::string to_string(ObjectClass c);
std::string to_string(View v);
View view_from_index(int index);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

double distance(Vec2 a, Vec2 b);
double chebyshev(Vec2 a, Vec2 b);

struct Box {
  Vec2 lo;
  Vec2 hi;
  bool contains(Vec2 p) const { return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y; }
  Vec2 center() const { return {(lo.x + hi.x) / 2, (lo.y + hi.y) / 2}; }
};

/// Tableware goes top-left (white bin), waste bottom-right (brown bin).
inline constexpr Box kTablewareBin{{0.0, 0.0}, {0.2, 0.2}};
inline constexpr Box kWasteBin{{0.8, 0.8}, {1.0, 1.0}};
inline constexpr Box kSpawnRegion{{0.25, 0.25}, {0.75, 0.75}};

const Box& bin_for(ObjectClass c);
const Box& other_bin(ObjectClass c);

struct Object {
  int id = 0;
  ObjectClass cls = ObjectClass::Tableware;
  Vec2 pos;
  bool binned = false;  // released inside a bin; no longer graspable
  friend bool operator==(const Object&, const Object&) = default;
};

struct EnvState {
  Vec2 gripper{0.5, 0.5};
  Grip grip = Grip::Open;
  std::optional<int> held;  // object id
  std::vector<Object> objects;
  int step_count = 0;
  std::uint64_t rng_seed = 0;

  const Object& object(int id) const;
  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct EnvAction {
  double dx = 0.0;
  double dy = 0.0;
  GripCmd grip = GripCmd::Hold;
};

/// Row t of a chunk as an action: grip > 0.5 closes, < -0.5 opens.
EnvAction action_from_row(const actions::ActionChunk& chunk, int t);
void write_action(actions::ActionChunk& chunk, int t, const EnvAction& a);

/// Gripper at the centre, objects rejection-sampled inside the spawn region.
EnvState reset(std::uint64_t seed, int n_objects);

/// Move (clamped to max_step per axis and to the workspace), carry, then grip.
EnvState step(const EnvState& state, const EnvAction& action);

bool success(const EnvState& state);
/// Some object was released into the other class's bin; binned objects never move again.
bool unrecoverable(const EnvState& state);

/// Phase label of one transition; doubles as its transition-text id.
enum class Phase { Idle = 1, Reach = 2, Grasp = 3, Carry = 4, Place = 5 };
std::string to_string(Phase p);
Phase transition_phase(const EnvState& before, const EnvState& after);

/// Object the greedy plan works on next: the held one, else the nearest
/// object not yet binned (ties to the lower id).
std::optional<int> tracked_object(const EnvState& state);

struct OracleChunk {
  actions::ActionChunk chunk;
  std::vector<EnvState> states;  // state after each step
};

/// One greedy step toward the plan; `wrong_bin` sends the tracked object (or,
/// before the grasp, the empty gripper) to the other bin.
EnvAction oracle_action(const EnvState& state, bool wrong_bin = false, Vec2 offset = {});
OracleChunk oracle_chunk(const EnvState& state, int horizon);

/// States visited by seeded rollouts of a perturbed oracle (episodes with 1-4
/// objects, wrong-bin and offset segments, action jitter): a corpus covering
/// both clean and corrupted behaviour.
std::vector<EnvState> exploration_states(std::uint64_t seed, std::size_t count);

/// States visited by clean oracle episodes with n_objects objects, each kept
/// with probability 1/2.
std::vector<EnvState> oracle_states(std::uint64_t seed, std::size_t count, int n_objects = 3);

// ---------------------------------------------------------------- rendering

inline constexpr int kFrameSize = 256;

Image render(const EnvState& state, View view);
Image render(const EnvState& state, int view);

/// Static scene (bins only) for a view.
const Image& background(View view);

/// Pixel centre (row, col) of a workspace point in the given view.
Vec2 to_pixel(Vec2 p, View view);
/// Inverse of to_pixel for the top view.
Vec2 top_pixel_to_workspace(double row, double col);

/// Palette; every channel is a multiple of 1/255 so PNG round trips are exact.
struct Rgb {
  float r, g, b;
};
Rgb color_of(ObjectClass c);
inline constexpr int kGripperRgb[3] = {230, 30, 30};

}  // namespace fvla::env
