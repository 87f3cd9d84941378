#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "tailsafe/criteria.hpp"
#include "tailsafe/geometry.hpp"

namespace tailsafe {

enum class Outcome { Success, Failure };
enum class Verdict { Success, Failure, Ongoing };

struct WorldState {
  PoseSE2 ee{};
  double grip = 0.0;  // 0 open, 1 closed
  PoseSE2 object{};
  int t = 0;
  Eigen::VectorXd embedding;
};

// What the scripted policy senses at one step: the object pose corrupted by
// the episode's observation noise, and how well-centered the object sits in
// the wrist camera.
struct Observation {
  PoseSE2 object{};
  double visibility = 0.0;
};

// Episode-scoped randomness: observation noise is a pure function of
// (seed, step index), so replaying a recorded action sequence reproduces the
// recorded states exactly.
struct EpisodeContext {
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
};

struct PerturbationSpec {
  double displacement_range = 0.03;  // meters, +- bound on object x/y
  double rotation_range = 0.35;      // radians, +- bound on object theta
  double noise_sigma_min = 0.01;
  double noise_sigma_max = 0.05;
  std::uint64_t seed = 0;
};

// Scripted visual-servo policy parameters. The servo target blends the
// demonstrated nominal object pose with the observed one; the blend weight
// rises with how well-centered the object is in view (gain k_vis) and with
// proximity once the end effector is within r_blind of the observed object.
struct PolicyConfig {
  double k_vis = 0.4;
  double r_blind = 0.10;          // proximity-trust radius
  double r_align = 0.06;          // switch from travel heading to grasp heading
  double close_trigger = 0.004;   // believed position error to start closing
  double close_rot_trigger = 0.1; // believed heading error to start closing
  double close_obs_trigger = 0.008;  // observed object distance to allow closing
  double kp_t = 1.0;
  double kp_r = 0.5;
  double speed_floor = 0.35;  // translational speed fraction at zero trust
  double vis_q_lo = 0.45;  // centeredness window mapped to [0,1] trust
  double vis_q_hi = 0.9;
  double prox_lateral_gate = 0.05;  // proximity trust fades with off-axis offset
  // The raw proximity evidence is squashed through a smoothstep over this
  // window, making the final lock-on all-or-nothing: a partial match decays
  // to zero trust instead of half-committing.
  double prox_lock_lo = 0.25;
  double prox_lock_hi = 0.75;
};

struct WorldConfig {
  PoseSE2 ee_start{0.0, 0.0, 0.0};
  PoseSE2 nominal_object{0.35, 0.0, 0.6};
  PoseSE2 place_pose{0.10, -0.25, 0.0};
  double object_radius = 0.03;
  int object_point_count = 16;
  int horizon = 120;
  double grasp_tol_t = 0.01;  // meters
  double grasp_tol_r = 0.15;  // radians
  double place_tol = 0.01;
  double pose_noise_scale = 0.02;  // observed-pose noise = sigma * this
  double rot_noise_scale = 0.1;
  double embedding_noise_scale = 0.15;  // embedding noise = sigma * this, per dim
  ActionBox box{};
  // Wider half-fov and a shorter near range than the bare camera default keep
  // the object visible until the gripper is almost on top of it, so the
  // visibility and graspability scores hand off without a dead zone.
  CameraModel camera{640, 480, {}, 0.7, 0.8, 0.05};
  PolicyConfig policy{};
  std::uint64_t embedding_seed = 2024;
};

struct RolloutRecord {
  WorldState state;
  ActionDelta action{};
  std::optional<SafetyScores> scores;
  std::optional<double> h;
  std::optional<double> q_label;
};

struct Rollout {
  int episode_id = 0;
  std::vector<RolloutRecord> records;
  Outcome outcome = Outcome::Failure;
  std::uint64_t seed = 0;
  int recoveries = 0;  // monitor interventions; not part of the JSONL schema
};

using PolicyFn = std::function<ActionDelta(const WorldState&, const Observation&)>;
// Returns (possibly corrected action, whether the monitor intervened).
using MonitorFn = std::function<std::pair<ActionDelta, bool>(const WorldState&, const ActionDelta&)>;

class Simulator {
 public:
  explicit Simulator(WorldConfig cfg);

  const WorldConfig& config() const { return cfg_; }
  const EmbeddingModel& embedding_model() const { return embedding_; }

  std::vector<Eigen::Vector2d> object_boundary(const PoseSE2& object) const;
  PoseSE2 grasp_pose(const PoseSE2& object) const { return object; }

  WorldState initial_state(const EpisodeContext& ctx) const;
  // Draws the perturbed initial object pose and the episode noise sigma.
  std::pair<WorldState, EpisodeContext> perturb_initial(const PerturbationSpec& spec,
                                                        std::uint64_t rng_seed) const;

  Observation observe(const WorldState& state, const EpisodeContext& ctx) const;
  WorldState step(const WorldState& state, const ActionDelta& action,
                  const EpisodeContext& ctx) const;
  Verdict judge_outcome(const WorldState& state) const;

  ActionDelta nominal_policy(const WorldState& state, const Observation& obs) const;
  // Same servo with the travel heading rotated by heading_offset; used by the
  // ensemble baseline.
  ActionDelta nominal_policy_variant(const WorldState& state, const Observation& obs,
                                     double heading_offset) const;

  Rollout run_rollout(const PolicyFn& policy, const WorldState& init, int horizon,
                      const EpisodeContext& ctx, const MonitorFn* monitor = nullptr) const;

  // Embedding input vector for a state given an observed object pose.
  Eigen::VectorXd embedding_input(const WorldState& state, const Observation& obs) const;

 private:
  Eigen::VectorXd compute_embedding(const PoseSE2& ee, double grip,
                                    const PoseSE2& object_true, int t,
                                    const EpisodeContext& ctx) const;

  WorldConfig cfg_;
  EmbeddingModel embedding_;
};

}  // namespace tailsafe
