#include "tailsafe/world.hpp"

#include <random>
#include <stdexcept>

namespace tailsafe {
namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

struct StepDraws {
  double nx = 0.0, ny = 0.0, ntheta = 0.0;  // observation noise, standard normal
  Eigen::VectorXd emb;                      // embedding noise, standard normal
};

// All randomness touching step t of an episode comes from this one stream, in
// a fixed draw order, so observe() and step() see the same noise.
StepDraws step_draws(std::uint64_t seed, int t) {
  std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(t)));
  std::normal_distribution<double> gauss(0.0, 1.0);
  StepDraws d;
  d.nx = gauss(rng);
  d.ny = gauss(rng);
  d.ntheta = gauss(rng);
  d.emb.resize(EmbeddingModel::kOutputDim);
  for (Eigen::Index i = 0; i < d.emb.size(); ++i) d.emb(i) = gauss(rng);
  return d;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

bool action_finite(const ActionDelta& a) {
  return std::isfinite(a.dx) && std::isfinite(a.dy) && std::isfinite(a.dtheta) &&
         std::isfinite(a.dgrip);
}

}  // namespace

Simulator::Simulator(WorldConfig cfg) : cfg_(cfg), embedding_(cfg.embedding_seed) {}

std::vector<Eigen::Vector2d> Simulator::object_boundary(const PoseSE2& object) const {
  std::vector<Eigen::Vector2d> pts;
  pts.reserve(cfg_.object_point_count);
  for (int i = 0; i < cfg_.object_point_count; ++i) {
    const double a = object.theta + 2.0 * M_PI * i / cfg_.object_point_count;
    pts.emplace_back(object.x + cfg_.object_radius * std::cos(a),
                     object.y + cfg_.object_radius * std::sin(a));
  }
  return pts;
}

Observation Simulator::observe(const WorldState& state, const EpisodeContext& ctx) const {
  const StepDraws d = step_draws(ctx.seed, state.t);
  Observation obs;
  obs.object.x = state.object.x + ctx.noise_sigma * cfg_.pose_noise_scale * d.nx;
  obs.object.y = state.object.y + ctx.noise_sigma * cfg_.pose_noise_scale * d.ny;
  obs.object.theta =
      wrap_angle(state.object.theta + ctx.noise_sigma * cfg_.rot_noise_scale * d.ntheta);
  obs.visibility = bearing_centeredness(cfg_.camera, object_boundary(state.object), state.ee);
  return obs;
}

Eigen::VectorXd Simulator::embedding_input(const WorldState& state, const Observation& obs) const {
  const double c = std::cos(state.ee.theta), s = std::sin(state.ee.theta);
  const double dx = obs.object.x - state.ee.x, dy = obs.object.y - state.ee.y;
  Eigen::VectorXd z(EmbeddingModel::kInputDim);
  z << (c * dx + s * dy) / 0.2, (-s * dx + c * dy) / 0.2,
      wrap_angle(obs.object.theta - state.ee.theta) / M_PI, obs.visibility, state.grip,
      pose_dist(state.ee, cfg_.place_pose) / 0.5;
  return z;
}

Eigen::VectorXd Simulator::compute_embedding(const PoseSE2& ee, double grip,
                                             const PoseSE2& object_true, int t,
                                             const EpisodeContext& ctx) const {
  WorldState tmp;
  tmp.ee = ee;
  tmp.grip = grip;
  tmp.object = object_true;
  tmp.t = t;
  const Observation obs = observe(tmp, ctx);
  const StepDraws d = step_draws(ctx.seed, t);
  return embedding_.embed(embedding_input(tmp, obs),
                          ctx.noise_sigma * cfg_.embedding_noise_scale, &d.emb);
}

WorldState Simulator::initial_state(const EpisodeContext& ctx) const {
  WorldState s;
  s.ee = cfg_.ee_start;
  s.grip = 0.0;
  s.object = cfg_.nominal_object;
  s.t = 0;
  s.embedding = compute_embedding(s.ee, s.grip, s.object, 0, ctx);
  return s;
}

std::pair<WorldState, EpisodeContext> Simulator::perturb_initial(const PerturbationSpec& spec,
                                                                 std::uint64_t rng_seed) const {
  std::mt19937_64 rng(mix(spec.seed, rng_seed));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double dx = spec.displacement_range * unit(rng);
  const double dy = spec.displacement_range * unit(rng);
  const double dth = spec.rotation_range * unit(rng);
  std::uniform_real_distribution<double> usig(spec.noise_sigma_min, spec.noise_sigma_max);
  EpisodeContext ctx{rng_seed, usig(rng)};

  WorldState s;
  s.ee = cfg_.ee_start;
  s.grip = 0.0;
  s.object = PoseSE2{cfg_.nominal_object.x + dx, cfg_.nominal_object.y + dy,
                     wrap_angle(cfg_.nominal_object.theta + dth)};
  s.t = 0;
  s.embedding = compute_embedding(s.ee, s.grip, s.object, 0, ctx);
  return {s, ctx};
}

WorldState Simulator::step(const WorldState& state, const ActionDelta& action,
                           const EpisodeContext& ctx) const {
  if (!pose_finite(state.ee) || !pose_finite(state.object) || !std::isfinite(state.grip))
    throw std::invalid_argument("step: non-finite state rejected");
  if (!action_finite(action)) throw std::invalid_argument("step: non-finite action rejected");

  const ActionDelta a = cfg_.box.clip(action);
  const bool attached = state.grip >= 1.0 &&
                        pose_dist(state.ee, grasp_pose(state.object)) <= cfg_.grasp_tol_t &&
                        angle_dist(state.ee.theta, grasp_pose(state.object).theta) <= cfg_.grasp_tol_r;

  WorldState next;
  next.ee = PoseSE2{state.ee.x + a.dx, state.ee.y + a.dy, wrap_angle(state.ee.theta + a.dtheta)};
  next.grip = clamp01(state.grip + a.dgrip);
  next.object = state.object;
  if (attached) {
    next.object.x += a.dx;
    next.object.y += a.dy;
    next.object.theta = wrap_angle(next.object.theta + a.dtheta);
  }
  // Compliant fingers seat the object when the gripper finishes closing on a
  // pose within tolerance; after that the grasp is exact.
  if (state.grip < 1.0 && next.grip >= 1.0 &&
      pose_dist(next.ee, state.object) <= cfg_.grasp_tol_t &&
      angle_dist(next.ee.theta, state.object.theta) <= cfg_.grasp_tol_r) {
    next.object = next.ee;
  }
  next.t = state.t + 1;
  next.embedding = compute_embedding(next.ee, next.grip, next.object, next.t, ctx);
  return next;
}

Verdict Simulator::judge_outcome(const WorldState& state) const {
  if (state.grip >= 1.0) {
    const PoseSE2 g = grasp_pose(state.object);
    const bool held = pose_dist(state.ee, g) <= cfg_.grasp_tol_t &&
                      angle_dist(state.ee.theta, g.theta) <= cfg_.grasp_tol_r;
    if (!held) return Verdict::Failure;  // gripper closed on empty space
    if (pose_dist(state.object, cfg_.place_pose) <= cfg_.place_tol) return Verdict::Success;
  }
  if (state.t >= cfg_.horizon) return Verdict::Failure;
  return Verdict::Ongoing;
}

ActionDelta Simulator::nominal_policy(const WorldState& state, const Observation& obs) const {
  return nominal_policy_variant(state, obs, 0.0);
}

ActionDelta Simulator::nominal_policy_variant(const WorldState& state, const Observation& obs,
                                              double heading_offset) const {
  const PolicyConfig& pc = cfg_.policy;
  const ActionBox& box = cfg_.box;

  if (state.grip >= 1.0) {
    // Transport: servo the believed object pose onto the place pose.
    const double ex = cfg_.place_pose.x - obs.object.x;
    const double ey = cfg_.place_pose.y - obs.object.y;
    return box.clip(ActionDelta{pc.kp_t * ex, pc.kp_t * ey, 0.0, 0.0});
  }
  if (state.grip > 0.0) {
    // Mid-close: finish only while the observed object is still within reach.
    // A partial close with nothing in the fingers is aborted by reopening, so
    // the policy never completes a grasp on empty space.
    if (pose_dist(state.ee, obs.object) <= pc.close_obs_trigger)
      return ActionDelta{0.0, 0.0, 0.0, box.dgrip};
    return ActionDelta{0.0, 0.0, 0.0, -box.dgrip};
  }

  // Trust in the observation: visual centeredness plus proximity override.
  const double vis_q =
      clamp01((obs.visibility - pc.vis_q_lo) / (pc.vis_q_hi - pc.vis_q_lo));
  const double w_vis = (1.0 - pc.k_vis) * vis_q;
  const double r_obs = pose_dist(state.ee, obs.object);
  // Proximity can finish the lock-on only for a head-on approach: the gate
  // fades with the observed object's lateral offset in the gripper frame, so
  // a servo that converged beside the object stays distrustful.
  const double ceet = std::cos(state.ee.theta), seet = std::sin(state.ee.theta);
  const double lat_obs = std::abs(-seet * (obs.object.x - state.ee.x) +
                                  ceet * (obs.object.y - state.ee.y));
  const double prox_raw = clamp01((pc.r_blind - r_obs) / pc.r_blind) *
                          clamp01(1.0 - lat_obs / pc.prox_lateral_gate);
  // Squash the proximity evidence so the lock-on is bistable: weak evidence
  // collapses to zero (the servo falls back to the demonstrated pose) while
  // strong evidence saturates and completes the grasp.
  const double px = clamp01((prox_raw - pc.prox_lock_lo) / (pc.prox_lock_hi - pc.prox_lock_lo));
  const double w_prox = px * px * (3.0 - 2.0 * px);
  const double trust = clamp01(w_vis + w_prox);

  PoseSE2 target;
  target.x = cfg_.nominal_object.x + trust * (obs.object.x - cfg_.nominal_object.x);
  target.y = cfg_.nominal_object.y + trust * (obs.object.y - cfg_.nominal_object.y);
  target.theta = wrap_angle(cfg_.nominal_object.theta +
                            trust * wrap_angle(obs.object.theta - cfg_.nominal_object.theta));

  const double ex = target.x - state.ee.x;
  const double ey = target.y - state.ee.y;
  const double err_t = std::hypot(ex, ey);
  const double err_grasp_rot = wrap_angle(target.theta - state.ee.theta);

  // Close only when the observed object itself is within reach; a converged
  // servo with the object lost from view keeps waiting instead of closing on
  // empty space.
  if (err_t <= pc.close_trigger && std::abs(err_grasp_rot) <= pc.close_rot_trigger &&
      r_obs <= pc.close_obs_trigger)
    return ActionDelta{0.0, 0.0, 0.0, box.dgrip};

  // Far out, face the direction of travel (keeps the object centered in the
  // wrist camera); near the object, rotate into the grasp orientation.
  double heading_target;
  if (r_obs > pc.r_align && err_t > 1e-9)
    heading_target = std::atan2(ey, ex);
  else
    heading_target = target.theta;
  const double err_r = wrap_angle(heading_target - state.ee.theta);

  // Move cautiously while the observation is distrusted; full speed once the
  // servo has locked on. Scaling after the clip caps the cruise speed itself,
  // which is what stretches marginal episodes out.
  const double speed = pc.speed_floor + (1.0 - pc.speed_floor) * trust;
  const double c = std::cos(heading_offset), s = std::sin(heading_offset);
  ActionDelta a = box.clip(ActionDelta{pc.kp_t * (c * ex - s * ey),
                                       pc.kp_t * (s * ex + c * ey), pc.kp_r * err_r, 0.0});
  a.dx *= speed;
  a.dy *= speed;
  return a;
}

Rollout Simulator::run_rollout(const PolicyFn& policy, const WorldState& init, int horizon,
                               const EpisodeContext& ctx, const MonitorFn* monitor) const {
  Rollout out;
  out.seed = ctx.seed;
  WorldState state = init;
  const int max_t = horizon > 0 ? horizon : cfg_.horizon;
  bool in_recovery = false;  // contiguous intervened steps are one recovery

  for (;;) {
    const Verdict v = judge_outcome(state);
    if (v == Verdict::Success) {
      out.outcome = Outcome::Success;
      break;
    }
    if (v == Verdict::Failure || state.t >= max_t) {
      out.outcome = Outcome::Failure;
      break;
    }

    const Observation obs = observe(state, ctx);
    ActionDelta a = policy(state, obs);
    if (!action_finite(a)) {
      out.outcome = Outcome::Failure;  // defective policy output aborts the episode
      break;
    }
    a = cfg_.box.clip(a);
    if (monitor != nullptr && *monitor) {
      auto [corrected, intervened] = (*monitor)(state, a);
      a = cfg_.box.clip(corrected);
      if (intervened && !in_recovery) ++out.recoveries;
      in_recovery = intervened;
    }

    RolloutRecord rec;
    rec.state = state;
    rec.action = a;
    out.records.push_back(std::move(rec));
    state = step(state, a, ctx);
  }
  return out;
}

}  // namespace tailsafe
