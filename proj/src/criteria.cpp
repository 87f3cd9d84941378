#include "tailsafe/criteria.hpp"

#include <random>

namespace tailsafe {

std::vector<PointProjection> project_points(const CameraModel& camera,
                                            const std::vector<Eigen::Vector2d>& points,
                                            const PoseSE2& ee) {
  const PoseSE2 cam = compose(ee, camera.mount);
  const double c = std::cos(cam.theta), s = std::sin(cam.theta);
  const double half_w = camera.width / 2.0;
  const double half_h = camera.height / 2.0;
  const double tan_fov = std::tan(camera.fov_half_angle);

  std::vector<PointProjection> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    const double dx = p.x() - cam.x, dy = p.y() - cam.y;
    const double cx = c * dx + s * dy;   // forward
    const double cy = -s * dx + c * dy;  // left
    const double r = std::hypot(cx, cy);
    PointProjection proj;
    if (cx <= 0.0 || r > camera.max_range) {
      out.push_back(proj);
      continue;
    }
    const double bearing = std::atan2(cy, cx);
    proj.in_view = true;
    // +bearing (left) maps toward u = 0, matching a right-handed image axis.
    proj.u = half_w * (1.0 - std::tan(bearing) / tan_fov);
    // Points closer than near_range climb toward the top edge: a gripper this
    // close to the lens occludes its own view. Farther points sit mid-image.
    proj.v = half_h * (std::min(r, camera.near_range) / camera.near_range);
    out.push_back(proj);
  }
  return out;
}

double visibility_score(const CameraModel& camera,
                        const std::vector<Eigen::Vector2d>& points,
                        const PoseSE2& ee) {
  if (points.empty()) return 0.0;
  const auto projections = project_points(camera, points, ee);
  const double half_w = camera.width / 2.0;
  const double half_h = camera.height / 2.0;
  double sum = 0.0;
  for (const auto& proj : projections) {
    if (!proj.in_view) continue;
    const double du = (proj.u - half_w) / half_w;
    const double dv = (proj.v - half_h) / half_h;
    const double d = std::hypot(du, dv);
    sum += std::max(0.0, 1.0 - d);
  }
  return sum / static_cast<double>(points.size());
}

double bearing_centeredness(const CameraModel& camera,
                            const std::vector<Eigen::Vector2d>& points,
                            const PoseSE2& ee) {
  if (points.empty()) return 0.0;
  const PoseSE2 cam = compose(ee, camera.mount);
  const double c = std::cos(cam.theta), s = std::sin(cam.theta);
  double sum = 0.0;
  for (const auto& p : points) {
    const double dx = p.x() - cam.x, dy = p.y() - cam.y;
    const double cx = c * dx + s * dy;
    const double cy = -s * dx + c * dy;
    if (cx <= 0.0 || std::hypot(cx, cy) > camera.max_range) continue;
    const double bearing = std::abs(std::atan2(cy, cx));
    sum += std::max(0.0, 1.0 - bearing / camera.fov_half_angle);
  }
  return sum / static_cast<double>(points.size());
}

EmbeddingModel::EmbeddingModel(std::uint64_t seed) : seed_(seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto fill = [&](Eigen::MatrixXd& m, double scale) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * gauss(rng);
  };
  w1_.resize(kHiddenDim, kInputDim);
  b1_.resize(kHiddenDim);
  w2_.resize(kOutputDim, kHiddenDim);
  b2_.resize(kOutputDim);
  fill(w1_, 1.0 / std::sqrt(double(kInputDim)));
  fill(w2_, 1.0 / std::sqrt(double(kHiddenDim)));
  for (Eigen::Index i = 0; i < b1_.size(); ++i) b1_(i) = 0.3 * gauss(rng);
  for (Eigen::Index i = 0; i < b2_.size(); ++i) b2_(i) = 0.3 * gauss(rng);
}

Eigen::VectorXd EmbeddingModel::embed(const Eigen::VectorXd& input, double sigma,
                                      const Eigen::VectorXd* noise) const {
  Eigen::VectorXd h = (w1_ * input + b1_).array().tanh();
  // The 4x gain spreads the bounded features so downstream Lipschitz-capped
  // heads can separate nearby states without spending their slope budget.
  Eigen::VectorXd out = 4.0 * (w2_ * h + b2_).array().tanh();
  if (sigma > 0.0 && noise != nullptr) out += sigma * (*noise);
  return out;
}

DistributionFit fit_demo_distribution(const Eigen::MatrixXd& features,
                                      double variance_threshold) {
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  if (n < d + 1) throw std::invalid_argument("fit_demo_distribution: need at least dim+1 samples");

  DistributionFit fit;
  fit.pca_mean = features.colwise().mean();
  Eigen::MatrixXd centered = features.rowwise() - fit.pca_mean.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / double(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Ascending eigenvalues; walk from the top.
  const Eigen::VectorXd evals = eig.eigenvalues().cwiseMax(0.0);
  const double total = evals.sum();
  Eigen::Index k = 1;
  if (total > 0.0) {
    double acc = 0.0;
    for (k = 0; k < d; ++k) {
      acc += evals(d - 1 - k);
      if (acc >= variance_threshold * total) break;
    }
    k += 1;
    fit.retained_variance = acc / total;
  } else {
    fit.degenerate = true;
    fit.retained_variance = 1.0;
  }

  fit.pca_basis.resize(k, d);
  fit.mu = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd reduced_var(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    fit.pca_basis.row(i) = eig.eigenvectors().col(d - 1 - i).transpose();
    reduced_var(i) = evals(d - 1 - i);
  }
  fit.sigma = reduced_var.asDiagonal();

  const double trace = reduced_var.sum();
  const double eps = trace > 0.0 ? 1e-6 * trace / double(k) : 1e-6;
  if (trace <= 0.0) fit.degenerate = true;
  fit.sigma += eps * Eigen::MatrixXd::Identity(k, k);
  return fit;
}

double mahalanobis_distance(const DistributionFit& fit, const Eigen::VectorXd& feature) {
  Eigen::VectorXd reduced = fit.pca_basis * (feature - fit.pca_mean);
  Eigen::VectorXd diff = reduced - fit.mu;
  Eigen::VectorXd x = fit.sigma.ldlt().solve(diff);
  return std::sqrt(std::max(0.0, diff.dot(x)));
}

double recognizability_score(const DistributionFit& fit, const Eigen::VectorXd& feature) {
  if (!feature.allFinite()) return 0.0;
  return logistic(-mahalanobis_distance(fit, feature));
}

GraspSet symmetric_grasp_template(int n, double sigma_t, double sigma_r) {
  GraspSet out;
  out.sigma_t = sigma_t;
  out.sigma_r = sigma_r;
  out.grasps.reserve(static_cast<std::size_t>(std::max(n, 1)));
  for (int k = 0; k < std::max(n, 1); ++k)
    out.grasps.push_back(PoseSE2{0.0, 0.0, wrap_angle(2.0 * M_PI * k / std::max(n, 1))});
  return out;
}

GraspSet instantiate(const GraspSet& object_frame_template, const PoseSE2& object) {
  GraspSet out = object_frame_template;
  for (auto& g : out.grasps) g = compose(object, g);
  return out;
}

double graspability_score(const GraspSet& grasps, const PoseSE2& ee_after_action) {
  double best = 0.0;
  for (const auto& g : grasps.grasps) {
    const double dt = pose_dist(ee_after_action, g);
    const double dr = angle_dist(ee_after_action.theta, g.theta);
    const double sim = std::exp(-(grasps.w_t * dt / grasps.sigma_t + grasps.w_r * dr / grasps.sigma_r));
    best = std::max(best, sim);
  }
  return best;
}

}  // namespace tailsafe
