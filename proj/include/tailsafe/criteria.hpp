#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "tailsafe/geometry.hpp"

namespace tailsafe {

// Wrist-mounted pinhole-style camera reduced to the plane. `mount` is the
// rigid offset of the camera from the end effector; the camera looks along
// its +x axis.
struct CameraModel {
  int width = 640;
  int height = 480;
  PoseSE2 mount{};
  double fov_half_angle = 0.5;  // radians
  double max_range = 0.8;       // meters
  double near_range = 0.08;     // below this, points slide toward the image top edge
};

struct SafetyScores {
  double s_fov = 0.0;
  double s_rec = 0.0;
  double s_grasp = 0.0;
};

// Image-plane projection of a single world point. Points behind the camera
// or beyond max_range are out of view.
struct PointProjection {
  bool in_view = false;
  double u = 0.0;
  double v = 0.0;
};

std::vector<PointProjection> project_points(const CameraModel& camera,
                                            const std::vector<Eigen::Vector2d>& points,
                                            const PoseSE2& ee);

// Mean over all points of max(0, 1 - d_i) where d_i is the normalized radial
// distance from the image center; out-of-view points contribute zero.
double visibility_score(const CameraModel& camera,
                        const std::vector<Eigen::Vector2d>& points,
                        const PoseSE2& ee);

// Mean over points of max(0, 1 - |bearing| / fov_half_angle). Used by the
// scripted policy as its notion of how well-centered the object is; unlike
// visibility_score it ignores the range coordinate.
double bearing_centeredness(const CameraModel& camera,
                            const std::vector<Eigen::Vector2d>& points,
                            const PoseSE2& ee);

// Fixed seeded two-layer tanh projection of a small observation vector into
// a 16-dim feature. Stand-in for a policy's visual encoder.
class EmbeddingModel {
 public:
  static constexpr int kInputDim = 6;
  static constexpr int kHiddenDim = 24;
  static constexpr int kOutputDim = 16;

  explicit EmbeddingModel(std::uint64_t seed = 2024);

  std::uint64_t seed() const { return seed_; }

  // Deterministic projection; `noise` (if non-null, kOutputDim entries of
  // standard normals) is scaled by `sigma` and added to the output.
  Eigen::VectorXd embed(const Eigen::VectorXd& input, double sigma = 0.0,
                        const Eigen::VectorXd* noise = nullptr) const;

 private:
  std::uint64_t seed_;
  Eigen::MatrixXd w1_, w2_;
  Eigen::VectorXd b1_, b2_;
};

// PCA + Gaussian fit of the demonstration feature distribution.
struct DistributionFit {
  Eigen::MatrixXd pca_basis;  // components x full dim
  Eigen::VectorXd pca_mean;   // full dim
  Eigen::VectorXd mu;         // reduced dim
  Eigen::MatrixXd sigma;      // reduced dim x reduced dim, SPD
  double retained_variance = 1.0;
  bool degenerate = false;  // rank-deficient input, regularization dominated
};

// PCA retaining >= 95% variance, Gaussian fit in the reduced space,
// covariance regularized with +eps*I.
DistributionFit fit_demo_distribution(const Eigen::MatrixXd& features,
                                      double variance_threshold = 0.95);

double mahalanobis_distance(const DistributionFit& fit, const Eigen::VectorXd& feature);

// s_rec = logistic(-d_M); conservative zero on non-finite input.
double recognizability_score(const DistributionFit& fit, const Eigen::VectorXd& feature);

// Grasp poses with similarity length scales. Poses are world-frame when fed
// to graspability_score; instantiate() maps an object-frame template.
struct GraspSet {
  std::vector<PoseSE2> grasps;
  double sigma_t = 0.05;  // meters
  double sigma_r = 0.5;   // radians
  double w_t = 1.0;
  double w_r = 1.0;
};

GraspSet instantiate(const GraspSet& object_frame_template, const PoseSE2& object);

// Template for a rotationally symmetric object: n grasp poses at the object
// center, evenly spaced in orientation, so any approach heading is graspable.
GraspSet symmetric_grasp_template(int n = 8, double sigma_t = 0.05, double sigma_r = 0.5);

// max_g exp(-(w_t*d_t/sigma_t + w_r*d_r/sigma_r)); empty set scores zero.
double graspability_score(const GraspSet& grasps, const PoseSE2& ee_after_action);

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace tailsafe
