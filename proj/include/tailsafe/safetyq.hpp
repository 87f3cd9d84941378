#pragma once

#include <vector>

#include "tailsafe/geometry.hpp"
#include "tailsafe/nn.hpp"

namespace tailsafe {

// Backward reach-avoid recursion: y_t = min(h_t, gamma * y_{t+1}) with the
// terminal value +1 on success and -1 on failure.
std::vector<double> reach_avoid_labels(const std::vector<double>& h, bool success,
                                       double gamma = 0.99);

// Actions are fed to the net normalized to [-1, 1] per component.
Eigen::Vector4d normalize_action(const ActionDelta& a, const ActionBox& box);
ActionDelta denormalize_action(const Eigen::Vector4d& a, const ActionBox& box);

struct QSample {
  Eigen::VectorXd embedding;  // 16-dim state feature
  ActionDelta action{};
  double y = 0.0;             // reach-avoid label
  bool from_success = false;  // hill shaping applies only to these rows
};

struct QTrainConfig {
  // Zero-init action columns mean action-dependence is learned, not inherited.
  MlpConfig mlp{{20, 512, 512, 512, 1}, 2.5, 5.0, true, 13, 0.0, 4};
  AdamConfig adam{};   // lr 1e-3
  int batch_size = 256;
  int epochs = 20;
  double gamma = 0.99;
  double hill_alpha = 1.0;        // envelope slope: target <= 1 - alpha*|delta|
  double hill_lambda = 0.1;
  double hill_noise = 0.1;        // per-component U(-hill_noise, hill_noise)
  std::uint64_t shuffle_seed = 17;
  double holdout_fraction = 0.0;  // tail fraction of samples held out of training
};

struct QTrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;       // anchor + lambda * hill on the training set
  double final_anchor_loss = 0.0;
  double final_hill_loss = 0.0;
  int epochs = 0;
};

// Q(s,a) = tanh(mlp(s ⊕ a)): the bounding head keeps values in the label
// range (−1, 1). An unconstrained variant trained to saturation therefore
// flattens off-distribution, while the spectral-normalized net stays in the
// responsive zone.
class SafetyQ {
 public:
  SafetyQ() = default;
  explicit SafetyQ(const MlpConfig& cfg) : net_(cfg) {}
  explicit SafetyQ(LipschitzMlp net) : net_(std::move(net)) {}

  double value(const Eigen::VectorXd& embedding, const ActionDelta& a,
               const ActionBox& box) const;
  double value_normalized(const Eigen::VectorXd& embedding, const Eigen::Vector4d& a_norm) const;
  // d(Q)/d(a_norm): gradient in the normalized action coordinates.
  Eigen::Vector4d action_gradient(const Eigen::VectorXd& embedding,
                                  const Eigen::Vector4d& a_norm) const;

  LipschitzMlp& net() { return net_; }
  const LipschitzMlp& net() const { return net_; }

  nlohmann::ordered_json to_json() const { return net_.to_json("safetyq"); }
  static SafetyQ from_json(const nlohmann::ordered_json& j);

 private:
  LipschitzMlp net_;
};

// MSE against the reach-avoid labels plus the hill penalty
//   max(0, Q(s, a* + delta) - (1 - alpha * |delta|))
// averaged over success rows only, so Q is pushed to fall away smoothly from
// demonstrated actions instead of plateauing.
QTrainReport train_q(SafetyQ& q, const std::vector<QSample>& samples, const QTrainConfig& cfg);

struct LipschitzAudit {
  double max_ratio = 0.0;
  double bound = 0.0;
  int pairs = 0;
  bool passed = false;
};

// Empirical check of |Q(x) - Q(x')| / |x - x'| over random input pairs with
// perturbation magnitudes drawn log-uniformly from [mag_min, mag_max].
LipschitzAudit verify_lipschitz(const LipschitzMlp& net, int pairs, double mag_min,
                                double mag_max, std::uint64_t seed);

}  // namespace tailsafe
