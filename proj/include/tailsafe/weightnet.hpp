#pragma once

#include <vector>

#include "tailsafe/criteria.hpp"
#include "tailsafe/nn.hpp"

namespace tailsafe {

// h = sum_i w_i * s_i - tau. Positive means the instantaneous evidence says
// the state-action is safe.
double fuse(const Eigen::Vector3d& weights, const SafetyScores& scores, double tau);

// Uniform-weight baseline: mean of the three scores minus tau.
double equal_weights_h(const SafetyScores& scores, double tau = 0.5);

// Maps a state embedding to a softmax weighting over the three safety scores,
// with a learned threshold tau.
struct WeightNet {
  LipschitzMlp net;
  double tau = 0.5;

  Eigen::Vector3d weights(const Eigen::VectorXd& embedding) const;
  double h(const Eigen::VectorXd& embedding, const SafetyScores& scores) const;

  nlohmann::ordered_json to_json() const;
  static WeightNet from_json(const nlohmann::ordered_json& j);
};

struct WeightNetConfig {
  // A looser Lipschitz bound than the Q net's: the weighting head has to swing
  // its emphasis between score channels across nearby states, and only the Q
  // function carries a certified smoothness requirement.
  MlpConfig mlp{{EmbeddingModel::kOutputDim, 256, 256, 3}, 12.0, 5.0, true, 7};
  double tau_init = 0.5;
  double bce_sharpness = 10.0;  // k in p = logistic(k * min_t h_t)
  AdamConfig adam{};            // lr 1e-3
  int batch_size = 32;          // trajectories per update
  int epochs = 100;
  std::uint64_t shuffle_seed = 11;
};

WeightNet make_weightnet(const WeightNetConfig& cfg);

// One trajectory of per-step inputs plus its episode outcome.
struct TrajectorySample {
  std::vector<Eigen::VectorXd> embeddings;
  std::vector<SafetyScores> scores;
  bool success = false;
};

struct WeightNetTrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int epochs = 0;
  double tau = 0.0;
};

// Trajectory-level BCE on p = logistic(k * min_t h_t) against the episode
// outcome. The min is handled with the standard argmin subgradient. tau is
// learned jointly (own Adam moments) and clamped to [0, 1].
WeightNetTrainReport train_weightnet(WeightNet& wn, const std::vector<TrajectorySample>& data,
                                     const WeightNetConfig& cfg);

}  // namespace tailsafe
