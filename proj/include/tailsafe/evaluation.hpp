#pragma once

#include <optional>
#include <vector>

#include "tailsafe/recovery.hpp"
#include "tailsafe/safetyq.hpp"

namespace tailsafe {

struct ClassificationMetrics {
  double auroc = 0.0;
  double auprc = 0.0;
  double ece = 0.0;              // 10 equal-width bins over logistic(score)
  double false_safe_rate = 0.0;  // unsafe samples scored >= threshold
  double false_unsafe_rate = 0.0;
  int n_pos = 0;
  int n_neg = 0;
};

// labels: 1 = safe/positive, 0 = unsafe/negative. AUROC uses average ranks
// for ties (Mann-Whitney form).
ClassificationMetrics classification_metrics(const std::vector<double>& scores,
                                             const std::vector<int>& labels,
                                             double threshold = 0.0);

double cohens_d(const std::vector<double>& a, const std::vector<double>& b);

// Steps between the first negative score and the failure step; nullopt when
// the score never goes negative.
std::optional<int> detection_lead_time(const std::vector<double>& scores, int failure_step);

// A state whose proposed action has been pushed well off the demonstrated
// one; used to probe whether gradient ascent can climb back to safety.
struct AblationCase {
  Eigen::VectorXd embedding;
  Eigen::Vector4d a_norm;
};

struct AblationResult {
  double success_rate = 0.0;    // reached threshold; counts a case judged
                                // already-safe at the start as a failure
  double mean_grad_norm = 0.0;  // mean |grad Q| along the recovery trajectories
  double mean_steps = 0.0;      // over successful climbs
  int cases = 0;
};

AblationResult ablation_benchmark(const QFunction& q, const std::vector<AblationCase>& cases,
                                  double step = 0.2, int max_steps = 200,
                                  double threshold = 0.0);

// Fraction of cases where the action gradient norm falls below eps.
double flat_gradient_fraction(const QFunction& q, const std::vector<AblationCase>& cases,
                              double eps);

// --- learned control-barrier baseline -------------------------------------
// Same architecture as the Q net, but trained as a per-step safe/unsafe
// classifier. Its barrier value is 2*logistic(logit) - 1, which saturates and
// leaves near-zero action gradients deep in the unsafe region.
struct CbfConfig {
  MlpConfig mlp{{20, 512, 512, 512, 1}, 2.5, 5.0, true, 19, 0.0, 4};
  AdamConfig adam{};
  int batch_size = 256;
  int epochs = 10;
  std::uint64_t shuffle_seed = 23;
};

LipschitzMlp train_cbf(const std::vector<QSample>& samples, const CbfConfig& cfg);

class CbfBarrier : public QFunction {
 public:
  explicit CbfBarrier(const LipschitzMlp* net) : net_(net) {}
  double value(const Eigen::VectorXd& e, const Eigen::Vector4d& a) const override;
  Eigen::Vector4d grad(const Eigen::VectorXd& e, const Eigen::Vector4d& a) const override;

 private:
  const LipschitzMlp* net_;
};

// --- ensemble-disagreement baseline ---------------------------------------
ActionDelta mean_action(const std::vector<ActionDelta>& actions);
// Trace of the sample covariance of the normalized action vectors.
double action_variance(const std::vector<ActionDelta>& actions, const ActionBox& box);

}  // namespace tailsafe
