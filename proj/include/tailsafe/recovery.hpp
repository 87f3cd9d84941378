#pragma once

#include <vector>

#include "tailsafe/geometry.hpp"
#include "tailsafe/safetyq.hpp"

namespace tailsafe {

// Anything the recovery filter can ascend on: a scalar safety value and its
// gradient in normalized action coordinates.
class QFunction {
 public:
  virtual ~QFunction() = default;
  virtual double value(const Eigen::VectorXd& embedding, const Eigen::Vector4d& a_norm) const = 0;
  virtual Eigen::Vector4d grad(const Eigen::VectorXd& embedding,
                               const Eigen::Vector4d& a_norm) const = 0;
};

class LearnedQ : public QFunction {
 public:
  explicit LearnedQ(const SafetyQ* q) : q_(q) {}
  double value(const Eigen::VectorXd& e, const Eigen::Vector4d& a) const override {
    return q_->value_normalized(e, a);
  }
  Eigen::Vector4d grad(const Eigen::VectorXd& e, const Eigen::Vector4d& a) const override {
    return q_->action_gradient(e, a);
  }

 private:
  const SafetyQ* q_;
};

enum class FilterStatus {
  NotNeeded,     // proposed action already judged safe
  Recovered,     // ascent crossed the safety threshold
  Exhausted,     // budget spent below threshold; best-so-far returned
  DeadGradient,  // gradient vanished below threshold; best-so-far returned
};

struct FilterConfig {
  double eta = 0.05;        // normalized-step size of each ascent update
  int k_max = 10;
  double grad_floor = 1e-8;
  double threshold = 0.0;   // Q >= threshold counts as safe
};

struct FilterResult {
  ActionDelta action{};  // raw units, inside the box
  FilterStatus status = FilterStatus::NotNeeded;
  int steps = 0;
  double q_initial = 0.0;
  double q_final = 0.0;
  std::vector<double> step_norms;  // pre-projection update norms, one per step
};

// Projected normalized gradient ascent: a <- clip(a + eta * g/|g|) in the
// normalized action box [-1,1]^4. The pre-projection update always has norm
// exactly eta, so Q along the ascent is guaranteed to move by less than
// eta * L of the net's Lipschitz bound per step.
FilterResult filter_action(const QFunction& q, const Eigen::VectorXd& embedding,
                           const ActionDelta& proposed, const FilterConfig& cfg,
                           const ActionBox& box);

}  // namespace tailsafe
