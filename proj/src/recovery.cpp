#include "tailsafe/recovery.hpp"

namespace tailsafe {

FilterResult filter_action(const QFunction& q, const Eigen::VectorXd& embedding,
                           const ActionDelta& proposed, const FilterConfig& cfg,
                           const ActionBox& box) {
  FilterResult res;
  Eigen::Vector4d a = normalize_action(box.clip(proposed), box);
  res.q_initial = q.value(embedding, a);
  res.q_final = res.q_initial;
  res.action = denormalize_action(a, box);
  if (res.q_initial >= cfg.threshold) {
    res.status = FilterStatus::NotNeeded;
    return res;
  }

  Eigen::Vector4d best_a = a;
  double best_q = res.q_initial;
  res.status = FilterStatus::Exhausted;
  for (int k = 0; k < cfg.k_max; ++k) {
    const Eigen::Vector4d g = q.grad(embedding, a);
    const double gn = g.norm();
    if (!(gn > cfg.grad_floor) || !g.allFinite()) {
      res.status = FilterStatus::DeadGradient;
      break;
    }
    const Eigen::Vector4d update = (cfg.eta / gn) * g;
    res.step_norms.push_back(update.norm());
    a = (a + update).cwiseMax(-1.0).cwiseMin(1.0);
    ++res.steps;

    const double qv = q.value(embedding, a);
    if (qv > best_q) {
      best_q = qv;
      best_a = a;
    }
    if (qv >= cfg.threshold) {
      res.status = FilterStatus::Recovered;
      break;
    }
  }

  res.q_final = best_q;
  res.action = denormalize_action(best_a, box);
  return res;
}

}  // namespace tailsafe
