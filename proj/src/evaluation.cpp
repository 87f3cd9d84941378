#include "tailsafe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tailsafe/criteria.hpp"

namespace tailsafe {

ClassificationMetrics classification_metrics(const std::vector<double>& scores,
                                             const std::vector<int>& labels, double threshold) {
  ClassificationMetrics m;
  const std::size_t n = scores.size();
  for (int lab : labels) (lab == 1 ? m.n_pos : m.n_neg)++;
  if (m.n_pos == 0 || m.n_neg == 0) return m;

  // AUROC via average ranks of the positive class.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] == 1) rank_sum_pos += rank[i];
  m.auroc = (rank_sum_pos - double(m.n_pos) * (m.n_pos + 1) / 2.0) /
            (double(m.n_pos) * double(m.n_neg));

  // Average precision over the descending-score sweep.
  std::vector<std::size_t> desc(idx.rbegin(), idx.rend());
  double tp = 0.0, fp = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;  // advance over ties as one threshold step
    double tp_add = 0.0, fp_add = 0.0;
    while (j < n && scores[desc[j]] == scores[desc[i]]) {
      (labels[desc[j]] == 1 ? tp_add : fp_add) += 1.0;
      ++j;
    }
    const double tp_prev = tp;
    tp += tp_add;
    fp += fp_add;
    const double precision = tp / (tp + fp);
    ap += precision * (tp - tp_prev) / double(m.n_pos);
    i = j;
  }
  m.auprc = ap;

  // Calibration of p = logistic(score) against the labels, 10 equal bins.
  constexpr int kBins = 10;
  double bin_conf[kBins] = {0}, bin_acc[kBins] = {0};
  int bin_n[kBins] = {0};
  for (std::size_t i = 0; i < n; ++i) {
    const double p = logistic(scores[i]);
    const int b = std::min(kBins - 1, static_cast<int>(p * kBins));
    bin_conf[b] += p;
    bin_acc[b] += labels[i];
    bin_n[b] += 1;
  }
  for (int b = 0; b < kBins; ++b)
    if (bin_n[b] > 0)
      m.ece += (double(bin_n[b]) / double(n)) *
               std::abs(bin_acc[b] / bin_n[b] - bin_conf[b] / bin_n[b]);

  int false_safe = 0, false_unsafe = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 0 && scores[i] >= threshold) ++false_safe;
    if (labels[i] == 1 && scores[i] < threshold) ++false_unsafe;
  }
  m.false_safe_rate = double(false_safe) / double(m.n_neg);
  m.false_unsafe_rate = double(false_unsafe) / double(m.n_pos);
  return m;
}

double cohens_d(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) return 0.0;
  auto moments = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair<double, double>(mean, var / (v.size() - 1));
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double pooled = std::sqrt(((a.size() - 1) * va + (b.size() - 1) * vb) /
                                  double(a.size() + b.size() - 2));
  if (pooled <= 0.0) return 0.0;
  return (ma - mb) / pooled;
}

std::optional<int> detection_lead_time(const std::vector<double>& scores, int failure_step) {
  for (std::size_t t = 0; t < scores.size(); ++t)
    if (scores[t] < 0.0) return failure_step - static_cast<int>(t);
  return std::nullopt;
}

AblationResult ablation_benchmark(const QFunction& q, const std::vector<AblationCase>& cases,
                                  double step, int max_steps, double threshold) {
  AblationResult res;
  res.cases = static_cast<int>(cases.size());
  if (cases.empty()) return res;

  int successes = 0;
  double grad_sum = 0.0, step_sum = 0.0;
  long grad_points = 0;
  for (const AblationCase& c : cases) {
    if (q.value(c.embedding, c.a_norm) >= threshold) {  // missed the hazard
      grad_sum += q.grad(c.embedding, c.a_norm).norm();
      ++grad_points;
      continue;
    }
    Eigen::Vector4d a = c.a_norm;
    for (int k = 1; k <= max_steps; ++k) {
      const Eigen::Vector4d g = q.grad(c.embedding, a);
      const double gn = g.norm();
      grad_sum += gn;
      ++grad_points;
      if (!(gn > 1e-8)) break;  // dead gradient: ascent cannot proceed
      a += (step / gn) * g;
      if (q.value(c.embedding, a) >= threshold) {
        ++successes;
        step_sum += k;
        break;
      }
    }
  }
  res.success_rate = double(successes) / double(cases.size());
  res.mean_grad_norm = grad_points > 0 ? grad_sum / double(grad_points) : 0.0;
  res.mean_steps = successes > 0 ? step_sum / double(successes) : 0.0;
  return res;
}

double flat_gradient_fraction(const QFunction& q, const std::vector<AblationCase>& cases,
                              double eps) {
  if (cases.empty()) return 0.0;
  int flat = 0;
  for (const AblationCase& c : cases)
    if (q.grad(c.embedding, c.a_norm).norm() < eps) ++flat;
  return double(flat) / double(cases.size());
}

LipschitzMlp train_cbf(const std::vector<QSample>& samples, const CbfConfig& cfg) {
  LipschitzMlp net(cfg.mlp);
  AdamState adam(net);
  const ActionBox box{};

  Eigen::MatrixXd X(samples.size(), net.input_dim());
  Eigen::VectorXd Y(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Eigen::VectorXd x(net.input_dim());
    x << samples[i].embedding, normalize_action(samples[i].action, box);
    X.row(i) = x;
    Y(i) = samples[i].y >= 0.0 ? 1.0 : 0.0;
  }

  std::mt19937_64 rng(cfg.shuffle_seed);
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const int b = static_cast<int>(stop - start);
      Eigen::MatrixXd bx(b, X.cols());
      Eigen::VectorXd by(b);
      for (int r = 0; r < b; ++r) {
        bx.row(r) = X.row(order[start + r]);
        by(r) = Y(order[start + r]);
      }
      ForwardCache cache;
      const Eigen::VectorXd logit = net.forward_cached(bx, cache).col(0);
      Eigen::MatrixXd dY(b, 1);
      for (int r = 0; r < b; ++r) dY(r, 0) = (logistic(logit(r)) - by(r)) / double(b);
      std::vector<LayerGrads> grads;
      net.backward(cache, dY, &grads);
      if (adam.step(net, grads, cfg.adam)) net.project_spectral(3);
    }
  }
  net.finalize_spectral();
  return net;
}

double CbfBarrier::value(const Eigen::VectorXd& e, const Eigen::Vector4d& a) const {
  Eigen::VectorXd x(net_->input_dim());
  x << e, a;
  return 2.0 * logistic(net_->value(x)) - 1.0;
}

Eigen::Vector4d CbfBarrier::grad(const Eigen::VectorXd& e, const Eigen::Vector4d& a) const {
  Eigen::VectorXd x(net_->input_dim());
  x << e, a;
  const double p = logistic(net_->value(x));
  return 2.0 * p * (1.0 - p) * net_->input_gradient(x).tail<4>();
}

ActionDelta mean_action(const std::vector<ActionDelta>& actions) {
  ActionDelta m;
  if (actions.empty()) return m;
  for (const ActionDelta& a : actions) {
    m.dx += a.dx;
    m.dy += a.dy;
    m.dtheta += a.dtheta;
    m.dgrip += a.dgrip;
  }
  const double n = static_cast<double>(actions.size());
  m.dx /= n;
  m.dy /= n;
  m.dtheta /= n;
  m.dgrip /= n;
  return m;
}

double action_variance(const std::vector<ActionDelta>& actions, const ActionBox& box) {
  if (actions.size() < 2) return 0.0;
  Eigen::MatrixXd A(actions.size(), 4);
  for (std::size_t i = 0; i < actions.size(); ++i)
    A.row(i) = normalize_action(actions[i], box).transpose();
  const Eigen::RowVector4d mean = A.colwise().mean();
  const Eigen::MatrixXd centered = A.rowwise() - mean;
  return centered.squaredNorm() / double(actions.size() - 1);
}

}  // namespace tailsafe
