#include "tailsafe/weightnet.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace tailsafe {

double fuse(const Eigen::Vector3d& weights, const SafetyScores& scores, double tau) {
  return weights(0) * scores.s_fov + weights(1) * scores.s_rec + weights(2) * scores.s_grasp - tau;
}

double equal_weights_h(const SafetyScores& scores, double tau) {
  return (scores.s_fov + scores.s_rec + scores.s_grasp) / 3.0 - tau;
}

namespace {

Eigen::Vector3d softmax3(const Eigen::Vector3d& logits) {
  const Eigen::Vector3d z = (logits.array() - logits.maxCoeff()).exp();
  return z / z.sum();
}

}  // namespace

Eigen::Vector3d WeightNet::weights(const Eigen::VectorXd& embedding) const {
  return softmax3(net.forward(embedding.transpose()).row(0).transpose());
}

double WeightNet::h(const Eigen::VectorXd& embedding, const SafetyScores& scores) const {
  if (!embedding.allFinite()) return -1.0;  // conservative on bad features
  return fuse(weights(embedding), scores, tau);
}

nlohmann::ordered_json WeightNet::to_json() const {
  nlohmann::ordered_json j = net.to_json("weightnet");
  j["tau"] = tau;
  return j;
}

WeightNet WeightNet::from_json(const nlohmann::ordered_json& j) {
  WeightNet wn;
  std::string kind;
  wn.net = LipschitzMlp::from_json(j, &kind);
  if (kind != "weightnet") throw std::invalid_argument("checkpoint: expected kind weightnet");
  wn.tau = j.at("tau").get<double>();
  return wn;
}

WeightNet make_weightnet(const WeightNetConfig& cfg) {
  WeightNet wn;
  wn.net = LipschitzMlp(cfg.mlp);
  wn.tau = cfg.tau_init;
  return wn;
}

WeightNetTrainReport train_weightnet(WeightNet& wn, const std::vector<TrajectorySample>& data,
                                     const WeightNetConfig& cfg) {
  bool any_success = false, any_failure = false;
  for (const TrajectorySample& traj : data) (traj.success ? any_success : any_failure) = true;
  if (!any_success || !any_failure)
    throw std::invalid_argument("train_weightnet: need both outcomes in the dataset");

  const double k = cfg.bce_sharpness;
  AdamState adam(wn.net);
  double tau_m = 0.0, tau_v = 0.0;
  long tau_t = 0;
  std::mt19937_64 rng(cfg.shuffle_seed);

  auto clamp_p = [](double p) { return std::clamp(p, 1e-12, 1.0 - 1e-12); };

  // Batched logits for one trajectory; returns per-step h and fills the cache.
  auto trajectory_h = [&](const TrajectorySample& traj, ForwardCache& cache,
                          Eigen::MatrixXd& weights_out) {
    const int n = static_cast<int>(traj.embeddings.size());
    Eigen::MatrixXd X(n, wn.net.input_dim());
    for (int t = 0; t < n; ++t) X.row(t) = traj.embeddings[t].transpose();
    const Eigen::MatrixXd logits = wn.net.forward_cached(X, cache);
    weights_out.resize(n, 3);
    Eigen::VectorXd h(n);
    for (int t = 0; t < n; ++t) {
      const Eigen::Vector3d w = softmax3(logits.row(t).transpose());
      weights_out.row(t) = w.transpose();
      h(t) = fuse(w, traj.scores[t], wn.tau);
    }
    return h;
  };

  auto dataset_loss = [&]() {
    double loss = 0.0;
    for (const TrajectorySample& traj : data) {
      ForwardCache cache;
      Eigen::MatrixXd weights;
      const Eigen::VectorXd h = trajectory_h(traj, cache, weights);
      const double p = clamp_p(logistic(k * h.minCoeff()));
      loss += traj.success ? -std::log(p) : -std::log(1.0 - p);
    }
    return loss / std::max<std::size_t>(1, data.size());
  };

  WeightNetTrainReport report;
  report.initial_loss = dataset_loss();

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(stop - start);

      std::vector<LayerGrads> acc;
      double tau_grad = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const TrajectorySample& traj = data[order[i]];
        ForwardCache cache;
        Eigen::MatrixXd weights;
        const Eigen::VectorXd h = trajectory_h(traj, cache, weights);
        int t_min = 0;
        h.minCoeff(&t_min);
        const double p = clamp_p(logistic(k * h(t_min)));
        const double y = traj.success ? 1.0 : 0.0;
        const double dh = k * (p - y);  // dLoss/dh at the argmin step

        const SafetyScores& s = traj.scores[t_min];
        const Eigen::Vector3d svec(s.s_fov, s.s_rec, s.s_grasp);
        const Eigen::Vector3d w = weights.row(t_min).transpose();
        const Eigen::Vector3d dw = dh * svec;
        const Eigen::Vector3d dlogits = w.cwiseProduct(dw) - w * w.dot(dw);
        tau_grad += -dh * inv_b;

        Eigen::MatrixXd dY = Eigen::MatrixXd::Zero(h.size(), 3);
        dY.row(t_min) = (inv_b * dlogits).transpose();
        std::vector<LayerGrads> g;
        wn.net.backward(cache, dY, &g);
        if (acc.empty()) {
          acc = std::move(g);
        } else {
          for (std::size_t l = 0; l < acc.size(); ++l) {
            acc[l].dW += g[l].dW;
            acc[l].db += g[l].db;
          }
        }
      }

      if (adam.step(wn.net, acc, cfg.adam)) wn.net.project_spectral(3);
      if (std::isfinite(tau_grad)) {
        ++tau_t;
        tau_m = cfg.adam.beta1 * tau_m + (1.0 - cfg.adam.beta1) * tau_grad;
        tau_v = cfg.adam.beta2 * tau_v + (1.0 - cfg.adam.beta2) * tau_grad * tau_grad;
        const double mhat = tau_m / (1.0 - std::pow(cfg.adam.beta1, double(tau_t)));
        const double vhat = tau_v / (1.0 - std::pow(cfg.adam.beta2, double(tau_t)));
        wn.tau = std::clamp(wn.tau - cfg.adam.lr * mhat / (std::sqrt(vhat) + cfg.adam.eps), 0.0, 1.0);
      }
    }
  }

  wn.net.finalize_spectral();
  report.final_loss = dataset_loss();
  report.epochs = cfg.epochs;
  report.tau = wn.tau;
  return report;
}

}  // namespace tailsafe
