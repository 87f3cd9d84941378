#include "tailsafe/safetyq.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace tailsafe {

std::vector<double> reach_avoid_labels(const std::vector<double>& h, bool success, double gamma) {
  std::vector<double> y(h.size());
  double next = success ? 1.0 : -1.0;
  for (int t = static_cast<int>(h.size()) - 1; t >= 0; --t) {
    y[t] = std::min(h[t], gamma * next);
    next = y[t];
  }
  return y;
}

Eigen::Vector4d normalize_action(const ActionDelta& a, const ActionBox& box) {
  return Eigen::Vector4d(a.dx / box.dx, a.dy / box.dy, a.dtheta / box.dtheta, a.dgrip / box.dgrip);
}

ActionDelta denormalize_action(const Eigen::Vector4d& a, const ActionBox& box) {
  return ActionDelta{a(0) * box.dx, a(1) * box.dy, a(2) * box.dtheta, a(3) * box.dgrip};
}

namespace {

Eigen::VectorXd stack_input(const Eigen::VectorXd& embedding, const Eigen::Vector4d& a_norm) {
  Eigen::VectorXd x(embedding.size() + 4);
  x << embedding, a_norm;
  return x;
}

}  // namespace

double SafetyQ::value(const Eigen::VectorXd& embedding, const ActionDelta& a,
                      const ActionBox& box) const {
  return value_normalized(embedding, normalize_action(a, box));
}

double SafetyQ::value_normalized(const Eigen::VectorXd& embedding,
                                 const Eigen::Vector4d& a_norm) const {
  return std::tanh(net_.value(stack_input(embedding, a_norm)));
}

Eigen::Vector4d SafetyQ::action_gradient(const Eigen::VectorXd& embedding,
                                         const Eigen::Vector4d& a_norm) const {
  const Eigen::VectorXd x = stack_input(embedding, a_norm);
  const double q = std::tanh(net_.value(x));
  return (1.0 - q * q) * net_.input_gradient(x).tail<4>();
}

SafetyQ SafetyQ::from_json(const nlohmann::ordered_json& j) {
  std::string kind;
  LipschitzMlp net = LipschitzMlp::from_json(j, &kind);
  if (kind != "safetyq") throw std::invalid_argument("checkpoint: expected kind safetyq");
  return SafetyQ(std::move(net));
}

QTrainReport train_q(SafetyQ& q, const std::vector<QSample>& samples, const QTrainConfig& cfg) {
  const ActionBox box{};  // samples carry raw actions; net sees normalized ones
  const std::size_t n_total = samples.size();
  const std::size_t n_train =
      n_total - static_cast<std::size_t>(cfg.holdout_fraction * double(n_total));

  Eigen::MatrixXd X(n_train, q.net().input_dim());
  Eigen::VectorXd Y(n_train);
  std::vector<int> success_rows;
  for (std::size_t i = 0; i < n_train; ++i) {
    X.row(i) = stack_input(samples[i].embedding, normalize_action(samples[i].action, box));
    Y(i) = samples[i].y;
    if (samples[i].from_success) success_rows.push_back(static_cast<int>(i));
  }

  std::mt19937_64 rng(cfg.shuffle_seed);
  std::uniform_real_distribution<double> noise(-cfg.hill_noise, cfg.hill_noise);
  AdamState adam(q.net());

  auto batch_losses = [&](const Eigen::Ref<const Eigen::MatrixXd>& bx,
                          const Eigen::Ref<const Eigen::VectorXd>& by) {
    const Eigen::VectorXd pred = q.net().forward(bx).col(0).array().tanh();
    return (pred - by).squaredNorm() / double(bx.rows());
  };

  auto full_loss = [&]() {
    double anchor = 0.0;
    const std::size_t chunk = 4096;
    for (std::size_t s = 0; s < n_train; s += chunk) {
      const std::size_t e = std::min(n_train, s + chunk);
      anchor += batch_losses(X.middleRows(s, e - s), Y.segment(s, e - s)) * double(e - s);
    }
    return anchor / double(std::max<std::size_t>(1, n_train));
  };

  QTrainReport report;
  report.initial_loss = full_loss();

  std::vector<int> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  double last_anchor = 0.0, last_hill = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_anchor = 0.0, epoch_hill = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const int b = static_cast<int>(stop - start);

      Eigen::MatrixXd bx(b, X.cols());
      Eigen::VectorXd by(b);
      std::vector<int> brows_success;
      for (int r = 0; r < b; ++r) {
        const int idx = order[start + r];
        bx.row(r) = X.row(idx);
        by(r) = Y(idx);
        if (samples[idx].from_success) brows_success.push_back(r);
      }

      ForwardCache cache;
      const Eigen::VectorXd pred = q.net().forward_cached(bx, cache).col(0).array().tanh();
      const Eigen::VectorXd resid = pred - by;
      // Chain rule through the bounding tanh on the output head.
      Eigen::MatrixXd dY =
          ((2.0 / double(b)) * resid.array() * (1.0 - pred.array().square())).matrix();
      std::vector<LayerGrads> grads;
      q.net().backward(cache, dY, &grads);
      const double anchor = resid.squaredNorm() / double(b);

      double hill = 0.0;
      if (!brows_success.empty()) {
        const int bs = static_cast<int>(brows_success.size());
        Eigen::MatrixXd hx(bs, X.cols());
        Eigen::VectorXd envelope(bs);
        for (int r = 0; r < bs; ++r) {
          hx.row(r) = bx.row(brows_success[r]);
          Eigen::Vector4d delta;
          for (int k = 0; k < 4; ++k) delta(k) = noise(rng);
          hx.block(r, X.cols() - 4, 1, 4) += delta.transpose();
          envelope(r) = 1.0 - cfg.hill_alpha * delta.norm();
        }
        ForwardCache hcache;
        const Eigen::VectorXd hq = q.net().forward_cached(hx, hcache).col(0).array().tanh();
        Eigen::MatrixXd dYh = Eigen::MatrixXd::Zero(bs, 1);
        for (int r = 0; r < bs; ++r) {
          const double margin = hq(r) - envelope(r);
          if (margin > 0.0) {
            hill += margin;
            dYh(r, 0) = cfg.hill_lambda / double(bs) * (1.0 - hq(r) * hq(r));
          }
        }
        hill /= double(bs);
        std::vector<LayerGrads> hgrads;
        q.net().backward(hcache, dYh, &hgrads);
        for (std::size_t l = 0; l < grads.size(); ++l) {
          grads[l].dW += hgrads[l].dW;
          grads[l].db += hgrads[l].db;
        }
      }

      if (adam.step(q.net(), grads, cfg.adam)) q.net().project_spectral(3);
      epoch_anchor += anchor;
      epoch_hill += hill;
      ++batches;
    }
    last_anchor = epoch_anchor / double(std::max<std::size_t>(1, batches));
    last_hill = epoch_hill / double(std::max<std::size_t>(1, batches));
  }

  q.net().finalize_spectral();
  report.final_anchor_loss = full_loss();
  report.final_hill_loss = last_hill;
  report.final_loss = report.final_anchor_loss + cfg.hill_lambda * last_hill;
  report.epochs = cfg.epochs;
  return report;
}

LipschitzAudit verify_lipschitz(const LipschitzMlp& net, int pairs, double mag_min,
                                double mag_max, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> base(-1.0, 1.0);
  std::uniform_real_distribution<double> logmag(std::log(mag_min), std::log(mag_max));
  std::normal_distribution<double> gauss(0.0, 1.0);

  const int dim = net.input_dim();
  LipschitzAudit audit;
  audit.bound = net.config().lipschitz;
  audit.pairs = pairs;
  for (int i = 0; i < pairs; ++i) {
    Eigen::VectorXd x(dim), dir(dim);
    for (int d = 0; d < dim; ++d) {
      x(d) = base(rng);
      dir(d) = gauss(rng);
    }
    dir.normalize();
    const double mag = std::exp(logmag(rng));
    const Eigen::VectorXd x2 = x + mag * dir;
    const double dq = std::abs(net.value(x2) - net.value(x));
    audit.max_ratio = std::max(audit.max_ratio, dq / mag);
  }
  audit.passed = audit.max_ratio <= audit.bound;
  return audit;
}

}  // namespace tailsafe
