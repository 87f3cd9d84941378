#include "tailsafe/nn.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace tailsafe {
namespace {

Eigen::MatrixXd matrix_from_json(const nlohmann::ordered_json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

nlohmann::ordered_json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::VectorXd vector_from_json(const nlohmann::ordered_json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j.at(i).get<double>();
  return v;
}

nlohmann::ordered_json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

}  // namespace

LipschitzMlp::LipschitzMlp(const MlpConfig& cfg) : cfg_(cfg) {
  if (cfg.dims.size() < 2) throw std::invalid_argument("MlpConfig: need at least two dims");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  layers_.resize(cfg.dims.size() - 1);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const int in = cfg.dims[l], out = cfg.dims[l + 1];
    DenseLayer& layer = layers_[l];
    layer.W.resize(out, in);
    const double scale = std::sqrt(2.0 / in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) layer.W(r, c) = scale * gauss(rng);
    if (l == 0 && cfg.zero_input_tail > 0) {
      const int tail = std::min(cfg.zero_input_tail, in);
      layer.W.rightCols(tail).setZero();
    }
    layer.b = Eigen::VectorXd::Zero(out);
    if (l + 1 == layers_.size()) layer.b.setConstant(cfg.head_bias_init);
    layer.u.resize(out);
    for (int r = 0; r < out; ++r) layer.u(r) = gauss(rng);
    layer.u.normalize();
  }
  if (cfg_.spectral) finalize_spectral();
}

double LipschitzMlp::per_layer_gain() const {
  if (cfg_.lipschitz <= 0.0) return 0.0;
  return std::pow(cfg_.lipschitz, 1.0 / static_cast<double>(layers_.size()));
}

double LipschitzMlp::softplus(double x) const {
  const double bx = cfg_.softplus_beta * x;
  if (bx > 30.0) return x;
  if (bx < -30.0) return std::exp(bx) / cfg_.softplus_beta;
  return std::log1p(std::exp(bx)) / cfg_.softplus_beta;
}

double LipschitzMlp::softplus_grad(double x) const {
  const double bx = cfg_.softplus_beta * x;
  if (bx > 30.0) return 1.0;
  if (bx < -30.0) return std::exp(bx);
  return 1.0 / (1.0 + std::exp(-bx));
}

Eigen::MatrixXd LipschitzMlp::forward(const Eigen::MatrixXd& X) const {
  Eigen::MatrixXd h = X;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = (h * layers_[l].W.transpose()).rowwise() + layers_[l].b.transpose();
    if (l + 1 < layers_.size())
      h = z.unaryExpr([this](double v) { return softplus(v); });
    else
      h = std::move(z);
  }
  return h;
}

Eigen::MatrixXd LipschitzMlp::forward_cached(const Eigen::MatrixXd& X, ForwardCache& cache) const {
  cache.input = X;
  cache.pre.assign(layers_.size(), Eigen::MatrixXd());
  cache.post.assign(layers_.size() > 0 ? layers_.size() - 1 : 0, Eigen::MatrixXd());
  Eigen::MatrixXd h = X;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    cache.pre[l] = (h * layers_[l].W.transpose()).rowwise() + layers_[l].b.transpose();
    if (l + 1 < layers_.size()) {
      cache.post[l] = cache.pre[l].unaryExpr([this](double v) { return softplus(v); });
      h = cache.post[l];
    } else {
      h = cache.pre[l];
    }
  }
  return h;
}

Eigen::MatrixXd LipschitzMlp::backward(const ForwardCache& cache, const Eigen::MatrixXd& dY,
                                       std::vector<LayerGrads>* grads) const {
  if (grads != nullptr) grads->resize(layers_.size());
  Eigen::MatrixXd dZ = dY;  // gradient wrt the final pre-activation
  for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
    const Eigen::MatrixXd& in = (l == 0) ? cache.input : cache.post[l - 1];
    if (grads != nullptr) {
      (*grads)[l].dW = dZ.transpose() * in;
      (*grads)[l].db = dZ.colwise().sum().transpose();
    }
    Eigen::MatrixXd dX = dZ * layers_[l].W;
    if (l > 0) {
      const Eigen::MatrixXd slope =
          cache.pre[l - 1].unaryExpr([this](double v) { return softplus_grad(v); });
      dZ = dX.cwiseProduct(slope);
    } else {
      dZ = std::move(dX);
    }
  }
  return dZ;
}

double LipschitzMlp::value(const Eigen::VectorXd& x) const {
  return forward(x.transpose())(0, 0);
}

Eigen::VectorXd LipschitzMlp::input_gradient(const Eigen::VectorXd& x) const {
  ForwardCache cache;
  forward_cached(x.transpose(), cache);
  Eigen::MatrixXd dY = Eigen::MatrixXd::Ones(1, output_dim());
  return backward(cache, dY, nullptr).row(0).transpose();
}

void LipschitzMlp::project_spectral(int power_iters) {
  if (!cfg_.spectral || cfg_.lipschitz <= 0.0) return;
  const double gain = per_layer_gain();
  for (DenseLayer& layer : layers_) {
    Eigen::VectorXd u = layer.u;
    Eigen::VectorXd v;
    bool degenerate = false;
    for (int i = 0; i < power_iters; ++i) {
      v = layer.W.transpose() * u;
      const double vn = v.norm();
      if (vn < 1e-12) { degenerate = true; break; }
      v /= vn;
      u = layer.W * v;
      const double un = u.norm();
      if (un < 1e-12) { degenerate = true; break; }
      u /= un;
    }
    if (degenerate) continue;
    layer.u = u;
    // Project onto the spectral-norm ball: deflate only the dominant
    // direction instead of rescaling the whole matrix, so the remaining
    // singular directions keep their learned magnitudes.
    for (int round = 0; round < power_iters; ++round) {
      const double sigma = u.dot(layer.W * v);
      if (sigma <= gain) break;
      layer.W -= (sigma - gain) * u * v.transpose();
      v = layer.W.transpose() * u;
      const double vn = v.norm();
      if (vn < 1e-12) break;
      v /= vn;
      u = layer.W * v;
      const double un = u.norm();
      if (un < 1e-12) break;
      u /= un;
      layer.u = u;
    }
  }
}

void LipschitzMlp::finalize_spectral() {
  if (!cfg_.spectral || cfg_.lipschitz <= 0.0) return;
  const double gain = per_layer_gain();
  for (DenseLayer& layer : layers_) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(layer.W, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.singularValues()(0) > gain) {
      Eigen::VectorXd clipped = svd.singularValues().cwiseMin(gain * (1.0 - 1e-12));
      layer.W = svd.matrixU() * clipped.asDiagonal() * svd.matrixV().transpose();
    }
    layer.u = svd.matrixU().col(0);
  }
}

std::vector<double> LipschitzMlp::layer_spectral_norms() const {
  std::vector<double> norms;
  norms.reserve(layers_.size());
  for (const DenseLayer& layer : layers_) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(layer.W);
    norms.push_back(svd.singularValues()(0));
  }
  return norms;
}

nlohmann::ordered_json LipschitzMlp::to_json(const std::string& kind) const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["kind"] = kind;
  j["dims"] = cfg_.dims;
  j["lipschitz"] = cfg_.lipschitz;
  j["softplus_beta"] = cfg_.softplus_beta;
  j["spectral"] = cfg_.spectral;
  j["seed"] = cfg_.seed;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const DenseLayer& layer : layers_) {
    nlohmann::ordered_json lj;
    lj["weight"] = matrix_to_json(layer.W);
    lj["bias"] = vector_to_json(layer.b);
    lj["power_u"] = vector_to_json(layer.u);
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

LipschitzMlp LipschitzMlp::from_json(const nlohmann::ordered_json& j, std::string* kind) {
  if (j.at("schema_version").get<int>() != 1)
    throw std::invalid_argument("checkpoint: unsupported schema_version");
  if (kind != nullptr) *kind = j.at("kind").get<std::string>();
  LipschitzMlp net;
  net.cfg_.dims = j.at("dims").get<std::vector<int>>();
  net.cfg_.lipschitz = j.at("lipschitz").get<double>();
  net.cfg_.softplus_beta = j.at("softplus_beta").get<double>();
  net.cfg_.spectral = j.at("spectral").get<bool>();
  net.cfg_.seed = j.at("seed").get<std::uint64_t>();
  const auto& layers = j.at("layers");
  if (layers.size() + 1 != net.cfg_.dims.size())
    throw std::invalid_argument("checkpoint: layer count does not match dims");
  net.layers_.resize(layers.size());
  for (std::size_t l = 0; l < net.layers_.size(); ++l) {
    DenseLayer& layer = net.layers_[l];
    layer.W = matrix_from_json(layers.at(l).at("weight"));
    layer.b = vector_from_json(layers.at(l).at("bias"));
    layer.u = vector_from_json(layers.at(l).at("power_u"));
    if (layer.W.rows() != net.cfg_.dims[l + 1] || layer.W.cols() != net.cfg_.dims[l])
      throw std::invalid_argument("checkpoint: weight shape does not match dims");
  }
  return net;
}

AdamState::AdamState(const LipschitzMlp& net) {
  m_.resize(net.layers().size());
  v_.resize(net.layers().size());
  for (std::size_t l = 0; l < m_.size(); ++l) {
    const DenseLayer& layer = net.layers()[l];
    m_[l].dW = Eigen::MatrixXd::Zero(layer.W.rows(), layer.W.cols());
    m_[l].db = Eigen::VectorXd::Zero(layer.b.size());
    v_[l] = m_[l];
  }
}

bool AdamState::step(LipschitzMlp& net, const std::vector<LayerGrads>& grads,
                     const AdamConfig& cfg) {
  for (const LayerGrads& g : grads)
    if (!g.dW.allFinite() || !g.db.allFinite()) return false;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (std::size_t l = 0; l < grads.size(); ++l) {
    DenseLayer& layer = net.layers()[l];
    m_[l].dW = cfg.beta1 * m_[l].dW + (1.0 - cfg.beta1) * grads[l].dW;
    m_[l].db = cfg.beta1 * m_[l].db + (1.0 - cfg.beta1) * grads[l].db;
    v_[l].dW = cfg.beta2 * v_[l].dW.array().matrix() +
               (1.0 - cfg.beta2) * grads[l].dW.array().square().matrix();
    v_[l].db = cfg.beta2 * v_[l].db.array().matrix() +
               (1.0 - cfg.beta2) * grads[l].db.array().square().matrix();
    layer.W.array() -= cfg.lr * (m_[l].dW.array() / bc1) /
                       ((v_[l].dW.array() / bc2).sqrt() + cfg.eps);
    layer.b.array() -= cfg.lr * (m_[l].db.array() / bc1) /
                       ((v_[l].db.array() / bc2).sqrt() + cfg.eps);
  }
  return true;
}

}  // namespace tailsafe
