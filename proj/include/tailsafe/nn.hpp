#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace tailsafe {

// Fully-connected net with Softplus hidden activations and a linear head.
// A global Lipschitz bound L is enforced by clamping each layer's spectral
// norm to L^(1/num_layers); Softplus is 1-Lipschitz, so the composition is
// L-Lipschitz in the l2 norm.
struct MlpConfig {
  std::vector<int> dims;     // layer widths, input first, output last
  double lipschitz = 2.5;    // global bound; <= 0 disables the constraint
  double softplus_beta = 5.0;
  bool spectral = true;
  std::uint64_t seed = 1;
  // Init-only knobs (not part of the checkpoint weight state):
  double head_bias_init = 0.0;  // output-layer bias; >0 starts the net optimistic
  int zero_input_tail = 0;      // zero-init this many trailing input columns, so
                                // their influence is learned rather than inherited
};

struct DenseLayer {
  Eigen::MatrixXd W;  // out x in
  Eigen::VectorXd b;
  Eigen::VectorXd u;  // warm-started power-iteration vector, size out
};

struct LayerGrads {
  Eigen::MatrixXd dW;
  Eigen::VectorXd db;
};

// Per-layer pre-activations saved by forward_cached for backprop.
struct ForwardCache {
  Eigen::MatrixXd input;               // batch x in
  std::vector<Eigen::MatrixXd> pre;    // pre-activation per layer, batch x width
  std::vector<Eigen::MatrixXd> post;   // post-activation per hidden layer
};

class LipschitzMlp {
 public:
  LipschitzMlp() = default;
  explicit LipschitzMlp(const MlpConfig& cfg);

  const MlpConfig& config() const { return cfg_; }
  int input_dim() const { return cfg_.dims.front(); }
  int output_dim() const { return cfg_.dims.back(); }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  double per_layer_gain() const;

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  // Rows are batch entries.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& X) const;
  Eigen::MatrixXd forward_cached(const Eigen::MatrixXd& X, ForwardCache& cache) const;
  // dY is batch x out. Fills grads (resized as needed) and returns dX.
  Eigen::MatrixXd backward(const ForwardCache& cache, const Eigen::MatrixXd& dY,
                           std::vector<LayerGrads>* grads) const;

  double value(const Eigen::VectorXd& x) const;            // scalar-output nets
  Eigen::VectorXd input_gradient(const Eigen::VectorXd& x) const;

  // Clamp each layer's spectral norm to the per-layer gain, estimating the
  // norm with `power_iters` warm-started power iterations.
  void project_spectral(int power_iters = 3);
  // Exact projection via SVD; call once before any Lipschitz audit.
  void finalize_spectral();
  std::vector<double> layer_spectral_norms() const;  // exact, via SVD

  nlohmann::ordered_json to_json(const std::string& kind) const;
  static LipschitzMlp from_json(const nlohmann::ordered_json& j, std::string* kind = nullptr);

 private:
  double softplus(double x) const;
  double softplus_grad(double x) const;

  MlpConfig cfg_;
  std::vector<DenseLayer> layers_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over all layer parameters of one net. Updates with any non-finite
// gradient entry are skipped (the step counter does not advance).
class AdamState {
 public:
  explicit AdamState(const LipschitzMlp& net);

  // Returns false when the update was skipped.
  bool step(LipschitzMlp& net, const std::vector<LayerGrads>& grads, const AdamConfig& cfg);
  long iterations() const { return t_; }

 private:
  long t_ = 0;
  std::vector<LayerGrads> m_, v_;
};

}  // namespace tailsafe
